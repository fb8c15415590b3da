"""Topic-based message bus with per-station keyed authentication.

Stands in for a managed MQTT endpoint: registered senders publish
authenticated envelopes to `/`-separated topics, subscribers receive every
envelope matching their filters. `+` matches exactly one topic level; there
is no multi-level wildcard. Fault injection (drops, ack loss, partitions)
is built in so transport failures can be scripted deterministically.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

PAYLOAD_KINDS = ("sample_batch", "anomaly_report", "model_deploy", "ack")

# topic suffix -> payload kinds allowed in that namespace
_NAMESPACE_KINDS = {
    "data": ("sample_batch",),
    "anomaly": ("anomaly_report",),
    "model": ("model_deploy", "ack"),
    "alerts": ("anomaly_report",),
}


class BusError(Exception):
    pass


class InvalidFilter(BusError):
    pass


def compute_auth_tag(key: bytes, message_id: str, topic: str, sender: str, payload: str) -> str:
    """Keyed digest over the envelope's identifying fields and body."""
    msg = "\n".join((message_id, topic, sender, payload)).encode("utf-8")
    return hmac.new(key, msg, hashlib.sha256).hexdigest()


@dataclass
class Envelope:
    message_id: str
    topic: str
    sender: str
    payload_kind: str
    payload: str
    auth_tag: str = ""

    def sign(self, key: bytes) -> "Envelope":
        self.auth_tag = compute_auth_tag(key, self.message_id, self.topic, self.sender, self.payload)
        return self

    def verify(self, key: bytes) -> bool:
        expected = compute_auth_tag(key, self.message_id, self.topic, self.sender, self.payload)
        return hmac.compare_digest(expected, self.auth_tag)

    def to_dict(self) -> dict:
        # field order here is the documented wire order
        return {
            "message_id": self.message_id,
            "topic": self.topic,
            "sender": self.sender,
            "payload_kind": self.payload_kind,
            "payload": self.payload,
            "auth_tag": self.auth_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Envelope":
        return cls(
            message_id=d["message_id"],
            topic=d["topic"],
            sender=d["sender"],
            payload_kind=d["payload_kind"],
            payload=d["payload"],
            auth_tag=d["auth_tag"],
        )


def validate_filter(topic_filter: str) -> list[str]:
    """Split a topic filter, rejecting empty levels and unsupported wildcards."""
    if not topic_filter:
        raise InvalidFilter("empty filter")
    levels = topic_filter.split("/")
    for level in levels:
        if level == "":
            raise InvalidFilter(f"empty level in filter {topic_filter!r}")
        if "#" in level:
            raise InvalidFilter("multi-level wildcard '#' is not supported")
        if "+" in level and level != "+":
            raise InvalidFilter(f"'+' must occupy a whole level: {topic_filter!r}")
    return levels


def topic_matches(topic_filter: str, topic: str) -> bool:
    """True when `topic` matches `topic_filter` ('+' = exactly one level)."""
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    if len(flevels) != len(tlevels):
        return False
    return all(f == "+" or f == t for f, t in zip(flevels, tlevels))


def kind_allowed(topic: str, payload_kind: str) -> bool:
    namespace = topic.rsplit("/", 1)[-1]
    allowed = _NAMESPACE_KINDS.get(namespace)
    if allowed is None:
        return False
    return payload_kind in allowed


@dataclass
class PublishResult:
    code: str  # "ack", "unknown_sender", "bad_auth", "malformed", "dropped", "unreachable"
    delivered: int = 0

    @property
    def ok(self) -> bool:
        return self.code == "ack"


class SubscriberQueue:
    """Bounded FIFO delivery queue shared by all of one subscriber's filters."""

    def __init__(self, maxsize: int):
        self.maxsize = maxsize
        self._items: deque[Envelope] = deque()
        self._cond = threading.Condition()

    def put(self, env: Envelope, timeout: float | None = None) -> None:
        with self._cond:
            if not self._cond.wait_for(lambda: len(self._items) < self.maxsize, timeout=timeout):
                raise BusError("subscriber queue full (backpressure timeout)")
            self._items.append(env)
            self._cond.notify_all()

    def get(self, timeout: float | None = None) -> Envelope | None:
        with self._cond:
            if not self._cond.wait_for(lambda: len(self._items) > 0, timeout=timeout):
                return None
            env = self._items.popleft()
            self._cond.notify_all()
            return env

    def drain(self) -> list[Envelope]:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            self._cond.notify_all()
            return items

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass
class Subscription:
    topic_filter: str
    subscriber: str
    queue: SubscriberQueue

    def drain(self) -> list[Envelope]:
        return self.queue.drain()

    def get(self, timeout: float | None = None) -> Envelope | None:
        return self.queue.get(timeout=timeout)


@dataclass
class _FaultState:
    drop_next: dict[str, int] = field(default_factory=dict)
    drop_ack_next: dict[str, int] = field(default_factory=dict)
    partitioned: set[str] = field(default_factory=set)
    delay_seconds: float = 0.0


class MessageBus:
    """In-process bus: concurrent publishers/subscribers, per-publisher FIFO.

    Dispatch is serialized under one lock, so for a fixed (sender, topic)
    delivery order equals publish order. Acks mean received+verified at the
    bus, not end-to-end; consumers dedup by message or sample id.
    """

    def __init__(self, queue_maxsize: int = 100_000, put_timeout: float | None = 30.0):
        self._lock = threading.Lock()
        self._keys: dict[str, bytes] = {}
        self._subscriptions: dict[str, dict[str, Subscription]] = {}  # subscriber -> filter -> sub
        self._queues: dict[str, SubscriberQueue] = {}
        self._queue_maxsize = queue_maxsize
        self._put_timeout = put_timeout
        self._faults = _FaultState()
        self.stats = {
            "published": 0,
            "delivered": 0,
            "rejected_unknown": 0,
            "rejected_auth": 0,
            "rejected_malformed": 0,
            "dropped_fault": 0,
            "acks_dropped": 0,
        }

    # -- registration / subscription ------------------------------------

    def register_sender(self, sender: str, key: bytes) -> None:
        with self._lock:
            self._keys[sender] = key

    def key_for(self, sender: str) -> bytes | None:
        return self._keys.get(sender)

    def subscribe(self, topic_filter: str, subscriber: str) -> Subscription:
        validate_filter(topic_filter)
        with self._lock:
            subs = self._subscriptions.setdefault(subscriber, {})
            if topic_filter in subs:  # idempotent
                return subs[topic_filter]
            queue = self._queues.setdefault(subscriber, SubscriberQueue(self._queue_maxsize))
            sub = Subscription(topic_filter, subscriber, queue)
            subs[topic_filter] = sub
            return sub

    # -- fault injection -------------------------------------------------

    def inject_fault(self, kind: str, target: str | None = None, n: int = 1, seconds: float = 0.0) -> None:
        """Apply a deterministic transport fault.

        kind: "drop_next_n" (lose next n publishes from `target`),
        "drop_ack_next_n" (deliver but lose the ack), "partition" /
        "heal" (target unreachable both ways), "delay" (fixed delivery
        latency; 0 is passthrough).
        """
        with self._lock:
            if kind == "drop_next_n":
                self._faults.drop_next[target] = self._faults.drop_next.get(target, 0) + n
            elif kind == "drop_ack_next_n":
                self._faults.drop_ack_next[target] = self._faults.drop_ack_next.get(target, 0) + n
            elif kind == "partition":
                self._faults.partitioned.add(target)
            elif kind == "heal":
                self._faults.partitioned.discard(target)
            elif kind == "delay":
                self._faults.delay_seconds = seconds
            else:
                raise BusError(f"unknown fault kind {kind!r}")

    def partition(self, station: str) -> None:
        self.inject_fault("partition", station)

    def heal(self, station: str) -> None:
        self.inject_fault("heal", station)

    def is_partitioned(self, party: str) -> bool:
        with self._lock:
            return party in self._faults.partitioned

    # -- publish ----------------------------------------------------------

    def publish(self, env: Envelope) -> PublishResult:
        delay = 0.0
        with self._lock:
            self.stats["published"] += 1

            if env.sender in self._faults.partitioned:
                return PublishResult("unreachable")
            pending_drops = self._faults.drop_next.get(env.sender, 0)
            if pending_drops > 0:
                self._faults.drop_next[env.sender] = pending_drops - 1
                self.stats["dropped_fault"] += 1
                return PublishResult("dropped")

            key = self._keys.get(env.sender)
            if key is None:
                self.stats["rejected_unknown"] += 1
                return PublishResult("unknown_sender")
            if not env.verify(key):
                self.stats["rejected_auth"] += 1
                return PublishResult("bad_auth")
            if not isinstance(env.payload, str) or env.payload_kind not in PAYLOAD_KINDS:
                self.stats["rejected_malformed"] += 1
                return PublishResult("malformed")
            try:
                validate_filter(env.topic)
            except InvalidFilter:
                self.stats["rejected_malformed"] += 1
                return PublishResult("malformed")
            if "+" in env.topic.split("/") or not kind_allowed(env.topic, env.payload_kind):
                self.stats["rejected_malformed"] += 1
                return PublishResult("malformed")

            targets = []
            for subscriber, subs in self._subscriptions.items():
                if subscriber in self._faults.partitioned:
                    continue
                if any(topic_matches(s.topic_filter, env.topic) for s in subs.values()):
                    targets.append(self._queues[subscriber])

            delay = self._faults.delay_seconds

        if delay > 0:
            time.sleep(delay)

        for queue in targets:
            queue.put(env, timeout=self._put_timeout)

        with self._lock:
            self.stats["delivered"] += len(targets)
            pending_ack_drops = self._faults.drop_ack_next.get(env.sender, 0)
            if pending_ack_drops > 0:
                self._faults.drop_ack_next[env.sender] = pending_ack_drops - 1
                self.stats["acks_dropped"] += 1
                return PublishResult("dropped", delivered=len(targets))

        return PublishResult("ack", delivered=len(targets))
