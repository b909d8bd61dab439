"""Managed message channels between task instances.

Channels live outside the task runtime: the manager owns sequence state and
buffers, so a crashing consumer loses at most the one message it had already
dequeued. Three modes:

  reliable_push  in-order, exactly-once, manager-buffered, backpressure on a
                 full buffer; link loss shows up as retransmission latency.
  reliable_pull  consumer clocks the data; the source side retains only the
                 latest value so queues never build up along a chain.
  unreliable     per-message Bernoulli drop at the current link loss rate;
                 a full buffer ages out the oldest message.

Every task-side operation must be covered by a capability grant issued at
open time; ungranted calls are rejected and recorded.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .model import ChannelMode, InstanceKey, LinkMetrics, TrafficClass

DEFAULT_BUFFER_CAPACITY = 64
DEFAULT_MAX_PAYLOAD = 1024
DEFAULT_RETRY_LIMIT = 5


class ChannelError(Exception):
    pass


class DuplicateChannelError(ChannelError):
    pass


class UnknownChannelError(ChannelError):
    pass


class UnknownEndpointError(ChannelError):
    pass


class UnknownDeviceError(ChannelError):
    pass


class WrongModeError(ChannelError):
    pass


class ChannelClosedError(ChannelError):
    pass


class PayloadTooLargeError(ChannelError):
    pass


class CapabilityViolation(Exception):
    """A task touched a channel without a covering grant."""


class Direction(str, Enum):
    SEND = "send"
    RECEIVE = "receive"


class SendResult(str, Enum):
    ACCEPTED = "accepted"
    BACKPRESSURE = "backpressure"
    DROPPED = "dropped"


@dataclass(frozen=True)
class CapabilityGrant:
    holder: InstanceKey
    channel_id: str
    direction: Direction


@dataclass(frozen=True)
class ChannelDescriptor:
    channel_id: str
    mode: ChannelMode
    src: InstanceKey
    dst: InstanceKey
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    traffic_class: TrafficClass = TrafficClass.PERIODIC_SENSOR


@dataclass(frozen=True)
class Message:
    payload: bytes
    traffic_class: TrafficClass
    emit_time: int
    origin_time: int  # head-of-pipeline emission time, for latency accounting


@dataclass
class _Buffered:
    seq: int
    message: Message
    available_at: int | None  # None: waiting for a topology change


@dataclass
class _Channel:
    descriptor: ChannelDescriptor
    src_device: str
    dst_device: str
    next_send_seq: int = 1
    next_deliver_seq: int = 1
    buffer: deque = field(default_factory=deque)
    latest: _Buffered | None = None  # pull mode: depth-1 slot
    pending_pull: bool = False
    closed: bool = False
    stalled: bool = False
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    superseded: int = 0
    lost_to_consumer_crash: int = 0
    backpressure_count: int = 0

    def buffered_count(self) -> int:
        return len(self.buffer) + (1 if self.latest is not None else 0)


@dataclass(frozen=True)
class ChannelAccounting:
    channel_id: str
    mode: ChannelMode
    sent: int
    delivered: int
    buffered_at_end: int
    lost_to_consumer_crash: int
    superseded: int
    dropped: int

    def conserved(self) -> bool:
        if self.mode == ChannelMode.UNRELIABLE:
            return self.sent == self.delivered + self.buffered_at_end + self.dropped
        return (
            self.sent
            == self.delivered
            + self.buffered_at_end
            + self.lost_to_consumer_crash
            + self.superseded
        )


class ChannelManager:
    """Serialization point for all channel traffic in one simulated world.

    Collaborators are injected: a link lookup and device-liveness probe over
    the live topology, the simulation clock, an event scheduler, the run's
    RNG, a delivery callback that steps the destination instance (returning
    False when the consumer crashed mid-processing), and a readiness probe
    for paused/failed destinations.
    """

    def __init__(
        self,
        link_lookup: Callable[[str, str], LinkMetrics | None],
        device_alive: Callable[[str], bool],
        clock: Callable[[], int],
        schedule: Callable[[int, Callable, str], None],
        rng: random.Random,
        deliver_fn: Callable[[InstanceKey, str, Message], bool],
        dst_ready: Callable[[InstanceKey], bool],
        emit: Callable = lambda kind, subjects, **payload: None,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
    ):
        self._link = link_lookup
        self._device_alive = device_alive
        self._clock = clock
        self._schedule = schedule
        self._rng = rng
        self._deliver_fn = deliver_fn
        self._dst_ready = dst_ready
        self._emit = emit
        self.max_payload = max_payload
        self.retry_limit = retry_limit
        self._channels: dict[str, _Channel] = {}
        self._by_src: dict[InstanceKey, set[str]] = {}
        self._by_dst: dict[InstanceKey, set[str]] = {}
        self._stalled_ids: set[str] = set()
        self._grants: set[tuple[InstanceKey, str, Direction]] = set()
        self.violations: list[tuple[int, InstanceKey, str, str]] = []

    # -- wiring (orchestrator side) --------------------------------------

    def open_channel(
        self,
        descriptor: ChannelDescriptor,
        grants: tuple[CapabilityGrant, CapabilityGrant],
        src_device: str | None,
        dst_device: str | None,
    ) -> str:
        if descriptor.channel_id in self._channels:
            raise DuplicateChannelError(descriptor.channel_id)
        if src_device is None or dst_device is None:
            raise UnknownEndpointError(
                f"{descriptor.channel_id}: endpoint not present in current mapping"
            )
        if descriptor.buffer_capacity < 1:
            raise ChannelError("buffer_capacity must be >= 1")
        self._channels[descriptor.channel_id] = _Channel(
            descriptor=descriptor, src_device=src_device, dst_device=dst_device
        )
        self._by_src.setdefault(descriptor.src, set()).add(descriptor.channel_id)
        self._by_dst.setdefault(descriptor.dst, set()).add(descriptor.channel_id)
        for g in grants:
            if g.channel_id != descriptor.channel_id:
                raise ChannelError(f"grant for foreign channel: {g.channel_id}")
            self._grants.add((g.holder, g.channel_id, g.direction))
        self._emit(
            "open_channel",
            (descriptor.channel_id,),
            mode=descriptor.mode.value,
            src=_fmt(descriptor.src),
            dst=_fmt(descriptor.dst),
            src_device=src_device,
            dst_device=dst_device,
        )
        return descriptor.channel_id

    def close_channel(self, channel_id: str):
        ch = self._require(channel_id)
        ch.closed = True
        self._stalled_ids.discard(channel_id)
        self._by_src.get(ch.descriptor.src, set()).discard(channel_id)
        self._by_dst.get(ch.descriptor.dst, set()).discard(channel_id)
        self._emit("close_channel", (channel_id,), buffered=ch.buffered_count())

    def rebind_endpoint(self, channel_id: str, endpoint: str, new_device: str):
        """Move one endpoint to another device; sequence state and buffered
        messages are preserved intact."""
        ch = self._require(channel_id)
        if not self._device_alive(new_device):
            raise UnknownDeviceError(new_device)
        if endpoint == "src":
            ch.src_device = new_device
        elif endpoint == "dst":
            ch.dst_device = new_device
        else:
            raise ChannelError(f"endpoint must be 'src' or 'dst', got {endpoint!r}")
        self._emit("rebind", (channel_id,), endpoint=endpoint, device=new_device)
        self._rearm(ch)
        self._schedule_pump(ch)

    def has_grant(self, holder: InstanceKey, channel_id: str, direction: Direction) -> bool:
        return (holder, channel_id, direction) in self._grants

    def grants_of(self, holder: InstanceKey) -> list[CapabilityGrant]:
        return sorted(
            (CapabilityGrant(h, c, d) for (h, c, d) in self._grants if h == holder),
            key=lambda g: (g.channel_id, g.direction.value),
        )

    def revoke_grants(self, holder: InstanceKey):
        self._grants = {g for g in self._grants if g[0] != holder}

    def revoke_channel(self, channel_id: str):
        self._grants = {g for g in self._grants if g[1] != channel_id}

    def active_grants(self) -> list[CapabilityGrant]:
        return sorted(
            (CapabilityGrant(h, c, d) for (h, c, d) in self._grants),
            key=lambda g: (g.channel_id, g.direction.value, g.holder),
        )

    def descriptor(self, channel_id: str) -> ChannelDescriptor:
        return self._require(channel_id).descriptor

    def channel_ids(self) -> list[str]:
        return sorted(cid for cid, ch in self._channels.items() if not ch.closed)

    def inbound_of(self, instance: InstanceKey) -> list[str]:
        return sorted(self._by_dst.get(instance, ()))

    def outbound_of(self, instance: InstanceKey) -> list[str]:
        return sorted(self._by_src.get(instance, ()))

    # -- data plane (task side, grant-checked) ---------------------------

    def send(self, holder: InstanceKey, channel_id: str, message: Message) -> SendResult:
        ch = self._channels.get(channel_id)
        if ch is None:
            raise UnknownChannelError(channel_id)
        if not self.has_grant(holder, channel_id, Direction.SEND):
            self._record_violation(holder, channel_id, "send")
        if ch.closed:
            raise ChannelClosedError(channel_id)
        if len(message.payload) > self.max_payload:
            raise PayloadTooLargeError(
                f"{len(message.payload)} bytes > max {self.max_payload}"
            )
        mode = ch.descriptor.mode
        if mode == ChannelMode.RELIABLE_PULL:
            return self._send_pull(ch, message)
        if mode == ChannelMode.RELIABLE_PUSH:
            return self._send_reliable(ch, message)
        return self._send_unreliable(ch, message)

    def _send_pull(self, ch: _Channel, message: Message) -> SendResult:
        if ch.latest is not None:
            ch.superseded += 1
            self._emit("supersede", (ch.descriptor.channel_id,), seq=ch.latest.seq)
        seq = ch.next_send_seq
        ch.next_send_seq += 1
        ch.sent += 1
        ch.latest = _Buffered(seq=seq, message=message, available_at=self._clock())
        self._emit("send", (ch.descriptor.channel_id,), seq=seq, mode="reliable_pull")
        return SendResult.ACCEPTED

    def _send_reliable(self, ch: _Channel, message: Message) -> SendResult:
        if len(ch.buffer) >= ch.descriptor.buffer_capacity:
            ch.backpressure_count += 1
            self._emit("backpressure", (ch.descriptor.channel_id,))
            return SendResult.BACKPRESSURE
        now = self._clock()
        seq = ch.next_send_seq
        ch.next_send_seq += 1
        ch.sent += 1
        available = self._transmit_time(ch, now)
        if available is None:
            self._mark_stalled(ch)
        ch.buffer.append(_Buffered(seq=seq, message=message, available_at=available))
        self._emit("send", (ch.descriptor.channel_id,), seq=seq, mode="reliable_push")
        self._schedule_pump(ch)
        return SendResult.ACCEPTED

    def _send_unreliable(self, ch: _Channel, message: Message) -> SendResult:
        now = self._clock()
        seq = ch.next_send_seq
        ch.next_send_seq += 1
        ch.sent += 1
        link = self._link(ch.src_device, ch.dst_device)
        if link is not None and link.loss_rate > 0.0 and self._rng.random() < link.loss_rate:
            ch.dropped += 1
            self._emit("drop", (ch.descriptor.channel_id,), seq=seq, reason="loss")
            return SendResult.DROPPED
        available = None if link is None else now + link.latency_ms
        if available is None:
            self._mark_stalled(ch)
        ch.buffer.append(_Buffered(seq=seq, message=message, available_at=available))
        if len(ch.buffer) > ch.descriptor.buffer_capacity:
            aged = ch.buffer.popleft()
            ch.dropped += 1
            self._emit("drop", (ch.descriptor.channel_id,), seq=aged.seq, reason="overflow")
        self._emit("send", (ch.descriptor.channel_id,), seq=seq, mode="unreliable")
        self._schedule_pump(ch)
        return SendResult.ACCEPTED

    def _transmit_time(self, ch: _Channel, now: int) -> int | None:
        """Delivery-ready time for a reliable message; None while unreachable.

        Loss becomes latency: each lost attempt adds one link latency, up to
        retry_limit attempts, after which the message waits for a topology
        change."""
        link = self._link(ch.src_device, ch.dst_device)
        if link is None:
            return None
        retries = 0
        while retries < self.retry_limit and link.loss_rate > 0.0:
            if self._rng.random() >= link.loss_rate:
                break
            retries += 1
        if retries >= self.retry_limit and link.loss_rate > 0.0:
            return None
        return now + link.latency_ms * (1 + retries)

    def pull(self, holder: InstanceKey, channel_id: str) -> Message | None:
        ch = self._channels.get(channel_id)
        if ch is None:
            raise UnknownChannelError(channel_id)
        if ch.descriptor.mode != ChannelMode.RELIABLE_PULL:
            raise WrongModeError(f"{channel_id} is {ch.descriptor.mode.value}, not reliable_pull")
        if not self.has_grant(holder, channel_id, Direction.RECEIVE):
            self._record_violation(holder, channel_id, "pull")
        if ch.closed:
            raise ChannelClosedError(channel_id)
        if self._link(ch.src_device, ch.dst_device) is None:
            ch.pending_pull = True
            return None
        if ch.latest is None:
            return None
        item = ch.latest
        ch.latest = None
        ch.pending_pull = False
        ch.delivered += 1
        ch.next_deliver_seq = item.seq + 1
        self._emit("deliver", (channel_id,), seq=item.seq, mode="reliable_pull")
        return item.message

    # -- delivery pump (simulator side) ----------------------------------

    def deliver(self, channel_id: str) -> list[tuple[InstanceKey, Message]]:
        """Push-mode pump: hand every due, in-order message to the consumer.

        Reliable buffers hold their messages while the destination is
        unreachable, paused, or failed; nothing is lost or reordered."""
        ch = self._channels.get(channel_id)
        if ch is None or ch.closed:
            return []
        if ch.descriptor.mode == ChannelMode.RELIABLE_PULL:
            return []
        now = self._clock()
        out: list[tuple[InstanceKey, Message]] = []
        while ch.buffer:
            head = ch.buffer[0]
            if head.available_at is None:
                self._mark_stalled(ch)
                break
            if head.available_at > now:
                self._schedule(head.available_at, lambda c=channel_id: self.deliver(c), f"pump:{channel_id}")
                break
            if self._link(ch.src_device, ch.dst_device) is None:
                self._mark_stalled(ch)
                break
            if not self._dst_ready(ch.descriptor.dst):
                break
            ch.buffer.popleft()
            if ch.descriptor.mode == ChannelMode.RELIABLE_PUSH:
                ch.next_deliver_seq = head.seq + 1
            self._emit(
                "deliver",
                (channel_id,),
                seq=head.seq,
                mode=ch.descriptor.mode.value,
                sent_at=head.message.emit_time,
            )
            consumed = self._deliver_fn(ch.descriptor.dst, channel_id, head.message)
            if consumed:
                ch.delivered += 1
                out.append((ch.descriptor.dst, head.message))
            else:
                ch.lost_to_consumer_crash += 1
                self._emit("consumer_loss", (channel_id,), seq=head.seq)
        return out

    def pump_inbound(self, instance: InstanceKey):
        """Re-attempt delivery on every open channel feeding an instance."""
        for cid in self.inbound_of(instance):
            self._schedule_pump(self._channels[cid])

    def notify_topology_change(self):
        """Re-arm stalled channels after link/partition/liveness changes."""
        for cid in sorted(self._stalled_ids):
            ch = self._channels[cid]
            if ch.closed:
                continue
            self._rearm(ch)
            self._schedule_pump(ch)

    def _mark_stalled(self, ch: _Channel):
        ch.stalled = True
        self._stalled_ids.add(ch.descriptor.channel_id)

    def _rearm(self, ch: _Channel):
        """Recompute ready times for messages that were waiting on the network.

        A message held through an outage is retransmitted, so it becomes
        ready one (loss-adjusted) link latency after the network recovers."""
        now = self._clock()
        link = self._link(ch.src_device, ch.dst_device)
        if link is None:
            return
        for item in ch.buffer:
            if item.available_at is None or (ch.stalled and item.available_at <= now):
                if ch.descriptor.mode == ChannelMode.RELIABLE_PUSH:
                    t = self._transmit_time(ch, now)
                else:
                    t = now + link.latency_ms
                item.available_at = t
                if t is None:
                    return
        ch.stalled = False
        self._stalled_ids.discard(ch.descriptor.channel_id)

    def _schedule_pump(self, ch: _Channel):
        if ch.closed or not ch.buffer:
            return
        head = ch.buffer[0]
        if head.available_at is None:
            return
        cid = ch.descriptor.channel_id
        self._schedule(max(head.available_at, self._clock()), lambda: self.deliver(cid), f"pump:{cid}")

    # -- accounting -------------------------------------------------------

    def _record_violation(self, holder: InstanceKey, channel_id: str, op: str):
        self.violations.append((self._clock(), holder, channel_id, op))
        self._emit("violation", (_fmt(holder), channel_id), op=op)
        raise CapabilityViolation(f"{_fmt(holder)} has no {op} grant on {channel_id}")

    def violation_count(self) -> int:
        return len(self.violations)

    def note_pull_state(self, channel_id: str) -> tuple[int, bool]:
        ch = self._require(channel_id)
        return (1 if ch.latest is not None else 0, ch.pending_pull)

    def buffer_len(self, channel_id: str) -> int:
        return self._require(channel_id).buffered_count()

    def accounting(self) -> list[ChannelAccounting]:
        out = []
        for cid in sorted(self._channels):
            ch = self._channels[cid]
            out.append(
                ChannelAccounting(
                    channel_id=cid,
                    mode=ch.descriptor.mode,
                    sent=ch.sent,
                    delivered=ch.delivered,
                    buffered_at_end=ch.buffered_count(),
                    lost_to_consumer_crash=ch.lost_to_consumer_crash,
                    superseded=ch.superseded,
                    dropped=ch.dropped,
                )
            )
        return out

    def totals(self) -> dict[str, dict[str, int]]:
        reliable = {"sent": 0, "delivered": 0, "buffered_at_end": 0,
                    "lost_to_consumer_crash": 0, "superseded": 0}
        unreliable = {"sent": 0, "delivered": 0, "buffered_at_end": 0, "dropped": 0}
        backpressure = 0
        for ch in self._channels.values():
            backpressure += ch.backpressure_count
            if ch.descriptor.mode == ChannelMode.UNRELIABLE:
                unreliable["sent"] += ch.sent
                unreliable["delivered"] += ch.delivered
                unreliable["buffered_at_end"] += ch.buffered_count()
                unreliable["dropped"] += ch.dropped
            else:
                reliable["sent"] += ch.sent
                reliable["delivered"] += ch.delivered
                reliable["buffered_at_end"] += ch.buffered_count()
                reliable["lost_to_consumer_crash"] += ch.lost_to_consumer_crash
                reliable["superseded"] += ch.superseded
        return {"reliable": reliable, "unreliable": unreliable,
                "backpressure": {"count": backpressure}}

    def _require(self, channel_id: str) -> _Channel:
        ch = self._channels.get(channel_id)
        if ch is None:
            raise UnknownChannelError(channel_id)
        return ch


def _fmt(key: InstanceKey) -> str:
    return f"{key[0]}/{key[1]}"
