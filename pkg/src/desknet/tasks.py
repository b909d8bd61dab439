"""Task runtime: sandbox-shaped host interface and the built-in task kinds.

Tasks are native plugins behind a closed host surface (channel_send,
channel_pull, read_peripheral, actuate_peripheral, now, log). A task cannot
enumerate devices, open channels, or address the network; everything it does
is covered by orchestrator-issued grants. Steps are atomic: effects commit
only when the step completes, so a crashing task loses at most the one
message it had dequeued.
"""

from __future__ import annotations

import copy
import json
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .channels import CapabilityViolation, ChannelManager, ChannelMode, Direction, Message
from .model import InstanceKey, PeripheralKind, TaskKind, TaskSpec

DEFAULT_TASK_PARAMS = {
    "period_ms": 100,      # collect/pull tick period
    "window": 8,           # sliding window length for fusion kinds
    "k_sigma": 3.0,        # anomaly threshold multiplier
    "sigma_floor": 1e-9,   # below this, any nonzero deviation flags
    "threshold": 0.5,      # occupancy decision threshold
    "co2_threshold": 1000.0,
    "actuate_kind": PeripheralKind.LIGHT_ACTUATOR.value,
    "crash_on_step": False,  # fault injection: crash during processing
}


class TaskRuntimeError(Exception):
    pass


class DeviceDownError(TaskRuntimeError):
    pass


class PeripheralMissingError(TaskRuntimeError):
    pass


class UnknownGrantChannelError(TaskRuntimeError):
    pass


class SnapshotError(TaskRuntimeError):
    pass


class TaskCrashed(Exception):
    """Raised inside a step when the task's own logic fails."""


class InstanceStatus(str, Enum):
    RUNNING = "running"
    PAUSED = "paused"
    FAILED = "failed"
    STOPPED = "stopped"


@dataclass(frozen=True)
class TaskState:
    """Opaque, serializable snapshot of a task instance's internal state."""

    kind: TaskKind
    params: dict
    state: dict

    def clone(self) -> "TaskState":
        return TaskState(self.kind, copy.deepcopy(self.params), copy.deepcopy(self.state))


def encode_value(value) -> bytes:
    return json.dumps(value).encode()


def decode_value(payload: bytes):
    return json.loads(payload.decode())


# -- built-in task logic ---------------------------------------------------


def io_signature(kind: TaskKind) -> str:
    """Channel compatibility class: replacements must match to be rolled out."""
    if kind == TaskKind.COLLECT_DATA:
        return "source"
    if kind == TaskKind.OCCUPANCY_DECISION:
        return "sink"
    return "transform"


def initial_state(kind: TaskKind) -> dict:
    if kind in (TaskKind.CALCULATE_AVERAGE, TaskKind.CALCULATE_MEDIAN, TaskKind.ANOMALY_DETECTOR):
        return {"window": []}
    if kind == TaskKind.OCCUPANCY_DECISION:
        return {"occupied": None}
    return {}


def _broadcast(host, value):
    for cid in host.out_channels:
        host.channel_send(cid, value)


def on_tick(kind: TaskKind, state: dict, params: dict, host):
    """Periodic behavior; only collect_data does sensor work on ticks."""
    if kind == TaskKind.COLLECT_DATA:
        peripheral = PeripheralKind(params["peripheral"])
        _broadcast(host, host.read_peripheral(peripheral))


def on_message(kind: TaskKind, state: dict, params: dict, host, value):
    if kind == TaskKind.CALCULATE_AVERAGE:
        window = state["window"]
        window.append(value)
        del window[: -int(params["window"])]
        _broadcast(host, sum(window) / len(window))
    elif kind == TaskKind.CALCULATE_MEDIAN:
        window = state["window"]
        window.append(value)
        del window[: -int(params["window"])]
        _broadcast(host, statistics.median(window))
    elif kind == TaskKind.ANOMALY_DETECTOR:
        window = state["window"]
        if window:
            mu = statistics.fmean(window)
            sigma = statistics.pstdev(window)
            if sigma < params["sigma_floor"]:
                flagged = abs(value - mu) > 0
            else:
                flagged = abs(value - mu) > params["k_sigma"] * sigma
            if flagged:
                _broadcast(host, value)
        window.append(value)
        del window[: -int(params["window"])]
    elif kind == TaskKind.OCCUPANCY_DECISION:
        occupied = value >= params["threshold"]
        if state["occupied"] is None or occupied != state["occupied"]:
            state["occupied"] = occupied
            command = 1.0 if occupied else 0.0
            host.actuate_peripheral(PeripheralKind(params["actuate_kind"]), command)
            _broadcast(host, command)
    elif kind == TaskKind.CO2_OCCUPANCY:
        _broadcast(host, 1.0 if value >= params["co2_threshold"] else 0.0)
    elif kind == TaskKind.COLLECT_DATA:
        pass  # sources ignore inbound traffic


@dataclass
class TaskInstance:
    key: InstanceKey
    spec: TaskSpec
    device_id: str
    params: dict
    state: dict
    status: InstanceStatus = InstanceStatus.RUNNING
    last_emit_at: int | None = None
    started_at: int = 0
    ticks_armed: bool = False


class HostInterface:
    """The entire world surface visible to one task instance."""

    def __init__(self, runtime: "TaskRuntime", instance: TaskInstance):
        self._runtime = runtime
        self._instance = instance

    @property
    def out_channels(self) -> list[str]:
        return self._runtime.manager.outbound_of(self._instance.key)

    def channel_send(self, channel_id: str, value):
        self._runtime.queue_send(self._instance, channel_id, value)

    def channel_pull(self, channel_id: str):
        msg = self._runtime.manager.pull(self._instance.key, channel_id)
        return None if msg is None else decode_value(msg.payload)

    def read_peripheral(self, kind: PeripheralKind) -> float:
        return self._runtime.read_peripheral(self._instance, kind)

    def actuate_peripheral(self, kind: PeripheralKind, value: float):
        self._runtime.queue_actuation(self._instance, kind, value)

    def now(self) -> int:
        return self._runtime.clock()

    def log(self, text: str):
        self._runtime.queue_log(self._instance, text)


class TaskRuntime:
    """Hosts instances, drives their steps, and commits their effects."""

    def __init__(
        self,
        manager: ChannelManager,
        device_alive: Callable[[str], bool],
        device_peripherals: Callable[[str], frozenset],
        clock: Callable[[], int],
        schedule: Callable[[int, Callable, str], None],
        signal_read: Callable[[str, PeripheralKind, int], float],
        emit: Callable = lambda kind, subjects, **payload: None,
    ):
        self.manager = manager
        self._device_alive = device_alive
        self._device_peripherals = device_peripherals
        self.clock = clock
        self._schedule = schedule
        self._signal_read = signal_read
        self._emit = emit
        self.instances: dict[InstanceKey, TaskInstance] = {}
        self.peripheral_violations: list[tuple[int, InstanceKey, str]] = []
        self.actuation_count = 0
        self._step_origin = 0
        self._pending_effects: list[tuple] = []

    # -- lifecycle --------------------------------------------------------

    def start_instance(
        self,
        spec: TaskSpec,
        replica: int,
        device_id: str,
        grants,
        params: dict | None = None,
        state: dict | None = None,
        paused: bool = False,
    ) -> InstanceKey:
        key = (spec.task_id, replica)
        if not self._device_alive(device_id):
            raise DeviceDownError(f"device {device_id} is not alive")
        if spec.required_peripheral is not None:
            if spec.required_peripheral not in self._device_peripherals(device_id):
                raise PeripheralMissingError(
                    f"{device_id} lacks {spec.required_peripheral.value} for {spec.task_id}"
                )
        for grant in grants:
            try:
                self.manager.descriptor(grant.channel_id)
            except Exception as exc:
                raise UnknownGrantChannelError(str(exc)) from exc
        merged = dict(DEFAULT_TASK_PARAMS)
        merged.update(params or {})
        if spec.kind == TaskKind.COLLECT_DATA:
            if spec.required_peripheral is None:
                raise TaskRuntimeError(f"collect_data task {spec.task_id} has no pinned peripheral")
            merged.setdefault("peripheral", spec.required_peripheral.value)
            merged["peripheral"] = spec.required_peripheral.value
        inst = TaskInstance(
            key=key,
            spec=spec,
            device_id=device_id,
            params=merged,
            state=copy.deepcopy(state) if state is not None else initial_state(spec.kind),
            status=InstanceStatus.PAUSED if paused else InstanceStatus.RUNNING,
            started_at=self.clock(),
        )
        self.instances[key] = inst
        self._emit(
            "task_start",
            (_fmt(key),),
            kind=spec.kind.value,
            device=device_id,
            paused=paused,
        )
        self._arm_ticks(inst)
        return key

    def restore_instance(
        self,
        spec: TaskSpec,
        replica: int,
        snapshot: TaskState,
        device_id: str,
        grants,
        paused: bool = False,
    ) -> InstanceKey:
        """Re-create an instance from a snapshot; bit-identical behavior follows."""
        if not self._device_alive(device_id):
            raise DeviceDownError(f"restore target {device_id} is not alive")
        snap = snapshot.clone()
        key = self.start_instance(
            TaskSpec(
                task_id=spec.task_id,
                kind=snap.kind,
                required_peripheral=spec.required_peripheral,
                compute_cost=spec.compute_cost,
                replicas=spec.replicas,
                anti_affinity=spec.anti_affinity,
            ),
            replica,
            device_id,
            grants,
            params=snap.params,
            state=snap.state,
            paused=paused,
        )
        self._emit("task_restore", (_fmt(key),), device=device_id, kind=snap.kind.value)
        return key

    def snapshot(self, key: InstanceKey) -> TaskState:
        inst = self.instances.get(key)
        if inst is None or inst.status == InstanceStatus.FAILED:
            raise SnapshotError(f"no live instance to snapshot: {_fmt(key)}")
        self._emit("snapshot", (_fmt(key),))
        return TaskState(inst.spec.kind, copy.deepcopy(inst.params), copy.deepcopy(inst.state))

    def stop_instance(self, key: InstanceKey):
        inst = self.instances.pop(key, None)
        if inst is not None:
            inst.status = InstanceStatus.STOPPED
            self._emit("task_stop", (_fmt(key),))

    def fail_instance(self, key: InstanceKey, reason: str = "crash"):
        inst = self.instances.get(key)
        if inst is not None and inst.status != InstanceStatus.FAILED:
            inst.status = InstanceStatus.FAILED
            self._emit("task_fail", (_fmt(key),), reason=reason)

    def fail_device(self, device_id: str):
        for key in sorted(k for k, i in self.instances.items() if i.device_id == device_id):
            self.fail_instance(key, reason="device_lost")

    def pause(self, key: InstanceKey):
        inst = self.instances[key]
        if inst.status == InstanceStatus.RUNNING:
            inst.status = InstanceStatus.PAUSED
            self._emit("task_pause", (_fmt(key),))

    def resume(self, key: InstanceKey):
        inst = self.instances[key]
        if inst.status == InstanceStatus.PAUSED:
            inst.status = InstanceStatus.RUNNING
            self._emit("task_resume", (_fmt(key),))
            self.manager.pump_inbound(key)

    def dst_ready(self, key: InstanceKey) -> bool:
        inst = self.instances.get(key)
        return inst is not None and inst.status == InstanceStatus.RUNNING

    def running_instances(self) -> list[InstanceKey]:
        return sorted(k for k, i in self.instances.items() if i.status == InstanceStatus.RUNNING)

    def failed_instances(self) -> list[InstanceKey]:
        return sorted(k for k, i in self.instances.items() if i.status == InstanceStatus.FAILED)

    # -- stepping ---------------------------------------------------------

    def deliver(self, key: InstanceKey, channel_id: str, message: Message) -> bool:
        """Channel-manager callback: hand one message to the consumer.

        Returns False when the consumer crashed while processing it, in
        which case only this one message is lost."""
        inst = self.instances.get(key)
        if inst is None or inst.status != InstanceStatus.RUNNING:
            return False
        self._step_origin = message.origin_time
        return self._run_step(
            inst,
            lambda host: on_message(
                inst.spec.kind, inst.state, inst.params, host, decode_value(message.payload)
            ),
        )

    def _tick(self, inst: TaskInstance):
        live = self.instances.get(inst.key)
        if live is not inst or inst.status in (InstanceStatus.FAILED, InstanceStatus.STOPPED):
            return
        if inst.status == InstanceStatus.RUNNING:
            self._step_origin = self.clock()
            self._run_step(inst, lambda host: self._tick_body(inst, host))
        self._schedule(
            self.clock() + int(inst.params["period_ms"]), lambda: self._tick(inst), f"tick:{_fmt(inst.key)}"
        )

    def _tick_body(self, inst: TaskInstance, host: HostInterface):
        for cid in self.manager.inbound_of(inst.key):
            if self.manager.descriptor(cid).mode == ChannelMode.RELIABLE_PULL:
                value = host.channel_pull(cid)
                if value is not None:
                    on_message(inst.spec.kind, inst.state, inst.params, host, value)
        on_tick(inst.spec.kind, inst.state, inst.params, host)

    def _needs_ticks(self, inst: TaskInstance) -> bool:
        if inst.spec.kind == TaskKind.COLLECT_DATA:
            return True
        return any(
            self.manager.descriptor(cid).mode == ChannelMode.RELIABLE_PULL
            for cid in self.manager.inbound_of(inst.key)
        )

    def _arm_ticks(self, inst: TaskInstance):
        if not inst.ticks_armed and self._needs_ticks(inst):
            inst.ticks_armed = True
            self._schedule(
                self.clock() + int(inst.params["period_ms"]),
                lambda: self._tick(inst),
                f"tick:{_fmt(inst.key)}",
            )

    def refresh_ticks(self, key: InstanceKey):
        """Called after wiring changes; pull consumers may now need a clock."""
        inst = self.instances.get(key)
        if inst is not None:
            self._arm_ticks(inst)

    def _run_step(self, inst: TaskInstance, body) -> bool:
        self._pending_effects = []
        host = HostInterface(self, inst)
        try:
            if inst.params.get("crash_on_step"):
                raise TaskCrashed("injected fault")
            body(host)
        except TaskCrashed as exc:
            self._pending_effects = []
            self.fail_instance(inst.key, reason=str(exc))
            return False
        except (CapabilityViolation, TaskRuntimeError):
            # Rejected operation: the step aborts, the instance survives.
            self._pending_effects = []
            return True
        self._commit(inst)
        return True

    def _commit(self, inst: TaskInstance):
        effects, self._pending_effects = self._pending_effects, []
        now = self.clock()
        for effect in effects:
            if effect[0] == "send":
                _, channel_id, value = effect
                descriptor = self.manager.descriptor(channel_id)
                message = Message(
                    payload=encode_value(value),
                    traffic_class=descriptor.traffic_class,
                    emit_time=now,
                    origin_time=self._step_origin,
                )
                self.manager.send(inst.key, channel_id, message)
                inst.last_emit_at = now
            elif effect[0] == "actuate":
                _, kind, value = effect
                self.actuation_count += 1
                self._emit(
                    "actuate",
                    (_fmt(inst.key), inst.device_id),
                    peripheral=kind.value,
                    value=value,
                    origin=self._step_origin,
                )
            else:
                self._emit("task_log", (_fmt(inst.key),), text=effect[1])

    # -- host-surface backends ---------------------------------------------

    def queue_send(self, inst: TaskInstance, channel_id: str, value):
        if not self.manager.has_grant(inst.key, channel_id, Direction.SEND):
            # Checked eagerly so ungranted sends never linger in the effect queue.
            self.manager._record_violation(inst.key, channel_id, "send")
        self._pending_effects.append(("send", channel_id, value))

    def queue_actuation(self, inst: TaskInstance, kind: PeripheralKind, value):
        if kind not in self._device_peripherals(inst.device_id):
            self.peripheral_violations.append((self.clock(), inst.key, kind.value))
            self._emit("violation", (_fmt(inst.key),), op="actuate", peripheral=kind.value)
            raise PeripheralMissingError(f"{inst.device_id} has no {kind.value}")
        self._pending_effects.append(("actuate", kind, value))

    def queue_log(self, inst: TaskInstance, text: str):
        self._pending_effects.append(("log", text))

    def read_peripheral(self, inst: TaskInstance, kind: PeripheralKind) -> float:
        if kind not in self._device_peripherals(inst.device_id):
            self.peripheral_violations.append((self.clock(), inst.key, kind.value))
            self._emit("violation", (_fmt(inst.key),), op="read", peripheral=kind.value)
            raise PeripheralMissingError(f"{inst.device_id} has no {kind.value}")
        return self._signal_read(inst.device_id, kind, self.clock())

    def violation_count(self) -> int:
        return len(self.peripheral_violations)


def _fmt(key: InstanceKey) -> str:
    return f"{key[0]}/{key[1]}"
