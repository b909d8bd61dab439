"""Domain model: control-task graphs, devices, topologies and mappings.

Everything here is a plain value type. Leaf values are frozen dataclasses;
the simulator evolves a Topology by swapping frozen values in and out of
its containers. Feasibility is decided exactly by backtracking up to a
documented size cap and by the greedy placement heuristic above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum


class PeripheralKind(str, Enum):
    """Closed set of hardware peripherals a device may carry."""

    MOTION_SENSOR = "motion_sensor"
    CO2_SENSOR = "co2_sensor"
    CAMERA = "camera"
    LIGHT_ACTUATOR = "light_actuator"
    HEATER_ACTUATOR = "heater_actuator"
    PROXIMITY_SENSOR = "proximity_sensor"


class TaskKind(str, Enum):
    """Built-in control task kinds (behavior lives in desknet.tasks)."""

    COLLECT_DATA = "collect_data"
    CALCULATE_AVERAGE = "calculate_average"
    CALCULATE_MEDIAN = "calculate_median"
    ANOMALY_DETECTOR = "anomaly_detector"
    OCCUPANCY_DECISION = "occupancy_decision"
    CO2_OCCUPANCY = "co2_occupancy"


class ChannelMode(str, Enum):
    RELIABLE_PUSH = "reliable_push"
    RELIABLE_PULL = "reliable_pull"
    UNRELIABLE = "unreliable"


class TrafficClass(str, Enum):
    PERIODIC_SENSOR = "periodic_sensor"
    EVENT_SENSOR = "event_sensor"
    COMMAND = "command"
    EVENT = "event"


@dataclass(frozen=True)
class TaskSpec:
    """One logical block of control compute.

    ``replicas >= 2`` always implies anti-affinity: redundant copies are
    never co-resident, whatever the flag says.
    """

    task_id: str
    kind: TaskKind
    required_peripheral: PeripheralKind | None = None
    compute_cost: int = 1
    replicas: int = 1
    anti_affinity: bool = False

    @property
    def pinned(self) -> bool:
        return self.required_peripheral is not None


@dataclass(frozen=True)
class DataflowEdge:
    src_task: str
    dst_task: str
    channel_mode: ChannelMode = ChannelMode.RELIABLE_PUSH
    traffic_class: TrafficClass = TrafficClass.PERIODIC_SENSOR


InstanceKey = tuple[str, int]  # (task_id, replica_index)


@dataclass(frozen=True)
class ControlGraph:
    """Directed graph of task specs connected by dataflow edges.

    Cycles are permitted; feedback loops are normal here.
    """

    tasks: tuple[TaskSpec, ...]
    edges: tuple[DataflowEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {t.task_id: t for t in self.tasks})

    def task(self, task_id: str) -> TaskSpec:
        return self._by_id[task_id]

    def has_task(self, task_id: str) -> bool:
        return task_id in self._by_id

    def instances(self) -> list[InstanceKey]:
        """All (task_id, replica_index) slots, sorted."""
        out = []
        for t in self.tasks:
            out.extend((t.task_id, r) for r in range(t.replicas))
        out.sort()
        return out

    def edges_of(self, task_id: str) -> list[DataflowEdge]:
        return [e for e in self.edges if task_id in (e.src_task, e.dst_task)]


@dataclass(frozen=True)
class GraphVariant:
    variant_id: str
    graph: ControlGraph
    quality_rank: int


@dataclass(frozen=True)
class DegradationPolicy:
    """Alternative control graphs ordered by preference (rank 0 best)."""

    variants: tuple[GraphVariant, ...]

    def __post_init__(self):
        if not self.variants:
            raise ValueError("degradation policy must have at least one variant")
        ids = [v.variant_id for v in self.variants]
        ranks = [v.quality_rank for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate variant_id in policy")
        if len(set(ranks)) != len(ranks):
            raise ValueError("duplicate quality_rank in policy")
        ordered = tuple(sorted(self.variants, key=lambda v: v.quality_rank))
        object.__setattr__(self, "variants", ordered)

    def variant(self, variant_id: str) -> GraphVariant:
        for v in self.variants:
            if v.variant_id == variant_id:
                return v
        raise KeyError(variant_id)


@dataclass(frozen=True)
class Device:
    device_id: str
    peripherals: frozenset[PeripheralKind] = frozenset()
    compute_capacity: int = 4
    vendor_tag: str = ""
    alive: bool = True


@dataclass(frozen=True)
class LinkMetrics:
    loss_rate: float
    latency_ms: int

    def __post_init__(self):
        if not (0.0 <= self.loss_rate <= 1.0):
            raise ValueError(f"loss_rate out of [0,1]: {self.loss_rate}")
        if self.latency_ms < 0 or not math.isfinite(self.latency_ms):
            raise ValueError(f"latency must be finite and >= 0: {self.latency_ms}")


ZERO_LINK = LinkMetrics(loss_rate=0.0, latency_ms=0)


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class Topology:
    """Devices plus pairwise link metrics; absence of a link means unreachable.

    A partition is modeled as removing the link entries that cross the cut.
    ``default_link`` supplies metrics for pairs without an explicit entry,
    which keeps large generated worlds cheap to describe.
    """

    def __init__(self, devices, links=None, default_link: LinkMetrics | None = None):
        self.devices: dict[str, Device] = {d.device_id: d for d in devices}
        self.links: dict[tuple[str, str], LinkMetrics] = {}
        for (a, b), lm in (links or {}).items():
            self.links[_pair(a, b)] = lm
        self.default_link = default_link
        self.partition_side: frozenset[str] | None = None

    def alive(self, device_id: str) -> bool:
        d = self.devices.get(device_id)
        return d is not None and d.alive

    def alive_devices(self) -> list[Device]:
        return sorted((d for d in self.devices.values() if d.alive), key=lambda d: d.device_id)

    def link(self, a: str, b: str) -> LinkMetrics | None:
        """Effective link between two devices, or None if unreachable."""
        if not self.alive(a) or not self.alive(b):
            return None
        if a == b:
            return ZERO_LINK
        if self.partition_side is not None:
            if (a in self.partition_side) != (b in self.partition_side):
                return None
        return self.links.get(_pair(a, b), self.default_link)

    def reachable(self, a: str, b: str) -> bool:
        return self.link(a, b) is not None

    def set_alive(self, device_id: str, alive: bool):
        self.devices[device_id] = replace(self.devices[device_id], alive=alive)

    def add_device(self, device: Device):
        self.devices[device.device_id] = device

    def set_link(self, a: str, b: str, metrics: LinkMetrics):
        self.links[_pair(a, b)] = metrics

    def set_partition(self, side):
        self.partition_side = frozenset(side)

    def heal(self):
        self.partition_side = None


@dataclass(frozen=True)
class Mapping:
    """Assignment of (task_id, replica_index) slots to devices."""

    assignments: dict[InstanceKey, str] = field(default_factory=dict)

    def device_of(self, key: InstanceKey) -> str | None:
        return self.assignments.get(key)

    def with_delta(self, delta: dict[InstanceKey, str]) -> "Mapping":
        merged = dict(self.assignments)
        merged.update(delta)
        return Mapping(merged)

    def without(self, keys) -> "Mapping":
        drop = set(keys)
        return Mapping({k: v for k, v in self.assignments.items() if k not in drop})

    def items_sorted(self) -> list[tuple[InstanceKey, str]]:
        return sorted(self.assignments.items())

    def instances_on(self, device_id: str) -> list[InstanceKey]:
        return sorted(k for k, d in self.assignments.items() if d == device_id)


def validate_graph(graph: ControlGraph) -> list[str]:
    """Check graph invariants; returns a list of defects (empty means ok)."""
    defects = []
    seen = set()
    for t in graph.tasks:
        if t.task_id in seen:
            defects.append(f"duplicate task_id: {t.task_id}")
        seen.add(t.task_id)
        if t.compute_cost < 0:
            defects.append(f"negative compute_cost on task: {t.task_id}")
        if t.replicas < 1:
            defects.append(f"replicas must be >= 1 on task: {t.task_id}")
    pairs = set()
    for e in graph.edges:
        if e.src_task == e.dst_task:
            defects.append(f"self-loop edge on task: {e.src_task}")
        for endpoint in (e.src_task, e.dst_task):
            if endpoint not in seen:
                defects.append(f"unknown endpoint: {endpoint}")
        if (e.src_task, e.dst_task) in pairs:
            defects.append(f"duplicate edge: {e.src_task}->{e.dst_task}")
        pairs.add((e.src_task, e.dst_task))
    return defects


def check_mapping(mapping: Mapping, graph: ControlGraph, topology: Topology) -> list[str]:
    """Check the four mapping invariants; returns violations (empty means valid).

    Invariants: assigned devices alive, peripheral pinning honored, replicas
    of one task on distinct devices, and per-device load within capacity.
    """
    violations = []
    load: dict[str, int] = {}
    per_task_devices: dict[str, list[str]] = {}
    for (task_id, replica), device_id in mapping.items_sorted():
        if not topology.alive(device_id):
            violations.append(f"dead device: {device_id} hosts {task_id}/{replica}")
            continue
        spec = graph.task(task_id)
        dev = topology.devices[device_id]
        if spec.required_peripheral is not None and spec.required_peripheral not in dev.peripherals:
            violations.append(
                f"pinning violated: {task_id}/{replica} needs "
                f"{spec.required_peripheral.value} on {device_id}"
            )
        load[device_id] = load.get(device_id, 0) + spec.compute_cost
        per_task_devices.setdefault(task_id, []).append(device_id)
    for task_id, devs in sorted(per_task_devices.items()):
        if len(devs) != len(set(devs)):
            violations.append(f"co-resident replicas of task: {task_id}")
    for device_id, used in sorted(load.items()):
        dev = topology.devices.get(device_id)
        if dev is not None and used > dev.compute_capacity:
            violations.append(f"capacity exceeded on {device_id}: {used} > {dev.compute_capacity}")
    return violations


# Exact feasibility search is used up to this many instances x devices;
# larger inputs fall back to the greedy placement heuristic.
EXACT_FEASIBILITY_CAP = (12, 12)


def _candidates(graph: ControlGraph, topology: Topology) -> dict[InstanceKey, list[str]] | None:
    """Per-slot feasible device lists, or None if some slot has none."""
    out = {}
    alive = topology.alive_devices()
    for task_id, replica in graph.instances():
        spec = graph.task(task_id)
        devs = [
            d.device_id
            for d in alive
            if spec.compute_cost <= d.compute_capacity
            and (spec.required_peripheral is None or spec.required_peripheral in d.peripherals)
        ]
        if not devs:
            return None
        out[(task_id, replica)] = devs
    return out


def is_feasible(graph: ControlGraph, topology: Topology) -> bool:
    """True iff some mapping satisfies all mapping invariants over alive devices.

    Exact (backtracking) up to EXACT_FEASIBILITY_CAP; above the cap the
    answer is the greedy placer's success or failure, a documented
    approximation.
    """
    cands = _candidates(graph, topology)
    if cands is None:
        return bool(not graph.instances())
    slots = sorted(cands, key=lambda k: (len(cands[k]), k))
    n_devices = len(topology.alive_devices())
    if len(slots) > EXACT_FEASIBILITY_CAP[0] or n_devices > EXACT_FEASIBILITY_CAP[1]:
        from . import placement  # deferred to avoid an import cycle

        try:
            placement.place(graph, topology, placement.CostConfig(), _skip_feasibility=True)
            return True
        except placement.PlacementInfeasibleError:
            return False

    free = {d.device_id: d.compute_capacity for d in topology.alive_devices()}
    task_used: dict[str, set[str]] = {}

    def assign(i: int) -> bool:
        if i == len(slots):
            return True
        task_id, _ = slots[i]
        cost = graph.task(task_id).compute_cost
        used = task_used.setdefault(task_id, set())
        for dev in cands[slots[i]]:
            if free[dev] < cost or dev in used:
                continue
            free[dev] -= cost
            used.add(dev)
            if assign(i + 1):
                return True
            free[dev] += cost
            used.discard(dev)
        return False

    return assign(0)


def select_variant(policy: DegradationPolicy, topology: Topology) -> GraphVariant | None:
    """Lowest-rank variant whose graph is feasible on the topology, if any."""
    for variant in policy.variants:
        if is_feasible(variant.graph, topology):
            return variant
    return None
