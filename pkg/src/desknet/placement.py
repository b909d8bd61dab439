"""Greedy placement with single-move local search, plus an exact oracle.

The cost of a mapping is edge_term + load_term:

  edge_term = sum over mapped replica pairs of w_loss*loss + w_lat*latency/latency_norm
  load_term = sum over devices of (used_load / compute_capacity)**2

Co-located endpoints contribute zero. Unreachable endpoint pairs are not
forbidden (a partition is a network condition, not a placement fault) but
carry a heavy constant penalty so the placer avoids them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import (
    ControlGraph,
    InstanceKey,
    Mapping,
    TaskSpec,
    Topology,
    check_mapping,
)


class PlacementInfeasibleError(Exception):
    """No valid assignment exists for the requested placement."""


class OracleSizeError(Exception):
    """Instance exceeds the exhaustive oracle's hard size cap."""


@dataclass(frozen=True)
class CostConfig:
    w_loss: float = 10.0
    w_lat: float = 1.0
    latency_norm: float = 100.0


@dataclass(frozen=True)
class PlacementCost:
    total: float
    edge_term: float
    load_term: float


# An edge mapped across an unreachable pair costs as much as loss 1.0 plus
# ten normalized latencies.
UNREACHABLE_LATENCY_RATIO = 10.0

# Local search is skipped above this instances*devices product; at that
# scale greedy alone must do (the oracle quality gate only applies to
# oracle-sized inputs anyway).
LOCAL_SEARCH_CAP = 250_000

ORACLE_MAX_INSTANCES = 6
ORACLE_MAX_DEVICES = 5


def _replica_pairs(graph: ControlGraph) -> dict[InstanceKey, list[InstanceKey]]:
    """Adjacency between instance slots: one entry per replica pair per edge."""
    adj: dict[InstanceKey, list[InstanceKey]] = {k: [] for k in graph.instances()}
    for e in graph.edges:
        src = graph.task(e.src_task)
        dst = graph.task(e.dst_task)
        for si in range(src.replicas):
            for di in range(dst.replicas):
                adj[(e.src_task, si)].append((e.dst_task, di))
                adj[(e.dst_task, di)].append((e.src_task, si))
    return adj


class _Costing:
    """Incremental cost bookkeeping over a partial assignment."""

    def __init__(self, graph: ControlGraph, topology: Topology, config: CostConfig):
        self.graph = graph
        self.topology = topology
        self.config = config
        self.adj = _replica_pairs(graph)
        self.unreachable_cost = config.w_loss + config.w_lat * UNREACHABLE_LATENCY_RATIO

    def pair_cost(self, dev_a: str, dev_b: str) -> float:
        if dev_a == dev_b:
            return 0.0
        lm = self.topology.link(dev_a, dev_b)
        if lm is None:
            return self.unreachable_cost
        cfg = self.config
        return cfg.w_loss * lm.loss_rate + cfg.w_lat * lm.latency_ms / cfg.latency_norm

    def load_ratio_sq(self, device_id: str, used: int) -> float:
        if used == 0:
            return 0.0
        cap = self.topology.devices[device_id].compute_capacity
        return (used / cap) ** 2 if cap > 0 else float("inf")

    def edge_delta(self, key: InstanceKey, device_id: str, assigned: dict[InstanceKey, str]) -> float:
        total = 0.0
        for peer in self.adj[key]:
            peer_dev = assigned.get(peer)
            if peer_dev is not None:
                total += self.pair_cost(device_id, peer_dev)
        return total


def placement_cost(
    mapping: Mapping, graph: ControlGraph, topology: Topology, config: CostConfig | None = None
) -> PlacementCost:
    """Full cost of a mapping under the configured weights."""
    config = config or CostConfig()
    costing = _Costing(graph, topology, config)
    assigned = mapping.assignments
    edge_term = 0.0
    for key, peers in costing.adj.items():
        dev = assigned.get(key)
        if dev is None:
            continue
        for peer in peers:
            peer_dev = assigned.get(peer)
            if peer_dev is not None and key < peer:
                edge_term += costing.pair_cost(dev, peer_dev)
    load: dict[str, int] = {}
    for (task_id, _), dev in assigned.items():
        load[dev] = load.get(dev, 0) + graph.task(task_id).compute_cost
    load_term = sum(costing.load_ratio_sq(dev, used) for dev, used in load.items())
    return PlacementCost(total=edge_term + load_term, edge_term=edge_term, load_term=load_term)


def _slot_order(graph: ControlGraph, slots) -> list[InstanceKey]:
    def sort_key(key: InstanceKey):
        spec = graph.task(key[0])
        return (0 if spec.pinned else 1, -spec.compute_cost, key[0], key[1])

    return sorted(slots, key=sort_key)


def _feasible_devices(
    spec: TaskSpec,
    key: InstanceKey,
    topology: Topology,
    used_load: dict[str, int],
    task_devices: dict[str, set[str]],
) -> list[str]:
    out = []
    taken = task_devices.get(key[0], set())
    for dev in topology.alive_devices():
        if dev.device_id in taken:
            continue
        if spec.required_peripheral is not None and spec.required_peripheral not in dev.peripherals:
            continue
        if used_load.get(dev.device_id, 0) + spec.compute_cost > dev.compute_capacity:
            continue
        out.append(dev.device_id)
    return out


class _Placer:
    def __init__(self, graph: ControlGraph, topology: Topology, config: CostConfig):
        self.graph = graph
        self.topology = topology
        self.costing = _Costing(graph, topology, config)
        self.assigned: dict[InstanceKey, str] = {}
        self.used_load: dict[str, int] = {}
        self.task_devices: dict[str, set[str]] = {}

    def adopt(self, assignments: dict[InstanceKey, str]):
        for key, dev in assignments.items():
            self._put(key, dev)

    def _put(self, key: InstanceKey, dev: str):
        self.assigned[key] = dev
        self.used_load[dev] = self.used_load.get(dev, 0) + self.graph.task(key[0]).compute_cost
        self.task_devices.setdefault(key[0], set()).add(dev)

    def _pop(self, key: InstanceKey):
        dev = self.assigned.pop(key)
        self.used_load[dev] -= self.graph.task(key[0]).compute_cost
        self.task_devices[key[0]].discard(dev)
        return dev

    def incremental(self, key: InstanceKey, dev: str) -> float:
        cost = self.graph.task(key[0]).compute_cost
        used = self.used_load.get(dev, 0)
        load_delta = self.costing.load_ratio_sq(dev, used + cost) - self.costing.load_ratio_sq(dev, used)
        return load_delta + self.costing.edge_delta(key, dev, self.assigned)

    def place_slot(self, key: InstanceKey) -> str:
        spec = self.graph.task(key[0])
        best_dev, best_score = None, None
        for dev in _feasible_devices(spec, key, self.topology, self.used_load, self.task_devices):
            score = self.incremental(key, dev)
            if best_score is None or score < best_score:
                best_dev, best_score = dev, score
        if best_dev is None:
            raise PlacementInfeasibleError(f"no feasible device for {key[0]}/{key[1]}")
        self._put(key, best_dev)
        return best_dev

    def greedy(self, slots) -> None:
        for key in _slot_order(self.graph, slots):
            self.place_slot(key)

    def improve(self, movable, max_passes: int = 50) -> None:
        """Single-move local search: relocate one slot at a time while the
        total cost strictly decreases."""
        order = _slot_order(self.graph, movable)
        for _ in range(max_passes):
            changed = False
            for key in order:
                spec = self.graph.task(key[0])
                cur_dev = self._pop(key)
                best_dev, best_score = cur_dev, self.incremental(key, cur_dev)
                # Devices iterate in lexicographic order, so a strict "<"
                # keeps the lex-smallest device among equal scores.
                for dev in _feasible_devices(spec, key, self.topology, self.used_load, self.task_devices):
                    if dev == cur_dev:
                        continue
                    score = self.incremental(key, dev)
                    if score < best_score - 1e-12:
                        best_dev, best_score = dev, score
                self._put(key, best_dev)
                if best_dev != cur_dev:
                    changed = True
            if not changed:
                return


def place(
    graph: ControlGraph,
    topology: Topology,
    config: CostConfig | None = None,
    _skip_feasibility: bool = False,
) -> Mapping:
    """Deterministic greedy assignment refined by single-move local search.

    Task order: pinned first, then descending compute_cost, then task_id;
    ties between devices break lexicographically. Identical inputs produce
    identical mappings.
    """
    config = config or CostConfig()
    placer = _Placer(graph, topology, config)
    slots = graph.instances()
    placer.greedy(slots)
    if len(slots) * len(topology.alive_devices()) <= LOCAL_SEARCH_CAP:
        placer.improve(slots)
    mapping = Mapping(dict(placer.assigned))
    if not _skip_feasibility:
        problems = check_mapping(mapping, graph, topology)
        if problems:
            raise PlacementInfeasibleError("; ".join(problems))
    return mapping


def repair(
    mapping: Mapping,
    graph: ControlGraph,
    topology: Topology,
    lost_devices,
    config: CostConfig | None = None,
) -> dict[InstanceKey, str]:
    """Re-place only the slots that were resident on lost devices.

    Surviving assignments are never touched (minimal disturbance). Returns
    the delta; raises PlacementInfeasibleError when no valid repair exists,
    which tells the orchestrator to consider the next degradation variant.
    """
    lost = set(lost_devices)
    moved = sorted(k for k, d in mapping.assignments.items() if d in lost)
    if not moved:
        return {}
    config = config or CostConfig()
    placer = _Placer(graph, topology, config)
    survivors = {k: d for k, d in mapping.assignments.items() if d not in lost}
    placer.adopt(survivors)
    placer.greedy(moved)
    placer.improve(moved)
    delta = {k: placer.assigned[k] for k in moved}
    result = mapping.with_delta(delta)
    problems = check_mapping(result, graph, topology)
    if problems:
        raise PlacementInfeasibleError("; ".join(problems))
    return delta


def place_redundant(
    mapping: Mapping,
    graph: ControlGraph,
    task: TaskSpec,
    topology: Topology,
    config: CostConfig | None = None,
) -> dict[InstanceKey, str]:
    """Place the next replica of ``task`` on a device hosting none of its copies."""
    current = sorted(r for (tid, r) in mapping.assignments if tid == task.task_id)
    if len(current) >= task.replicas:
        raise PlacementInfeasibleError(
            f"task {task.task_id} already has {len(current)} of {task.replicas} replicas"
        )
    next_index = 0
    while next_index in current:
        next_index += 1
    config = config or CostConfig()
    placer = _Placer(graph, topology, config)
    placer.adopt(dict(mapping.assignments))
    key = (task.task_id, next_index)
    if key not in placer.costing.adj:
        placer.costing.adj[key] = []
        for e in graph.edges_of(task.task_id):
            peer_task = e.dst_task if e.src_task == task.task_id else e.src_task
            for pr in range(graph.task(peer_task).replicas):
                placer.costing.adj[key].append((peer_task, pr))
    dev = placer.place_slot(key)
    return {key: dev}


def oracle_place(
    graph: ControlGraph, topology: Topology, config: CostConfig | None = None
) -> Mapping:
    """Exhaustive global-minimum placement for oracle-sized inputs.

    Hard cap: at most ORACLE_MAX_INSTANCES slots and ORACLE_MAX_DEVICES alive
    devices. Cost ties resolve to the lexicographically smallest assignment
    vector over slots sorted by key.
    """
    config = config or CostConfig()
    slots = sorted(graph.instances())
    devices = topology.alive_devices()
    if len(slots) > ORACLE_MAX_INSTANCES or len(devices) > ORACLE_MAX_DEVICES:
        raise OracleSizeError(
            f"{len(slots)} slots x {len(devices)} devices exceeds "
            f"{ORACLE_MAX_INSTANCES}x{ORACLE_MAX_DEVICES} oracle cap"
        )
    costing = _Costing(graph, topology, config)
    device_ids = [d.device_id for d in devices]
    best: tuple[float, tuple[str, ...]] | None = None
    assigned: dict[InstanceKey, str] = {}
    used_load: dict[str, int] = {}
    task_devices: dict[str, set[str]] = {}

    def partial_cost_add(key: InstanceKey, dev: str) -> float:
        cost = graph.task(key[0]).compute_cost
        used = used_load.get(dev, 0)
        delta = costing.load_ratio_sq(dev, used + cost) - costing.load_ratio_sq(dev, used)
        return delta + costing.edge_delta(key, dev, assigned)

    def search(i: int, running: float):
        nonlocal best
        if best is not None and running >= best[0]:
            return
        if i == len(slots):
            vector = tuple(assigned[k] for k in slots)
            if best is None or running < best[0]:
                best = (running, vector)
            return
        key = slots[i]
        spec = graph.task(key[0])
        for dev in device_ids:
            if dev in task_devices.get(key[0], set()):
                continue
            if spec.required_peripheral is not None:
                if spec.required_peripheral not in topology.devices[dev].peripherals:
                    continue
            if used_load.get(dev, 0) + spec.compute_cost > topology.devices[dev].compute_capacity:
                continue
            add = partial_cost_add(key, dev)
            assigned[key] = dev
            used_load[dev] = used_load.get(dev, 0) + spec.compute_cost
            task_devices.setdefault(key[0], set()).add(dev)
            search(i + 1, running + add)
            task_devices[key[0]].discard(dev)
            used_load[dev] -= spec.compute_cost
            del assigned[key]

    search(0, 0.0)
    if best is None:
        raise PlacementInfeasibleError("no feasible mapping exists")
    return Mapping({k: d for k, d in zip(slots, best[1])})
