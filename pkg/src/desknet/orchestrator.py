"""Reconcile-loop control plane.

Observes device liveness, keeps the preferred feasible graph variant placed
and wired, restores or migrates instances, issues channel grants, and runs
progressive rollouts. It is deliberately not on the data path: killing it
stops adaptation but never interrupts traffic on already-wired channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

from . import placement
from .channels import CapabilityGrant, ChannelDescriptor, Direction
from .model import (
    ControlGraph,
    DegradationPolicy,
    GraphVariant,
    InstanceKey,
    Mapping,
    TaskKind,
    TaskSpec,
    select_variant,
)
from .tasks import (
    DEFAULT_TASK_PARAMS,
    InstanceStatus,
    SnapshotError,
    TaskRuntimeError,
    io_signature,
)


class IncompatibleKindError(Exception):
    """Rollout replacement does not match the old kind's channel shape."""


@dataclass(frozen=True)
class OrchestratorConfig:
    detection_delay_ms: int = 500
    reconcile_tick_ms: int = 1000
    migration_step_ms: int = 5
    buffer_capacity: int = 64
    cost: placement.CostConfig = field(default_factory=placement.CostConfig)

    @property
    def migration_duration_ms(self) -> int:
        """pause -> snapshot -> rebind -> restore, one step each."""
        return 4 * self.migration_step_ms

    @property
    def restore_duration_ms(self) -> int:
        """Crash repair: rebind -> restore (no live source to pause)."""
        return 2 * self.migration_step_ms


@dataclass(frozen=True)
class RolloutPlan:
    old_kind: TaskKind
    new_kind: TaskKind
    batch_size: int = 1
    health_window_ms: int = 500
    new_params: dict = field(default_factory=dict)


@dataclass
class _RolloutState:
    plan: RolloutPlan
    pending: list[InstanceKey]
    current_batch: list[InstanceKey] = field(default_factory=list)
    batch_started_at: int = 0
    pre_snapshots: dict = field(default_factory=dict)
    halted: bool = False
    done: bool = False


@dataclass(frozen=True)
class Action:
    kind: str
    subject: str
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DesiredState:
    policy: DegradationPolicy
    active_variant: str | None
    mapping: Mapping
    channels: tuple[str, ...]
    rollout: RolloutPlan | None


class Orchestrator:
    """Single logical control authority for one simulated world."""

    def __init__(self, policy, task_params, config, topology, runtime, manager,
                 clock, schedule, emit=lambda kind, subjects, **payload: None):
        self.policy = policy
        self.task_params = dict(task_params or {})
        self.config = config
        self.topology = topology
        self.runtime = runtime
        self.manager = manager
        self.clock = clock
        self.schedule = schedule
        self.emit = emit
        self.enabled = True
        self.active_variant_id: str | None = None
        self.mapping = Mapping({})
        self.channels: dict[str, ChannelDescriptor] = {}
        self.snapshots: dict[InstanceKey, object] = {}
        self.rollout: _RolloutState | None = None
        self.remap_count = 0
        self.migration_count = 0
        self._channel_serial: dict[str, int] = {}
        self._transfers: dict[InstanceKey, str] = {}
        self._topology_dirty = True
        self._improvement_pending = False

    # -- notifications from the simulator ---------------------------------

    def on_device_down(self, device_id: str):
        self._topology_dirty = True
        self.reconcile()

    def on_device_added(self, device_id: str):
        self._topology_dirty = True
        self._improvement_pending = True
        self.reconcile()

    def on_topology_changed(self):
        self._topology_dirty = True

    def on_graph_edit(self, edit: dict):
        if not self.enabled:
            return
        self._apply_graph_edit(edit)
        self._topology_dirty = True
        self.reconcile()

    def start_rollout(self, plan: RolloutPlan):
        if not self.enabled:
            return
        if io_signature(plan.old_kind) != io_signature(plan.new_kind):
            raise IncompatibleKindError(
                f"{plan.new_kind.value} cannot stand in for {plan.old_kind.value}"
            )
        pending = sorted(
            k for k, inst in self.runtime.instances.items()
            if inst.spec.kind == plan.old_kind
        )
        self.rollout = _RolloutState(plan=plan, pending=pending)
        self.emit("rollout_start", (plan.old_kind.value, plan.new_kind.value),
                  batch_size=plan.batch_size, instances=len(pending))
        self.reconcile()

    def kill(self):
        """Control-plane loss: adaptation stops, the data plane keeps flowing."""
        self.enabled = False
        self.emit("orchestrator_down", ())

    # -- inspection --------------------------------------------------------

    @property
    def desired_state(self) -> DesiredState:
        return DesiredState(
            policy=self.policy,
            active_variant=self.active_variant_id,
            mapping=self.mapping,
            channels=tuple(sorted(self.channels)),
            rollout=self.rollout.plan if self.rollout else None,
        )

    def active_graph(self) -> ControlGraph | None:
        if self.active_variant_id is None:
            return None
        return self.policy.variant(self.active_variant_id).graph

    # -- the reconcile loop -------------------------------------------------

    def bootstrap(self) -> list[Action]:
        """Initial placement at t=0, then the periodic reconcile clock."""
        actions = self.reconcile()
        self._tick()
        return actions

    def _tick(self):
        if not self.enabled:
            return
        self.schedule(self.clock() + self.config.reconcile_tick_ms, self._tick, "reconcile_tick")
        self.reconcile()

    def reconcile(self) -> list[Action]:
        """Diff observed world against desired state; emit corrective actions.

        Deterministic in (observed topology, desired state); an unchanged
        world yields an empty list.
        """
        if not self.enabled:
            return []
        actions: list[Action] = []
        graph = self.active_graph()

        if graph is None or self._topology_dirty:
            best = select_variant(self.policy, self.topology)
            self._topology_dirty = False
            if best is None:
                if self.active_variant_id is not None:
                    self._total_outage(actions)
                return actions
            if self.active_variant_id is None or (
                best.variant_id != self.active_variant_id
                and best.quality_rank
                < self.policy.variant(self.active_variant_id).quality_rank
            ):
                self._switch_variant(best, actions)
                return actions
            graph = self.active_graph()

        lost = sorted({d for d in self.mapping.assignments.values() if not self.topology.alive(d)})
        if lost:
            try:
                delta = placement.repair(self.mapping, graph, self.topology, lost, self.config.cost)
            except placement.PlacementInfeasibleError:
                fallback = select_variant(self.policy, self.topology)
                if fallback is None:
                    self._total_outage(actions)
                else:
                    self._switch_variant(fallback, actions)
                return actions
            for key in sorted(delta):
                self._begin_restore(key, delta[key], actions, count_as_remap=True)
            self.mapping = self.mapping.with_delta(delta)

        self._restart_failed(actions)
        self._sync_slots(actions)
        if self._improvement_pending:
            self._improve_placement(actions)
            self._improvement_pending = False
        self._rollout_round(actions)
        return actions

    # -- variant management -------------------------------------------------

    def _total_outage(self, actions: list[Action]):
        self.emit("no_feasible_variant", ())
        actions.append(Action("no_feasible_variant", ""))
        for key in sorted(self.runtime.instances):
            self.runtime.stop_instance(key)
        for cid in self.manager.channel_ids():
            self.manager.close_channel(cid)
            self.manager.revoke_channel(cid)
        self.channels.clear()
        self.mapping = Mapping({})
        self.active_variant_id = None

    def _switch_variant(self, variant: GraphVariant, actions: list[Action]):
        if self.rollout is not None and not self.rollout.done and not self.rollout.halted:
            self.rollout.halted = True
            self.emit("rollout_halt", (), reason="variant_switch")
        for key in sorted(self.runtime.instances):
            self.runtime.stop_instance(key)
        for cid in self.manager.channel_ids():
            self.manager.close_channel(cid)
            self.manager.revoke_channel(cid)
        self.channels.clear()
        try:
            mapping = placement.place(variant.graph, self.topology, self.config.cost)
        except placement.PlacementInfeasibleError:
            self.active_variant_id = None
            self._total_outage(actions)
            return
        self.active_variant_id = variant.variant_id
        self.mapping = mapping
        self.emit("variant_switch", (variant.variant_id,), rank=variant.quality_rank)
        actions.append(Action("variant_switch", variant.variant_id,
                              {"rank": variant.quality_rank}))
        self._wire(variant.graph, actions)
        for key, device in mapping.items_sorted():
            self._start_slot(variant.graph, key, device, actions)

    def _wire(self, graph: ControlGraph, actions: list[Action]):
        for descriptor in self._desired_descriptors(graph):
            self._open(descriptor, actions)

    def _desired_descriptors(self, graph: ControlGraph) -> list[ChannelDescriptor]:
        out = []
        for edge in sorted(graph.edges, key=lambda e: (e.src_task, e.dst_task)):
            src_spec = graph.task(edge.src_task)
            dst_spec = graph.task(edge.dst_task)
            for si in range(src_spec.replicas):
                for di in range(dst_spec.replicas):
                    logical = f"{edge.src_task}.{si}->{edge.dst_task}.{di}"
                    out.append(
                        ChannelDescriptor(
                            channel_id=logical,
                            mode=edge.channel_mode,
                            src=(edge.src_task, si),
                            dst=(edge.dst_task, di),
                            buffer_capacity=self.config.buffer_capacity,
                            traffic_class=edge.traffic_class,
                        )
                    )
        return out

    def _open(self, descriptor: ChannelDescriptor, actions: list[Action]):
        serial = self._channel_serial.get(descriptor.channel_id, 0)
        self._channel_serial[descriptor.channel_id] = serial + 1
        cid = descriptor.channel_id if serial == 0 else f"{descriptor.channel_id}#{serial}"
        descriptor = dc_replace(descriptor, channel_id=cid)
        grants = (
            CapabilityGrant(descriptor.src, cid, Direction.SEND),
            CapabilityGrant(descriptor.dst, cid, Direction.RECEIVE),
        )
        self.manager.open_channel(
            descriptor,
            grants,
            self.mapping.device_of(descriptor.src),
            self.mapping.device_of(descriptor.dst),
        )
        self.channels[cid] = descriptor
        actions.append(Action("open_channel", cid))

    def _params_for(self, task_id: str) -> dict:
        merged = dict(DEFAULT_TASK_PARAMS)
        merged.update(self.task_params.get(task_id, {}))
        return merged

    def _start_slot(self, graph: ControlGraph, key: InstanceKey, device: str,
                    actions: list[Action]):
        spec = graph.task(key[0])
        snap = self.snapshots.get(key)
        grants = self.manager.grants_of(key)
        if snap is not None and snap.kind == spec.kind:
            self.runtime.restore_instance(spec, key[1], snap, device, grants)
        else:
            self.runtime.start_instance(spec, key[1], device, grants, self._params_for(key[0]))
            self.snapshots[key] = self.runtime.snapshot(key)
        self.runtime.refresh_ticks(key)
        actions.append(Action("start", _fmt(key), {"device": device}))

    # -- repair and restart --------------------------------------------------

    def _restart_failed(self, actions: list[Action]):
        in_batch = set(self.rollout.current_batch) if self.rollout else set()
        for key in self.runtime.failed_instances():
            if key in self._transfers or key in in_batch:
                continue
            device = self.mapping.device_of(key)
            if device is None or not self.topology.alive(device):
                continue
            self._begin_restore(key, device, actions, count_as_remap=False)

    def _begin_restore(self, key: InstanceKey, device: str, actions: list[Action],
                       count_as_remap: bool):
        """Two-step repair: rebind the channels, then restore from the last
        snapshot and resume. No live source exists, so nothing is paused."""
        if key in self._transfers:
            return
        self._transfers[key] = "restore"
        step = self.config.migration_step_ms
        now = self.clock()
        self.emit("restore_begin", (_fmt(key),), device=device)
        actions.append(Action("restore", _fmt(key), {"device": device}))

        def do_rebind():
            if not self.enabled:
                return
            self._rebind_instance(key, device)

        def do_restore():
            if not self.enabled:
                return
            self._transfers.pop(key, None)
            graph = self.active_graph()
            if graph is None or not graph.has_task(key[0]):
                return
            spec = graph.task(key[0])
            snap = self.snapshots.get(key)
            try:
                if snap is not None and snap.kind == spec.kind:
                    self.runtime.restore_instance(spec, key[1], snap, device,
                                                  self.manager.grants_of(key))
                else:
                    self.runtime.start_instance(spec, key[1], device,
                                                self.manager.grants_of(key),
                                                self._params_for(key[0]))
                self.runtime.refresh_ticks(key)
            except TaskRuntimeError:
                self._topology_dirty = True
                self.schedule(self.clock(), self.reconcile, "reconcile_retry")
                return
            if count_as_remap:
                self.remap_count += 1
            self.emit("restore_done", (_fmt(key),), device=device)

        self.schedule(now + step, do_rebind, f"restore:{_fmt(key)}")
        self.schedule(now + 2 * step, do_restore, f"restore:{_fmt(key)}")

    def _rebind_instance(self, key: InstanceKey, device: str):
        for cid in sorted(self.channels):
            descriptor = self.channels[cid]
            if descriptor.src == key:
                self.manager.rebind_endpoint(cid, "src", device)
            if descriptor.dst == key:
                self.manager.rebind_endpoint(cid, "dst", device)

    # -- live migration --------------------------------------------------------

    def migrate(self, key: InstanceKey, src_device: str, dst_device: str) -> None:
        """Pause-and-copy migration: pause, snapshot, rebind, restore, resume.

        Inbound messages buffer at the manager throughout; a dst failure
        before restore aborts the protocol and the instance resumes on src.
        """
        if key in self._transfers:
            return
        graph = self.active_graph()
        spec = graph.task(key[0])
        if spec.required_peripheral is not None:
            if spec.required_peripheral not in self.topology.devices[dst_device].peripherals:
                raise placement.PlacementInfeasibleError(
                    f"{dst_device} lacks {spec.required_peripheral.value}")
        for (tid, r), dev in self.mapping.assignments.items():
            if tid == key[0] and (tid, r) != key and dev == dst_device:
                raise placement.PlacementInfeasibleError(
                    f"anti-affinity: {tid} already has a replica on {dst_device}")
        self._transfers[key] = "migrate"
        step = self.config.migration_step_ms
        now = self.clock()
        self.emit("migrate_begin", (_fmt(key),), src=src_device, dst=dst_device)

        def abort(reason: str):
            self._transfers.pop(key, None)
            self._rebind_instance(key, src_device)
            if key in self.runtime.instances:
                self.runtime.resume(key)
            self.emit("migrate_abort", (_fmt(key),), reason=reason)

        def do_pause():
            if key in self.runtime.instances:
                self.runtime.pause(key)

        def do_snapshot():
            try:
                self.snapshots[key] = self.runtime.snapshot(key)
            except SnapshotError:
                self._transfers.pop(key, None)
                self.emit("migrate_abort", (_fmt(key),), reason="source_lost")

        def do_rebind():
            if self._transfers.get(key) != "migrate":
                return
            self._rebind_instance(key, dst_device)

        def do_restore():
            if self._transfers.get(key) != "migrate":
                return
            if not self.topology.alive(dst_device):
                self._transfers.pop(key, None)
                abort("destination_lost")
                return
            snap = self.snapshots[key]
            self.runtime.restore_instance(graph.task(key[0]), key[1], snap, dst_device,
                                          self.manager.grants_of(key), paused=True)
            self.runtime.refresh_ticks(key)

        def do_resume():
            if self._transfers.pop(key, None) != "migrate":
                return
            self.runtime.resume(key)
            self.mapping = self.mapping.with_delta({key: dst_device})
            self.migration_count += 1
            self.emit("migrate_done", (_fmt(key),), src=src_device, dst=dst_device)

        self.schedule(now, do_pause, f"migrate:{_fmt(key)}")
        self.schedule(now + step, do_snapshot, f"migrate:{_fmt(key)}")
        self.schedule(now + 2 * step, do_rebind, f"migrate:{_fmt(key)}")
        self.schedule(now + 3 * step, do_restore, f"migrate:{_fmt(key)}")
        self.schedule(now + 4 * step, do_resume, f"migrate:{_fmt(key)}")

    def _improve_placement(self, actions: list[Action]):
        """Capacity was added: migrate any instance whose move strictly
        reduces the placement cost (single-move local search)."""
        graph = self.active_graph()
        if graph is None:
            return
        placer = placement._Placer(graph, self.topology, self.config.cost)
        movable = [k for k in self.mapping.assignments if k not in self._transfers]
        placer.adopt({k: self.mapping.assignments[k] for k in movable})
        placer.improve(movable)
        for key in sorted(movable):
            new_dev = placer.assigned[key]
            old_dev = self.mapping.assignments[key]
            if new_dev != old_dev:
                actions.append(Action("migrate", _fmt(key),
                                      {"src": old_dev, "dst": new_dev}))
                self.migrate(key, old_dev, new_dev)

    # -- graph edits -------------------------------------------------------------

    def _apply_graph_edit(self, edit: dict):
        graph = self.active_graph()
        if graph is None:
            return
        op = edit["op"]
        tasks, edges = list(graph.tasks), list(graph.edges)
        if op == "add_task":
            tasks.append(edit["task"])
        elif op == "remove_task":
            tasks = [t for t in tasks if t.task_id != edit["task_id"]]
            edges = [e for e in edges if edit["task_id"] not in (e.src_task, e.dst_task)]
        elif op == "add_edge":
            edges.append(edit["edge"])
        elif op == "remove_edge":
            edges = [e for e in edges
                     if not (e.src_task == edit["src"] and e.dst_task == edit["dst"])]
        else:
            raise ValueError(f"unknown graph edit: {op}")
        new_graph = ControlGraph(tasks=tuple(tasks), edges=tuple(edges))
        variants = tuple(
            dc_replace(v, graph=new_graph) if v.variant_id == self.active_variant_id else v
            for v in self.policy.variants
        )
        self.policy = DegradationPolicy(variants=variants)
        self.emit("graph_edit", (self.active_variant_id or "",), op=op)

    def _sync_slots(self, actions: list[Action]):
        """Start missing slots and drop removed ones, disturbing nothing else."""
        graph = self.active_graph()
        if graph is None:
            return
        desired = set(graph.instances())
        current = set(self.mapping.assignments)
        removed = sorted(current - desired)
        for key in removed:
            self.runtime.stop_instance(key)
            self.mapping = self.mapping.without([key])
            self.snapshots.pop(key, None)
            actions.append(Action("stop", _fmt(key)))
        if removed:
            live_slots = set(self.mapping.assignments)
            for cid in sorted(self.channels):
                d = self.channels[cid]
                if d.src not in live_slots or d.dst not in live_slots:
                    self.manager.close_channel(cid)
                    self.manager.revoke_channel(cid)
                    del self.channels[cid]
                    actions.append(Action("close_channel", cid))
        missing = sorted(desired - current)
        if not missing:
            return
        placer = placement._Placer(graph, self.topology, self.config.cost)
        placer.adopt(dict(self.mapping.assignments))
        try:
            placer.greedy(missing)
        except placement.PlacementInfeasibleError:
            self.emit("placement_blocked", (), missing=[_fmt(k) for k in missing])
            actions.append(Action("placement_blocked", ",".join(_fmt(k) for k in missing)))
            return
        delta = {k: placer.assigned[k] for k in missing}
        self.mapping = self.mapping.with_delta(delta)
        live_pairs = {(d.src, d.dst) for d in self.channels.values()}
        for descriptor in self._desired_descriptors(graph):
            if (descriptor.src, descriptor.dst) not in live_pairs:
                self._open(descriptor, actions)
        for key in sorted(delta):
            self._start_slot(graph, key, delta[key], actions)
        for key in sorted(desired):
            self.runtime.refresh_ticks(key)

    # -- progressive rollout -----------------------------------------------------

    def _rollout_round(self, actions: list[Action]):
        ro = self.rollout
        if ro is None or ro.halted or ro.done:
            return
        now = self.clock()
        plan = ro.plan
        if ro.current_batch:
            if now < ro.batch_started_at + plan.health_window_ms:
                return
            if self._batch_healthy(ro):
                ro.current_batch = []
            else:
                self._revert_batch(ro, actions)
                return
        if not ro.pending:
            ro.done = True
            self._commit_rollout_kinds(ro)
            self.emit("rollout_done", (plan.new_kind.value,))
            actions.append(Action("rollout_done", plan.new_kind.value))
            return
        batch, ro.pending = ro.pending[: plan.batch_size], ro.pending[plan.batch_size:]
        graph = self.active_graph()
        for key in batch:
            inst = self.runtime.instances.get(key)
            if inst is None:
                continue
            ro.pre_snapshots[key] = self.runtime.snapshot(key)
            device = inst.device_id
            self.runtime.stop_instance(key)
            spec = dc_replace(graph.task(key[0]), kind=plan.new_kind)
            params = self._params_for(key[0])
            params.update(plan.new_params)
            self.runtime.start_instance(spec, key[1], device,
                                        self.manager.grants_of(key), params)
            self.runtime.refresh_ticks(key)
            self.emit("rollout_replace", (_fmt(key),), kind=plan.new_kind.value)
            actions.append(Action("rollout_replace", _fmt(key),
                                  {"kind": plan.new_kind.value}))
        ro.current_batch = batch
        ro.batch_started_at = now

    def _batch_healthy(self, ro: _RolloutState) -> bool:
        for key in ro.current_batch:
            inst = self.runtime.instances.get(key)
            if inst is None or inst.status != InstanceStatus.RUNNING:
                return False
            if inst.last_emit_at is None or inst.last_emit_at < ro.batch_started_at:
                return False
        return True

    def _revert_batch(self, ro: _RolloutState, actions: list[Action]):
        graph = self.active_graph()
        for key in sorted(ro.current_batch):
            device = self.mapping.device_of(key)
            self.runtime.stop_instance(key)
            snap = ro.pre_snapshots[key]
            self.runtime.restore_instance(graph.task(key[0]), key[1], snap, device,
                                          self.manager.grants_of(key))
            self.runtime.refresh_ticks(key)
            self.emit("rollout_revert", (_fmt(key),))
            actions.append(Action("rollout_revert", _fmt(key)))
        ro.current_batch = []
        ro.halted = True
        self.emit("rollout_halt", (), reason="health_check_failed")
        actions.append(Action("rollout_halt", ro.plan.new_kind.value))

    def _commit_rollout_kinds(self, ro: _RolloutState):
        """The rollout finished: future placements use the new kind."""
        graph = self.active_graph()
        if graph is None:
            return
        tasks = tuple(
            dc_replace(t, kind=ro.plan.new_kind) if t.kind == ro.plan.old_kind else t
            for t in graph.tasks
        )
        new_graph = ControlGraph(tasks=tasks, edges=graph.edges)
        variants = tuple(
            dc_replace(v, graph=new_graph) if v.variant_id == self.active_variant_id else v
            for v in self.policy.variants
        )
        self.policy = DegradationPolicy(variants=variants)


def _fmt(key: InstanceKey) -> str:
    return f"{key[0]}/{key[1]}"
