"""Trace records and trace-driven loop measurement.

A trace is line-delimited, one record per line, tab-separated:

    time_ms <TAB> record_kind <TAB> subject_ids (comma-joined) <TAB> payload JSON

Field order is fixed and payload JSON keys are sorted, so identical runs
produce byte-identical traces. The LoopAnalyzer replays a record stream and
integrates per-control-loop availability, latency and disruption windows;
the simulator feeds it live and `measure_loop` feeds it from a stored trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .model import Device, LinkMetrics, Topology


@dataclass(frozen=True)
class TraceRecord:
    time_ms: int
    kind: str
    subjects: tuple[str, ...]
    payload: dict

    def to_line(self) -> str:
        return "\t".join(
            (
                str(self.time_ms),
                self.kind,
                ",".join(self.subjects),
                json.dumps(self.payload, sort_keys=True, separators=(",", ":")),
            )
        )


def parse_line(line: str) -> TraceRecord:
    time_ms, kind, subjects, payload = line.rstrip("\n").split("\t", 3)
    return TraceRecord(
        time_ms=int(time_ms),
        kind=kind,
        subjects=tuple(s for s in subjects.split(",") if s),
        payload=json.loads(payload),
    )


def write_trace(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_line())
            fh.write("\n")


def read_trace(path) -> list[TraceRecord]:
    with open(path) as fh:
        return [parse_line(line) for line in fh if line.strip()]


@dataclass
class LoopMetrics:
    tasks: list[str]
    availability_fraction: float
    latency_mean_ms: float | None
    latency_p99_ms: float | None
    latency_count: int
    disruption_windows: list[tuple[int, int]]

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "availability_fraction": self.availability_fraction,
            "latency_mean_ms": self.latency_mean_ms,
            "latency_p99_ms": self.latency_p99_ms,
            "latency_count": self.latency_count,
            "disruption_windows": [list(w) for w in self.disruption_windows],
        }


def _p99(samples: list[int]) -> float:
    ordered = sorted(samples)
    rank = max(0, math.ceil(0.99 * len(ordered)) - 1)
    return float(ordered[rank])


# Record kinds that can change a loop's liveness.
_WORLD_KINDS = frozenset({"topology_init", "device_crash", "device_add", "link_set",
                          "partition", "heal"})
_TASK_KINDS = frozenset({"task_start", "task_stop", "task_fail", "task_pause",
                         "task_resume"})
_CHANNEL_KINDS = frozenset({"open_channel", "close_channel", "rebind"})


class LoopAnalyzer:
    """Replays a trace and integrates liveness per named control loop.

    A loop is live when every task on its path has a running instance and
    each consecutive pair is joined by an open channel whose endpoint
    instances are running on mutually reachable devices.
    """

    def __init__(self, loops: dict[str, list[str]]):
        self.loops = {name: list(tasks) for name, tasks in loops.items()}
        self._topology: Topology | None = None
        self._instances: dict[str, list] = {}  # "task/replica" -> [running, device]
        self._task_running: dict[str, set[str]] = {}  # task -> running instance keys
        self._channels: dict[str, dict] = {}
        self._pair_index: dict[tuple[str, str], set[str]] = {}
        self._task_loops: dict[str, set[str]] = {}
        for name, tasks in self.loops.items():
            for t in tasks:
                self._task_loops.setdefault(t, set()).add(name)
        self._state: dict[str, dict] = {
            name: {"live": False, "since": 0, "live_time": 0, "windows": [], "down_at": 0}
            for name in self.loops
        }
        self._latencies: dict[str, list[int]] = {name: [] for name in self.loops}
        self._tails = {name: tasks[-1] for name, tasks in self.loops.items()}

    # -- record intake ------------------------------------------------------

    def consume(self, rec: TraceRecord):
        kind = rec.kind
        if kind == "actuate":
            task = rec.subjects[0].split("/", 1)[0]
            for name, tail in self._tails.items():
                if tail == task:
                    self._latencies[name].append(rec.time_ms - rec.payload["origin"])
            return
        affected: set[str] | None = None
        if kind in _TASK_KINDS:
            affected = self._apply_task(rec)
        elif kind in _CHANNEL_KINDS:
            affected = self._apply_channel(rec)
        elif kind in _WORLD_KINDS:
            self._apply_world(rec)
            affected = set(self.loops)
        else:
            return
        for name in sorted(affected):
            self._reevaluate(name, rec.time_ms)

    def _apply_task(self, rec: TraceRecord) -> set[str]:
        key = rec.subjects[0]
        task = key.split("/", 1)[0]
        if rec.kind == "task_start":
            up = not rec.payload.get("paused", False)
            self._instances[key] = [up, rec.payload["device"]]
            self._set_running(task, key, up)
        elif rec.kind == "task_resume":
            if key in self._instances:
                self._instances[key][0] = True
                self._set_running(task, key, True)
        elif rec.kind in ("task_stop", "task_fail", "task_pause"):
            if key in self._instances:
                self._instances[key][0] = False
                self._set_running(task, key, False)
        return self._task_loops.get(task, set())

    def _set_running(self, task: str, key: str, up: bool):
        keys = self._task_running.setdefault(task, set())
        if up:
            keys.add(key)
        else:
            keys.discard(key)

    def _apply_channel(self, rec: TraceRecord) -> set[str]:
        cid = rec.subjects[0]
        if rec.kind == "open_channel":
            info = {
                "src": rec.payload["src"],
                "dst": rec.payload["dst"],
                "src_dev": rec.payload["src_device"],
                "dst_dev": rec.payload["dst_device"],
            }
            self._channels[cid] = info
            pair = (info["src"].split("/", 1)[0], info["dst"].split("/", 1)[0])
            self._pair_index.setdefault(pair, set()).add(cid)
            tasks = set(pair)
        elif rec.kind == "close_channel":
            info = self._channels.pop(cid, None)
            if info is None:
                return set()
            pair = (info["src"].split("/", 1)[0], info["dst"].split("/", 1)[0])
            self._pair_index.get(pair, set()).discard(cid)
            tasks = set(pair)
        else:  # rebind
            info = self._channels.get(cid)
            if info is None:
                return set()
            side = rec.payload["endpoint"]
            info["src_dev" if side == "src" else "dst_dev"] = rec.payload["device"]
            tasks = {info["src"].split("/", 1)[0], info["dst"].split("/", 1)[0]}
        out: set[str] = set()
        for t in tasks:
            out |= self._task_loops.get(t, set())
        return out

    def _apply_world(self, rec: TraceRecord):
        if rec.kind == "topology_init":
            devices = [Device(device_id=d, alive=bool(a)) for d, a in rec.payload["devices"]]
            default = rec.payload.get("default_link")
            topo = Topology(
                devices,
                default_link=None
                if default is None
                else LinkMetrics(loss_rate=default[0], latency_ms=default[1]),
            )
            for a, b, loss, lat in rec.payload.get("links", []):
                topo.set_link(a, b, LinkMetrics(loss_rate=loss, latency_ms=lat))
            self._topology = topo
        elif self._topology is None:
            return
        elif rec.kind == "device_crash":
            self._topology.set_alive(rec.subjects[0], False)
        elif rec.kind == "device_add":
            self._topology.add_device(Device(device_id=rec.subjects[0], alive=True))
            for peer, loss, lat in rec.payload.get("links", []):
                self._topology.set_link(rec.subjects[0], peer, LinkMetrics(loss, lat))
        elif rec.kind == "link_set":
            self._topology.set_link(
                rec.payload["a"], rec.payload["b"],
                LinkMetrics(rec.payload["loss_rate"], rec.payload["latency_ms"]),
            )
        elif rec.kind == "partition":
            self._topology.set_partition(rec.payload["side"])
        elif rec.kind == "heal":
            self._topology.heal()

    # -- liveness integration -------------------------------------------------

    def _loop_live(self, tasks: list[str]) -> bool:
        if self._topology is None:
            return False
        for t in tasks:
            if not self._task_running.get(t):
                return False
        for a, b in zip(tasks, tasks[1:]):
            ok = False
            for cid in self._pair_index.get((a, b), ()):
                ch = self._channels[cid]
                src_up = self._instances.get(ch["src"], [False, ""])[0]
                dst_up = self._instances.get(ch["dst"], [False, ""])[0]
                if src_up and dst_up and self._topology.reachable(ch["src_dev"], ch["dst_dev"]):
                    ok = True
                    break
            if not ok:
                return False
        return True

    def _reevaluate(self, name: str, now: int):
        st = self._state[name]
        live = self._loop_live(self.loops[name])
        if live == st["live"]:
            return
        span = now - st["since"]
        if st["live"]:
            st["live_time"] += span
        elif span > 0:
            st["windows"].append((st["down_at"], now))
        st["live"] = live
        st["since"] = now
        if not live:
            st["down_at"] = now

    def finish(self, end_time: int) -> dict[str, LoopMetrics]:
        out = {}
        for name in sorted(self.loops):
            st = self._state[name]
            span = end_time - st["since"]
            live_time = st["live_time"] + (span if st["live"] else 0)
            windows = list(st["windows"])
            if not st["live"] and span > 0:
                windows.append((st["down_at"], end_time))
            samples = self._latencies[name]
            out[name] = LoopMetrics(
                tasks=self.loops[name],
                availability_fraction=(live_time / end_time) if end_time > 0 else 0.0,
                latency_mean_ms=(sum(samples) / len(samples)) if samples else None,
                latency_p99_ms=_p99(samples) if samples else None,
                latency_count=len(samples),
                disruption_windows=windows,
            )
        return out


def measure_loop(trace, loop_spec: list[str], end_time: int | None = None,
                 known_tasks=None) -> LoopMetrics:
    """Compute one loop's availability, latency stats and disruption windows
    from a stored trace."""
    if known_tasks is not None:
        unknown = [t for t in loop_spec if t not in known_tasks]
        if unknown:
            raise ValueError(f"unknown tasks in loop spec: {', '.join(unknown)}")
    analyzer = LoopAnalyzer({"loop": list(loop_spec)})
    last = 0
    for rec in trace:
        analyzer.consume(rec)
        last = rec.time_ms
    return analyzer.finish(end_time if end_time is not None else last)["loop"]
