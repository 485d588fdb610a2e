"""Pipeline schedule simulation and bubble analysis.

Schedules are produced by a deterministic event-driven simulation of
FIFO-1F1B dispatch: each device, whenever free, starts the highest-priority
ready task, preferring backward over forward work so the stable phase
alternates one forward with one backward per micro-batch; the warm-up depth
of each stage emerges from readiness. Bidirectional schedules run one
pipeline per direction over the same device groups and alternate directions
fairly when both have ready work, starting with the down direction.

Compute tasks (forward, backward, extra forward pass, bubble fill) occupy a
device exclusively. Communication is modeled as delay: point-to-point
transfers, the self-conditioning feedback transfer, and per-stage gradient
synchronization are recorded as tasks on a per-device communication lane
that does not block compute. A stage's sync task starts together with its
final backward, reflecting per-layer gradient readiness; its overhang past
the compute timeline is exactly what the partitioner's gap term bounds.

A pipeline bubble is a maximal interval during which a fixed non-empty set
of devices runs no compute task. Bubbles shorter than a threshold (default
10 ms) are not worth filling and are dropped by ``extract_bubbles``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from heapq import heappop, heappush

from .errors import ValidationError
from .partitioner import DOWN, UP, PartitionPlan, _BackboneCosts
from .profile import ClusterConfig, ModelProfile

COMPUTE_KINDS = frozenset({"fwd", "bwd", "fwd_sc", "fill"})
COMM_KINDS = frozenset({"p2p_comm", "feedback_comm", "sync"})

#: Default minimum bubble length worth filling, in seconds.
MIN_BUBBLE_LEN = 0.010


@dataclass(frozen=True)
class Task:
    """One simulated event on a device timeline.

    ``tag`` disambiguates communication tasks: the flow phase ("fwd",
    "bwd", "fwd_sc", "feedback") whose data the transfer carries. Compute
    tasks leave it empty.
    """

    device: int
    kind: str
    micro_batch: int | None
    stage: int | None
    direction: str
    start: float
    end: float
    tag: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Schedule:
    tasks: list[Task]
    makespan: float
    device_count: int


@dataclass(frozen=True)
class Bubble:
    start: float
    end: float
    idle_devices: frozenset[int]

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class _PipeSpec:
    """Timings of one pipeline direction, one entry per stage in flow
    order. ``groups[s]`` maps flow stage s to its device group."""

    direction: str
    groups: tuple[int, ...]
    fwd: tuple[float, ...]
    bwd: tuple[float, ...]
    fwd_out_comm: tuple[float, ...]   # transfer to the next stage; last entry unused
    bwd_out_comm: tuple[float, ...]   # transfer of stage s+1's grads back to s, costed at s
    sync: tuple[float, ...]
    micro_batches: int
    selfcond: bool = False
    feedback: float = 0.0

    @property
    def num_stages(self) -> int:
        return len(self.groups)


_PHASE_RANK = {"bwd": 0, "fwd_sc": 0, "fwd": 1}


class _Simulator:
    """Event-driven dispatch of one or two pipelines over device groups."""

    def __init__(self, num_groups: int, pipes: list[_PipeSpec]):
        self.num_groups = num_groups
        self.pipes = pipes
        self.busy = [0.0] * num_groups
        self.last_dir = [UP] * num_groups  # so the first contested pick is down
        self.ready: list[list[tuple]] = [[] for _ in range(num_groups)]
        self.deps_left = {}
        self.arrival = {}
        self.committed = []  # (pipe_idx, kind, micro, stage, group, start, end)
        self.comm_tasks = []  # (pipe_idx, kind, micro, stage, group, start, end, tag)
        self.remaining = 0
        self.events = []

    # -- task graph ------------------------------------------------------

    def _key(self, pipe_idx, kind, micro, stage):
        return (pipe_idx, kind, micro, stage)

    def setup(self):
        for pi, pipe in enumerate(self.pipes):
            S = pipe.num_stages
            for m in range(pipe.micro_batches):
                for s in range(S):
                    if pipe.selfcond:
                        self._add(pi, "fwd_sc", m, s, 1 if s > 0 else 0)
                        fwd_deps = 1  # feedback at s == 0, upstream fwd otherwise
                        self._add(pi, "fwd", m, s, fwd_deps)
                    else:
                        self._add(pi, "fwd", m, s, 1 if s > 0 else 0)
                    # bwd waits on its own fwd, plus the downstream bwd
                    self._add(pi, "bwd", m, s, 1 + (1 if s < S - 1 else 0))

    def _add(self, pipe_idx, kind, micro, stage, deps):
        key = self._key(pipe_idx, kind, micro, stage)
        self.deps_left[key] = deps
        self.arrival[key] = 0.0
        self.remaining += 1
        if deps == 0:
            self._mark_ready(key)

    def _mark_ready(self, key):
        pipe_idx, kind, micro, stage = key
        group = self.pipes[pipe_idx].groups[stage]
        self.ready[group].append((_PHASE_RANK[kind], 0 if kind == "bwd" else 1, micro, key))
        heappush(self.events, self.arrival[key])

    def _satisfy(self, key, arrival_time):
        self.arrival[key] = max(self.arrival[key], arrival_time)
        self.deps_left[key] -= 1
        if self.deps_left[key] == 0:
            self._mark_ready(key)

    # -- dispatch ----------------------------------------------------------

    def _candidate(self, group, t, pipe_idx):
        """Highest-priority ready task of one pipe on this group: backward
        before forward (the 1F1B alternation of the stable phase), oldest
        micro-batch first, a micro-batch's extra forward pass before its
        main one."""
        best = None
        for item in self.ready[group]:
            phase, is_fwd, micro, key = item
            if key[0] != pipe_idx or self.arrival[key] > t:
                continue
            kind, stage = key[1], key[3]
            rank = (0 if kind == "bwd" else 1, micro, _PHASE_RANK[kind], stage)
            if best is None or rank < best[0]:
                best = (rank, item)
        return best

    def _dispatch(self, group, t):
        picks = [(pi, self._candidate(group, t, pi)) for pi in range(len(self.pipes))]
        picks = [(pi, c) for pi, c in picks if c is not None]
        if not picks:
            return False
        if len(picks) == 1:
            pipe_idx, (rank, item) = picks[0]
        else:
            prefer = DOWN if self.last_dir[group] == UP else UP
            chosen = [p for p in picks if self.pipes[p[0]].direction == prefer]
            pipe_idx, (rank, item) = chosen[0] if chosen else picks[0]
        self.ready[group].remove(item)
        _, _, micro, key = item
        kind, stage = key[1], key[3]
        pipe = self.pipes[pipe_idx]
        self.last_dir[group] = pipe.direction
        dur = {"fwd": pipe.fwd[stage], "fwd_sc": pipe.fwd[stage], "bwd": pipe.bwd[stage]}[kind]
        start, end = t, t + dur
        self.busy[group] = end
        self.committed.append((pipe_idx, kind, micro, stage, group, start, end))
        self.remaining -= 1
        if kind == "bwd" and micro == pipe.micro_batches - 1 and pipe.sync[stage] > 0:
            # gradient sync runs on the comm lane from the final backward's
            # start: per-layer gradients stream out as they are produced
            self.comm_tasks.append(
                (pipe_idx, "sync", None, stage, group, start, start + pipe.sync[stage], "")
            )
        self._complete(pipe_idx, kind, micro, stage, end)
        heappush(self.events, end)
        return True

    def _comm(self, pipe_idx, micro, to_stage, at, dur, tag):
        group = self.pipes[pipe_idx].groups[to_stage]
        kind = "feedback_comm" if tag == "feedback" else "p2p_comm"
        if dur > 0:
            self.comm_tasks.append((pipe_idx, kind, micro, to_stage, group, at, at + dur, tag))
        return at + dur

    def _complete(self, pipe_idx, kind, micro, stage, end):
        pipe = self.pipes[pipe_idx]
        S = pipe.num_stages
        if kind == "fwd_sc":
            if stage < S - 1:
                at = self._comm(pipe_idx, micro, stage + 1, end, pipe.fwd_out_comm[stage], "fwd_sc")
                self._satisfy(self._key(pipe_idx, "fwd_sc", micro, stage + 1), at)
            else:
                at = self._comm(pipe_idx, micro, 0, end, pipe.feedback, "feedback")
                self._satisfy(self._key(pipe_idx, "fwd", micro, 0), at)
        elif kind == "fwd":
            if stage < S - 1:
                at = self._comm(pipe_idx, micro, stage + 1, end, pipe.fwd_out_comm[stage], "fwd")
                self._satisfy(self._key(pipe_idx, "fwd", micro, stage + 1), at)
            self._satisfy(self._key(pipe_idx, "bwd", micro, stage), end)
        else:  # bwd
            if stage > 0:
                at = self._comm(pipe_idx, micro, stage - 1, end, pipe.bwd_out_comm[stage - 1], "bwd")
                self._satisfy(self._key(pipe_idx, "bwd", micro, stage - 1), at)

    def run(self):
        self.setup()
        heappush(self.events, 0.0)
        guard = 16 * (self.remaining + 1) * (self.num_groups + 2) + 64
        while self.events and self.remaining:
            t = heappop(self.events)
            while self.events and self.events[0] == t:
                heappop(self.events)
            for group in range(self.num_groups):
                while self.busy[group] <= t and self._dispatch(group, t):
                    pass
            guard -= 1
            if guard < 0:
                raise RuntimeError("simulation failed to converge (dispatch deadlock?)")
        if self.remaining:
            raise RuntimeError("simulation deadlocked with tasks pending")
        return self.committed, self.comm_tasks


def _pipe_from_plan(plan: PartitionPlan, profile: ModelProfile, cluster: ClusterConfig,
                    direction: str, selfcond: bool, p2p_factor: float) -> _PipeSpec:
    stages = plan.stages_down if direction == DOWN else plan.stages_up
    backbone = stages[0].backbone
    costs = _BackboneCosts(profile.backbones[backbone], cluster, plan.config.micro_batch,
                           p2p_factor=p2p_factor)
    evals = []
    for assign in stages:
        ev = costs.stage(assign.layer_range[0], assign.layer_range[1], assign.replicas)
        if ev is None:
            raise ValidationError(
                f"stage {assign.layer_range} at r={assign.replicas} cannot be costed"
            )
        evals.append(ev)
    S = len(stages)
    if direction == DOWN:
        groups = tuple(range(S))
    else:
        groups = tuple(S - 1 - j for j in range(S))
    feedback = plan.feedback_time if selfcond else 0.0
    return _PipeSpec(
        direction=direction,
        groups=groups,
        fwd=tuple(ev.fwd for ev in evals),
        bwd=tuple(ev.bwd for ev in evals),
        fwd_out_comm=tuple(ev.fwd_comm for ev in evals),
        bwd_out_comm=tuple(ev.bwd_comm for ev in evals),
        sync=tuple(ev.t_sync for ev in evals),
        micro_batches=plan.config.num_microbatches,
        selfcond=selfcond,
        feedback=feedback,
    )


def _group_offsets(plan: PartitionPlan) -> list[int]:
    offsets, acc = [], 0
    for assign in plan.stages_down:
        offsets.append(acc)
        acc += assign.replicas
    return offsets


def _expand(plan: PartitionPlan, pipes: list[_PipeSpec], committed, comm_tasks) -> Schedule:
    offsets = _group_offsets(plan)
    reps = [s.replicas for s in plan.stages_down]
    tasks = []
    for pipe_idx, kind, micro, stage, group, start, end in committed:
        direction = pipes[pipe_idx].direction
        for dev in range(offsets[group], offsets[group] + reps[group]):
            tasks.append(Task(device=dev, kind=kind, micro_batch=micro, stage=stage,
                              direction=direction, start=start, end=end))
    for pipe_idx, kind, micro, stage, group, start, end, tag in comm_tasks:
        direction = pipes[pipe_idx].direction
        for dev in range(offsets[group], offsets[group] + reps[group]):
            tasks.append(Task(device=dev, kind=kind, micro_batch=micro, stage=stage,
                              direction=direction, start=start, end=end, tag=tag))
    tasks.sort(key=lambda t: (t.device, t.start, t.end, t.kind,
                              t.micro_batch if t.micro_batch is not None else -1))
    makespan = max((t.end for t in tasks), default=0.0)
    return Schedule(tasks=tasks, makespan=makespan, device_count=plan.config.group_size)


def build_schedule(plan: PartitionPlan, profile: ModelProfile, cluster: ClusterConfig,
                   *, selfcond: bool | None = None) -> Schedule:
    """Simulate the FIFO-1F1B schedule of a single-backbone plan.

    ``selfcond`` overrides the plan's flag, so the same partition can be
    simulated with and without the extra forward pass.
    """
    if plan.stages_up:
        raise ValueError("build_schedule expects a single-direction plan")
    sc = plan.config.selfcond if selfcond is None else selfcond
    pipe = _pipe_from_plan(plan, profile, cluster, DOWN, sc, p2p_factor=1.0)
    committed, comms = _Simulator(len(pipe.groups), [pipe]).run()
    return _expand(plan, [pipe], committed, comms)


def build_bidirectional_schedule(plan: PartitionPlan, profile: ModelProfile,
                                 cluster: ClusterConfig) -> Schedule:
    """Simulate both pipelines of a bidirectional plan over shared groups.

    Point-to-point transfer durations carry the same doubled bandwidth term
    the partitioner used, so the simulated makespan stays comparable to the
    plan objective. A plan without up-direction stages degenerates to the
    plain single-pipeline schedule.
    """
    if not plan.stages_up:
        return build_schedule(plan, profile, cluster)
    down = _pipe_from_plan(plan, profile, cluster, DOWN, False, p2p_factor=2.0)
    up = _pipe_from_plan(plan, profile, cluster, UP, False, p2p_factor=2.0)
    committed, comms = _Simulator(len(down.groups), [down, up]).run()
    return _expand(plan, [down, up], committed, comms)


@lru_cache(maxsize=None)
def m_cdm(num_stages: int, micro_batches: int) -> int:
    """Stable-phase slot count of the bidirectional schedule.

    Counted by simulating both pipelines with unit-cost stages: forward and
    backward compute each take half a slot, and so does each boundary
    transfer, so a stage's compute pair and a boundary's transfer pair both
    fill exactly the one slot the objective multiplies by. The warm-up and
    cool-down slots are subtracted from the unit makespan. Replaceable: the
    partitioner accepts any ``m_cdm_fn(S, M)``.
    """
    S, M = num_stages, micro_batches
    unit = dict(fwd=(0.5,) * S, bwd=(0.5,) * S, fwd_out_comm=(0.5,) * S,
                bwd_out_comm=(0.5,) * S, sync=(0.0,) * S, micro_batches=M)
    down = _PipeSpec(direction=DOWN, groups=tuple(range(S)), **unit)
    up = _PipeSpec(direction=UP, groups=tuple(S - 1 - j for j in range(S)), **unit)
    committed, _ = _Simulator(S, [down, up]).run()
    makespan = max(end for *rest, end in committed)
    counted = math.ceil(makespan - 1e-9) - (2 * S - 2)
    # a group owns M forward+backward pairs per direction, so 2M slots are
    # needed once stage costs diverge and the directions' phases misalign;
    # the unit count can sit one fractional slot short of that
    return max(counted, 2 * M)


def _busy_intervals(schedule: Schedule) -> list[list[tuple[float, float]]]:
    per_device: list[list[tuple[float, float]]] = [[] for _ in range(schedule.device_count)]
    for task in schedule.tasks:
        if task.kind in COMPUTE_KINDS and task.end > task.start:
            per_device[task.device].append((task.start, task.end))
    merged = []
    for intervals in per_device:
        intervals.sort()
        out: list[tuple[float, float]] = []
        for start, end in intervals:
            if out and start <= out[-1][1]:
                out[-1] = (out[-1][0], max(out[-1][1], end))
            else:
                out.append((start, end))
        merged.append(out)
    return merged


def extract_bubbles(schedule: Schedule, min_len: float = MIN_BUBBLE_LEN) -> list[Bubble]:
    """Maximal idle intervals with a constant idle-device set.

    The timeline is split at every compute-task boundary; adjacent segments
    with identical idle sets merge, and bubbles shorter than ``min_len``
    are dropped. Communication-lane tasks do not make a device busy: frozen
    work may overlap transfers and synchronization.
    """
    if schedule.makespan <= 0:
        return []
    busy = _busy_intervals(schedule)
    boundaries = {0.0, schedule.makespan}
    for intervals in busy:
        for start, end in intervals:
            boundaries.add(start)
            boundaries.add(end)
    points = sorted(b for b in boundaries if 0.0 <= b <= schedule.makespan)
    cursors = [0] * schedule.device_count
    bubbles: list[Bubble] = []
    for lo, hi in zip(points, points[1:]):
        idle = set()
        for dev in range(schedule.device_count):
            intervals = busy[dev]
            i = cursors[dev]
            while i < len(intervals) and intervals[i][1] <= lo:
                i += 1
            cursors[dev] = i
            if i >= len(intervals) or intervals[i][0] >= hi:
                idle.add(dev)
        if not idle:
            continue
        idle_set = frozenset(idle)
        if bubbles and bubbles[-1].end == lo and bubbles[-1].idle_devices == idle_set:
            bubbles[-1] = Bubble(bubbles[-1].start, hi, idle_set)
        else:
            bubbles.append(Bubble(lo, hi, idle_set))
    return [b for b in bubbles if b.duration >= min_len and b.duration > 0]


def bubble_ratio(schedule: Schedule, bubbles: list[Bubble]) -> float:
    """Idle device-time of ``bubbles`` as a fraction of total device-time."""
    if schedule.makespan <= 0:
        return 0.0
    idle = sum(b.duration * len(b.idle_devices) for b in bubbles)
    return idle / (schedule.makespan * schedule.device_count)


def busy_device_time(schedule: Schedule) -> float:
    """Total compute-lane busy time summed over devices."""
    return sum(
        t.end - t.start for t in schedule.tasks if t.kind in COMPUTE_KINDS
    )


def critical_path(schedule: Schedule, tol: float = 1e-12):
    """Longest gapless chain of compute tasks (by duration, then length).

    Chains follow contact edges: task b may follow task a when b starts
    exactly where a ends. In a pipeline schedule such chains are exactly
    the dependency/occupancy paths, so the longest one realizes the
    makespan. Returns (duration, task_count).
    """
    tasks = sorted(
        (t for t in schedule.tasks if t.kind in COMPUTE_KINDS),
        key=lambda t: (t.start, t.end),
    )
    # deduplicate replicated tasks: replicas share identical timing
    seen = set()
    unique = []
    for t in tasks:
        key = (t.kind, t.direction, t.micro_batch, t.stage, t.start, t.end)
        if key not in seen:
            seen.add(key)
            unique.append(t)
    best = (0.0, 0)
    ending: dict[int, tuple[float, int]] = {}
    for i, t in enumerate(unique):
        incoming = (0.0, 0)
        if t.start > tol:
            for j in range(i):
                if abs(unique[j].end - t.start) <= tol and ending[j] > incoming:
                    incoming = ending[j]
        ending[i] = (incoming[0] + t.duration, incoming[1] + 1)
        if ending[i] > best:
            best = ending[i]
    return best


def export_trace(schedule: Schedule, path) -> int:
    """Write the schedule as a trace-event document (one complete event per
    task, device as lane, kind as category); returns the event count.

    Compute tasks use lane ``2 * device``; communication-lane tasks use
    ``2 * device + 1``. Timestamps and durations are microseconds.
    """
    events = []
    for task in schedule.tasks:
        lane = 2 * task.device + (1 if task.kind in COMM_KINDS else 0)
        bits = [task.kind]
        if task.micro_batch is not None:
            bits.append(f"m{task.micro_batch}")
        if task.stage is not None:
            bits.append(f"s{task.stage}")
        events.append({
            "name": " ".join(bits),
            "cat": task.kind,
            "ph": "X",
            "ts": task.start * 1e6,
            "dur": (task.end - task.start) * 1e6,
            "pid": 0,
            "tid": lane,
            "args": {
                "device": task.device,
                "direction": task.direction,
                "micro_batch": task.micro_batch,
                "stage": task.stage,
                "tag": task.tag,
            },
        })
    events.sort(key=lambda e: (e["tid"], e["ts"], e["dur"], e["name"]))
    doc = {"traceEvents": events, "displayTimeUnit": "ms"}
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=1, sort_keys=True)
        handle.write("\n")
    return len(events)
