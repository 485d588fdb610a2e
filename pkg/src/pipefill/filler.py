"""Filling pipeline bubbles with frozen-component computation.

Frozen components run forward-only and, under cross-iteration overlap, the
next iteration's frozen work may occupy the current iteration's pipeline
bubbles. Bubbles are filled in chronological order. For each bubble the
filler enumerates every way of packing whole ("full-batch") layer prefixes
of the ready components into the available time, then tries to extend each
packing with at most one extra layer run on a reduced sample count (a
"partial batch"), and keeps the combination with the longest execution time
that still fits. Layers assigned to a bubble run data-parallel on the
bubble's idle devices, so a layer over ``d`` idle devices is costed at
local batch ``samples / d``.

A partially processed layer stays at the front of its component and is
treated as a full-batch layer on its remaining samples in later bubbles,
so one long layer may spread over several bubbles. Work that no bubble
accommodates is left to a tail executed after the pipeline flush.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ExtrapolationError
from .profile import ModelProfile, cost_at
from .scheduler import Bubble, Schedule, Task

#: Allowed per-device sample counts for a partial-batch layer; regular
#: sizes keep kernels efficient and bound the bookkeeping overhead.
VALID_LOCAL_SIZES = (4, 8, 12, 16, 24, 32, 48, 64, 96)

_SIZES_DESC = tuple(sorted(VALID_LOCAL_SIZES, reverse=True))


@dataclass(frozen=True)
class PartialAssignment:
    """A layer run on ``samples`` < remaining samples inside one bubble."""

    component: int
    layer: int
    samples: int


@dataclass
class BubbleFill:
    """What one bubble executes: per-component full-batch layer runs plus
    at most one partial-batch layer. ``full_samples`` records how many
    samples each full-batch run processed (the layer's whole remainder)."""

    bubble: Bubble
    full_layers: dict[int, list[int]] = field(default_factory=dict)
    full_samples: dict[tuple[int, int], int] = field(default_factory=dict)
    partial: PartialAssignment | None = None
    fill_time: float = 0.0


@dataclass(frozen=True)
class TailWork:
    """Leftover samples of one layer, run data-parallel after the flush."""

    component: int
    layer: int
    samples: int
    time: float


@dataclass
class FillPlan:
    fills: list[BubbleFill]
    tail: list[TailWork]
    residual_bubble_time: float
    tail_time: float


class FillState:
    """Progress of frozen-component execution across bubbles.

    ``cursor[c]`` is component c's next unfinished layer; ``remaining[c][l]``
    the samples of layer l still unprocessed. A component becomes ready
    once every dependency predecessor completed, and completed once its
    cursor passes the last layer. Cursors only advance and remaining
    counts only decrease.
    """

    def __init__(self, profile: ModelProfile, global_batch: int):
        self.profile = profile
        self.global_batch = global_batch
        self.cursor = [0] * len(profile.frozen)
        self.remaining = [[global_batch] * len(c.layers) for c in profile.frozen]
        self.completed: set[int] = set()
        self.ready: set[int] = set()
        self._preds: dict[int, set[int]] = {i: set() for i in range(len(profile.frozen))}
        for producer, consumer in profile.frozen_dep_indices():
            self._preds[consumer].add(producer)
        self.promote()

    def promote(self) -> None:
        """Mark components complete and admit the ones whose dependencies
        are now resolved."""
        for idx, comp in enumerate(self.profile.frozen):
            if idx not in self.completed and self.cursor[idx] >= len(comp.layers):
                self.completed.add(idx)
                self.ready.discard(idx)
        for idx in range(len(self.profile.frozen)):
            if idx in self.completed or idx in self.ready:
                continue
            if self._preds[idx] <= self.completed:
                self.ready.add(idx)

    def ready_order(self) -> list[int]:
        return sorted(self.ready)

    def layer_time(self, comp: int, layer: int, d: int) -> float | None:
        """Time to run the layer's remaining samples over d devices; None
        when the profile does not cover that local batch size."""
        samples = self.remaining[comp][layer]
        if samples <= 0:
            return 0.0
        try:
            return cost_at(self.profile.frozen[comp].layers[layer], "fwd_time", samples / d)
        except ExtrapolationError:
            return None

    def partial_time(self, comp: int, layer: int, local: int) -> float | None:
        try:
            return cost_at(self.profile.frozen[comp].layers[layer], "fwd_time", local)
        except ExtrapolationError:
            return None


def ffc(state: FillState, budget: float, d: int, component: int = 0) -> list[tuple[tuple[int, ...], float]]:
    """Full-batch layer filling candidates.

    Enumerates, over the ready components from position ``component``
    onward, every vector of per-component layer-prefix lengths whose
    cumulative execution time at local batch ``samples / d`` fits in
    ``budget``; the last component always takes its maximal fitting prefix.
    Returns (prefix_lengths, total_time) pairs.
    """
    comps = state.ready_order()
    if component >= len(comps):
        return [((), 0.0)]
    return _ffc(state, budget, d, comps, component, 0.0, all_last=False)


def _ffc(state, budget, d, comps, i, used, all_last):
    comp = comps[i]
    num_layers = len(state.profile.frozen[comp].layers)
    cursor = state.cursor[comp]
    prefix = [used]  # cumulative time after taking k layers
    k0 = 0
    while cursor + k0 < num_layers:
        cost = state.layer_time(comp, cursor + k0, d)
        if cost is None or prefix[-1] + cost > budget:
            break
        prefix.append(prefix[-1] + cost)
        k0 += 1
    if i == len(comps) - 1:
        if not all_last:
            return [((k0,), prefix[k0])]
        return [((k,), prefix[k]) for k in range(k0, -1, -1)]
    out = []
    for k in range(k0, -1, -1):
        for vec, total in _ffc(state, budget, d, comps, i + 1, prefix[k], all_last):
            out.append(((k,) + vec, total))
    return out


def _better(a, b):
    """Candidate preference: longest time, then no partial over partial,
    then greedier prefixes on earlier components, then the partial on the
    earliest component."""
    if a[0] != b[0]:
        return a[0] > b[0]
    a_partial, b_partial = a[2], b[2]
    if (a_partial is None) != (b_partial is None):
        return a_partial is None
    if a[1] != b[1]:
        return a[1] > b[1]
    if a_partial is not None and a_partial[0] != b_partial[0]:
        return a_partial[0] < b_partial[0]
    return False


def fill_bubble(state: FillState, global_batch: int, bubble: Bubble,
                d: int | None = None) -> BubbleFill:
    """Fill one bubble and advance the fill state.

    Every feasible full-batch prefix vector is extended with the largest
    valid partial-batch layer that still fits (per-device sizes from
    ``VALID_LOCAL_SIZES``, strictly fewer samples than the layer has
    remaining); the overall longest-running combination wins. The search
    covers sub-maximal prefixes of the last ready component too, not just
    the ``ffc`` candidates: partial sizes are discrete, so dropping one
    full-batch layer can free exactly the room a larger partial on another
    component needs. An empty fill is legal when nothing fits.
    """
    if d is None:
        d = len(bubble.idle_devices)
    budget = bubble.duration
    comps = state.ready_order()
    fill = BubbleFill(bubble=bubble)
    if not comps or budget <= 0 or d < 1:
        return fill
    best = (0.0, (0,) * len(comps), None)
    for vec, base in _ffc(state, budget, d, comps, 0, 0.0, all_last=True):
        if _better((base, vec, None), best):
            best = (base, vec, None)
        for h, comp in enumerate(comps):
            layer = state.cursor[comp] + vec[h]
            if layer >= len(state.profile.frozen[comp].layers):
                continue
            rem = state.remaining[comp][layer]
            for local in _SIZES_DESC:
                samples = local * d
                if samples >= rem:
                    continue
                cost = state.partial_time(comp, layer, local)
                if cost is None or base + cost > budget:
                    continue
                cand = (base + cost, vec, (comp, layer, samples))
                if _better(cand, best):
                    best = cand
                break
    total, vec, partial = best
    for h, comp in enumerate(comps):
        k = vec[h]
        if k == 0:
            continue
        cursor = state.cursor[comp]
        layers = list(range(cursor, cursor + k))
        fill.full_layers[comp] = layers
        for layer in layers:
            fill.full_samples[(comp, layer)] = state.remaining[comp][layer]
            state.remaining[comp][layer] = 0
        state.cursor[comp] = cursor + k
    if partial is not None:
        comp, layer, samples = partial
        fill.partial = PartialAssignment(component=comp, layer=layer, samples=samples)
        state.remaining[comp][layer] -= samples
    fill.fill_time = total
    return fill


def fill_all(bubbles: list[Bubble], profile: ModelProfile, global_batch: int,
             schedule: Schedule) -> FillPlan:
    """Fill bubbles chronologically, promoting components as their
    dependencies complete; whatever remains becomes tail work costed
    data-parallel over all of the schedule's devices."""
    state = FillState(profile, global_batch)
    fills = []
    for bubble in bubbles:
        fills.append(fill_bubble(state, global_batch, bubble))
        state.promote()
    tail = []
    for comp, component in enumerate(profile.frozen):
        for layer in range(len(component.layers)):
            samples = state.remaining[comp][layer]
            if samples > 0:
                time = _clamped_layer_time(component.layers[layer],
                                           samples / schedule.device_count)
                tail.append(TailWork(component=comp, layer=layer, samples=samples, time=time))
    residual = sum(f.bubble.duration - f.fill_time for f in fills)
    return FillPlan(
        fills=fills,
        tail=tail,
        residual_bubble_time=residual,
        tail_time=sum(t.time for t in tail),
    )


def _clamped_layer_time(layer, local: float) -> float:
    # tail work must always be costable: clamp to the profiled range
    keys = sorted(layer.fwd_time)
    local = min(max(local, keys[0]), keys[-1])
    return cost_at(layer, "fwd_time", local)


def apply_fill_plan(schedule: Schedule, plan: FillPlan) -> Schedule:
    """Stamp fill tasks onto a copy of the schedule: each non-empty fill
    occupies its bubble's idle devices from the bubble start."""
    tasks = list(schedule.tasks)
    for fill in plan.fills:
        if fill.fill_time <= 0:
            continue
        for dev in sorted(fill.bubble.idle_devices):
            tasks.append(Task(
                device=dev, kind="fill", micro_batch=None, stage=None,
                direction="down", start=fill.bubble.start,
                end=fill.bubble.start + fill.fill_time,
            ))
    tasks.sort(key=lambda t: (t.device, t.start, t.end, t.kind,
                              t.micro_batch if t.micro_batch is not None else -1))
    makespan = max([schedule.makespan] + [t.end for t in tasks]) if tasks else schedule.makespan
    return Schedule(tasks=tasks, makespan=makespan, device_count=schedule.device_count)
