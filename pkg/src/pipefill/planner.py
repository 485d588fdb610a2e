"""Hyper-parameter search and plan reporting.

For every feasible combination of stage count S, micro-batch count M and
pipeline group size D, the planner partitions the backbone(s), simulates
the schedule, fills its bubbles with frozen-component work, and scores the
point by predicted iteration time (post-fill makespan plus tail). The
report for the best point, the plan document writer/loader, and the search
diagnostics live here.

The cluster's global batch splits evenly over the ``world_size / D`` data
parallel replicas of the pipeline group, so each point plans one group at
per-group batch ``B * D / world_size``; cluster throughput is the group
count times the group's samples per second. Points are evaluated
independently (they share no state, so they could run concurrently) and
reduced with a deterministic lexicographic (S, M, D) tie-break.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from . import filler, scheduler
from .errors import InfeasibleError, NoFeasiblePlanError, ParseError, ValidationError
from .filler import FillPlan
from .partitioner import (
    PartitionPlan,
    PlanConfig,
    partition_bidirectional,
    partition_single,
)
from .profile import ClusterConfig, ModelProfile
from .scheduler import Schedule, bubble_ratio, extract_bubbles

PLAN_FORMAT = "pipeline-plan/v1"

MODE_SINGLE = "single"
MODE_SELFCOND = "selfcond"
MODE_BIDIRECTIONAL = "bidirectional"

DEFAULT_MICROBATCHES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class SearchSpace:
    """Grid of pipeline hyper-parameters to evaluate, plus the cluster-wide
    training batch size."""

    stage_counts: tuple[int, ...]
    microbatch_counts: tuple[int, ...]
    group_sizes: tuple[int, ...]
    global_batch: int

    def __post_init__(self):
        for name in ("stage_counts", "microbatch_counts", "group_sizes"):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values or any(not isinstance(v, int) or v < 1 for v in values):
                raise ValidationError(f"SearchSpace.{name} must be non-empty positive integers")
        if not (isinstance(self.global_batch, int) and self.global_batch >= 1):
            raise ValidationError("SearchSpace.global_batch must be a positive integer")

    def points(self):
        return sorted(itertools.product(self.stage_counts, self.microbatch_counts,
                                        self.group_sizes))


def default_search_space(profile: ModelProfile, cluster: ClusterConfig,
                         global_batch: int) -> SearchSpace:
    """Small default grid: group sizes are divisors of the world size,
    stage counts are divisors of each group size bounded by the backbone
    depth, micro-batch counts a fixed ladder."""
    world = cluster.world_size
    group_sizes = [d for d in range(1, world + 1) if world % d == 0]
    max_stages = min(len(b.layers) for b in profile.backbones)
    stage_counts = sorted({s for d in group_sizes for s in range(1, d + 1)
                           if d % s == 0 and s <= max_stages})
    return SearchSpace(
        stage_counts=tuple(stage_counts),
        microbatch_counts=DEFAULT_MICROBATCHES,
        group_sizes=tuple(group_sizes),
        global_batch=global_batch,
    )


@dataclass
class PlanReport:
    """Best plan of a search with its simulated schedule and fill.

    ``schedule`` is the post-fill schedule of one pipeline group.
    ``predicted_iter_time`` is its makespan plus the tail time of frozen
    work that no bubble accommodated. ``bubble_ratio_before`` is idle
    device-time over the bare trainable schedule; ``bubble_ratio_after``
    divides the residual idle by the full predicted iteration. When the
    profile enables self-conditioning, the simulated schedule is the
    activated variant while the plan objective stays the expectation.
    """

    plan: PartitionPlan
    schedule: Schedule
    fill: FillPlan
    predicted_iter_time: float
    bubble_ratio_before: float
    bubble_ratio_after: float
    throughput: float
    mode: str
    cluster: ClusterConfig
    world_batch: int
    bubble_min_len: float
    evaluated: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


def _planning_mode(profile: ModelProfile) -> str:
    if len(profile.backbones) == 2:
        return MODE_BIDIRECTIONAL
    return MODE_SELFCOND if profile.selfcond_prob > 0 else MODE_SINGLE


def _point_reason(profile, cluster, space, mode, S, M, D, equal_replication):
    world = cluster.world_size
    if world % D != 0:
        return f"group size {D} does not divide world size {world}"
    replicas = world // D
    if space.global_batch % replicas != 0:
        return f"global batch {space.global_batch} not divisible by {replicas} group replicas"
    group_batch = space.global_batch // replicas
    if group_batch % M != 0:
        return f"per-group batch {group_batch} not divisible by {M} micro-batches"
    if S > D:
        return f"{S} stages exceed group size {D}"
    if equal_replication and D % S != 0:
        return f"{S} stages do not divide group size {D} for equal replication"
    max_stages = min(len(b.layers) for b in profile.backbones)
    if S > max_stages:
        return f"{S} stages exceed the {max_stages}-layer backbone"
    return None


def evaluate_point(profile: ModelProfile, cluster: ClusterConfig, S: int, M: int, D: int,
                   world_batch: int, *, mode: str | None = None,
                   bubble_min_len: float = scheduler.MIN_BUBBLE_LEN,
                   equal_replication: bool = True):
    """Plan, simulate, and fill one (S, M, D) point. Returns a dict of the
    point's artifacts; raises InfeasibleError and friends on failure."""
    if mode is None:
        mode = _planning_mode(profile)
    if cluster.world_size % D != 0:
        raise InfeasibleError(f"group size {D} does not divide world size {cluster.world_size}")
    replicas = cluster.world_size // D
    if world_batch % replicas != 0:
        raise InfeasibleError(
            f"global batch {world_batch} not divisible by {replicas} group replicas"
        )
    group_batch = world_batch // replicas
    cfg = PlanConfig(num_stages=S, num_microbatches=M, group_size=D,
                     global_batch=group_batch, selfcond=(mode == MODE_SELFCOND))
    if mode == MODE_BIDIRECTIONAL:
        plan = partition_bidirectional(profile, cluster, cfg,
                                       equal_replication=equal_replication)
        schedule = scheduler.build_bidirectional_schedule(plan, profile, cluster)
        fill_batch = group_batch  # each direction carries the full group batch
    else:
        plan = partition_single(profile, cluster, cfg, equal_replication=equal_replication)
        schedule = scheduler.build_schedule(plan, profile, cluster)
        fill_batch = group_batch
    fill_bubbles = extract_bubbles(schedule, bubble_min_len)
    fill = filler.fill_all(fill_bubbles, profile, fill_batch, schedule)
    post = filler.apply_fill_plan(schedule, fill)
    before = bubble_ratio(schedule, extract_bubbles(schedule, 0.0))
    residual_idle = sum(b.duration * len(b.idle_devices)
                        for b in extract_bubbles(post, 0.0))
    iter_time = post.makespan + fill.tail_time
    after = residual_idle / (iter_time * D) if iter_time > 0 else 0.0
    throughput = (cluster.world_size // D) * group_batch / iter_time if iter_time > 0 else 0.0
    return {
        "plan": plan,
        "schedule": post,
        "pre_fill_schedule": schedule,
        "fill": fill,
        "predicted_iter_time": iter_time,
        "bubble_ratio_before": before,
        "bubble_ratio_after": after,
        "throughput": throughput,
        "mode": mode,
    }


def search(profile: ModelProfile, cluster: ClusterConfig, space: SearchSpace, *,
           bubble_min_len: float = scheduler.MIN_BUBBLE_LEN,
           equal_replication: bool = True) -> PlanReport:
    """Evaluate every feasible grid point and return the report with the
    minimum predicted iteration time (ties broken by smallest (S, M, D))."""
    mode = _planning_mode(profile)
    evaluated, diagnostics = [], []
    best = None
    for S, M, D in space.points():
        reason = _point_reason(profile, cluster, space, mode, S, M, D, equal_replication)
        if reason is None:
            try:
                result = evaluate_point(
                    profile, cluster, S, M, D, space.global_batch, mode=mode,
                    bubble_min_len=bubble_min_len, equal_replication=equal_replication,
                )
            except (InfeasibleError, ValidationError) as exc:
                reason = str(exc)
        if reason is not None:
            diagnostics.append({"point": [S, M, D], "reason": reason})
            continue
        evaluated.append({
            "point": [S, M, D],
            "predicted_iter_time": result["predicted_iter_time"],
            "objective": result["plan"].objective,
            "throughput": result["throughput"],
        })
        key = (result["predicted_iter_time"], (S, M, D))
        if best is None or key < best[0]:
            best = (key, result)
    if best is None:
        lines = "; ".join(f"S={p['point'][0]} M={p['point'][1]} D={p['point'][2]}: {p['reason']}"
                          for p in diagnostics)
        raise NoFeasiblePlanError(f"no feasible plan in the search space ({lines})",
                                  diagnostics)
    _, result = best
    return PlanReport(
        plan=result["plan"],
        schedule=result["schedule"],
        fill=result["fill"],
        predicted_iter_time=result["predicted_iter_time"],
        bubble_ratio_before=result["bubble_ratio_before"],
        bubble_ratio_after=result["bubble_ratio_after"],
        throughput=result["throughput"],
        mode=result["mode"],
        cluster=cluster,
        world_batch=space.global_batch,
        bubble_min_len=bubble_min_len,
        evaluated=evaluated,
        diagnostics=diagnostics,
    )


def plan_document(report: PlanReport) -> dict:
    """The canonical JSON-safe form of a report; deterministic for
    identical inputs, and exactly what ``load_plan`` returns."""
    plan, cfg = report.plan, report.plan.config
    comm = report.cluster.comm
    stages = []
    for assign, costs in zip(plan.stages, plan.per_stage):
        stages.append({
            "backbone": assign.backbone,
            "direction": assign.direction,
            "layers": [assign.layer_range[0], assign.layer_range[1]],
            "replicas": assign.replicas,
            "t0": costs.t0,
            "t_sync": costs.t_sync,
            "t_comp": costs.t_comp,
            "gap": costs.gap,
        })
    kind_counts: dict[str, int] = {}
    for task in report.schedule.tasks:
        kind_counts[task.kind] = kind_counts.get(task.kind, 0) + 1
    fills = []
    for f in report.fill.fills:
        if f.fill_time <= 0 and not f.full_layers and f.partial is None:
            continue
        fills.append({
            "bubble": {
                "start": f.bubble.start,
                "end": f.bubble.end,
                "devices": sorted(f.bubble.idle_devices),
            },
            "full_layers": {str(c): layers for c, layers in sorted(f.full_layers.items())},
            "partial": None if f.partial is None else {
                "component": f.partial.component,
                "layer": f.partial.layer,
                "samples": f.partial.samples,
            },
            "fill_time": f.fill_time,
        })
    doc = {
        "format": PLAN_FORMAT,
        "config": {
            "mode": report.mode,
            "num_stages": cfg.num_stages,
            "num_microbatches": cfg.num_microbatches,
            "group_size": cfg.group_size,
            "group_batch": cfg.global_batch,
            "micro_batch": cfg.micro_batch,
            "world_batch": report.world_batch,
            "world_size": report.cluster.world_size,
            "selfcond": cfg.selfcond,
            "selfcond_prob": plan.selfcond_prob,
            "bubble_min_len": report.bubble_min_len,
            "equal_replication": len({s.replicas for s in plan.stages}) <= 1,
        },
        "cluster": {
            "world_size": report.cluster.world_size,
            "bandwidth_ar": comm.bandwidth_ar,
            "latency_ar": comm.latency_ar,
            "bandwidth_p2p": comm.bandwidth_p2p,
            "latency_p2p": comm.latency_p2p,
        },
        "objective": {
            "value": plan.objective,
            "t_max": plan.t_max,
            "t_max_sc": plan.t_max_sc,
            "feedback_time": plan.feedback_time,
            "m_cdm": plan.m_cdm,
        },
        "stages": stages,
        "schedule_summary": {
            "makespan": report.schedule.makespan,
            "device_count": report.schedule.device_count,
            "task_counts": dict(sorted(kind_counts.items())),
            "busy_device_time": scheduler.busy_device_time(report.schedule),
        },
        "fills": fills,
        "tail": [
            {"component": t.component, "layer": t.layer, "samples": t.samples, "time": t.time}
            for t in report.fill.tail
        ],
        "metrics": {
            "predicted_iter_time": report.predicted_iter_time,
            "bubble_ratio_before": report.bubble_ratio_before,
            "bubble_ratio_after": report.bubble_ratio_after,
            "throughput": report.throughput,
            "tail_time": report.fill.tail_time,
            "residual_bubble_time": report.fill.residual_bubble_time,
        },
        "search": {
            "evaluated": report.evaluated,
            "failed": report.diagnostics,
        },
    }
    return doc


def emit_plan(report: PlanReport, path) -> dict:
    """Write the plan document; identical reports produce byte-identical
    files. Returns the document."""
    doc = plan_document(report)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(doc, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise ParseError(f"cannot write plan to {path}: {exc}") from exc
    return doc


def load_plan(path) -> dict:
    """Read a plan document back; equals the ``plan_document`` that wrote it."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ParseError(f"cannot read plan {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"plan {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != PLAN_FORMAT:
        raise ParseError(f"{path} is not a {PLAN_FORMAT} document")
    return doc
