"""Optimal stage partitioning of trainable backbones.

The planner minimizes an upper bound on pipeline iteration time: the number
of forward+backward slots on the schedule's critical path times the largest
per-stage cost (compute or boundary communication, whichever dominates),
plus the worst per-stage synchronization gap. The aggregated gap term is
clamped at zero so the bound never takes credit for sync time that hides
under compute.

Partitions are found with a dynamic program over (layer prefix, stages,
devices). Because the objective mixes two max-aggregates (slot cost and
sync gap) and, with self-conditioning, a second slot cost, sub-problem
values are kept as small Pareto sets of incomparable cost tuples rather
than scalars; the scalarization happens only at the top level. This keeps
the result exactly equal to exhaustive search.

A brute-force oracle over all cut points and replication splits is provided
for testing; it scores candidates with the same stage-cost evaluations and
the same tie-breaking as the dynamic program.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import ExtrapolationError, InfeasibleError, OracleTooLargeError, ValidationError
from .profile import ClusterConfig, ComponentProfile, ModelProfile, cost_at

DOWN = "down"
UP = "up"


@dataclass(frozen=True)
class PlanConfig:
    """Pipeline hyper-parameters for one plan: stage count, micro-batch
    count, pipeline group size, and the batch processed by one group."""

    num_stages: int
    num_microbatches: int
    group_size: int
    global_batch: int
    micro_batch: int = 0
    selfcond: bool = False

    def __post_init__(self):
        for name in ("num_stages", "num_microbatches", "group_size", "global_batch"):
            value = getattr(self, name)
            if not (isinstance(value, int) and value >= 1):
                raise ValidationError(f"PlanConfig.{name} must be a positive integer, got {value!r}")
        if self.num_stages > self.group_size:
            raise ValidationError(
                f"num_stages ({self.num_stages}) cannot exceed group_size ({self.group_size})"
            )
        if self.global_batch % self.num_microbatches != 0:
            raise ValidationError(
                f"global_batch ({self.global_batch}) not divisible by "
                f"num_microbatches ({self.num_microbatches})"
            )
        derived = self.global_batch // self.num_microbatches
        if self.micro_batch == 0:
            object.__setattr__(self, "micro_batch", derived)
        elif self.micro_batch != derived:
            raise ValidationError(
                f"micro_batch ({self.micro_batch}) != global_batch / num_microbatches ({derived})"
            )


@dataclass(frozen=True)
class StageAssignment:
    """One pipeline stage: a contiguous layer range of one backbone,
    replicated over ``replicas`` consecutive devices."""

    backbone: int
    layer_range: tuple[int, int]
    replicas: int
    direction: str = DOWN

    def __post_init__(self):
        lo, hi = self.layer_range
        if hi <= lo:
            raise ValidationError(f"stage layer_range {self.layer_range} must be non-empty")
        if self.replicas < 1:
            raise ValidationError(f"stage replicas must be >= 1, got {self.replicas}")


@dataclass(frozen=True)
class StageCosts:
    """Per-stage cost summary: slot cost t0, sync time, the backward-compute
    compensation, and their gap (negative when sync fully hides)."""

    t0: float
    t_sync: float
    t_comp: float
    gap: float


@dataclass
class PartitionPlan:
    """A stage partition with its cost bound.

    ``objective`` is the value the partition search minimized: the plain
    bound for a single backbone, the bidirectional bound for two, or the
    activation-probability expectation when self-conditioning is on.
    ``t_max``/``t_max_sc`` keep the non-self-conditioned and
    self-conditioned bounds separately. For bidirectional plans ``stages``
    holds the down-direction stages first, then the up-direction stages,
    both in pipeline flow order; ``per_stage`` is aligned with ``stages``.
    """

    config: PlanConfig
    stages: list[StageAssignment]
    objective: float
    per_stage: list[StageCosts]
    t_max: float
    t_max_sc: float | None = None
    feedback_time: float = 0.0
    m_cdm: int | None = None
    selfcond_prob: float = 0.0

    @property
    def stages_down(self) -> list[StageAssignment]:
        return [s for s in self.stages if s.direction == DOWN]

    @property
    def stages_up(self) -> list[StageAssignment]:
        return [s for s in self.stages if s.direction == UP]


class _BackboneCosts:
    """Cached stage-cost evaluation for one backbone.

    All stage costs are derived from per-layer lookups at local batch
    B / r; a lookup outside the profiled range marks the stage infeasible
    (returned as None) rather than extrapolating. ``p2p_factor`` scales the
    bandwidth term of point-to-point transfers (2 for bidirectional
    pipelines sharing the links).
    """

    def __init__(self, component: ComponentProfile, cluster: ClusterConfig,
                 micro_batch: int, p2p_factor: float = 1.0):
        self.layers = component.layers
        self.num_layers = len(component.layers)
        self.comm = cluster.comm
        self.micro_batch = micro_batch
        self.p2p_factor = p2p_factor
        self._layer_cache: dict[tuple[int, int], tuple | None] = {}
        self._stage_cache: dict[tuple[int, int, int], _StageEval | None] = {}

    def _layer(self, idx: int, r: int):
        key = (idx, r)
        if key not in self._layer_cache:
            local = self.micro_batch // r
            layer = self.layers[idx]
            try:
                self._layer_cache[key] = tuple(
                    cost_at(layer, name, local)
                    for name in ("fwd_time", "bwd_time", "grad_bytes",
                                 "fwd_comm_bytes", "bwd_comm_bytes", "out_bytes")
                )
            except ExtrapolationError:
                self._layer_cache[key] = None
        return self._layer_cache[key]

    def stage(self, lo: int, hi: int, r: int):
        """Evaluate the stage covering layers [lo, hi) on r replicas, or
        None when the configuration cannot be costed from the profile."""
        key = (lo, hi, r)
        if key in self._stage_cache:
            return self._stage_cache[key]
        result = self._eval(lo, hi, r)
        self._stage_cache[key] = result
        return result

    def _eval(self, lo, hi, r):
        if r < 1 or self.micro_batch % r != 0:
            return None
        fwd = bwd = grad = 0.0
        for idx in range(lo, hi):
            costs = self._layer(idx, r)
            if costs is None:
                return None
            fwd += costs[0]
            bwd += costs[1]
            grad += costs[2]
        comm = self.comm
        if hi < self.num_layers:
            boundary = self._layer(hi - 1, r)
            if boundary is None:
                return None
            fwd_comm = self.p2p_factor * boundary[3] / comm.bandwidth_p2p + comm.latency_p2p
            bwd_comm = self.p2p_factor * boundary[4] / comm.bandwidth_p2p + comm.latency_p2p
        else:
            fwd_comm = bwd_comm = 0.0
        t_sync = grad / comm.bandwidth_ar + comm.latency_ar
        t_comp = bwd
        t0 = max(fwd + bwd, fwd_comm + bwd_comm)
        t0_sc = max(2.0 * fwd + bwd, 2.0 * fwd_comm + bwd_comm)
        return _StageEval(
            fwd=fwd, bwd=bwd, fwd_comm=fwd_comm, bwd_comm=bwd_comm,
            t_sync=t_sync, t_comp=t_comp, gap=t_sync - t_comp,
            t0=t0, t0_sc=t0_sc, compute=fwd + bwd,
        )

    def feedback_time(self, r: int):
        """Transfer time of the final layer's output back to the first
        stage (the self-conditioning feedback edge)."""
        last = self._layer(self.num_layers - 1, r)
        if last is None:
            return None
        return last[5] / self.comm.bandwidth_p2p + self.comm.latency_p2p


@dataclass(frozen=True)
class _StageEval:
    fwd: float
    bwd: float
    fwd_comm: float
    bwd_comm: float
    t_sync: float
    t_comp: float
    gap: float
    t0: float
    t0_sc: float
    compute: float


def stage_cost_single(profile: ModelProfile, cluster: ClusterConfig,
                      layer_range: tuple[int, int], r: int, micro_batch: int,
                      selfcond: bool = False, backbone: int = 0) -> StageCosts:
    """Cost one stage of a backbone at replication ``r``.

    The slot cost t0 is the larger of the stage's forward+backward compute
    and its right-boundary communication (zero when the range includes the
    backbone's last layer). With ``selfcond`` the forward terms double and
    the boundary carries one extra transfer.
    """
    costs = _BackboneCosts(profile.backbones[backbone], cluster, micro_batch)
    lo, hi = layer_range
    ev = costs.stage(lo, hi, r)
    if ev is None:
        # re-run the lookups without suppression so the caller sees why
        local = micro_batch // r if micro_batch % r == 0 else None
        if local is None:
            raise InfeasibleError(f"micro_batch {micro_batch} not divisible by replicas {r}")
        for idx in range(lo, hi):
            for name in ("fwd_time", "bwd_time", "grad_bytes", "fwd_comm_bytes",
                         "bwd_comm_bytes", "out_bytes"):
                cost_at(profile.backbones[backbone].layers[idx], name, local)
        raise InfeasibleError(f"stage {layer_range} at r={r} cannot be costed")
    return StageCosts(t0=ev.t0_sc if selfcond else ev.t0, t_sync=ev.t_sync,
                      t_comp=ev.t_comp, gap=ev.gap)


def selfcond_objective(t_max: float, t_max_sc: float, p: float) -> float:
    """Expected iteration-time bound when the extra forward pass activates
    with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"activation probability must be in [0, 1], got {p!r}")
    return p * t_max_sc + (1.0 - p) * t_max


def _clamp(gap: float) -> float:
    return gap if gap > 0.0 else 0.0


def _prune(entries):
    """Keep the Pareto frontier of (w, w_sc, y) triples; among exact ties
    the lexicographically smallest tie key survives."""
    entries.sort()
    kept = []
    for e in entries:
        if any(k[0] <= e[0] and k[1] <= e[1] and k[2] <= e[2] for k in kept):
            continue
        kept = [k for k in kept if not (e[0] <= k[0] and e[1] <= k[1] and e[2] <= k[2])]
        kept.append(e)
    return kept


def _replication_choices(devices: int, stages_left: int, equal_r: int | None):
    if equal_r is not None:
        return [equal_r] if devices - equal_r >= (stages_left - 1) * equal_r else []
    return [r for r in range(1, devices - (stages_left - 1) + 1)]


def _solve_chain(costs: _BackboneCosts, cfg: PlanConfig, equal_r: int | None):
    """Pareto sets of (w, w_sc, y, max_compute, ranges, reps) for
    partitioning layer prefixes; used for every stage except the last."""
    memo: dict[tuple[int, int, int], list] = {}

    def solve(l, s, d):
        key = (l, s, d)
        if key in memo:
            return memo[key]
        out = []
        if s == 1:
            ev = costs.stage(0, l, d)
            if ev is not None:
                out = [(ev.t0, ev.t0_sc, ev.gap, ev.compute, ((0, l),), (d,))]
        else:
            for r in _replication_choices(d, s, equal_r):
                for cut in range(s - 1, l):
                    ev = costs.stage(cut, l, r)
                    if ev is None:
                        continue
                    for w, wsc, y, mc, ranges, reps in solve(cut, s - 1, d - r):
                        out.append((
                            max(w, ev.t0), max(wsc, ev.t0_sc), max(y, ev.gap),
                            max(mc, ev.compute), ranges + ((cut, l),), reps + (r,),
                        ))
            out = _prune(out)
        memo[key] = out
        return out

    return solve


def _single_candidates(costs: _BackboneCosts, cfg: PlanConfig, equal_r: int | None):
    """All top-level (w, w_sc, y, max_compute, ranges, reps) candidates.
    The final stage is enumerated outside the memoized chain because the
    self-conditioning feedback time depends on its replication."""
    L, S, D = costs.num_layers, cfg.num_stages, cfg.group_size
    if S == 1:
        ev = costs.stage(0, L, D)
        return [] if ev is None else [
            (ev.t0, ev.t0_sc, ev.gap, ev.compute, ((0, L),), (D,))
        ]
    solve = _solve_chain(costs, cfg, equal_r)
    out = []
    for r in _replication_choices(D, S, equal_r):
        for cut in range(S - 1, L):
            ev = costs.stage(cut, L, r)
            if ev is None:
                continue
            for w, wsc, y, mc, ranges, reps in solve(cut, S - 1, D - r):
                out.append((
                    max(w, ev.t0), max(wsc, ev.t0_sc), max(y, ev.gap),
                    max(mc, ev.compute), ranges + ((cut, L),), reps + (r,),
                ))
    return out


def _select_single(costs: _BackboneCosts, cfg: PlanConfig, p: float, candidates):
    """Score candidates with the (expected) bound and deterministic
    tie-breaking: smaller max stage compute, then smallest cuts."""
    A = cfg.num_microbatches + 2 * cfg.num_stages - 2
    best = None
    for w, wsc, y, mc, ranges, reps in candidates:
        t_max = A * w + _clamp(y)
        if p > 0.0:
            tf = costs.feedback_time(reps[-1])
            if tf is None:
                continue
        else:
            tf = costs.feedback_time(reps[-1]) or 0.0
        t_max_sc = A * wsc + _clamp(y) + tf
        score = selfcond_objective(t_max, t_max_sc, p)
        key = (score, mc, ranges, reps)
        if best is None or key < best[0]:
            best = (key, t_max, t_max_sc, tf, ranges, reps)
    return best


def partition_single(profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig,
                     *, equal_replication: bool = True) -> PartitionPlan:
    """Optimal single-backbone partition for the given configuration.

    With ``cfg.selfcond`` the search minimizes the expectation of the plain
    and self-conditioned bounds at the profile's activation probability; a
    single partition serves both iteration kinds.
    """
    if len(profile.backbones) != 1:
        raise ValueError("partition_single requires a profile with exactly one backbone")
    backbone = profile.backbones[0]
    L, S, D = len(backbone.layers), cfg.num_stages, cfg.group_size
    _check_common(cluster, cfg)
    if L < S:
        raise InfeasibleError(f"backbone has {L} layers, cannot form {S} stages")
    equal_r = _equal_replication(cfg) if equal_replication else None
    costs = _BackboneCosts(backbone, cluster, cfg.micro_batch)
    p = profile.selfcond_prob if cfg.selfcond else 0.0
    best = _select_single(costs, cfg, p, _single_candidates(costs, cfg, equal_r))
    if best is None:
        raise InfeasibleError(
            f"no feasible partition for S={S}, D={D}: every replication split "
            "violates batch divisibility or the profiled batch range"
        )
    key, t_max, t_max_sc, tf, ranges, reps = best
    stages = [StageAssignment(backbone=0, layer_range=rng, replicas=rep)
              for rng, rep in zip(ranges, reps)]
    per_stage = []
    for rng, rep in zip(ranges, reps):
        ev = costs.stage(rng[0], rng[1], rep)
        per_stage.append(StageCosts(t0=ev.t0_sc if cfg.selfcond else ev.t0,
                                    t_sync=ev.t_sync, t_comp=ev.t_comp, gap=ev.gap))
    return PartitionPlan(
        config=cfg, stages=stages, objective=key[0], per_stage=per_stage,
        t_max=t_max, t_max_sc=t_max_sc, feedback_time=tf, selfcond_prob=p,
    )


def _bidirectional_candidates(down: _BackboneCosts, up: _BackboneCosts,
                              cfg: PlanConfig, equal_r: int | None):
    """Candidates (w, y, max_compute, ranges_down, ranges_up, reps), all in
    device-group order. Group g pairs a down-backbone range with an
    up-backbone range on the same devices; the last group hosts the down
    backbone's final layers and the up backbone's first layers."""
    Ld, Lu = down.num_layers, up.num_layers
    S, D = cfg.num_stages, cfg.group_size
    memo: dict[tuple[int, int, int, int], list] = {}

    def solve(ld, lu, s, d):
        key = (ld, lu, s, d)
        if key in memo:
            return memo[key]
        out = []
        if s == 1:
            evd = down.stage(0, ld, d)
            evu = up.stage(Lu - lu, Lu, d)
            if evd is not None and evu is not None:
                out = [(
                    max(evd.t0, evu.t0), max(evd.gap, evu.gap),
                    max(evd.compute, evu.compute),
                    ((0, ld),), ((Lu - lu, Lu),), (d,),
                )]
        else:
            for r in _replication_choices(d, s, equal_r):
                for cut in range(s - 1, ld):
                    evd = down.stage(cut, ld, r)
                    if evd is None:
                        continue
                    for take in range(1, lu - (s - 1) + 1):
                        evu = up.stage(Lu - lu, Lu - lu + take, r)
                        if evu is None:
                            continue
                        for w, y, mc, rd, ru, reps in solve(cut, lu - take, s - 1, d - r):
                            out.append((
                                max(w, evd.t0, evu.t0), max(y, evd.gap, evu.gap),
                                max(mc, evd.compute, evu.compute),
                                rd + ((cut, ld),), ru + ((Lu - lu, Lu - lu + take),),
                                reps + (r,),
                            ))
            out = _prune(out)
        memo[key] = out
        return out

    return solve(Ld, Lu, S, D)


def partition_bidirectional(profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig,
                            *, equal_replication: bool = True,
                            m_cdm_fn=None) -> PartitionPlan:
    """Optimal paired partition of two backbones pipelined in opposite
    directions over the same device groups.

    Point-to-point transfer time is costed with its bandwidth term doubled
    because the two directions share the links. ``m_cdm_fn(S, M)`` supplies
    the stable-phase slot count of the bidirectional schedule; the default
    counts slots in a unit-cost simulation.
    """
    if len(profile.backbones) != 2:
        raise ValueError("partition_bidirectional requires a profile with exactly two backbones")
    _check_common(cluster, cfg)
    S, D, M = cfg.num_stages, cfg.group_size, cfg.num_microbatches
    Ld, Lu = (len(b.layers) for b in profile.backbones)
    if min(Ld, Lu) < S:
        raise InfeasibleError(
            f"backbones have {Ld} and {Lu} layers, cannot both form {S} stages"
        )
    equal_r = _equal_replication(cfg) if equal_replication else None
    down = _BackboneCosts(profile.backbones[0], cluster, cfg.micro_batch, p2p_factor=2.0)
    up = _BackboneCosts(profile.backbones[1], cluster, cfg.micro_batch, p2p_factor=2.0)
    if m_cdm_fn is None:
        from .scheduler import m_cdm as m_cdm_fn
    slots = m_cdm_fn(S, M)
    A = slots + 2 * S - 2
    best = None
    for w, y, mc, rd, ru, reps in _bidirectional_candidates(down, up, cfg, equal_r):
        score = A * w + _clamp(y)
        key = (score, mc, rd, ru, reps)
        if best is None or key < best[0]:
            best = (key, rd, ru, reps)
    if best is None:
        raise InfeasibleError(
            f"no feasible bidirectional partition for S={S}, D={D}"
        )
    key, rd, ru, reps = best
    stages = [StageAssignment(backbone=0, layer_range=rng, replicas=rep, direction=DOWN)
              for rng, rep in zip(rd, reps)]
    # up stages in flow order: the up pipeline's first stage sits on the last group
    stages += [StageAssignment(backbone=1, layer_range=rng, replicas=rep, direction=UP)
               for rng, rep in zip(reversed(ru), reversed(reps))]
    per_stage = []
    for assign in stages:
        costs = down if assign.backbone == 0 else up
        ev = costs.stage(assign.layer_range[0], assign.layer_range[1], assign.replicas)
        per_stage.append(StageCosts(t0=ev.t0, t_sync=ev.t_sync, t_comp=ev.t_comp, gap=ev.gap))
    return PartitionPlan(
        config=cfg, stages=stages, objective=key[0], per_stage=per_stage,
        t_max=key[0], m_cdm=slots,
    )


def _check_common(cluster: ClusterConfig, cfg: PlanConfig):
    if cluster.world_size % cfg.group_size != 0:
        raise InfeasibleError(
            f"group_size {cfg.group_size} does not divide world_size {cluster.world_size}"
        )


def _equal_replication(cfg: PlanConfig) -> int:
    if cfg.group_size % cfg.num_stages != 0:
        raise InfeasibleError(
            f"equal replication needs num_stages ({cfg.num_stages}) to divide "
            f"group_size ({cfg.group_size})"
        )
    return cfg.group_size // cfg.num_stages


def _compositions(total: int, parts: int):
    """All orderings of ``parts`` positive integers summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


ORACLE_MAX_LAYERS = 10
ORACLE_MAX_STAGES = 4
ORACLE_MAX_DEVICES = 6


def brute_force_partition(profile: ModelProfile, cluster: ClusterConfig, cfg: PlanConfig,
                          *, equal_replication: bool = True,
                          m_cdm_fn=None) -> PartitionPlan:
    """Exhaustive-search oracle over all contiguous partitions and
    replication splits, scoring with the same objective expression and
    tie-breaking as the dynamic programs. Guarded against blowup."""
    S, D = cfg.num_stages, cfg.group_size
    if S > ORACLE_MAX_STAGES or D > ORACLE_MAX_DEVICES or any(
        len(b.layers) > ORACLE_MAX_LAYERS for b in profile.backbones
    ):
        raise OracleTooLargeError(
            f"oracle guards exceeded (L<={ORACLE_MAX_LAYERS}, S<={ORACLE_MAX_STAGES}, "
            f"D<={ORACLE_MAX_DEVICES})"
        )
    _check_common(cluster, cfg)
    if equal_replication:
        equal = _equal_replication(cfg)
        rep_choices = [(equal,) * S]
    else:
        rep_choices = [r for r in _compositions(D, S)]
    if len(profile.backbones) == 1:
        return _brute_single(profile, cluster, cfg, rep_choices)
    return _brute_bidirectional(profile, cluster, cfg, rep_choices, m_cdm_fn)


def _ranges_from_cuts(cuts, L):
    bounds = (0,) + tuple(cuts) + (L,)
    return tuple((bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1))


def _brute_single(profile, cluster, cfg, rep_choices):
    backbone = profile.backbones[0]
    L, S = len(backbone.layers), cfg.num_stages
    if L < S:
        raise InfeasibleError(f"backbone has {L} layers, cannot form {S} stages")
    costs = _BackboneCosts(backbone, cluster, cfg.micro_batch)
    p = profile.selfcond_prob if cfg.selfcond else 0.0
    candidates = []
    for cuts in itertools.combinations(range(1, L), S - 1):
        ranges = _ranges_from_cuts(cuts, L)
        for reps in rep_choices:
            evals = [costs.stage(lo, hi, r) for (lo, hi), r in zip(ranges, reps)]
            if any(ev is None for ev in evals):
                continue
            candidates.append((
                max(ev.t0 for ev in evals), max(ev.t0_sc for ev in evals),
                max(ev.gap for ev in evals), max(ev.compute for ev in evals),
                ranges, reps,
            ))
    best = _select_single(costs, cfg, p, candidates)
    if best is None:
        raise InfeasibleError("oracle found no feasible partition")
    key, t_max, t_max_sc, tf, ranges, reps = best
    stages = [StageAssignment(backbone=0, layer_range=rng, replicas=rep)
              for rng, rep in zip(ranges, reps)]
    per_stage = []
    for rng, rep in zip(ranges, reps):
        ev = costs.stage(rng[0], rng[1], rep)
        per_stage.append(StageCosts(t0=ev.t0_sc if cfg.selfcond else ev.t0,
                                    t_sync=ev.t_sync, t_comp=ev.t_comp, gap=ev.gap))
    return PartitionPlan(config=cfg, stages=stages, objective=key[0], per_stage=per_stage,
                         t_max=t_max, t_max_sc=t_max_sc, feedback_time=tf, selfcond_prob=p)


def _brute_bidirectional(profile, cluster, cfg, rep_choices, m_cdm_fn):
    S, M = cfg.num_stages, cfg.num_microbatches
    Ld, Lu = (len(b.layers) for b in profile.backbones)
    if min(Ld, Lu) < S:
        raise InfeasibleError(
            f"backbones have {Ld} and {Lu} layers, cannot both form {S} stages"
        )
    down = _BackboneCosts(profile.backbones[0], cluster, cfg.micro_batch, p2p_factor=2.0)
    up = _BackboneCosts(profile.backbones[1], cluster, cfg.micro_batch, p2p_factor=2.0)
    if m_cdm_fn is None:
        from .scheduler import m_cdm as m_cdm_fn
    slots = m_cdm_fn(S, M)
    A = slots + 2 * S - 2
    best = None
    for cuts_d in itertools.combinations(range(1, Ld), S - 1):
        ranges_d = _ranges_from_cuts(cuts_d, Ld)
        for cuts_u in itertools.combinations(range(1, Lu), S - 1):
            # flow order, then regroup so index g is the range hosted on group g
            flow_u = _ranges_from_cuts(cuts_u, Lu)
            ranges_u = tuple(reversed(flow_u))
            for reps in rep_choices:
                evd = [down.stage(lo, hi, r) for (lo, hi), r in zip(ranges_d, reps)]
                evu = [up.stage(lo, hi, r) for (lo, hi), r in zip(ranges_u, reps)]
                if any(e is None for e in evd + evu):
                    continue
                w = max(e.t0 for e in evd + evu)
                y = max(e.gap for e in evd + evu)
                mc = max(e.compute for e in evd + evu)
                score = A * w + _clamp(y)
                key = (score, mc, ranges_d, ranges_u, reps)
                if best is None or key < best[0]:
                    best = (key, ranges_d, ranges_u, reps)
    if best is None:
        raise InfeasibleError("oracle found no feasible bidirectional partition")
    key, ranges_d, ranges_u, reps = best
    stages = [StageAssignment(backbone=0, layer_range=rng, replicas=rep, direction=DOWN)
              for rng, rep in zip(ranges_d, reps)]
    stages += [StageAssignment(backbone=1, layer_range=rng, replicas=rep, direction=UP)
               for rng, rep in zip(reversed(ranges_u), reversed(reps))]
    per_stage = []
    for assign in stages:
        costs = down if assign.backbone == 0 else up
        ev = costs.stage(assign.layer_range[0], assign.layer_range[1], assign.replicas)
        per_stage.append(StageCosts(t0=ev.t0, t_sync=ev.t_sync, t_comp=ev.t_comp, gap=ev.gap))
    return PartitionPlan(config=cfg, stages=stages, objective=key[0], per_stage=per_stage,
                         t_max=key[0], m_cdm=slots)


def validate_plan(plan: PartitionPlan, profile: ModelProfile, *,
                  equal_replication: bool = True) -> None:
    """Check PartitionPlan structural invariants; raises ValidationError."""
    D = plan.config.group_size
    groups = [(s.layer_range, s.replicas) for s in plan.stages_down]
    if sum(r for _, r in groups) != D:
        raise ValidationError("down-stage replicas do not sum to the group size")
    if plan.stages_up:
        if sum(s.replicas for s in plan.stages_up) != D:
            raise ValidationError("up-stage replicas do not sum to the group size")
        up_group_reps = [s.replicas for s in reversed(plan.stages_up)]
        if up_group_reps != [r for _, r in groups]:
            raise ValidationError("up stages must share the down stages' device groups")
    if equal_replication:
        reps = {s.replicas for s in plan.stages}
        if len(reps) > 1:
            raise ValidationError(f"equal replication violated: {sorted(reps)}")
    for backbone_idx, backbone in enumerate(profile.backbones):
        ranges = sorted(s.layer_range for s in plan.stages if s.backbone == backbone_idx)
        if not ranges:
            continue
        if ranges[0][0] != 0 or ranges[-1][1] != len(backbone.layers):
            raise ValidationError(f"backbone {backbone_idx} ranges do not cover all layers")
        for (a, b), (c, d) in zip(ranges, ranges[1:]):
            if b != c:
                raise ValidationError(
                    f"backbone {backbone_idx} ranges not contiguous at {b} vs {c}"
                )
