"""Command-line entry point: search for an optimized pipeline training
plan and report predicted iteration time, bubble ratios, and throughput.

Exit codes: 0 on success, 2 when no grid point is feasible, 1 on input
errors (unreadable profile, invalid arguments).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import planner, scheduler
from .errors import NoFeasiblePlanError, PipefillError
from .profile import ClusterConfig, CommCosts, load_profile


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plan",
        description="Compute an optimized pipeline-parallel training plan with bubble filling.",
    )
    parser.add_argument("--profile", required=True, help="model profile file (JSON)")
    parser.add_argument("--world-size", type=int, required=True, help="total device count")
    parser.add_argument("--bw-ar", type=float, required=True, help="all-reduce bandwidth, bytes/s")
    parser.add_argument("--lat-ar", type=float, required=True, help="all-reduce latency, s")
    parser.add_argument("--bw-p2p", type=float, required=True, help="point-to-point bandwidth, bytes/s")
    parser.add_argument("--lat-p2p", type=float, required=True, help="point-to-point latency, s")
    parser.add_argument("--batch", type=int, required=True, help="cluster-wide training batch size")
    parser.add_argument("--stages", type=_int_list, default=None,
                        help="comma-separated stage counts to search")
    parser.add_argument("--microbatches", type=_int_list, default=None,
                        help="comma-separated micro-batch counts to search")
    parser.add_argument("--group-sizes", type=_int_list, default=None,
                        help="comma-separated pipeline group sizes to search")
    parser.add_argument("--selfcond-prob", type=float, default=None,
                        help="override the profile's self-conditioning probability")
    parser.add_argument("--emit-plan", default=None, help="write the plan document here")
    parser.add_argument("--emit-trace", default=None,
                        help="write the schedule as a trace-event file here")
    parser.add_argument("--bubble-min-ms", type=float, default=10.0,
                        help="ignore bubbles shorter than this many milliseconds")
    parser.add_argument("--unequal-replication", action="store_true",
                        help="allow stages to use different data-parallel degrees")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        profile = load_profile(args.profile)
        if args.selfcond_prob is not None:
            if not 0.0 <= args.selfcond_prob <= 1.0:
                raise PipefillError(f"--selfcond-prob must be in [0, 1], got {args.selfcond_prob}")
            profile = replace(profile, selfcond_prob=args.selfcond_prob)
        cluster = ClusterConfig(
            world_size=args.world_size,
            comm=CommCosts(bandwidth_ar=args.bw_ar, latency_ar=args.lat_ar,
                           bandwidth_p2p=args.bw_p2p, latency_p2p=args.lat_p2p),
        )
        if args.batch < 1:
            raise PipefillError(f"--batch must be positive, got {args.batch}")
        space = planner.default_search_space(profile, cluster, args.batch)
        overrides = {}
        if args.stages:
            overrides["stage_counts"] = tuple(args.stages)
        if args.microbatches:
            overrides["microbatch_counts"] = tuple(args.microbatches)
        if args.group_sizes:
            overrides["group_sizes"] = tuple(args.group_sizes)
        if overrides:
            space = replace(space, **overrides)
        min_len = args.bubble_min_ms / 1000.0
        if min_len < 0:
            raise PipefillError("--bubble-min-ms must be non-negative")
    except PipefillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        report = planner.search(profile, cluster, space, bubble_min_len=min_len,
                                equal_replication=not args.unequal_replication)
    except NoFeasiblePlanError as exc:
        print(f"no feasible plan: {exc}", file=sys.stderr)
        for entry in exc.diagnostics:
            s, m, d = entry["point"]
            print(f"  S={s} M={m} D={d}: {entry['reason']}", file=sys.stderr)
        return 2
    except PipefillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    _print_report(report)
    if args.emit_plan:
        planner.emit_plan(report, args.emit_plan)
        print(f"plan written to {args.emit_plan}")
    if args.emit_trace:
        count = scheduler.export_trace(report.schedule, args.emit_trace)
        print(f"trace with {count} events written to {args.emit_trace}")
    return 0


def _print_report(report: planner.PlanReport) -> None:
    cfg = report.plan.config
    print(f"mode:                {report.mode}")
    print(f"selected point:      S={cfg.num_stages} M={cfg.num_microbatches} D={cfg.group_size}")
    print(f"objective bound:     {report.plan.objective * 1e3:.3f} ms")
    print(f"predicted iteration: {report.predicted_iter_time * 1e3:.3f} ms")
    print(f"bubble ratio:        {report.bubble_ratio_before:.2%} -> {report.bubble_ratio_after:.2%}")
    print(f"throughput:          {report.throughput:.2f} samples/s")
    print(f"tail time:           {report.fill.tail_time * 1e3:.3f} ms")
    print(f"points evaluated:    {len(report.evaluated)} ok, {len(report.diagnostics)} infeasible")
    for assign, costs in zip(report.plan.stages, report.plan.per_stage):
        lo, hi = assign.layer_range
        print(f"  stage {assign.direction:>4} b{assign.backbone} layers [{lo:>2},{hi:>2}) "
              f"x{assign.replicas}  t0={costs.t0 * 1e3:.3f} ms  gap={costs.gap * 1e3:+.3f} ms")


if __name__ == "__main__":
    sys.exit(main())
