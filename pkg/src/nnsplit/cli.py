"""``nnsplit`` command line: profile, plan, simulate, verify, sweep.

Results go under ``$NNSPLIT_OUT`` (default ``out``) as
``<root>/<scenario-name>/{plan.json,metrics.csv,trace.csv}``.  Invalid input
exits with status 2 and a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

from . import metrics
from .modelgraph import (
    SEPARATION_KINDS,
    ModelGraph,
    ToyConfig,
    ValidationError,
    build_toy_convtasnet,
    dumps_profile,
    profile,
    resolve_profile,
)
from .netsim import AblationFlags, SimTrace, Topology, calibrate_rate, simulate
from .planner import PlanOptions, Placement, SplitPlan, dumps_plan, make_plan, plan_from_dict, plan_full
from .rng import SplitMix64
from .tensorkit import generate_weights, toy_sources, verify_split

DEFAULT_TOY = "C=2,N=4,L=4,S=8,T=64"
TABLE_HOPS = (3, 5)
TABLE_DELTAS = (0, 1, 2, 3, 4)


class UsageError(ValueError):
    pass


def out_root() -> Path:
    return Path(os.environ.get("NNSPLIT_OUT", "out"))


# --------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Scenario:
    profile_ref: str
    delta: int
    hops: int
    bandwidth_bps: float = 1e9
    prop_delay_ms: float = 10.0
    mtu: int = 1472
    calibration_target_ms: float = 310.0
    principle2: bool = True
    principle3: bool = True
    seed: int = 42
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or f"H{self.hops}_d{self.delta}"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(unknown[0], "unknown scenario field")
        for key in ("profile_ref", "delta", "hops"):
            if key not in data:
                raise ValidationError(key, "missing scenario field")
        scn = cls(**data)
        for key in ("delta", "hops", "mtu", "seed"):
            value = getattr(scn, key)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(key, f"expected an integer, got {value!r}")
        for key in ("principle2", "principle3"):
            if not isinstance(getattr(scn, key), bool):
                raise ValidationError(key, "expected true or false")
        if scn.delta < 0:
            raise ValidationError("delta", "must be >= 0")
        if scn.hops < 1:
            raise ValidationError("hops", "must be >= 1")
        return scn


def load_scenario(path: str | Path) -> tuple[Scenario, Path]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(str(path), f"invalid JSON at line {exc.lineno}, column {exc.colno}") from None
    if not isinstance(data, dict):
        raise ValidationError(str(path), "scenario must be a JSON object")
    return Scenario.from_dict(data), path.parent


@dataclass
class RunResult:
    scenario: Scenario
    plan: SplitPlan
    placement: Placement
    trace: SimTrace
    report: metrics.MetricsReport


def run_scenario(scn: Scenario, base: Path | None = None, graph: ModelGraph | None = None) -> RunResult:
    graph = graph if graph is not None else resolve_profile(scn.profile_ref, base)
    prof = profile(graph)
    plan, placement = plan_full(prof, scn.hops, scn.delta)
    topo = Topology(
        hops=scn.hops,
        bandwidth_bps=scn.bandwidth_bps,
        prop_delay_s=scn.prop_delay_ms / 1000,
        mtu_payload_bytes=scn.mtu,
        compute_rate_macs_per_s=calibrate_rate(prof, None, scn.calibration_target_ms / 1000),
    )
    flags = AblationFlags(principle2=scn.principle2, principle3=scn.principle3)
    trace = simulate(prof, plan, placement, topo, flags)
    return RunResult(scn, trace.plan, trace.placement, trace, metrics.derive(trace))


def _run_job(job: tuple[Scenario, str | None]) -> RunResult:
    scn, base = job
    return run_scenario(scn, Path(base) if base else None)


def table_scenarios(template: Scenario) -> list[Scenario]:
    stem = template.name or "table"
    return [
        replace(template, hops=h, delta=d, name=f"{stem}_H{h}_d{d}")
        for h in TABLE_HOPS
        for d in TABLE_DELTAS
    ]


def write_outputs(result: RunResult, *, trace: bool, root: Path | None = None) -> Path:
    target = (root or out_root()) / result.scenario.label
    target.mkdir(parents=True, exist_ok=True)
    (target / "plan.json").write_text(dumps_plan(result.plan, result.placement))
    (target / "metrics.csv").write_text(metrics.to_csv([(result.scenario.label, result.report)]))
    if trace:
        (target / "trace.csv").write_text(result.trace.to_csv())
    return target


def table_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["hops", "delta", "server_blocks", "blocks_in_network", "residual_time_s", "server_cache_s"])
    for r in results:
        n_server = len(r.placement.server_blocks)
        writer.writerow(
            [
                r.scenario.hops,
                r.scenario.delta,
                n_server,
                len(r.plan.blocks) - n_server,
                repr(r.report.residual_time_s),
                repr(r.report.server_cache_s),
            ]
        )
    return buf.getvalue()


# --------------------------------------------------------------------------
# Subcommands


def _load_graph(args: argparse.Namespace) -> ModelGraph:
    if getattr(args, "toy", None):
        return build_toy_convtasnet(ToyConfig.parse(args.toy))
    ref = getattr(args, "profile", None) or f"fixture:{getattr(args, 'fixture', None) or 'convtasnet'}"
    return resolve_profile(ref)


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_profile(args: argparse.Namespace) -> int:
    graph = _load_graph(args)
    prof = profile(graph)
    _emit(dumps_profile(graph), args.output)
    share = 100 * prof.share_of(SEPARATION_KINDS)
    print(
        f"layers={prof.n_layers} params={prof.total_params} macs={prof.total_macs} separation_share={share:.3f}%",
        file=sys.stderr,
    )
    return 0


def _plan_options(args: argparse.Namespace) -> PlanOptions:
    return PlanOptions(
        initial_blocks=args.initial_blocks,
        window=args.window,
        lam=args.lam,
        explosion_factor=None if args.explosion_factor <= 0 else args.explosion_factor,
        mask_to_server=not args.mask_in_network,
        parallelize=not args.no_parallelize,
    )


def cmd_plan(args: argparse.Namespace) -> int:
    prof = profile(_load_graph(args))
    plan, placement = plan_full(prof, args.hops, args.delta, _plan_options(args))
    _emit(dumps_plan(plan, placement), args.output)
    print(f"blocks={len(plan.blocks)} server_blocks={len(placement.server_blocks)}", file=sys.stderr)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    scn, base = load_scenario(args.scenario)
    if args.name:
        scn = replace(scn, name=args.name)
    root = Path(args.out) if args.out else out_root()
    if args.sweep == "table":
        results = [run_scenario(s, base) for s in table_scenarios(scn)]
        for r in results:
            write_outputs(r, trace=args.trace, root=root)
        target = root / (scn.name or "table")
        target.mkdir(parents=True, exist_ok=True)
        rows = [(r.scenario.label, r.report) for r in results]
        (target / "metrics.csv").write_text(metrics.to_csv(rows))
        (target / "table.csv").write_text(table_csv(results))
        sys.stdout.write(table_csv(results))
        return 0

    rows: list[tuple[str, Any]] = []
    if args.ablate:
        key = args.ablate
        on = replace(scn, **{key: True}, name=f"{scn.label}_{key}_on")
        off = replace(scn, **{key: False}, name=f"{scn.label}_{key}_off")
        a, b = run_scenario(on, base), run_scenario(off, base)
        for r in (a, b):
            write_outputs(r, trace=args.trace, root=root)
        rows = [(on.label, a.report), (off.label, b.report), (f"compare_{key}", metrics.compare(a.report, b.report))]
        target = root / scn.label
        target.mkdir(parents=True, exist_ok=True)
        (target / "metrics.csv").write_text(metrics.to_csv(rows))
    else:
        results = [run_scenario(replace(scn, seed=scn.seed + i), base) for i in range(args.repeat)]
        write_outputs(results[0], trace=args.trace, root=root)
        rows = [(f"{scn.label}#{i}" if args.repeat > 1 else scn.label, r.report) for i, r in enumerate(results)]
        target = root / scn.label
        (target / "metrics.csv").write_text(metrics.to_csv(rows))
        if args.json:
            payload: Any = metrics.report_to_dict(results[0].report)
            if args.repeat > 1:
                payload = metrics.summarize([r.report for r in results])
            (target / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(metrics.to_csv(rows))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    jobs: list[tuple[Scenario, str]] = []
    for path in args.scenarios:
        scn, base = load_scenario(path)
        if args.table:
            jobs.extend((s, str(base)) for s in table_scenarios(scn))
        else:
            jobs.append((scn, str(base)))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    root = Path(args.out) if args.out else out_root()
    for r in results:
        write_outputs(r, trace=args.trace, root=root)
    text = metrics.to_csv([(r.scenario.label, r.report) for r in results])
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def verify_plan(graph: ModelGraph, source: str, seed: int) -> SplitPlan:
    prof = profile(graph)
    n = prof.n_layers
    if source == "staged":
        # Encoder alone, one block per separation layer, mask through decoder on the tail.
        last_sep = prof.last_separation_layer()
        return make_plan(prof, list(range(0, last_sep + 1)))
    if source == "single":
        return make_plan(prof, [])
    if source == "maximal":
        return make_plan(prof, list(range(n - 1)))
    if source == "random":
        draws = SplitMix64(seed).u64_array(n - 1)
        return make_plan(prof, [i for i, z in enumerate(draws) if z >> 63])
    data = json.loads(Path(source).read_text())
    return plan_from_dict(data, prof)[0]


def cmd_verify(args: argparse.Namespace) -> int:
    graph = build_toy_convtasnet(ToyConfig.parse(args.toy))
    plan = verify_plan(graph, args.plan, args.seed)
    weights = generate_weights(graph, args.seed)
    split_weights = None
    if args.corrupt_block is not None:
        block = plan.block(args.corrupt_block)
        target = next((i for i in range(block.first, block.last + 1) if i in weights.weights), None)
        if target is None:
            raise UsageError(f"block {args.corrupt_block} has no weights to corrupt")
        split_weights = weights.copy()
        split_weights.weights[target].flat[0] += 0.5
    mix, refs = toy_sources(graph, graph.layers[-1].out_channels, args.seed)
    report = verify_split(graph, weights, plan, mix, refs, split_weights=split_weights, tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    line = f"{status} blocks={len(plan.blocks)} max_deviation={report.max_deviation:.3e} tolerance={report.tolerance:g}"
    if report.offending_block is not None:
        line += f" offending_block={report.offending_block}"
    print(line)
    if report.sdr_monolithic:
        print("sdr_monolithic=" + ";".join(f"{v:.6f}" for v in report.sdr_monolithic))
        print("sdr_split=" + ";".join(f"{v:.6f}" for v in report.sdr_split))
    return 0 if report.passed else 1


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnsplit", description="Split a separation network across a UPF chain.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="write a model profile")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--fixture", help="bundled profile name (default convtasnet)")
    src.add_argument("--toy", help=f"toy config such as {DEFAULT_TOY}")
    p.add_argument("-o", "--output", help="output file (default stdout)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="run the split procedure and placement")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--profile", help="profile file or fixture:<name>")
    src.add_argument("--fixture")
    src.add_argument("--toy")
    p.add_argument("--hops", type=int, required=True)
    p.add_argument("--delta", type=int, required=True)
    p.add_argument("--initial-blocks", type=int)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--explosion-factor", type=float, default=2.0, help="<= 0 disables the server merge")
    p.add_argument("--mask-in-network", action="store_true", help="keep the mask layer on the last UPF")
    p.add_argument("--no-parallelize", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate one scenario file")
    p.add_argument("scenario")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--ablate", choices=["principle2", "principle3"])
    p.add_argument("--sweep", choices=["table"])
    p.add_argument("--trace", action="store_true", help="also write trace.csv")
    p.add_argument("--json", action="store_true", help="also write metrics.json")
    p.add_argument("--name", help="override the scenario name")
    p.add_argument("--out", help="output root (overrides NNSPLIT_OUT)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="check split execution against monolithic execution")
    p.add_argument("--toy", default=DEFAULT_TOY)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--plan", default="staged", help="staged, single, maximal, random or a plan JSON file")
    p.add_argument("--corrupt-block", type=int, help="perturb one weight of this block on the split side")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="simulate several scenario files")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table", action="store_true", help="expand each file over the hops x delta table")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out", help="output root (overrides NNSPLIT_OUT)")
    p.add_argument("-o", "--output", help="also write the combined metrics CSV here")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "repeat", 1) < 1 or getattr(args, "jobs", 1) < 1:
        print("nnsplit: error: --repeat and --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError) as exc:
        print(f"nnsplit: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"nnsplit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
