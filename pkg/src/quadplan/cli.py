"""Command line entry point: ``quadplan {scenario,plan,run,batch,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness as hs
from .scenarios import CANONICAL


def _seed_range(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",")]


def _variant(spec: hs.ScenarioSpec, args) -> hs.ScenarioSpec:
    gpio = None if getattr(args, "gpio", None) is None else args.gpio == "on"
    return spec.variant(constraint=getattr(args, "variant", None), gpio=gpio,
                        seed=getattr(args, "seed", None))


def _write_run(out: Path, spec: hs.ScenarioSpec, res: hs.EpisodeResult) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.name}_{spec.variant_label}_seed{spec.seed}"
    hs.write_log(out / f"{stem}.csv", res.log)
    with open(out / f"{stem}_timing.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "solve_ms", "iterations"])
        w.writeheader()
        w.writerows(res.timing)
    meta = {"scenario": spec.name, "variant": spec.variant_label, "seed": spec.seed, **res.metrics.row()}
    (out / f"{stem}_metrics.json").write_text(json.dumps(meta, indent=2))
    if res.world is not None:
        cyl = [list(c) for c in res.world.cylinders]
        (out / f"{stem}_world.json").write_text(json.dumps({"cylinders": cyl, "goal": res.world.goal.tolist()}))
    if res.plan is not None:
        res.plan.reference.export_csv(out / f"{stem}_reference.csv")
    return out / f"{stem}.csv"


def cmd_scenario(args) -> int:
    spec = CANONICAL[args.name]()
    text = json.dumps(spec.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_plan(args) -> int:
    spec = hs.ScenarioSpec.load(args.scenario)
    world = hs.build_world(spec)
    plan = hs.plan_global(spec, world)
    out = Path(args.out or f"{spec.name}_reference.csv")
    plan.reference.export_csv(out, args.step)
    print(f"reference length {plan.reference.length:.3f} m, search cost {plan.search.cost:.3f}, written to {out}")
    return 0


def cmd_run(args) -> int:
    spec = _variant(hs.ScenarioSpec.load(args.scenario), args)
    res = hs.run_episode(spec)
    path = _write_run(Path(args.out), spec, res)
    print(json.dumps(res.metrics.row(), indent=2))
    print(f"log: {path}")
    return 0 if res.metrics.success else 1


def cmd_batch(args) -> int:
    base = hs.ScenarioSpec.load(args.scenario)
    variants = args.variants.split(",") if args.variants else [base.variant_label]
    out = Path(args.out)
    results = []
    for label in variants:
        constraint, g = label.split("-")
        for seed in _seed_range(args.seeds):
            spec = base.variant(constraint=constraint, gpio=(g == "gpio"), seed=seed)
            res = hs.run_episode(spec)
            _write_run(out, spec, res)
            results.append((spec.variant_label, seed, res.metrics))
            print(f"{spec.variant_label} seed {seed}: success={res.metrics.success} "
                  f"risk={res.metrics.risk_index:.4f} avg_v={res.metrics.avg_velocity:.3f}", flush=True)
    rows = hs.summarize(results)
    hs.write_table_csv(out / "summary.csv", rows)
    table = hs.format_table(rows)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    produced = build_report(Path(args.dir))
    for p in produced:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadplan", description="Quadrotor planning pipeline and closed-loop simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("scenario", help="write a canonical scenario as JSON")
    p.add_argument("name", choices=sorted(CANONICAL))
    p.add_argument("--out")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("plan", help="global plan only; writes the reference CSV")
    p.add_argument("scenario")
    p.add_argument("--out")
    p.add_argument("--step", type=float, default=0.05, help="theta spacing of the CSV rows")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="one closed-loop episode")
    p.add_argument("scenario")
    p.add_argument("--variant", choices=["cbf", "dc"])
    p.add_argument("--gpio", choices=["on", "off"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="several seeds and variants with a summary table")
    p.add_argument("scenario")
    p.add_argument("--seeds", default="0..9", help="K..M or a comma list")
    p.add_argument("--variants", help="comma list such as cbf-gpio,dc-gpio,cbf-nogpio")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("report", help="tables and SVG plots for a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
