"""``e5sh`` command line: gen, run, eval, stats, energy, report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from e5sh.energy import EnergyConfig, energy_table
from e5sh.harness.experiment import ExperimentConfig, run_experiment
from e5sh.harness.report import evaluate, report, stats
from e5sh.harness.scenes import SceneSpec, gen_dataset
from e5sh.metrics.records import read_csv, write_csv

logger = logging.getLogger("e5sh")


def _clean(obj):
    """Replace non-finite floats so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _read_logs(paths):
    recs = []
    for p in paths:
        recs.extend(read_csv(p))
    return recs


def cmd_gen(a) -> int:
    path = gen_dataset(SceneSpec(width=a.width, height=a.height), a.count, a.seed, a.out, a.split)
    print(f"wrote {a.count} scenes to {path}")
    return 0


def cmd_run(a) -> int:
    with open(a.config) as fh:
        d = json.load(fh)
    if a.paper_sizes:
        d["paper_sizes"] = True
    if a.seed is not None:
        d["seed"] = a.seed
    cfg = ExperimentConfig.from_dict(d)
    res = run_experiment(cfg, a.data)
    write_csv(res.records, a.out)
    ok = sum(r.ok for r in res.records)
    print(f"{ok}/{len(res.records)} frames completed; log written to {a.out}")
    return 0


def cmd_eval(a) -> int:
    out = evaluate(a.data, a.backend)
    _write_json(a.out, out)
    for name, entry in out["classes"].items():
        f1 = entry.get("pooled", {}).get("f1")
        print(f"{name:15s} F1={f1:.4f}" if f1 is not None else f"{name:15s} F1=n/a")
    return 0


def cmd_stats(a) -> int:
    if not (a.shapiro or a.anova):
        a.shapiro = a.anova = True
    out = stats(_read_logs(a.log), a.shapiro, a.anova, a.permutations, a.seed)
    _write_json(a.out, out)
    print(f"statistics written to {a.out}")
    return 0


def cmd_energy(a) -> int:
    cfg = EnergyConfig()
    if a.config:
        with open(a.config) as fh:
            cfg = EnergyConfig.from_json(fh.read())
    table = energy_table(a.robots, cfg)
    _write_json(a.out, table)
    for row in table["rows"]:
        d = row["detectron2"]
        flag = " (interpolated)" if d["edge_interpolated"] else ""
        print(f"n={row['robots']:3d} edge={d['edge_watts']:8.2f} W njxn={d['njxn_watts']:8.2f} W "
              f"ratio={d['consumption_ratio']:.3f}{flag}")
    print(f"break-even robots: {table['break_even']}")
    return 0


def cmd_report(a) -> int:
    scores = None
    if a.data:
        scores = {b: evaluate(a.data, b) for b in a.backend}
    out = report(_read_logs(a.log), a.baseline, a.permutations, a.seed, scores)
    _write_json(a.out, out)
    for name, s in out["configs"].items():
        fps = s.get("fps")
        sp = s.get("speedup_vs_baseline", {}).get("fps")
        line = f"{name:40s} ok={s['succeeded']}/{s['frames']}"
        if fps is not None:
            line += f" fps={fps:.2f}"
        if sp is not None:
            line += f" speedup={sp:.2f}"
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e5sh", description="Edge-offloaded segmentation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--width", type=int, default=848)
    g.add_argument("--height", type=int, default=480)
    g.add_argument("--split", default="test")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run one experiment configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--paper-sizes", action="store_true",
                   help="account 80 kB uplink frames and 16 kB downlink masks")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a segmentation backend on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--backend", choices=("oracle", "heuristic"), required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="normality tests and factor analysis over a record log")
    s.add_argument("--log", required=True, nargs="+")
    s.add_argument("--shapiro", action="store_true")
    s.add_argument("--anova", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--permutations", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stats)

    n = sub.add_parser("energy", help="power, emission and cost table for 1..N robots")
    n.add_argument("--robots", type=int, required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--config", default=None, help="JSON with anchors, emission_factor, costs")
    n.set_defaults(func=cmd_energy)

    rp = sub.add_parser("report", help="summarize a record log")
    rp.add_argument("--log", required=True, nargs="+")
    rp.add_argument("--baseline", default=None)
    rp.add_argument("--out", required=True)
    rp.add_argument("--data", default=None, help="dataset to score alongside the log")
    rp.add_argument("--backend", nargs="+", default=["oracle", "heuristic"])
    rp.add_argument("--permutations", type=int, default=2000)
    rp.add_argument("--seed", type=int, default=0)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "energy" and args.robots < 1:
        print("error: --robots must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
