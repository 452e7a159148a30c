"""Summaries over record logs and segmentation scores over datasets."""

from __future__ import annotations

import logging
import math
from collections import defaultdict

import numpy as np

from e5sh.core import ClassId
from e5sh.harness.scenes import Dataset
from e5sh.metrics.records import ExperimentRecord
from e5sh.metrics.segmentation import ap_ar, confusion, scores
from e5sh.metrics.stats import (NETWORKS, PROTOCOLS, distribution_stats, factor_analysis_2x3,
                                shapiro_wilk)
from e5sh.metrics.timing import speedup, throughput
from e5sh.perception import HeuristicBackend, OracleBackend

logger = logging.getLogger(__name__)

SERIES = {
    "rtt_ms": lambda r: r.network_rtt_ms,
    "seg_ms": lambda r: r.seg_s * 1e3,
    "cycle_ms": lambda r: r.cycle_s * 1e3,
}


def group_by_config(records) -> dict[str, list[ExperimentRecord]]:
    out = defaultdict(list)
    for r in records:
        out[r.config].append(r)
    return dict(sorted(out.items()))


def end_to_end_fps(records) -> float:
    """Completed frames per second, summed over robots.

    Each robot's rate is its successful frames over the span from its first
    capture to its last completed map.
    """
    by_robot = defaultdict(list)
    for r in records:
        by_robot[r.robot_id].append(r)
    total = 0.0
    for rs in by_robot.values():
        ok = [r for r in rs if r.ok]
        if not ok:
            continue
        span = max(r.t_map_done for r in ok) - min(r.t_capture for r in rs)
        if span > 0:
            total += len(ok) / (span / 1e9)
        else:
            return math.inf
    return total


def segmentation_fps(records) -> float | None:
    seg = [r.seg_s for r in records if r.ok]
    if not seg or np.mean(seg) <= 0:
        return None
    return 1.0 / float(np.mean(seg))


def _normality(values) -> dict | None:
    v = [x for x in values if x is not None and math.isfinite(x)]
    if len(v) < 3 or len(v) > 5000 or max(v) - min(v) <= 0:
        return None
    return shapiro_wilk(v).to_dict()


def _series(records, name):
    f = SERIES[name]
    return [f(r) for r in records if r.ok]


def resolve_baseline(name: str, configs) -> str:
    """Exact config name, or the single config whose components include all of ``name``'s."""
    configs = list(configs)
    if name in configs:
        return name
    want = set(name.split("/"))
    hits = [c for c in configs if want <= set(c.split("/"))]
    if len(hits) != 1:
        raise KeyError(f"baseline {name!r} matches {len(hits)} configurations: {hits}")
    return hits[0]


def _paired_seg_speedup(recs, base):
    """Median per-frame segmentation-time ratio baseline/config on shared frames."""
    b = {(r.robot_id, r.frame_id): r for r in base if r.ok}
    ratios = [b[(r.robot_id, r.frame_id)].seg_s / r.seg_s for r in recs
              if r.ok and (r.robot_id, r.frame_id) in b and r.seg_s > 0]
    return float(np.median(ratios)) if ratios else None


def summarize_config(recs) -> dict:
    ok = [r for r in recs if r.ok]
    out = {"frames": len(recs), "succeeded": len(ok), "failed": len(recs) - len(ok),
           "robots": len({r.robot_id for r in recs})}
    if not ok:
        return out
    fps = end_to_end_fps(recs)
    out["fps"] = fps
    out["segmentation_fps"] = segmentation_fps(recs)
    for name in SERIES:
        out[name] = distribution_stats(_series(recs, name)).to_dict()
        out[name]["mean"] = float(np.mean(_series(recs, name)))
    up = float(np.mean([r.bytes_up for r in ok]))
    down = float(np.mean([r.bytes_down for r in ok]))
    out["bytes_up_mean"], out["bytes_down_mean"] = up, down
    if math.isfinite(fps):
        out["throughput_up_kBps"] = throughput(fps, up)
        out["throughput_down_kBps"] = throughput(fps, down)
    seg = float(np.mean([r.seg_s for r in ok]))
    out["overhead_ms_mean"] = float(np.mean([r.cycle_s - r.seg_s for r in ok])) * 1e3
    per_frame = seg + out["overhead_ms_mean"] / 1e3
    out["fps_identity"] = 1.0 / per_frame if per_frame > 0 else None
    out["normality"] = {name: _normality(_series(recs, name)) for name in SERIES}
    return out


def factor_tables(groups, series: str = "rtt_ms", permutations: int = 2000, seed: int = 0) -> dict:
    """Network x protocol analysis for every (model, platform) with all six cells present."""
    cells = defaultdict(dict)
    for cfg, recs in groups.items():
        protocol, network, model, platform = cfg.split("/")
        cells[(model, platform)][(network, protocol)] = _series(recs, series)
    out = {}
    for (model, platform), cell in sorted(cells.items()):
        need = [(n, p) for n in NETWORKS for p in PROTOCOLS]
        if not all(k in cell and len(cell[k]) >= 2 for k in need):
            continue
        obs = [(n, p, v) for (n, p) in need for v in cell[(n, p)]]
        res = factor_analysis_2x3(obs, permutations=permutations, seed=seed)
        out[f"{model}/{platform}"] = {"series": series, **res.to_dict()}
    return out


def report(records, baseline: str | None = None, permutations: int = 2000, seed: int = 0,
           scores_by_backend: dict | None = None) -> dict:
    groups = group_by_config(records)
    if not groups:
        raise ValueError("empty record log")
    summary = {name: summarize_config(recs) for name, recs in groups.items()}
    out = {"configs": summary}
    if baseline is not None:
        base = resolve_baseline(baseline, groups)
        out["baseline"] = base
        b = summary[base]
        for name, s in summary.items():
            sp = {}
            if s.get("fps") and b.get("fps") and math.isfinite(s["fps"]) and math.isfinite(b["fps"]):
                sp["fps"] = speedup(s["fps"], b["fps"])
            if s.get("segmentation_fps") and b.get("segmentation_fps"):
                sp["segmentation"] = speedup(s["segmentation_fps"], b["segmentation_fps"])
            sp["segmentation_median_per_frame"] = _paired_seg_speedup(groups[name], groups[base])
            s["speedup_vs_baseline"] = sp
    out["factor_analysis"] = factor_tables(groups, permutations=permutations, seed=seed)
    if scores_by_backend:
        out["segmentation_scores"] = scores_by_backend
    return out


def stats(records, shapiro: bool = True, anova: bool = True, permutations: int = 10_000,
          seed: int = 0) -> dict:
    groups = group_by_config(records)
    out = {}
    if shapiro:
        out["shapiro_wilk"] = {cfg: {name: _normality(_series(recs, name)) for name in SERIES}
                               for cfg, recs in groups.items()}
    if anova:
        out["factor_analysis"] = {s: factor_tables(groups, s, permutations, seed)
                                  for s in ("rtt_ms", "cycle_ms")}
    return out


# ---------------------------------------------------------------- dataset scoring

def evaluate(data, backend: str = "oracle") -> dict:
    """Per-class precision/recall/F1 for a backend over a dataset split.

    Reports per-frame median and quartiles (frames where a class is absent
    from both masks are skipped for that class), pooled pixel scores, and
    threshold-averaged AP/AR.
    """
    ds = data if isinstance(data, Dataset) else Dataset(data)
    if backend == "oracle":
        pos = {fid: i for i, fid in enumerate(ds.ids)}
        be = OracleBackend(lambda fid: ds.mask(pos[fid]))
    elif backend == "heuristic":
        be = HeuristicBackend()
    else:
        raise ValueError(f"unknown backend {backend!r}")
    per_class = {c: defaultdict(list) for c in ClassId}
    pooled = None
    apar = {c: ([], []) for c in ClassId}
    for i in range(len(ds)):
        frame = ds.frame(i)
        gt = ds.mask(i)
        pred = be.segment(frame)
        conf = confusion(pred, gt)
        pooled = conf if pooled is None else pooled + conf
        for c, s in scores(conf).items():
            if conf.tp[c] + conf.fp[c] + conf.fn[c] == 0:
                continue
            per_class[c]["precision"].append(s.p)
            per_class[c]["recall"].append(s.r)
            per_class[c]["f1"].append(s.f1)
        for c, (ap, ar) in ap_ar(pred, gt).items():
            apar[c][0].append(ap)
            apar[c][1].append(ar)
    out = {"backend": backend, "frames": len(ds), "classes": {}}
    pooled_scores = scores(pooled) if pooled is not None else {}
    for c in ClassId:
        entry = {}
        for metric, vals in per_class[c].items():
            entry[metric] = distribution_stats(vals).to_dict()
        if c in pooled_scores:
            s = pooled_scores[c]
            entry["pooled"] = {"precision": s.p, "recall": s.r, "f1": s.f1}
        if apar[c][0]:
            entry["AP"] = float(np.mean(apar[c][0]))
            entry["AR"] = float(np.mean(apar[c][1]))
        out["classes"][c.name.lower()] = entry
    return out


__all__ = ["end_to_end_fps", "evaluate", "factor_tables", "group_by_config", "report",
           "resolve_baseline", "segmentation_fps", "stats", "summarize_config"]
