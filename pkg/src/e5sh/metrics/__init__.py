"""Segmentation scores, timing identities, statistics and record logs."""

from e5sh.metrics.records import ExperimentRecord, RecordLog, SchemaError, read_csv, write_csv
from e5sh.metrics.segmentation import (DEFAULT_THRESHOLDS, PixelConfusion, Score, ap_ar,
                                       confusion, score, scores)
from e5sh.metrics.stats import (DistStats, FactorResult, StatResult, distribution_stats,
                                factor_analysis_2x3, shapiro_wilk)
from e5sh.metrics.timing import (CYCLES_PER_PICK, EDGE_PER_CYCLE_S, ROBOT_PC_PER_CYCLE_S,
                                 cumulative_fps, picking_cycle_estimate, speedup, throughput)

__all__ = [
    "ExperimentRecord", "RecordLog", "SchemaError", "read_csv", "write_csv",
    "DEFAULT_THRESHOLDS", "PixelConfusion", "Score", "ap_ar", "confusion", "score", "scores",
    "DistStats", "FactorResult", "StatResult", "distribution_stats", "factor_analysis_2x3",
    "shapiro_wilk", "CYCLES_PER_PICK", "EDGE_PER_CYCLE_S", "ROBOT_PC_PER_CYCLE_S",
    "cumulative_fps", "picking_cycle_estimate", "speedup", "throughput",
]
