"""Power, CO2 and cost models: one shared edge server vs an embedded board per robot."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

# (robots, watts) read off the edge-server measurements
EDGE_DETECTRON2 = ((1, 33.6), (2, 48.3), (3, 59.7), (12, 240.0))
EDGE_D2GO = tuple((n, w * 200.0 / 240.0) for n, w in EDGE_DETECTRON2[:3]) + ((12, 200.0),)
NJXN_PER_ROBOT = {"detectron2": 110.0 / 12.0, "d2go": 95.0 / 12.0}
EMISSION_FACTOR = 98.0 / 33.6  # mg CO2 per watt per reporting interval

# paired (watts, mg) readings used to report the single-factor residual
REPORTED_EMISSIONS = ((33.6, 98.0), (48.3, 128.0), (59.7, 155.0), (240.0, 620.0),
                      (200.0, 500.0), (110.0, 300.0), (95.0, 240.0))


class ModelResidualWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PowerModel:
    platform: str
    model: str
    anchors: tuple
    emission_factor: float = EMISSION_FACTOR

    def __post_init__(self):
        a = tuple((int(n), float(w)) for n, w in self.anchors)
        if not a:
            raise ValueError("at least one anchor is required")
        for (n0, w0), (n1, w1) in zip(a, a[1:]):
            if n1 <= n0 or w1 < w0:
                raise ValueError("anchors must increase in n and not decrease in watts")
        object.__setattr__(self, "anchors", a)


def default_power_models() -> dict[tuple[str, str], PowerModel]:
    return {
        ("edge", "detectron2"): PowerModel("edge", "detectron2", EDGE_DETECTRON2),
        ("edge", "d2go"): PowerModel("edge", "d2go", EDGE_D2GO),
        ("njxn", "detectron2"): PowerModel("njxn", "detectron2", ((1, NJXN_PER_ROBOT["detectron2"]),)),
        ("njxn", "d2go"): PowerModel("njxn", "d2go", ((1, NJXN_PER_ROBOT["d2go"]),)),
    }


def power_at(model: PowerModel, n: float) -> float:
    """Watts for ``n`` robots: exact at anchors, linear in between and beyond.

    A single-anchor model scales linearly with ``n`` (one board per robot).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    a = model.anchors
    if len(a) == 1:
        return a[0][1] * n / a[0][0]
    for n_i, w_i in a:
        if n == n_i:
            return w_i
    if n < a[0][0]:
        (n0, w0), (n1, w1) = a[0], a[1]
    elif n > a[-1][0]:
        (n0, w0), (n1, w1) = a[-2], a[-1]
    else:
        for (n0, w0), (n1, w1) in zip(a, a[1:]):
            if n0 <= n <= n1:
                break
    return w0 + (w1 - w0) * (n - n0) / (n1 - n0)


def emission(watts: float, factor: float = EMISSION_FACTOR) -> float:
    if watts < 0:
        raise ValueError("watts must be non-negative")
    return watts * factor


def emission_residuals(factor: float = EMISSION_FACTOR, pairs=REPORTED_EMISSIONS) -> list[dict]:
    """Fitted-vs-reported mg for each paired reading; warns when any differs by >5%."""
    out = []
    for w, mg in pairs:
        fitted = emission(w, factor)
        out.append({"watts": w, "reported_mg": mg, "fitted_mg": fitted,
                    "residual_mg": fitted - mg, "relative": (fitted - mg) / mg})
    worst = max(abs(r["relative"]) for r in out)
    if worst > 0.05:
        warnings.warn(f"single emission factor misfits reported readings by up to {worst:.0%}",
                      ModelResidualWarning, stacklevel=2)
    return out


def consumption_ratio(n: float, model: str = "detectron2", models=None) -> float:
    """Edge watts for n robots over n standalone boards' watts."""
    models = models or default_power_models()
    edge = power_at(models[("edge", model)], n)
    board = power_at(models[("njxn", model)], 1)
    return edge / (n * board)


@dataclass(frozen=True)
class CostModel:
    server_base: float = 2000.0
    gpu_unit: float = 250.0
    robots_per_gpu: int = 3
    njxn_unit: float = 300.0

    def __post_init__(self):
        if min(self.server_base, self.gpu_unit, self.robots_per_gpu, self.njxn_unit) <= 0:
            raise ValueError("cost parameters must be positive")

    def server_cost(self, n: int) -> float:
        return self.server_base + math.ceil(n / self.robots_per_gpu) * self.gpu_unit

    def embedded_cost(self, n: int) -> float:
        return n * self.njxn_unit


def break_even(cost: CostModel = CostModel(), limit: int = 1000) -> int | None:
    for n in range(1, limit + 1):
        if cost.server_cost(n) <= cost.embedded_cost(n):
            return n
    return None


@dataclass
class EnergyConfig:
    models: dict = field(default_factory=default_power_models)
    cost: CostModel = field(default_factory=CostModel)
    emission_factor: float = EMISSION_FACTOR

    @classmethod
    def from_json(cls, text: str) -> "EnergyConfig":
        d = json.loads(text)
        cfg = cls()
        factor = float(d.get("emission_factor", EMISSION_FACTOR))
        cfg.emission_factor = factor
        for key, anchors in d.get("anchors", {}).items():
            platform, model = key.split("/")
            cfg.models[(platform, model)] = PowerModel(platform, model, tuple(map(tuple, anchors)), factor)
        if "costs" in d:
            cfg.cost = CostModel(**d["costs"])
        return cfg


def energy_table(robots: int, cfg: EnergyConfig | None = None) -> dict:
    cfg = cfg or EnergyConfig()
    rows = []
    for n in range(1, robots + 1):
        row = {"robots": n}
        for model in ("detectron2", "d2go"):
            edge_w = power_at(cfg.models[("edge", model)], n)
            board_w = n * power_at(cfg.models[("njxn", model)], 1)
            anchored = any(a == n for a, _ in cfg.models[("edge", model)].anchors)
            row[model] = {
                "edge_watts": edge_w,
                "edge_interpolated": not anchored,
                "njxn_watts": board_w,
                "edge_mg_co2": emission(edge_w, cfg.emission_factor),
                "njxn_mg_co2": emission(board_w, cfg.emission_factor),
                "consumption_ratio": edge_w / board_w,
            }
        row["server_cost"] = cfg.cost.server_cost(n)
        row["embedded_cost"] = cfg.cost.embedded_cost(n)
        rows.append(row)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelResidualWarning)
        residuals = emission_residuals(cfg.emission_factor)
    return {"rows": rows, "break_even": break_even(cfg.cost),
            "emission_factor": cfg.emission_factor, "emission_residuals": residuals}
