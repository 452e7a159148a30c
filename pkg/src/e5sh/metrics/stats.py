"""Distribution summaries, Shapiro-Wilk normality and the 2x3 factor analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

_N01 = NormalDist()


@dataclass(frozen=True)
class DistStats:
    median: float
    q1: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> dict:
        return {"median": self.median, "q1": self.q1, "q3": self.q3, "iqr": self.iqr}


def distribution_stats(samples) -> DistStats:
    """Median and quartiles with linear interpolation at (n - 1) * q."""
    x = np.asarray([s for s in samples if s is not None], dtype=np.float64)
    if x.size == 0:
        raise ValueError("no samples")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return DistStats(float(med), float(q1), float(q3))


@dataclass(frozen=True)
class StatResult:
    W: float
    p_value: float
    n: int

    def to_dict(self) -> dict:
        return {"W": self.W, "p_value": self.p_value, "n": self.n}


def _poly(cc, x):
    return sum(c * x ** i for i, c in enumerate(cc))


_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def shapiro_weights(n: int) -> np.ndarray:
    """Antisymmetric Shapiro-Wilk coefficients for sample size ``n``."""
    half = n // 2
    a = np.zeros(half)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        m = np.array([_N01.inv_cdf((i + 1 - 0.375) / (n + 0.25)) for i in range(half)])
        summ2 = 2.0 * float(np.sum(m * m))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) - m[0] / ssumm2
        if n > 5:
            first = 2
            a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                            / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
            a[1] = a2
        else:
            first = 1
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        a[0] = a1
        a[first:] = -m[first:] / fac
    full = np.zeros(n)
    full[:half] = -a
    full[n - half:] = a[::-1]
    return full


def _upper_tail(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def shapiro_wilk(samples) -> StatResult:
    """Shapiro-Wilk W with Royston's normalizing transform for the p-value."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"sample size {n} outside [3, 5000]")
    xc = x - x.mean()
    ss = float(np.dot(xc, xc))
    if ss <= 0.0 or x[-1] - x[0] <= 0.0:
        raise ValueError("zero-variance sample")
    a = shapiro_weights(n)
    w = float(np.dot(a, xc)) ** 2 / ss
    w = min(w, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return StatResult(w, max(0.0, min(1.0, p)), n)
    y = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return StatResult(w, 1e-99, n)
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    if y == -math.inf:
        return StatResult(w, 1.0, n)
    return StatResult(w, _upper_tail((y - mean) / sd), n)


# ---------------------------------------------------------------- 2x3 factor analysis

NETWORKS = ("5g", "wifi")
PROTOCOLS = ("qos0", "qos1", "tcpros")


@dataclass
class FactorResult:
    ss: dict
    df: dict
    F: dict
    p_value: dict
    n_permutations: int
    cell_means: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ss": self.ss, "df": self.df, "F": self.F, "p_value": self.p_value,
                "n_permutations": self.n_permutations, "cell_means": self.cell_means}


def _sums_of_squares(y, a_idx, b_idx, na, nb):
    """Vectorized over rows of ``y`` (shape (k, N)); returns dict of (k,) arrays."""
    cell = a_idx * nb + b_idx
    onehot_cell = np.zeros((y.shape[1], na * nb))
    onehot_cell[np.arange(y.shape[1]), cell] = 1.0
    n_cell = onehot_cell.sum(axis=0)
    n_a = n_cell.reshape(na, nb).sum(axis=1)
    n_b = n_cell.reshape(na, nb).sum(axis=0)
    grand = y.mean(axis=1, keepdims=True)
    yc = y - grand
    cell_sum = yc @ onehot_cell  # (k, cells)
    cell_mean = cell_sum / n_cell
    a_mean = cell_sum.reshape(-1, na, nb).sum(axis=2) / n_a
    b_mean = cell_sum.reshape(-1, na, nb).sum(axis=1) / n_b
    ss_a = (a_mean ** 2 * n_a).sum(axis=1)
    ss_b = (b_mean ** 2 * n_b).sum(axis=1)
    ss_cells = (cell_mean ** 2 * n_cell).sum(axis=1)
    ss_total = (yc ** 2).sum(axis=1)
    ss_e = ss_total - ss_cells
    ss_ab = ss_cells - ss_a - ss_b
    return {"A": ss_a, "B": ss_b, "AB": ss_ab, "E": np.maximum(ss_e, 0.0)}


def _f_stats(ss, df):
    ms_e = ss["E"] / df["E"]
    out = {}
    for k in ("A", "B", "AB"):
        ms = ss[k] / df[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(ms_e > 0, ms / np.where(ms_e > 0, ms_e, 1.0),
                         np.where(ms > 1e-12 * (1.0 + np.abs(ms)), np.inf, np.nan))
        out[k] = f
    return out


def factor_analysis_2x3(observations, levels_a=NETWORKS, levels_b=PROTOCOLS,
                        permutations: int = 10_000, seed: int = 0) -> FactorResult:
    """Two-way fixed-effects analysis with permutation p-values.

    ``observations`` is an iterable of (level_a, level_b, value). The F
    statistics are the classical ones; each p-value is the fraction of
    label permutations whose F is at least the observed F. A degenerate F
    (no variation at all) is reported as no effect with p = 1.
    """
    obs = list(observations)
    ia = {lv: i for i, lv in enumerate(levels_a)}
    ib = {lv: i for i, lv in enumerate(levels_b)}
    na, nb = len(levels_a), len(levels_b)
    a_idx = np.array([ia[o[0]] for o in obs], dtype=np.int64)
    b_idx = np.array([ib[o[1]] for o in obs], dtype=np.int64)
    y = np.array([float(o[2]) for o in obs])
    counts = np.bincount(a_idx * nb + b_idx, minlength=na * nb)
    if np.any(counts == 0):
        raise ValueError("empty cell in factor analysis")
    if np.any(counts < 2):
        raise ValueError("each cell needs at least two observations")
    n = len(obs)
    df = {"A": na - 1, "B": nb - 1, "AB": (na - 1) * (nb - 1), "E": n - na * nb}
    ss_obs = _sums_of_squares(y[None, :], a_idx, b_idx, na, nb)
    f_obs = _f_stats(ss_obs, df)
    rng = np.random.default_rng(seed)
    names = {"A": "network", "B": "protocol", "AB": "interaction"}
    exceed = {k: 0 for k in names}
    batch = 2000
    done = 0
    while done < permutations:
        k = min(batch, permutations - done)
        perm = rng.permuted(np.broadcast_to(y, (k, n)).copy(), axis=1)
        f_perm = _f_stats(_sums_of_squares(perm, a_idx, b_idx, na, nb), df)
        for key in names:
            fo = f_obs[key][0]
            if not np.isnan(fo):
                exceed[key] += int(np.sum(f_perm[key] >= fo * (1 - 1e-12)))
        done += k
    F, p = {}, {}
    for key, name in names.items():
        fo = float(f_obs[key][0])
        if math.isnan(fo):
            F[name], p[name] = None, 1.0
        else:
            F[name], p[name] = fo, exceed[key] / permutations
    cell_means = {}
    for i, lv_a in enumerate(levels_a):
        for j, lv_b in enumerate(levels_b):
            sel = (a_idx == i) & (b_idx == j)
            cell_means[f"{lv_a}/{lv_b}"] = float(y[sel].mean())
    ss = {names[k]: float(ss_obs[k][0]) for k in names}
    ss["residual"] = float(ss_obs["E"][0])
    dfo = {names[k]: df[k] for k in names}
    dfo["residual"] = df["E"]
    return FactorResult(ss, dfo, F, p, permutations, cell_means)
