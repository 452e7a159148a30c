"""Brute-force reference implementations used as test oracles."""

from collections import deque

import numpy as np

from e5sh.occmap import L_HIT, L_MAX, L_MIN, L_MISS


class DenseGrid:
    """Log-odds voxel grid updated by exhaustive segment/box intersection.

    A voxel is crossed by a ray when the segment meets its half-open box
    over a positive length; no incremental traversal is involved.
    """

    def __init__(self, resolution, n):
        self.res = resolution
        self.n = n
        self.offset = n // 2
        self.L = np.full((n, n, n), np.nan)
        k = np.arange(n)
        self.lo = (k - self.offset) * resolution
        self.hi = self.lo + resolution

    def key(self, p):
        return tuple(int(np.floor(c / self.res)) + self.offset for c in p)

    def crossed(self, o, p):
        o = np.asarray(o, float)
        d = np.asarray(p, float) - o
        t0 = np.zeros((3, self.n))
        t1 = np.ones((3, self.n))
        for a in range(3):
            if d[a] == 0.0:
                inside = (self.lo <= o[a]) & (o[a] < self.hi)
                t0[a] = np.where(inside, -np.inf, np.inf)
                t1[a] = np.where(inside, np.inf, -np.inf)
            else:
                ta = (self.lo - o[a]) / d[a]
                tb = (self.hi - o[a]) / d[a]
                t0[a], t1[a] = np.minimum(ta, tb), np.maximum(ta, tb)
        enter = np.maximum(np.maximum(t0[0][:, None, None], t0[1][None, :, None]), t0[2][None, None, :])
        leave = np.minimum(np.minimum(t1[0][:, None, None], t1[1][None, :, None]), t1[2][None, None, :])
        return np.maximum(enter, 0.0) < np.minimum(leave, 1.0)

    def insert(self, origin, points, soft=False):
        hits, free = set(), np.zeros((self.n,) * 3, bool)
        for p in points:
            k = self.key(p)
            if not all(0 <= v < self.n for v in k):
                continue
            hits.add(k)
            c = self.crossed(origin, p)
            c[k] = False
            free |= c
        for k in hits:
            free[k] = False
        self._add(free, L_MISS)
        hit = np.zeros_like(free)
        for k in hits:
            hit[k] = True
        self._add(hit, L_HIT)

    def _add(self, sel, delta):
        cur = np.where(np.isnan(self.L[sel]), 0.0, self.L[sel])
        self.L[sel] = np.clip(cur + delta, L_MIN, L_MAX)


def octree_dense(m, n):
    out = np.full((n, n, n), np.nan)
    for key, L, _ in m.leaves():
        out[key] = L
    return out


def components8(binary):
    """8-connected components by breadth-first search."""
    h, w = binary.shape
    seen = np.zeros_like(binary, bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if not binary[r, c] or seen[r, c]:
                continue
            q = deque([(r, c)])
            seen[r, c] = True
            comp = set()
            while q:
                y, x = q.popleft()
                comp.add((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            q.append((yy, xx))
            comps.append(frozenset(comp))
    return comps


def balanced_anova(cells):
    """Textbook two-way fixed-effects F for a balanced design.

    ``cells[i][j]`` is the list of observations at level i of A and j of B.
    """
    y = np.array(cells, dtype=float)  # (a, b, n)
    a, b, n = y.shape
    grand = y.mean()
    ma = y.mean(axis=(1, 2))
    mb = y.mean(axis=(0, 2))
    mab = y.mean(axis=2)
    ss_a = b * n * ((ma - grand) ** 2).sum()
    ss_b = a * n * ((mb - grand) ** 2).sum()
    ss_ab = n * ((mab - ma[:, None] - mb[None, :] + grand) ** 2).sum()
    ss_e = ((y - mab[..., None]) ** 2).sum()
    df_e = a * b * (n - 1)
    ms_e = ss_e / df_e
    return {"network": ss_a / (a - 1) / ms_e, "protocol": ss_b / (b - 1) / ms_e,
            "interaction": ss_ab / ((a - 1) * (b - 1)) / ms_e}


def planted(means, n=20, sigma=1.0, seed=0):
    """Observations (network, protocol, value) with the given cell means."""
    rng = np.random.default_rng(seed)
    obs = []
    for (net, proto), mu in means.items():
        obs.extend((net, proto, v) for v in rng.normal(mu, sigma, n))
    return obs
