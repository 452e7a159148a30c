"""Labelled depth to point clouds to log-odds occupancy octrees.

Voxels are addressed OctoMap-style by integer keys
``floor(coord / resolution) + 2**(depth - 1)`` per axis, so the root cube of
side ``resolution * 2**depth`` is centred on the origin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from e5sh import kernels
from e5sh.core import CameraIntrinsics, ClassId, LabeledMask

logger = logging.getLogger(__name__)

L_HIT = 0.85   # logit(0.7)
L_MISS = -0.4  # logit(0.4)
L_MIN = -2.0
L_MAX = 3.5
OCC_THRESHOLD = 0.5
DEFAULT_MIN_AREA = 20


class DimensionMismatch(ValueError):
    pass


@dataclass
class PointCloud:
    cls: ClassId
    points: np.ndarray  # (n, 3) metres, camera frame
    pixels: np.ndarray | None = None  # (n, 2) source (u, v)

    def __len__(self):
        return len(self.points)


def project_depth(mask: LabeledMask, depth: np.ndarray, intrinsics: CameraIntrinsics,
                  stride: int = 1) -> dict[ClassId, PointCloud]:
    """Pinhole back-projection of every valid depth pixel into its class cloud."""
    depth = np.asarray(depth)
    shape = (intrinsics.height, intrinsics.width)
    if mask.classes.shape != shape or depth.shape != shape:
        raise DimensionMismatch(f"mask {mask.classes.shape}, depth {depth.shape}, intrinsics {shape}")
    v, u = np.mgrid[0:shape[0]:stride, 0:shape[1]:stride]
    d = depth[::stride, ::stride]
    cls = mask.classes[::stride, ::stride]
    valid = d > 0
    u, v, d, cls = u[valid], v[valid], d[valid], cls[valid]
    z = d.astype(np.float64) / 1000.0
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    pts = np.stack([x, y, z], axis=1)
    pix = np.stack([u, v], axis=1)
    out = {}
    for c in ClassId:
        sel = cls == c
        out[c] = PointCloud(c, pts[sel], pix[sel])
    return out


class Occupancy:
    OCCUPIED = "occupied"
    FREE = "free"
    UNKNOWN = "unknown"


def logistic(L: float) -> float:
    return 1.0 / (1.0 + math.exp(-L))


class _Node:
    __slots__ = ("children", "value", "soft")

    def __init__(self):
        self.children = None
        self.value = None
        self.soft = False


class OctreeMap:
    """Sparse octree of log-odds leaves at a single resolution.

    Every insertion call counts each traversed voxel at most once as a miss
    and each endpoint voxel at most once as a hit; a voxel that is both
    within one call is treated as a hit.
    """

    def __init__(self, resolution: float = 0.01, depth: int = 16, l_hit: float = L_HIT,
                 l_miss: float = L_MISS, l_min: float = L_MIN, l_max: float = L_MAX,
                 threshold: float = OCC_THRESHOLD):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        if not 1 <= depth <= kernels.KEY_BITS:
            raise ValueError(f"depth must lie in [1, {kernels.KEY_BITS}]")
        self.resolution = float(resolution)
        self.depth = depth
        self.offset = 1 << (depth - 1)
        self.max_key = 1 << depth
        self.l_hit, self.l_miss = l_hit, l_miss
        self.l_min, self.l_max = l_min, l_max
        self.threshold_logodds = math.log(threshold / (1.0 - threshold))
        self.root = _Node()
        self._index: dict[int, _Node] = {}
        self._buckets: dict[tuple, _Node] = {}
        self._bucket_level = min(depth, 5)
        self._unlinked: list = []
        self.n_leaves = 0
        self.skipped = 0

    @property
    def side(self) -> float:
        return self.resolution * self.max_key

    # keys ---------------------------------------------------------------
    def key_of(self, point) -> tuple[int, int, int] | None:
        k = tuple(int(math.floor(float(c) / self.resolution)) + self.offset for c in point)
        if all(0 <= v < self.max_key for v in k):
            return k
        return None

    def center_of(self, key) -> tuple[float, float, float]:
        return tuple((k - self.offset + 0.5) * self.resolution for k in key)

    def _descend(self, node, key, top: int, bottom: int, create: bool):
        kx, ky, kz = key
        for level in range(top - 1, bottom - 1, -1):
            idx = (((kx >> level) & 1) << 2) | (((ky >> level) & 1) << 1) | ((kz >> level) & 1)
            if node.children is None:
                if not create:
                    return None
                node.children = [None] * 8
            child = node.children[idx]
            if child is None:
                if not create:
                    return None
                child = node.children[idx] = _Node()
            node = child
        return node

    def _leaf(self, key, create: bool) -> _Node | None:
        packed = (key[0] << 32) | (key[1] << 16) | key[2]
        leaf = self._index.get(packed)
        if leaf is not None or not create:
            return leaf
        leaf = _Node()
        leaf.value = 0.0
        self.n_leaves += 1
        self._index[packed] = leaf
        self._unlinked.append((key, leaf))
        return leaf

    def _link(self) -> None:
        """Hang leaves created since the last traversal into the tree."""
        b = self._bucket_level
        for key, leaf in self._unlinked:
            # subtree roots at a fixed level shorten walks for clustered keys
            bkey = (key[0] >> b, key[1] >> b, key[2] >> b)
            sub = self._buckets.get(bkey)
            if sub is None:
                sub = self._buckets[bkey] = self._descend(self.root, key, self.depth, b, True)
            parent = self._descend(sub, key, b, 1, True)
            idx = ((key[0] & 1) << 2) | ((key[1] & 1) << 1) | (key[2] & 1)
            if parent.children is None:
                parent.children = [None] * 8
            parent.children[idx] = leaf
        self._unlinked.clear()

    # updates ------------------------------------------------------------
    def update(self, key, delta: float, soft: bool = False) -> float:
        leaf = self._leaf(key, create=True)
        leaf.value = min(self.l_max, max(self.l_min, leaf.value + delta))
        if soft:
            leaf.soft = True
        return leaf.value

    def _apply(self, packed_keys: np.ndarray, delta: float, soft: bool) -> None:
        lo, hi = self.l_min, self.l_max
        index = self._index
        for packed, k in zip(packed_keys.tolist(), kernels.unpack_keys(packed_keys).tolist()):
            leaf = index.get(packed)
            if leaf is None:
                leaf = self._leaf(k, create=True)
            v = leaf.value + delta
            leaf.value = hi if v > hi else (lo if v < lo else v)
            if soft:
                leaf.soft = True

    def insert_cloud(self, sensor_origin, points, soft: bool = False) -> int:
        """Integrate one scan; returns the number of points skipped."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        free, hit, skipped = kernels.trace_rays(np.asarray(sensor_origin, dtype=np.float64), pts,
                                                self.resolution, self.offset, self.max_key)
        self.skipped += skipped
        hit = np.unique(hit)
        free = np.setdiff1d(np.unique(free), hit, assume_unique=True)
        self._apply(free, self.l_miss, False)
        self._apply(hit, self.l_hit, soft)
        return skipped

    # queries ------------------------------------------------------------
    def log_odds(self, point) -> float | None:
        key = self.key_of(point)
        if key is None:
            return None
        leaf = self._leaf(key, create=False)
        return None if leaf is None else leaf.value

    def query(self, point) -> str:
        L = self.log_odds(point)
        if L is None:
            return Occupancy.UNKNOWN
        return Occupancy.OCCUPIED if L > self.threshold_logodds else Occupancy.FREE

    def leaves(self):
        """Yield (key, log_odds, soft) for every stored voxel."""
        self._link()
        stack = [(self.root, 0, 0, 0, self.depth)]
        while stack:
            node, kx, ky, kz, level = stack.pop()
            if level == 0:
                if node.value is not None:
                    yield (kx, ky, kz), node.value, node.soft
                continue
            if node.children is None:
                continue
            lv = level - 1
            for idx, child in enumerate(node.children):
                if child is not None:
                    stack.append((child, kx | ((idx >> 2) & 1) << lv, ky | ((idx >> 1) & 1) << lv,
                                  kz | (idx & 1) << lv, lv))

    def occupied_keys(self) -> list[tuple[int, int, int]]:
        th = self.threshold_logodds
        packed = np.array(sorted(p for p, leaf in self._index.items() if leaf.value > th), dtype=np.uint64)
        return [tuple(k) for k in kernels.unpack_keys(packed).tolist()]

    def __len__(self):
        return self.n_leaves

    def export_text(self) -> str:
        rows = []
        for key, L, _ in self.leaves():
            c = self.center_of(key)
            rows.append((c, L))
        rows.sort()
        return "".join(f"{x:.6f} {y:.6f} {z:.6f} {L:.6f}\n" for (x, y, z), L in rows)


def query(m: OctreeMap, point) -> str:
    return m.query(point)


def insert_cloud(m: OctreeMap, sensor_origin, cloud) -> int:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return m.insert_cloud(sensor_origin, pts)


# ---------------------------------------------------------------- instances

@dataclass
class StrawberryInstance:
    instance_id: int
    pixels: np.ndarray  # (n, 2) as (row, col)
    centroid: tuple[float, float]  # (u, v) = (col, row)
    area: int
    is_target: bool = False

    def pixel_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.pixels}


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_instances(mask: LabeledMask, min_area: int = DEFAULT_MIN_AREA) -> list[StrawberryInstance]:
    """8-connected strawberry components; the one nearest the image centre is the target."""
    berry = mask.classes == ClassId.STRAWBERRY
    labels, n = ndimage.label(berry, structure=_EIGHT)
    out = []
    if n == 0:
        return out
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    for lab in range(1, n + 1):
        if areas[lab] < min_area:
            continue
        rows, cols = np.nonzero(labels == lab)
        inst = StrawberryInstance(len(out), np.stack([rows, cols], axis=1),
                                  (float(cols.mean()), float(rows.mean())), int(areas[lab]))
        out.append(inst)
    if out:
        cu = (mask.width - 1) / 2.0
        cv = (mask.height - 1) / 2.0

        def rank(inst):
            du, dv = inst.centroid[0] - cu, inst.centroid[1] - cv
            return (du * du + dv * dv, -inst.area, inst.instance_id)

        min(out, key=rank).is_target = True
    return out


def build_planning_maps(mask: LabeledMask, depth: np.ndarray, intrinsics: CameraIntrinsics,
                        target: StrawberryInstance | None, resolution: float = 0.01,
                        sensor_origin=(0.0, 0.0, 0.0), stride: int = 1
                        ) -> tuple[OctreeMap, OctreeMap]:
    """Obstacle map (rigid plus soft canopy) and a map of the target berry only.

    Non-target strawberries are left out of both maps.
    """
    clouds = project_depth(mask, depth, intrinsics, stride=stride)
    obstacles = OctreeMap(resolution)
    obstacles.insert_cloud(sensor_origin, clouds[ClassId.RIGID_OBSTACLE].points)
    obstacles.insert_cloud(sensor_origin, clouds[ClassId.CANOPY].points, soft=True)
    berries = OctreeMap(resolution)
    if target is not None:
        berry = clouds[ClassId.STRAWBERRY]
        on_target = np.zeros(mask.classes.shape, dtype=bool)
        on_target[target.pixels[:, 0], target.pixels[:, 1]] = True
        sel = on_target[berry.pixels[:, 1], berry.pixels[:, 0]] if len(berry) else np.zeros(0, bool)
        berries.insert_cloud(sensor_origin, berry.points[sel])
    return obstacles, berries
