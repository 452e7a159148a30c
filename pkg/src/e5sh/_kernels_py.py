"""Pure-Python implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for
loop and is preferred when the extension is built.
"""

import math

import numpy as np

KEY_BITS = 16
KEY_MASK = (1 << KEY_BITS) - 1


def pack_key(kx, ky, kz):
    return (kx << 32) | (ky << 16) | kz


def unpack_keys(packed):
    packed = np.asarray(packed, dtype=np.uint64)
    kx = (packed >> np.uint64(32)) & np.uint64(KEY_MASK)
    ky = (packed >> np.uint64(16)) & np.uint64(KEY_MASK)
    kz = packed & np.uint64(KEY_MASK)
    return np.stack([kx, ky, kz], axis=-1).astype(np.int64)


def rle_encode(units):
    """Row-bounded run-length encoding of an (h, w, k) uint8 array.

    Each run is a little-endian u16 length followed by the k pixel bytes.
    """
    h, w, k = units.shape
    if h == 0 or w == 0:
        return b""
    flat = units.reshape(h * w, k)
    change = np.empty(h * w, dtype=bool)
    change[0] = True
    change[1:] = np.any(flat[1:] != flat[:-1], axis=1)
    change[::w] = True  # runs restart on every row
    starts = np.flatnonzero(change)
    lengths = np.diff(np.append(starts, h * w))
    out = np.empty(len(starts), dtype=[("n", "<u2"), ("v", "u1", (k,))])
    out["n"] = lengths
    out["v"] = flat[starts]
    return out.tobytes()


def rle_decode(payload, h, w, k):
    run_size = 2 + k
    if len(payload) % run_size:
        raise ValueError("RLE payload is not a whole number of runs")
    runs = np.frombuffer(payload, dtype=[("n", "<u2"), ("v", "u1", (k,))])
    lengths = runs["n"].astype(np.int64)
    if np.any(lengths == 0):
        raise ValueError("zero-length RLE run")
    ends = np.cumsum(lengths)
    total = int(ends[-1]) if len(ends) else 0
    if total != h * w:
        raise ValueError(f"RLE covers {total} pixels, expected {h * w}")
    if w and len(ends):
        starts = ends - lengths
        if np.any(starts // w != (ends - 1) // w):
            raise ValueError("RLE run crosses a row boundary")
    flat = np.repeat(runs["v"], lengths, axis=0)
    return flat.reshape(h, w, k)


def _key(c, resolution, offset):
    return int(math.floor(c / resolution)) + offset


def trace_rays(origin, points, resolution, offset, max_key):
    """Voxel keys crossed by the segments ``origin -> points[i]``.

    Returns ``(free, hit, skipped)`` where ``free`` lists every voxel the
    segment passes through before its endpoint voxel, ``hit`` the endpoint
    voxels, and ``skipped`` counts points outside the key range. Keys are
    packed into uint64 with ``pack_key``; duplicates are not removed.
    """
    ox, oy, oz = (float(v) for v in origin)
    start = [_key(ox, resolution, offset), _key(oy, resolution, offset), _key(oz, resolution, offset)]
    if not all(0 <= s < max_key for s in start):
        raise ValueError("sensor origin outside the map")
    free = []
    hit = []
    skipped = 0
    o = (ox, oy, oz)
    for p in points:
        p = (float(p[0]), float(p[1]), float(p[2]))
        end = [_key(p[i], resolution, offset) for i in range(3)]
        if not all(0 <= e < max_key for e in end):
            skipped += 1
            continue
        hit.append(pack_key(*end))
        cur = list(start)
        remaining = [abs(end[i] - start[i]) for i in range(3)]
        total = remaining[0] + remaining[1] + remaining[2]
        if total == 0:
            continue
        step = [0, 0, 0]
        t_max = [math.inf] * 3
        t_delta = [math.inf] * 3
        for i in range(3):
            d = p[i] - o[i]
            if remaining[i] == 0 or d == 0.0:
                continue
            if d > 0:
                step[i] = 1
                boundary = (cur[i] - offset + 1) * resolution
            else:
                step[i] = -1
                boundary = (cur[i] - offset) * resolution
            t_max[i] = (boundary - o[i]) / d
            t_delta[i] = resolution / abs(d)
        for _ in range(total):
            free.append(pack_key(cur[0], cur[1], cur[2]))
            axis = 0
            if t_max[1] < t_max[axis]:
                axis = 1
            if t_max[2] < t_max[axis]:
                axis = 2
            cur[axis] += step[axis]
            remaining[axis] -= 1
            if remaining[axis] == 0:
                t_max[axis] = math.inf
            else:
                t_max[axis] += t_delta[axis]
    return (np.array(free, dtype=np.uint64), np.array(hit, dtype=np.uint64), skipped)
