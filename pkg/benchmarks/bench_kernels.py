"""Compare the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json OUT]

Inputs are a generated 848x480 scene: its class mask for the RLE kernels
and its depth cloud (every 8th pixel) for ray tracing.
"""

import argparse
import json
import timeit

import numpy as np

from e5sh import _kernels_py
from e5sh.core import ClassId, LabeledMask
from e5sh.harness.scenes import SceneSpec, generate_scene
from e5sh.occmap import project_depth
from e5sh.core import CameraIntrinsics

try:
    from e5sh import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _inputs(seed: int):
    spec = SceneSpec()
    rgb, depth, classes = generate_scene(spec, np.random.default_rng(seed))
    k = CameraIntrinsics.default(spec.width, spec.height)
    mask_units = np.ascontiguousarray(classes[..., None])
    rgb_units = np.ascontiguousarray(rgb)
    clouds = project_depth(LabeledMask(classes), depth, k, stride=8)
    pts = np.concatenate([c.points for c in clouds.values()])
    return mask_units, rgb_units, pts


def _cases(mod, mask_units, rgb_units, pts):
    h, w, _ = mask_units.shape
    enc_mask = mod.rle_encode(mask_units)
    enc_rgb = mod.rle_encode(rgb_units)
    origin = np.zeros(3)
    return {
        "rle_encode mask": lambda: mod.rle_encode(mask_units),
        "rle_decode mask": lambda: mod.rle_decode(enc_mask, h, w, 1),
        "rle_encode rgb": lambda: mod.rle_encode(rgb_units),
        "rle_decode rgb": lambda: mod.rle_decode(enc_rgb, h, w, 3),
        f"trace_rays {len(pts)} pts @ 1 cm": lambda: mod.trace_rays(origin, pts, 0.01, 1 << 15, 1 << 16),
    }


def best_ms(fn, repeat: int) -> float:
    number = 1
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None)
    a = ap.parse_args(argv)

    inputs = _inputs(a.seed)
    py = _cases(_kernels_py, *inputs)
    cy = _cases(_kernels_c, *inputs) if _kernels_c is not None else {}
    rows = []
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in py.items():
        t_py = best_ms(fn, a.repeat)
        t_cy = best_ms(cy[name], a.repeat) if name in cy else None
        sp = t_py / t_cy if t_cy else None
        rows.append({"kernel": name, "python_ms": t_py, "cython_ms": t_cy, "speedup": sp})
        print(f"{name:34s} {t_py:10.2f} " + (f"{t_cy:10.2f} {sp:7.1f}x" if t_cy else f"{'n/a':>10s}"))
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
