"""Kernel dispatch: the compiled extension if importable, else pure Python.

Set ``E5SH_PURE_PYTHON=1`` to force the fallback.
"""

import os

from e5sh import _kernels_py
from e5sh._kernels_py import KEY_BITS, pack_key, unpack_keys  # noqa: F401

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("E5SH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from e5sh import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
trace_rays = _impl.trace_rays
