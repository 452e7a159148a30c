# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; same contracts."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY
from libc.stdint cimport uint8_t, uint16_t, uint64_t, int64_t
from libc.string cimport memcmp, memcpy, memset

cnp.import_array()


cdef inline uint64_t _pack(int64_t kx, int64_t ky, int64_t kz) nogil:
    return (<uint64_t>kx << 32) | (<uint64_t>ky << 16) | <uint64_t>kz


def rle_encode(const uint8_t[:, :, ::1] units):
    cdef Py_ssize_t h = units.shape[0], w = units.shape[1], k = units.shape[2]
    cdef Py_ssize_t r, c, start, pos = 0, run_size = 2 + k
    if h == 0 or w == 0:
        return b""
    # worst case is one run per pixel; trimmed at the end
    out = np.empty(h * w * run_size, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    cdef uint8_t* dst = &o[0]
    cdef const uint8_t* row
    with nogil:
        for r in range(h):
            row = &units[r, 0, 0]
            start = 0
            for c in range(1, w + 1):
                if c < w:
                    if k == 1:
                        if row[c] == row[start]:
                            continue
                    elif memcmp(row + c * k, row + start * k, k) == 0:
                        continue
                dst[pos] = (c - start) & 0xFF
                dst[pos + 1] = ((c - start) >> 8) & 0xFF
                memcpy(dst + pos + 2, row + start * k, k)
                pos += run_size
                start = c
    return out[:pos].tobytes()


def rle_decode(payload, Py_ssize_t h, Py_ssize_t w, Py_ssize_t k):
    cdef const uint8_t[::1] src = np.frombuffer(payload, dtype=np.uint8)
    cdef Py_ssize_t run_size = 2 + k
    cdef Py_ssize_t n = src.shape[0]
    if n % run_size:
        raise ValueError("RLE payload is not a whole number of runs")
    out = np.empty((h, w, k), dtype=np.uint8)
    cdef Py_ssize_t pos = 0, pix = 0, run, i, total = h * w
    cdef int err = 0
    if total == 0:
        if n:
            raise ValueError(f"RLE covers pixels, expected {total}")
        return out
    cdef uint8_t[:, :, ::1] view = out
    cdef uint8_t* dst = &view[0, 0, 0]
    cdef const uint8_t* s = &src[0] if n else NULL
    with nogil:
        while pos < n:
            run = s[pos] | (s[pos + 1] << 8)
            if run == 0:
                err = 1
                break
            if pix + run > total:
                err = 2
                break
            if (pix // w) != ((pix + run - 1) // w):
                err = 3
                break
            if k == 1:
                memset(dst + pix, s[pos + 2], run)
            else:
                for i in range(run):
                    memcpy(dst + (pix + i) * k, s + pos + 2, k)
            pix += run
            pos += run_size
    if err == 1:
        raise ValueError("zero-length RLE run")
    if err == 2:
        raise ValueError("RLE covers more pixels than the image")
    if err == 3:
        raise ValueError("RLE run crosses a row boundary")
    if pix != total:
        raise ValueError(f"RLE covers {pix} pixels, expected {total}")
    return out


cdef inline int64_t _key(double c, double res, int64_t offset) nogil:
    return <int64_t>floor(c / res) + offset


def trace_rays(origin, points, double resolution, int64_t offset, int64_t max_key):
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t npts = p.shape[0], i, a, s
    cdef int64_t start[3]
    cdef int64_t end[3]
    cdef int64_t cur[3]
    cdef int64_t remaining[3]
    cdef int64_t step[3]
    cdef double t_max[3]
    cdef double t_delta[3]
    cdef double d, boundary
    cdef int64_t total, nfree = 0, nhit = 0, skipped = 0
    cdef bint inside
    for a in range(3):
        start[a] = _key(o[a], resolution, offset)
        if start[a] < 0 or start[a] >= max_key:
            raise ValueError("sensor origin outside the map")
    for i in range(npts):
        inside = True
        total = 0
        for a in range(3):
            end[a] = _key(p[i, a], resolution, offset)
            if end[a] < 0 or end[a] >= max_key:
                inside = False
            total += end[a] - start[a] if end[a] >= start[a] else start[a] - end[a]
        if inside:
            nhit += 1
            nfree += total
    free = np.empty(nfree, dtype=np.uint64)
    hit = np.empty(nhit, dtype=np.uint64)
    cdef uint64_t[::1] fv = free
    cdef uint64_t[::1] hv = hit
    cdef Py_ssize_t fpos = 0, hpos = 0
    for i in range(npts):
        inside = True
        total = 0
        for a in range(3):
            end[a] = _key(p[i, a], resolution, offset)
            if end[a] < 0 or end[a] >= max_key:
                inside = False
        if not inside:
            skipped += 1
            continue
        hv[hpos] = _pack(end[0], end[1], end[2])
        hpos += 1
        for a in range(3):
            cur[a] = start[a]
            remaining[a] = end[a] - start[a] if end[a] >= start[a] else start[a] - end[a]
            total += remaining[a]
            step[a] = 0
            t_max[a] = INFINITY
            t_delta[a] = INFINITY
            d = p[i, a] - o[a]
            if remaining[a] == 0 or d == 0.0:
                continue
            if d > 0:
                step[a] = 1
                boundary = (cur[a] - offset + 1) * resolution
            else:
                step[a] = -1
                boundary = (cur[a] - offset) * resolution
            t_max[a] = (boundary - o[a]) / d
            t_delta[a] = resolution / fabs(d)
        for s in range(total):
            fv[fpos] = _pack(cur[0], cur[1], cur[2])
            fpos += 1
            a = 0
            if t_max[1] < t_max[a]:
                a = 1
            if t_max[2] < t_max[a]:
                a = 2
            cur[a] += step[a]
            remaining[a] -= 1
            if remaining[a] == 0:
                t_max[a] = INFINITY
            else:
                t_max[a] += t_delta[a]
    return free, hit, skipped
