"""Numba matvec kernels for int8 weights.

The float32 variants carry the streaming inference (int8 codes are exact in
f32, and f32 doubles the SIMD lanes); the float64 variants exist for
reference checks. fastmath only licenses reassociation; with a fixed binary
and single-threaded execution the op order is frozen, so repeated runs stay
bit-identical.
"""

import numba
import numpy as np

F32 = numba.float32


@numba.njit("void(int8[:,::1], float64[::1], float64[::1])",
            cache=True, fastmath=True)
def dense_matvec_i8(w, x, out):
    """out = W @ x with W int8 (rows, cols), float64 accumulation."""
    rows, cols = w.shape
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += w[r, c] * x[c]
        out[r] = acc


@numba.njit("void(int8[:,::1], float32[::1], float32[::1])",
            cache=True, fastmath=True)
def dense_matvec_i8_f32(w, x, out):
    rows, cols = w.shape
    for r in range(rows):
        acc = F32(0.0)
        for c in range(cols):
            acc += F32(w[r, c]) * x[c]
        out[r] = acc


@numba.njit("void(int64[::1], int64[::1], int8[:,:,::1], float64[::1], float64[::1])",
            cache=True, fastmath=True)
def bsr_matvec_i8(indptr, colblocks, blocks, x, out):
    """out = W @ x for 16x4 block-sparse int8 W.

    blocks is (nblocks, 4, 16): lane-transposed so the 16 output rows of a
    block are contiguous. indptr has one entry per 16-row block of W.
    """
    nrb = indptr.shape[0] - 1
    acc = np.empty(16)
    for rb in range(nrb):
        for i in range(16):
            acc[i] = 0.0
        for bi in range(indptr[rb], indptr[rb + 1]):
            cb = colblocks[bi] * 4
            x0 = x[cb]
            x1 = x[cb + 1]
            x2 = x[cb + 2]
            x3 = x[cb + 3]
            for i in range(16):
                acc[i] += (blocks[bi, 0, i] * x0 + blocks[bi, 1, i] * x1
                           + blocks[bi, 2, i] * x2 + blocks[bi, 3, i] * x3)
        base = rb * 16
        for i in range(16):
            out[base + i] = acc[i]


@numba.njit("void(int64[::1], int64[::1], int8[:,:,::1], float32[::1], float32[::1])",
            cache=True, fastmath=True)
def bsr_matvec_i8_f32(indptr, colblocks, blocks, x, out):
    nrb = indptr.shape[0] - 1
    acc = np.empty(16, dtype=np.float32)
    for rb in range(nrb):
        for i in range(16):
            acc[i] = F32(0.0)
        for bi in range(indptr[rb], indptr[rb + 1]):
            cb = colblocks[bi] * 4
            x0 = x[cb]
            x1 = x[cb + 1]
            x2 = x[cb + 2]
            x3 = x[cb + 3]
            for i in range(16):
                acc[i] += (F32(blocks[bi, 0, i]) * x0 + F32(blocks[bi, 1, i]) * x1
                           + F32(blocks[bi, 2, i]) * x2 + F32(blocks[bi, 3, i]) * x3)
        base = rb * 16
        for i in range(16):
            out[base + i] = acc[i]


@numba.njit(cache=True, fastmath=True)
def nlms_filter(x, d, taps, mu, eps):
    """Sample-domain NLMS; reference oracle for the block-frequency AEC.

    Returns the error (echo-cancelled) signal. O(len(x) * taps), only
    practical here because it is compiled.
    """
    n = x.shape[0]
    w = np.zeros(taps)
    e = np.zeros(n)
    p = 0.0
    for i in range(n):
        p += x[i] * x[i]
        if i >= taps:
            p -= x[i - taps] * x[i - taps]
        kmax = min(taps, i + 1)
        y = 0.0
        for k in range(kmax):
            y += w[k] * x[i - k]
        err = d[i] - y
        e[i] = err
        g = mu * err / (p + eps)
        for k in range(kmax):
            w[k] += g * x[i - k]
    return e
