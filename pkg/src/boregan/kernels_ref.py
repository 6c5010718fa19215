"""Strict-order float64 reference kernels for verification mode.

The forward pass accumulates products in the fixed (in-channel, ky, kx)
order with the bias added last, so for every output element the additions
happen in exactly the same sequence as a plain nested loop. That makes
64-bit forward results reproducible bit for bit against a loop oracle.
Used for float64 tensors only; production float32 traffic goes through
the packed BLAS path.
"""

from __future__ import annotations

import numpy as np


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    # Seed the accumulator with the bias, then add one product per step:
    # each output element sees the exact scalar sequence b + p1 + p2 + ...,
    # which keeps 64-bit results bit-identical to a plain nested loop.
    out = np.empty((n, co, oh, ow), dtype=x.dtype)
    out[:] = b[None, :, None, None]
    for ic in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                xs = xp[:, ic, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride]
                out += w[None, :, ic, ky, kx, None, None] * xs[:, None, :, :]
    return out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int, gout: np.ndarray, need_gx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp) if need_gx else None
    gw = np.zeros_like(w)
    for ic in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                hs = slice(ky, ky + oh * stride, stride)
                ws = slice(kx, kx + ow * stride, stride)
                xs = xp[:, ic, hs, ws]
                gw[:, ic, ky, kx] = np.tensordot(gout, xs, axes=([0, 2, 3], [0, 1, 2]))
                if need_gx:
                    gxp[:, ic, hs, ws] += np.tensordot(gout, w[:, ic, ky, kx], axes=([1], [0]))
    gb = gout.sum(axis=(0, 2, 3))
    if not need_gx:
        return None, gw, gb
    gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw, gb
