"""Convolution kernels and backend selection.

The heavy work in this package is 2-D cross-correlation on NCHW float32
tensors. It runs as a chunked im2col GEMM: output pixels are processed in
cache-sized row blocks, each block packed into a small reused scratch
buffer, multiplied with the flattened kernel in one BLAS call, and stored
(with bias) straight into the NCHW output while still cache-hot. The
backward pass reuses the same machinery: weight gradients accumulate per
chunk, and the input gradient of a stride-1 convolution is itself a
convolution with the flipped, transposed kernel; strided convolutions fall
back to a patch scatter-add.

Packing, scattering and the chunk-local layout shuffles are the hot loops
and exist in two lanes:

* ``numba``: @njit-compiled loops (default when numba imports)
* ``numpy``: stride-trick view copies and vectorized slice adds

Select with the environment variable ``BOREGAN_BACKEND=numpy|numba`` or at
runtime via :func:`select_backend`. Float64 inputs always route to the
strict-order reference kernels in :mod:`boregan.kernels_ref`: 64-bit mode
is the verification mode, and its forward pass reproduces a plain nested
loop bit for bit.

Scratch buffers live in thread-local storage, so threads using disjoint
tapes never share state.
"""

from __future__ import annotations

import ctypes
import math
import os
import threading

import numpy as np

from . import kernels_numpy, kernels_ref

try:
    from . import kernels_numba
except ImportError:  # numba not installed; numpy lane still works
    kernels_numba = None

_LANES = {"numpy": kernels_numpy}
if kernels_numba is not None:
    _LANES["numba"] = kernels_numba

# Per-chunk pack buffer budget; big enough to amortize call overhead, small
# enough that a chunk stays cache-resident between pack, GEMM and store.
CHUNK_BYTES = 4 << 20


def _default_backend() -> str:
    env = os.environ.get("BOREGAN_BACKEND", "").strip().lower()
    if env:
        if env not in ("numpy", "numba"):
            raise ValueError(f"BOREGAN_BACKEND must be 'numpy' or 'numba', got {env!r}")
        if env == "numba" and "numba" not in _LANES:
            raise ValueError("BOREGAN_BACKEND=numba but numba is not importable")
        return env
    return "numba" if "numba" in _LANES else "numpy"


_active = _default_backend()


def backend_name() -> str:
    return _active


def select_backend(name: str | None) -> None:
    """Switch the pack/scatter lane at runtime; None restores the env default."""
    global _active
    if name is None:
        _active = _default_backend()
        return
    if name not in _LANES:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_LANES)}")
    _active = name


_malloc_tuned = False


def tune_malloc() -> bool:
    """Keep large tensor buffers on the heap across free/alloc cycles.

    Training repeatedly allocates tens-of-MB activation buffers. glibc
    serves those through mmap and returns them to the kernel on free, so
    every training step pays page-fault costs again. Raising the mmap and
    trim thresholds makes the allocator reuse that memory. Idempotent;
    returns False (harmlessly) on non-glibc platforms.
    """
    global _malloc_tuned
    if _malloc_tuned:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(-3, 1 << 29)  # M_MMAP_THRESHOLD
        ok &= libc.mallopt(-1, 1 << 29)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 1 << 26)  # M_TOP_PAD
        _malloc_tuned = bool(ok)
    except (OSError, AttributeError):
        _malloc_tuned = False
    return _malloc_tuned


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


_tls = threading.local()


def _scratch(name: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable per-thread buffer; contents are garbage until written."""
    store = getattr(_tls, "bufs", None)
    if store is None:
        store = _tls.bufs = {}
    need = int(np.prod(shape)) * np.dtype(dtype).itemsize
    buf = store.get(name)
    if buf is None or buf.nbytes < need:
        buf = store[name] = np.empty(max(need, 8), dtype=np.uint8)
    return buf[:need].view(dtype).reshape(shape)


def _pad_into_scratch(x: np.ndarray, pad_y: int, pad_x: int, slot: str = "xp") -> np.ndarray:
    if pad_y == 0 and pad_x == 0:
        return np.ascontiguousarray(x)
    n, ci, h, w = x.shape
    xp = _scratch(slot, (n, ci, h + 2 * pad_y, w + 2 * pad_x), x.dtype)
    xp[:, :, :pad_y, :] = 0
    xp[:, :, pad_y + h :, :] = 0
    xp[:, :, pad_y : pad_y + h, :pad_x] = 0
    xp[:, :, pad_y : pad_y + h, pad_x + w :] = 0
    xp[:, :, pad_y : pad_y + h, pad_x : pad_x + w] = x
    return xp


def _rows_per_chunk(ckk: int, ow: int, itemsize: int) -> int:
    return max(1, CHUNK_BYTES // max(1, ckk * ow * itemsize))


def _conv_core(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None,
    stride: int,
    pad_y: int,
    pad_x: int,
    pad_slot: str,
) -> np.ndarray:
    """Chunked im2col correlation; bias optional. float32 lanes only."""
    lane = _LANES[_active]
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad_y - kh) // stride + 1
    ow = (wd + 2 * pad_x - kw) // stride + 1
    ckk = ci * kh * kw
    xp = _pad_into_scratch(x, pad_y, pad_x, pad_slot)
    wf_t = np.ascontiguousarray(w.reshape(co, ckk).T)
    bias = b if b is not None else np.zeros(co, dtype=x.dtype)
    out = np.empty((n, co, oh, ow), dtype=x.dtype)
    rows = n * oh
    rpc = _rows_per_chunk(ckk, ow, x.dtype.itemsize)
    buf = _scratch("pack", (ckk, rpc * ow), x.dtype)
    tmp = _scratch("chunk_out", (rpc * ow, co), x.dtype)
    for r0 in range(0, rows, rpc):
        r1 = min(rows, r0 + rpc)
        cols = (r1 - r0) * ow
        bufv = buf[:, :cols]
        tmpv = tmp[:cols]
        lane.pack_chunk(xp, kh, kw, stride, oh, ow, r0, r1, bufv)
        np.matmul(bufv.T, wf_t, out=tmpv)
        lane.store_out_chunk(tmpv, bias, out, oh, ow, r0, r1)
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of NCHW ``x`` with OIKhKw ``w`` plus per-channel bias."""
    if x.dtype == np.float64:
        return kernels_ref.conv2d_forward(x, w, b, stride, pad)
    return _conv_core(x, w, b, stride, pad, pad, "xp")


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int, gout: np.ndarray, need_gx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, weights and bias.

    ``need_gx=False`` skips the input gradient (returned as None), useful
    when the input is a constant.
    """
    if x.dtype == np.float64:
        return kernels_ref.conv2d_backward(x, w, stride, pad, gout, need_gx)
    lane = _LANES[_active]
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    ckk = ci * kh * kw
    gb = gout.sum(axis=(0, 2, 3))

    direct_gx = stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0
    if not need_gx:
        direct_gx = True  # suppress the scatter path; the direct path is skipped below
    xp = _pad_into_scratch(x, pad, pad, "xp")
    gxp = None
    if not direct_gx:
        gxp = _scratch("gxp", xp.shape, x.dtype) if pad else np.zeros(xp.shape, dtype=x.dtype)
        if pad:
            gxp[:] = 0
    wf = np.ascontiguousarray(w.reshape(co, ckk))
    gw_t = np.zeros((ckk, co), dtype=x.dtype)
    gw_tmp = _scratch("gwtmp", (ckk, co), x.dtype)
    rows = n * oh
    rpc = _rows_per_chunk(ckk, ow, x.dtype.itemsize)
    buf = _scratch("pack", (ckk, rpc * ow), x.dtype)
    gfc = _scratch("chunk_out", (rpc * ow, co), x.dtype)
    gcol = None if direct_gx else _scratch("gcol", (rpc * ow, ckk), x.dtype)
    for r0 in range(0, rows, rpc):
        r1 = min(rows, r0 + rpc)
        cols = (r1 - r0) * ow
        bufv = buf[:, :cols]
        gfv = gfc[:cols]
        lane.pack_chunk(xp, kh, kw, stride, oh, ow, r0, r1, bufv)
        lane.load_gout_chunk(gout, oh, ow, r0, r1, gfv)
        np.matmul(bufv, gfv, out=gw_tmp)
        gw_t += gw_tmp
        if not direct_gx:
            gcolv = gcol[:cols]
            np.matmul(gfv, wf, out=gcolv)
            lane.scatter_chunk(gcolv, gxp, kh, kw, stride, oh, ow, r0, r1)
    gw = np.ascontiguousarray(gw_t.T).reshape(w.shape)

    if not need_gx:
        gx = None
    elif direct_gx:
        # d/dx of a stride-1 correlation is a correlation of the output
        # gradient with the kernel flipped and its channel axes swapped.
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_core(gout, w_flip, None, 1, kh - 1 - pad, kw - 1 - pad, "gxpad")
    else:
        gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd]) if pad else gxp
    return gx, gw, gb


def bilinear_matrix(out_len: int, in_len: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic interpolation matrix, half-pixel-center convention.

    Source coordinate for output index i is (i+0.5)*in/out - 0.5, clamped to
    the borders; each row holds the two lerp weights. out_len == in_len gives
    the exact identity matrix.
    """
    m = np.zeros((out_len, in_len), dtype=np.float64)
    scale = in_len / out_len
    for i in range(out_len):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_len - 1.0)
        lo = math.floor(src)
        hi = min(lo + 1, in_len - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m.astype(dtype)
