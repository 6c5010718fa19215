"""Pure-numpy pack/scatter/shuffle lane: stride-trick views and slice adds.

Chunks cover output rows [r0, r1) of the (n*oh) row raster; a chunk can
straddle sample boundaries, so every loop walks per-sample segments and
lets numpy move whole (rows, ow) slabs at a time. See the numba lane for
the contract of each function.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _segments(oh: int, r0: int, r1: int):
    """Split row range [r0, r1) into (sample, first_row, row_count) pieces."""
    r = r0
    while r < r1:
        nn = r // oh
        oy0 = r - nn * oh
        take = min(r1 - r, oh - oy0)
        yield nn, oy0, take
        r += take


def pack_chunk(xp, kh, kw, stride, oh, ow, r0, r1, buf):
    n, ci, hp, wp = xp.shape
    _, sc, sh, sw = xp.strides
    buf6 = buf.reshape(ci, kh, kw, r1 - r0, ow)
    at = 0
    for nn, oy0, take in _segments(oh, r0, r1):
        view = as_strided(
            xp[nn, :, oy0 * stride :],
            shape=(ci, kh, kw, take, ow),
            strides=(sc, sh, sw, sh * stride, sw * stride),
        )
        np.copyto(buf6[:, :, :, at : at + take], view)
        at += take


def store_out_chunk(tmp, bias, out, oh, ow, r0, r1):
    co = out.shape[1]
    t3 = tmp.reshape(r1 - r0, ow, co)
    at = 0
    for nn, oy0, take in _segments(oh, r0, r1):
        block = t3[at : at + take].transpose(2, 0, 1)
        np.add(block, bias[:, None, None], out=out[nn, :, oy0 : oy0 + take, :])
        at += take


def load_gout_chunk(gout, oh, ow, r0, r1, buf):
    co = gout.shape[1]
    b3 = buf.reshape(r1 - r0, ow, co)
    at = 0
    for nn, oy0, take in _segments(oh, r0, r1):
        np.copyto(b3[at : at + take], gout[nn, :, oy0 : oy0 + take, :].transpose(1, 2, 0))
        at += take


def scatter_chunk(gcol_t, gxp, kh, kw, stride, oh, ow, r0, r1):
    n, ci, hp, wp = gxp.shape
    g5 = gcol_t.reshape(r1 - r0, ow, ci, kh, kw)
    we = (ow - 1) * stride + 1
    at = 0
    for nn, oy0, take in _segments(oh, r0, r1):
        block = g5[at : at + take]  # (take, ow, ci, kh, kw)
        for ky in range(kh):
            for kx in range(kw):
                y0 = oy0 * stride + ky
                ye = y0 + (take - 1) * stride + 1
                target = gxp[nn, :, y0:ye:stride, kx : kx + we : stride]
                target += block[:, :, :, ky, kx].transpose(2, 0, 1)
        at += take
