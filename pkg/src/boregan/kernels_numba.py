"""Numba-compiled pack/scatter/shuffle lane for the convolution kernels.

All four loops work on one cache-sized chunk of output rows [r0, r1) over
the (n*oh) row raster:

* ``pack_chunk`` fills a (ci*kh*kw, rows*ow) patch block, streaming each
  image row into a contiguous stretch of the buffer.
* ``store_out_chunk`` moves the chunk GEMM result (rows*ow, co) into the
  NCHW output and adds the bias while the block is cache-hot.
* ``load_gout_chunk`` gathers the NCHW output gradient into the same
  (rows*ow, co) chunk layout.
* ``scatter_chunk`` adds patch gradients (rows*ow, ci*kh*kw) back into the
  padded input gradient (strided convolutions only).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def pack_chunk(xp, kh, kw, stride, oh, ow, r0, r1, buf):
    n, ci, hp, wp = xp.shape
    for ic in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                row = (ic * kh + ky) * kw + kx
                for r in range(r0, r1):
                    nn = r // oh
                    oy = r - nn * oh
                    dst = (r - r0) * ow
                    y = oy * stride + ky
                    if stride == 1:
                        src = xp[nn, ic, y]
                        for ox in range(ow):
                            buf[row, dst + ox] = src[kx + ox]
                    else:
                        for ox in range(ow):
                            buf[row, dst + ox] = xp[nn, ic, y, ox * stride + kx]


@njit(cache=True)
def store_out_chunk(tmp, bias, out, oh, ow, r0, r1):
    co = out.shape[1]
    for r in range(r0, r1):
        nn = r // oh
        oy = r - nn * oh
        base = (r - r0) * ow
        for c in range(co):
            dst = out[nn, c, oy]
            bc = bias[c]
            for ox in range(ow):
                dst[ox] = tmp[base + ox, c] + bc


@njit(cache=True)
def load_gout_chunk(gout, oh, ow, r0, r1, buf):
    co = gout.shape[1]
    for r in range(r0, r1):
        nn = r // oh
        oy = r - nn * oh
        base = (r - r0) * ow
        for c in range(co):
            src = gout[nn, c, oy]
            for ox in range(ow):
                buf[base + ox, c] = src[ox]


@njit(cache=True)
def scatter_chunk(gcol_t, gxp, kh, kw, stride, oh, ow, r0, r1):
    n, ci, hp, wp = gxp.shape
    for r in range(r0, r1):
        nn = r // oh
        oy = r - nn * oh
        for ox in range(ow):
            j = (r - r0) * ow + ox
            x0 = ox * stride
            for ic in range(ci):
                for ky in range(kh):
                    y = oy * stride + ky
                    base = (ic * kh + ky) * kw
                    for kx in range(kw):
                        gxp[nn, ic, y, x0 + kx] += gcol_t[j, base + kx]
