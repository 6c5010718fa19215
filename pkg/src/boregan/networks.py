"""Generator and critic networks plus mask-region cropping and compositing.

The generator is a skip-connected encoder-decoder: four stride-2 encoder
convolutions (channels 32, 64, 128, 256), a bottleneck convolution, and
four decoder blocks of nearest-neighbor 2x upsampling followed by a
convolution over the upsampled features concatenated with the mirrored
encoder feature (the 2-channel network input mirrors the last block). Its
input is the gapped image plus the mask as a second channel; the output
convolution maps to one channel through tanh.

Both critics share one shape: four stride-2 convolutions growing 32 to 256
channels with leaky_relu 0.2, a per-channel spatial mean, and a final
matmul projection to one unbounded scalar per image. The global critic
reads the whole 1-channel image; the local critic reads a 2-channel 64x64
bilinear resize of the mask's bounding-box crop (image + mask channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels

LOCAL_SIZE = 64
LEAK = 0.2

# (name, in_ch, out_ch, kernel, stride, pad)
GEN_CONVS = (
    ("gen/e1", 2, 32, 4, 2, 1),
    ("gen/e2", 32, 64, 4, 2, 1),
    ("gen/e3", 64, 128, 4, 2, 1),
    ("gen/e4", 128, 256, 4, 2, 1),
    ("gen/bottleneck", 256, 256, 3, 1, 1),
    ("gen/d4", 256 + 128, 128, 3, 1, 1),
    ("gen/d3", 128 + 64, 64, 3, 1, 1),
    ("gen/d2", 64 + 32, 32, 3, 1, 1),
    ("gen/d1", 32 + 2, 32, 3, 1, 1),
    ("gen/out", 32, 1, 3, 1, 1),
)


def _critic_convs(prefix: str, in_ch: int):
    return (
        (f"{prefix}/c1", in_ch, 32, 4, 2, 1),
        (f"{prefix}/c2", 32, 64, 4, 2, 1),
        (f"{prefix}/c3", 64, 128, 4, 2, 1),
        (f"{prefix}/c4", 128, 256, 4, 2, 1),
    )


DGLOB_CONVS = _critic_convs("dglob", 1)
DLOC_CONVS = _critic_convs("dloc", 2)


def init_params(seed) -> dict[str, np.ndarray]:
    """He fan-in normal weights, zero biases, for all three networks."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, ci, co, k, _, _ in GEN_CONVS + DGLOB_CONVS + DLOC_CONVS:
        fan_in = ci * k * k
        std = np.sqrt(2.0 / fan_in)
        params[f"{name}/w"] = (rng.standard_normal((co, ci, k, k)) * std).astype(np.float32)
        params[f"{name}/b"] = np.zeros(co, dtype=np.float32)
    for prefix in ("dglob", "dloc"):
        std = np.sqrt(2.0 / 256.0)
        params[f"{prefix}/out/w"] = (rng.standard_normal((256, 1)) * std).astype(np.float32)
    return params


def param_names() -> list[str]:
    return list(init_params(0).keys())


def _conv_block(bp: ad.BoundParams, name: str, x: ad.Tensor, stride: int, pad: int) -> ad.Tensor:
    return ad.conv2d(x, bp.get(f"{name}/w"), bp.get(f"{name}/b"), stride=stride, pad=pad)


def generator_apply(bp: ad.BoundParams, x: ad.Tensor) -> ad.Tensor:
    """Forward the (N, 2, H, W) input through the generator; H, W divisible by 16."""
    n, c, h, w = x.data.shape
    if c != 2:
        raise ValueError(f"generator input needs 2 channels (gapped + mask), got {c}")
    if h % 16 or w % 16:
        raise ValueError(f"generator input spatial size must be divisible by 16, got {h}x{w}")
    e1 = ad.leaky_relu(_conv_block(bp, "gen/e1", x, 2, 1), LEAK)
    e2 = ad.leaky_relu(_conv_block(bp, "gen/e2", e1, 2, 1), LEAK)
    e3 = ad.leaky_relu(_conv_block(bp, "gen/e3", e2, 2, 1), LEAK)
    e4 = ad.leaky_relu(_conv_block(bp, "gen/e4", e3, 2, 1), LEAK)
    bott = ad.leaky_relu(_conv_block(bp, "gen/bottleneck", e4, 1, 1), LEAK)
    d = bott
    for name, skip in (("gen/d4", e3), ("gen/d3", e2), ("gen/d2", e1), ("gen/d1", x)):
        d = ad.upsample_nearest2x(d)
        d = ad.concat_channels(d, skip)
        d = ad.leaky_relu(_conv_block(bp, name, d, 1, 1), LEAK)
    return ad.tanh_act(_conv_block(bp, "gen/out", d, 1, 1))


def critic_apply(bp: ad.BoundParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    """Forward (N, C, H, W) through a critic; returns per-image scores (N, 1)."""
    h = x
    for name, _, _, _, stride, pad in _critic_convs(prefix, x.data.shape[1]):
        h = ad.leaky_relu(_conv_block(bp, name, h, stride, pad), LEAK)
    pooled = ad.spatial_mean(h)
    return ad.matmul(pooled, bp.get(f"{prefix}/out/w"))


# ---------------------------------------------------------------------------
# Image-level conveniences (no tape, single image)


def _as_gen_input(gapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    g = np.asarray(gapped, dtype=np.float32)
    m = np.asarray(mask, dtype=np.float32)
    if g.shape != m.shape:
        raise ValueError(f"gapped {g.shape} and mask {m.shape} shapes differ")
    return np.stack([g, m])[None]


def generator_forward(params: dict, gapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Raw generator output for one image; deterministic in (params, input)."""
    bp = ad.BoundParams(params, None)
    out = generator_apply(bp, ad.Tensor(_as_gen_input(gapped, mask)))
    return out.data[0, 0]


def composite(raw: np.ndarray, gapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste generated pixels into the mask; known pixels stay bit-identical."""
    if raw.shape != gapped.shape or raw.shape != mask.shape:
        raise ValueError(
            f"composite shape mismatch: raw {raw.shape}, gapped {gapped.shape}, mask {mask.shape}"
        )
    return np.where(mask, raw, gapped)


@dataclass(frozen=True)
class CropBox:
    row0: int
    col0: int
    height: int
    width: int


def mask_bbox(mask: np.ndarray) -> CropBox:
    """Tight bounding box of all masked pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask_bbox of an empty mask")
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return CropBox(row0=r0, col0=c0, height=r1 - r0 + 1, width=c1 - c0 + 1)


def _resize_np(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    mh = kernels.bilinear_matrix(out_h, img.shape[0], img.dtype)
    mw = kernels.bilinear_matrix(out_w, img.shape[1], img.dtype)
    return mh @ img @ mw.T


def local_patch(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(2, 64, 64) local-critic input: resized bbox crops of image and mask."""
    box = mask_bbox(mask)
    img = np.asarray(image, dtype=np.float32)
    sl = np.s_[box.row0 : box.row0 + box.height, box.col0 : box.col0 + box.width]
    patch = _resize_np(img[sl], LOCAL_SIZE, LOCAL_SIZE)
    mpatch = _resize_np(mask[sl].astype(np.float32), LOCAL_SIZE, LOCAL_SIZE)
    return np.stack([patch, mpatch])


def local_patch_tensor(image: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Taped (N, 2, 64, 64) local patch of an (N, 1, H, W) image tensor.

    One mask (and so one crop box) applies to the whole slab; the resized
    mask channel is a constant and carries no gradient.
    """
    box = mask_bbox(mask)
    cropped = ad.crop(image, box.row0, box.col0, box.height, box.width)
    resized = ad.resize_bilinear(cropped, LOCAL_SIZE, LOCAL_SIZE)
    sl = np.s_[box.row0 : box.row0 + box.height, box.col0 : box.col0 + box.width]
    mpatch = _resize_np(mask[sl].astype(image.data.dtype), LOCAL_SIZE, LOCAL_SIZE)
    n = image.data.shape[0]
    mchan = ad.Tensor(np.broadcast_to(mpatch, (n, 1, LOCAL_SIZE, LOCAL_SIZE)).copy())
    return ad.concat_channels(resized, mchan)


def _check_finite(score: float, what: str) -> float:
    if not np.isfinite(score):
        raise ArithmeticError(f"{what} produced a non-finite score ({score})")
    return float(score)


def global_critic_forward(params: dict, image: np.ndarray) -> float:
    """Scalar global-consistency score for one image."""
    bp = ad.BoundParams(params, None)
    x = ad.Tensor(np.asarray(image, dtype=np.float32)[None, None])
    out = critic_apply(bp, "dglob", x)
    return _check_finite(out.data[0, 0], "global critic")


def local_critic_forward(params: dict, image: np.ndarray, mask: np.ndarray) -> float:
    """Scalar repair-region score for one image; mask must be non-empty."""
    bp = ad.BoundParams(params, None)
    patch = local_patch(image, mask)
    out = critic_apply(bp, "dloc", ad.Tensor(patch[None]))
    return _check_finite(out.data[0, 0], "local critic")
