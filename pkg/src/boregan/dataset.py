"""Image ingestion, normalization, stripe-mask synthesis, and corpus splits.

Images are 128x128 8-bit grayscale on disk (binary PGM or PNG) and float32
arrays in [-1, 1] in memory. Masks are boolean grids where True marks a
missing pixel; on disk they are PGMs with byte 255 = missing, 0 = known.
Synthetic gaps are full-height vertical stripes, the geometry wireline pad
tools leave between sensor pads.
"""

from __future__ import annotations

import math
import os
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

IMG_SIZE = 128
IMG_PIXELS = IMG_SIZE * IMG_SIZE


class ImageFormatError(ValueError):
    """Raised when an image file cannot be used (format, size, bit depth)."""


# ---------------------------------------------------------------------------
# PGM (P5) codec


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*([0-9]+)")


def _read_pgm(data: bytes, path: str) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM (P5 magic missing)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: PGM maxval {maxval} is not 8-bit (need 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed PGM header")
    pos += 1
    need = width * height
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: PGM raster truncated ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM into a uint8 (H, W) array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise ImageFormatError(f"{path}: unreadable ({e})") from e
    return _read_pgm(data, str(path))


def write_pgm(pixels: np.ndarray, path: str) -> None:
    """Write a uint8 (H, W) array as binary PGM with maxval 255."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pixels.tobytes())
    except OSError as e:
        raise ImageFormatError(f"{path}: unwritable ({e})") from e


def _read_png(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ImageFormatError(
                    f"{path}: PNG mode {im.mode!r} is not 8-bit grayscale (need mode 'L')"
                )
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise ImageFormatError(f"{path}: unreadable PNG ({e})") from e


def _read_gray8(path: str) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return _read_png(path)
    return read_pgm(path)


# ---------------------------------------------------------------------------
# Normalized image I/O


def load_image(path: str) -> np.ndarray:
    """Load a 128x128 8-bit grayscale image as float32 in [-1, 1]."""
    gray = _read_gray8(path)
    if gray.shape != (IMG_SIZE, IMG_SIZE):
        raise ImageFormatError(
            f"{path}: image is {gray.shape[1]}x{gray.shape[0]}, need {IMG_SIZE}x{IMG_SIZE}"
        )
    return (gray.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats back to uint8, clamping out-of-range values."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        warnings.warn(
            f"image values outside [-1, 1] (range [{arr.min():.4f}, {arr.max():.4f}]); clamping",
            stacklevel=3,
        )
        arr = np.clip(arr, -1.0, 1.0)
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str) -> None:
    """Save a [-1, 1] float image as 8-bit PGM or PNG (by extension)."""
    pixels = to_bytes(img)
    if str(path).lower().endswith(".png"):
        from PIL import Image

        try:
            Image.fromarray(pixels, mode="L").save(path)
        except OSError as e:
            raise ImageFormatError(f"{path}: unwritable ({e})") from e
    else:
        write_pgm(pixels, path)


def load_mask(path: str) -> np.ndarray:
    """Load a mask PGM (255 = missing, 0 = known) as a boolean grid."""
    gray = read_pgm(path)
    if gray.shape != (IMG_SIZE, IMG_SIZE):
        raise ImageFormatError(
            f"{path}: mask is {gray.shape[1]}x{gray.shape[0]}, need {IMG_SIZE}x{IMG_SIZE}"
        )
    bad = (gray != 0) & (gray != 255)
    if bad.any():
        raise ImageFormatError(f"{path}: mask bytes must be 0 or 255, found {int(gray[bad][0])}")
    return gray == 255


def save_mask(mask: np.ndarray, path: str) -> None:
    """Write a boolean mask as PGM with 255 = missing, 0 = known."""
    write_pgm(np.where(mask, np.uint8(255), np.uint8(0)), path)


# ---------------------------------------------------------------------------
# Synthetic stripe masks


@dataclass(frozen=True)
class MaskConfig:
    """Full-height vertical stripe gaps totalling a bounded column fraction."""

    min_cover: float = 0.25
    max_cover: float = 0.40
    min_stripes: int = 2
    max_stripes: int = 4

    def validate(self) -> None:
        if not (0.0 < self.min_cover <= self.max_cover < 1.0):
            raise ValueError(
                f"coverage bounds must satisfy 0 < min <= max < 1, got "
                f"[{self.min_cover}, {self.max_cover}]"
            )
        if not (1 <= self.min_stripes <= self.max_stripes):
            raise ValueError(
                f"stripe counts must satisfy 1 <= min <= max, got "
                f"[{self.min_stripes}, {self.max_stripes}]"
            )


def _composition(rng: np.random.Generator, total: int, parts: int) -> np.ndarray:
    """Uniform composition of `total` into `parts` non-negative integers."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate([[-1], cuts, [total + parts - 1]])
    return np.diff(edges) - 1


def synthesize_mask(seed, cfg: MaskConfig = MaskConfig(), size: int = IMG_SIZE) -> np.ndarray:
    """Deterministic full-height stripe mask with coverage in [min, max].

    A total column count is drawn uniformly from the exact feasible integer
    range, split into a uniformly random composition over a feasible stripe
    count, and the stripes are placed left to right with at least one known
    column between them. Coverage is the measured fraction and always lands
    inside the configured bounds.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    lo_cols = math.ceil(cfg.min_cover * size)
    hi_cols = math.floor(cfg.max_cover * size)
    lo_cols = max(lo_cols, 1)
    if lo_cols > hi_cols:
        raise ValueError(
            f"no integer column count gives coverage in [{cfg.min_cover}, {cfg.max_cover}] "
            f"at width {size}"
        )
    total = int(rng.integers(lo_cols, hi_cols + 1))
    feasible = [
        k
        for k in range(cfg.min_stripes, cfg.max_stripes + 1)
        if k <= total and total + (k - 1) <= size
    ]
    if not feasible:
        raise ValueError(
            f"cannot place {cfg.min_stripes}..{cfg.max_stripes} non-overlapping stripes "
            f"totalling {total} columns in width {size}"
        )
    k = feasible[int(rng.integers(len(feasible)))]
    widths = _composition(rng, total - k, k) + 1
    slack = size - total - (k - 1)
    gaps = _composition(rng, slack, k + 1)
    mask = np.zeros((size, size), dtype=bool)
    col = 0
    for i in range(k):
        col += int(gaps[i]) + (1 if i > 0 else 0)
        mask[:, col : col + int(widths[i])] = True
        col += int(widths[i])
    assert mask.sum() == total * size
    return mask


def mask_coverage(mask: np.ndarray) -> float:
    return float(mask.sum()) / mask.size


# ---------------------------------------------------------------------------
# Samples and splits


@dataclass
class Sample:
    """Ground truth, its gap mask, and the blacked-out input image."""

    truth: np.ndarray
    mask: np.ndarray
    gapped: np.ndarray
    name: str = ""


def make_sample(truth: np.ndarray, mask: np.ndarray, name: str = "") -> Sample:
    """Blacken masked pixels to -1; unmasked pixels stay bit-identical."""
    truth = np.asarray(truth, dtype=np.float32)
    gapped = np.where(mask, np.float32(-1.0), truth)
    return Sample(truth=truth, mask=np.asarray(mask, dtype=bool), gapped=gapped, name=name)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_frac: float = 0.8


def split_dataset(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split into (train, test); test gets max(1, round((1-frac)*n))."""
    if n < 2:
        raise ValueError(f"need at least 2 images to hold out a test set, got {n}")
    n_test = max(1, round((1.0 - spec.train_frac) * n))
    if n_test >= n:
        raise ValueError(f"split leaves no training images (n={n}, test={n_test})")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return perm[n_test:].copy(), perm[:n_test].copy()


# ---------------------------------------------------------------------------
# Corpus loading


@dataclass
class CorpusItem:
    name: str
    image: np.ndarray
    mask: np.ndarray | None
    path: str


_IMAGE_EXTS = (".pgm", ".png")


def list_corpus_paths(data_dir: str) -> list[str]:
    """Image files in a corpus directory, sorted by name; mask files excluded."""
    try:
        entries = sorted(os.listdir(data_dir))
    except OSError as e:
        raise ImageFormatError(f"{data_dir}: cannot list directory ({e})") from e
    out = []
    for entry in entries:
        low = entry.lower()
        if low.endswith(".mask.pgm"):
            continue
        if low.endswith(_IMAGE_EXTS):
            out.append(os.path.join(data_dir, entry))
    return out


def mask_path_for(image_path: str) -> str:
    stem, _ = os.path.splitext(image_path)
    return stem + ".mask.pgm"


def load_corpus(data_dir: str) -> list[CorpusItem]:
    """Load every valid image (with optional sibling mask); skip bad files with a warning."""
    items = []
    for path in list_corpus_paths(data_dir):
        try:
            image = load_image(path)
        except ImageFormatError as e:
            warnings.warn(f"skipping {path}: {e}", stacklevel=2)
            continue
        mpath = mask_path_for(path)
        mask = load_mask(mpath) if os.path.exists(mpath) else None
        name = os.path.splitext(os.path.basename(path))[0]
        items.append(CorpusItem(name=name, image=image, mask=mask, path=path))
    if not items:
        raise ImageFormatError(f"{data_dir}: no loadable 128x128 grayscale images")
    return items


# ---------------------------------------------------------------------------
# Seed derivation and synthetic textures

_MASK_TAG = 0x6D61736B  # "mask"


def mask_seed(run_seed: int, image_index: int, epoch: int) -> np.random.SeedSequence:
    """Independent, reproducible mask stream per (run, image, epoch)."""
    return np.random.SeedSequence([run_seed, _MASK_TAG, image_index, epoch])


def make_bedding_texture(seed, size: int = IMG_SIZE) -> np.ndarray:
    """Synthetic layered rock texture: tilted sinusoidal bedding plus speckle.

    Rows are deliberately non-affine in the column index so that horizontal
    linear interpolation across a wide stripe loses real structure.
    """
    rng = np.random.default_rng(seed)
    y, x = np.meshgrid(
        np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij"
    )
    dip = rng.uniform(-0.45, 0.45)
    f1 = rng.uniform(3.0, 6.0)
    f2 = f1 * rng.uniform(1.8, 2.6)
    phase1 = rng.uniform(0.0, 2.0 * np.pi)
    phase2 = rng.uniform(0.0, 2.0 * np.pi)
    depth = (y + dip * x) / size
    img = 0.55 * np.sin(2.0 * np.pi * f1 * depth + phase1)
    img += 0.25 * np.sin(2.0 * np.pi * f2 * depth + phase2)
    fx = rng.uniform(1.0, 2.5)
    img += 0.12 * np.sin(2.0 * np.pi * fx * x / size + rng.uniform(0.0, 2.0 * np.pi))
    img += 0.08 * rng.standard_normal((size, size))
    return np.clip(img, -0.98, 0.98).astype(np.float32)
