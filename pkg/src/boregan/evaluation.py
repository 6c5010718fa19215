"""Linear-interpolation baseline, MSE metrics, and evaluation reports.

The baseline fills each gap column-run from its nearest unmasked row
neighbors, which is the informative direction for full-height vertical
stripes. :func:`evaluate` runs both the model and the baseline over a test
set, times them sequentially with a warm-up pass excluded, and packs the
result into an :class:`EvalReport` with a stable JSON encoding.
"""

from __future__ import annotations

import dataclasses
import json
import time
from typing import Sequence

import numpy as np

from . import dataset, networks


def linear_interp_fill(gapped: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill masked pixels row by row from the nearest unmasked neighbors.

    Each maximal masked run is linearly interpolated between the unmasked
    pixels flanking it. A run touching an image edge is extended linearly
    from the two nearest unmasked pixels on its one available side, which
    keeps the fill exact on rows affine in the column index; a row with a
    single unmasked pixel copies it, and a fully masked row is filled with
    0. Unmasked pixels pass through bit-exactly.
    """
    gapped = np.asarray(gapped)
    mask = np.asarray(mask)
    if gapped.shape != mask.shape:
        raise ValueError(f"shape mismatch: image {gapped.shape}, mask {mask.shape}")
    if gapped.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {gapped.shape}")
    if mask.dtype != np.bool_:
        raise ValueError(f"mask must be boolean, got {mask.dtype}")
    out = gapped.copy()
    cols = np.arange(gapped.shape[1], dtype=np.float64)
    for r in range(gapped.shape[0]):
        hole = mask[r]
        if not hole.any():
            continue
        known = np.flatnonzero(~hole)
        if known.size == 0:
            out[r, :] = 0
            continue
        vals = gapped[r, known].astype(np.float64)
        filled = np.interp(cols[hole], known.astype(np.float64), vals)
        if known.size >= 2:
            hole_cols = cols[hole]
            left = hole_cols < known[0]
            if left.any():
                slope = (vals[1] - vals[0]) / (known[1] - known[0])
                filled[left] = vals[0] + slope * (hole_cols[left] - known[0])
            right = hole_cols > known[-1]
            if right.any():
                slope = (vals[-1] - vals[-2]) / (known[-1] - known[-2])
                filled[right] = vals[-1] + slope * (hole_cols[right] - known[-1])
        out[r, hole] = filled.astype(out.dtype)
    return out


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all pixels, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared difference over masked pixels only."""
    a = np.asarray(a)
    b = np.asarray(b)
    mask = np.asarray(mask)
    if a.shape != b.shape or a.shape != mask.shape:
        raise ValueError(f"shape mismatch: {a.shape}, {b.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("masked_mse over an empty mask")
    d = a[mask].astype(np.float64) - b[mask].astype(np.float64)
    return float(np.mean(d * d))


@dataclasses.dataclass(frozen=True)
class ImageEval:
    """Per-image metric row of an evaluation report."""

    name: str
    mse_model: float
    mse_baseline: float
    mse_model_masked: float
    mse_baseline_masked: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Model-vs-baseline comparison over one test set."""

    images: tuple[ImageEval, ...]
    mean_mse_model: float
    mean_mse_baseline: float
    t_model_s: float
    t_baseline_s: float
    speedup: float
    model_beats_baseline: bool
    config: dict

    def to_dict(self) -> dict:
        return {
            "images": [im.to_dict() for im in self.images],
            "mean_mse_model": self.mean_mse_model,
            "mean_mse_baseline": self.mean_mse_baseline,
            "t_model_s": self.t_model_s,
            "t_baseline_s": self.t_baseline_s,
            "speedup": self.speedup,
            "model_beats_baseline": self.model_beats_baseline,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        images = tuple(ImageEval(**im) for im in d["images"])
        return cls(
            images=images,
            mean_mse_model=float(d["mean_mse_model"]),
            mean_mse_baseline=float(d["mean_mse_baseline"]),
            t_model_s=float(d["t_model_s"]),
            t_baseline_s=float(d["t_baseline_s"]),
            speedup=float(d["speedup"]),
            model_beats_baseline=bool(d["model_beats_baseline"]),
            config=dict(d["config"]),
        )


def model_fill(params: dict, sample: dataset.Sample) -> np.ndarray:
    """Inpaint one sample: generator forward plus known-pixel composite."""
    raw = networks.generator_forward(params, sample.gapped, sample.mask)
    return networks.composite(raw, sample.gapped, sample.mask)


def evaluate(model, samples: Sequence[dataset.Sample], config: dict | None = None) -> EvalReport:
    """Score the model against the interpolation baseline on a test set.

    ``model`` is either a parameter table or any object with a ``params``
    attribute holding one. Both methods run sequentially over the full set
    with one untimed warm-up pass each; MSE columns are deterministic for
    fixed parameters, timing columns are not.
    """
    params = getattr(model, "params", model)
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    for s in samples:
        if not s.mask.any():
            raise ValueError(f"sample {s.name!r} has an empty mask")
    if config is None:
        cfg_obj = getattr(model, "config", None)
        config = cfg_obj.to_dict() if cfg_obj is not None else {}

    model_fill(params, samples[0])  # warm-up, excluded from timing
    t0 = time.perf_counter()
    model_outs = [model_fill(params, s) for s in samples]
    t_model = time.perf_counter() - t0

    linear_interp_fill(samples[0].gapped, samples[0].mask)
    t0 = time.perf_counter()
    base_outs = [linear_interp_fill(s.gapped, s.mask) for s in samples]
    t_baseline = time.perf_counter() - t0

    rows = []
    for s, mo, bo in zip(samples, model_outs, base_outs):
        rows.append(
            ImageEval(
                name=s.name,
                mse_model=mse(mo, s.truth),
                mse_baseline=mse(bo, s.truth),
                mse_model_masked=masked_mse(mo, s.truth, s.mask),
                mse_baseline_masked=masked_mse(bo, s.truth, s.mask),
            )
        )
    mean_model = float(np.mean([r.mse_model for r in rows]))
    mean_base = float(np.mean([r.mse_baseline for r in rows]))
    return EvalReport(
        images=tuple(rows),
        mean_mse_model=mean_model,
        mean_mse_baseline=mean_base,
        t_model_s=t_model,
        t_baseline_s=t_baseline,
        speedup=t_baseline / t_model,
        model_beats_baseline=mean_model < mean_base,
        config=config,
    )


def render_comparison(
    sample: dataset.Sample, model_out: np.ndarray, baseline_out: np.ndarray, path: str
) -> None:
    """Write a gapped | baseline | model | truth strip as one PGM."""
    from . import training

    grid = training.render_panel_grid([[sample.gapped, baseline_out, model_out, sample.truth]])
    dataset.write_pgm(grid, path)
