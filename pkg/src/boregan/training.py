"""Adversarial training: Wasserstein losses, the critic/generator loop,
RMSProp updates with critic weight clipping, checkpoints, and snapshots.

One iteration = ``n_critic`` critic updates followed by one generator
update. The batch of fake images is generated once per iteration (the
generator does not change during the critic updates) and composited so
known pixels stay verbatim; the generator update recomputes the fakes
through the tape so gradients flow back through the composite.

Checkpoints are a single little-endian binary file: magic ``BHGAN``, a
version byte, the JSON config echo, the named parameter table, the
optimizer state table in the same encoding, and the iteration counter.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import struct
import time
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import dataset
from . import kernels
from . import networks
from . import optim

CHECKPOINT_MAGIC = b"BHGAN"
CHECKPOINT_VERSION = 1
GEN_PREFIX = "gen/"
CRITIC_PREFIXES = ("dglob/", "dloc/")
LOG_COLUMNS = ("iteration", "g_loss", "c_global_loss", "c_local_loss", "recon_mse", "wall_s")
_SCHEDULE_TAG = 0x73636864  # "schd"


class DivergenceError(RuntimeError):
    """A loss turned non-finite; carries the iteration that failed."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 0.01
    n_critic: int = 5
    clip_c: float = 0.01
    batch_size: int = 8
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0
    snapshot_every: int = 500
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if not self.clip_c > 0:
            raise ValueError(f"clip_c must be > 0, got {self.clip_c}")
        if self.lambda_rec < 0 or self.lambda_adv < 0:
            raise ValueError(
                f"loss weights must be >= 0, got lambda_rec={self.lambda_rec} "
                f"lambda_adv={self.lambda_adv}"
            )
        if self.snapshot_every < 1:
            raise ValueError(f"snapshot_every must be >= 1, got {self.snapshot_every}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {', '.join(unknown)}")
        return cls(**d).validate()


@dataclasses.dataclass
class ModelParams:
    """Named parameter and optimizer-state tables plus training progress."""

    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    iteration: int
    config: TrainConfig
    version: int = CHECKPOINT_VERSION

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "ModelParams":
        params = networks.init_params(cfg.seed)
        return cls(
            params=params,
            opt_state=optim.init_opt_state(params),
            iteration=0,
            config=cfg,
        )


@dataclasses.dataclass(frozen=True)
class LogRecord:
    iteration: int
    g_loss: float
    c_global_loss: float
    c_local_loss: float
    recon_mse: float
    wall_s: float

    def csv_line(self) -> str:
        return ",".join(
            [str(self.iteration)]
            + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]
        )


@dataclasses.dataclass
class TrainLog:
    records: list[LogRecord] = dataclasses.field(default_factory=list)

    def append(self, rec: LogRecord) -> None:
        self.records.append(rec)

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for rec in self.records:
                fh.write(rec.csv_line() + "\n")

    @classmethod
    def read_csv(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != ",".join(LOG_COLUMNS):
                raise ValueError(f"unexpected training-log header: {header!r}")
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) != len(LOG_COLUMNS):
                    raise ValueError(f"malformed training-log row: {line!r}")
                log.append(
                    LogRecord(
                        iteration=int(parts[0]),
                        g_loss=float(parts[1]),
                        c_global_loss=float(parts[2]),
                        c_local_loss=float(parts[3]),
                        recon_mse=float(parts[4]),
                        wall_s=float(parts[5]),
                    )
                )
        return log


# ---------------------------------------------------------------------------
# Losses


def critic_loss(real_scores, fake_scores):
    """mean(fake) - mean(real); the critic minimizes this.

    Accepts taped tensors (returns a scalar tensor) or plain score arrays
    (returns a float). Empty batches are rejected.
    """
    if isinstance(real_scores, ad.Tensor) or isinstance(fake_scores, ad.Tensor):
        if real_scores.data.size == 0 or fake_scores.data.size == 0:
            raise ValueError("critic_loss needs non-empty score batches")
        return ad.sub(ad.reduce_mean(fake_scores), ad.reduce_mean(real_scores))
    real = np.asarray(real_scores, dtype=np.float64)
    fake = np.asarray(fake_scores, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("critic_loss needs non-empty score batches")
    return float(fake.mean() - real.mean())


def generator_loss(inpainted, truth, g_score, l_score, cfg: TrainConfig):
    """lambda_rec * MSE(inpainted, truth) + lambda_adv * (-g_score - l_score).

    Accepts taped tensors (returns a scalar tensor) or plain arrays and
    floats (returns a float).
    """
    if isinstance(inpainted, ad.Tensor):
        t = truth if isinstance(truth, ad.Tensor) else ad.Tensor(np.asarray(truth, inpainted.data.dtype))
        if inpainted.data.shape != t.data.shape:
            raise ValueError(
                f"generator_loss shape mismatch: inpainted {inpainted.data.shape}, truth {t.data.shape}"
            )
        diff = ad.sub(inpainted, t)
        rec = ad.scale(ad.reduce_mean(ad.mul(diff, diff)), cfg.lambda_rec)
        adv = ad.scale(ad.add(g_score, l_score), -cfg.lambda_adv)
        return ad.add(rec, adv)
    inp = np.asarray(inpainted, dtype=np.float64)
    tr = np.asarray(truth, dtype=np.float64)
    if inp.shape != tr.shape:
        raise ValueError(f"generator_loss shape mismatch: inpainted {inp.shape}, truth {tr.shape}")
    mse = float(np.mean((inp - tr) ** 2))
    return cfg.lambda_rec * mse + cfg.lambda_adv * (-float(g_score) - float(l_score))


# ---------------------------------------------------------------------------
# One training iteration


def effective_lr(cfg: TrainConfig, iteration: int) -> float:
    """Per-iteration step size: harmonic decay of the configured base rate.

    The RMSProp update normalizes gradient scale away, so each coordinate
    moves by roughly the raw step size every iteration. At full image size
    the generator's output stage oscillates rail to rail unless entry steps
    sit near base/50, and the equilibrium jitter floor scales with the
    square of the rate, so the tail decays a further 2x; the divisor ramp
    below gives both. ``iteration`` is the 0-based index of the step taken.
    """
    return cfg.learning_rate / (50.0 + iteration / 40.0)


def _subset(table: dict[str, np.ndarray], prefixes) -> dict[str, np.ndarray]:
    return {k: v for k, v in table.items() if k.startswith(prefixes)}


def _stack_batch(batch: Sequence[dataset.Sample]):
    truth = np.stack([s.truth for s in batch])[:, None].astype(np.float32, copy=False)
    gapped = np.stack([s.gapped for s in batch])[:, None].astype(np.float32, copy=False)
    masks = np.stack([s.mask for s in batch])[:, None]
    gen_in = np.concatenate([gapped, masks.astype(np.float32)], axis=1)
    return truth, gapped, masks, gen_in


def _finite_or_diverged(value: float, iteration: int, what: str) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise DivergenceError(iteration, f"{what} = {value}")
    return value


def train_step(
    state: ModelParams, batch: Sequence[dataset.Sample], cfg: TrainConfig
) -> tuple[ModelParams, LogRecord]:
    """Run n_critic critic updates then one generator update on one batch."""
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    for s in batch:
        if not s.mask.any():
            raise ValueError(f"sample {s.name!r} has an empty mask")
    t_start = time.perf_counter()
    it = state.iteration + 1
    lr_now = effective_lr(cfg, state.iteration)
    params = state.params
    truth, gapped, masks, gen_in = _stack_batch(batch)
    nb = len(batch)

    # Fakes for the critic updates: one generator pass, then composite.
    raw = networks.generator_apply(ad.BoundParams(params, None), ad.Tensor(gen_in)).data
    fake_glob = np.where(masks, raw, gapped)
    real_loc = np.stack([networks.local_patch(s.truth, s.mask) for s in batch])
    fake_loc = np.stack(
        [networks.local_patch(fake_glob[j, 0], batch[j].mask) for j in range(nb)]
    )

    critic_params = _subset(params, CRITIC_PREFIXES)
    critic_state = _subset(state.opt_state, CRITIC_PREFIXES)
    c_global = c_local = 0.0
    for _ in range(cfg.n_critic):
        tape = ad.Tape()
        bp = ad.BoundParams(params, tape)
        loss_g = critic_loss(
            networks.critic_apply(bp, "dglob", ad.Tensor(truth)),
            networks.critic_apply(bp, "dglob", ad.Tensor(fake_glob)),
        )
        loss_l = critic_loss(
            networks.critic_apply(bp, "dloc", ad.Tensor(real_loc)),
            networks.critic_apply(bp, "dloc", ad.Tensor(fake_loc)),
        )
        c_global = _finite_or_diverged(loss_g.item(), it, "global critic loss")
        c_local = _finite_or_diverged(loss_l.item(), it, "local critic loss")
        tape.backward(ad.add(loss_g, loss_l))
        grads = _subset(bp.grads(), CRITIC_PREFIXES)
        optim.rmsprop_step(critic_params, grads, critic_state, lr_now)
        optim.clip_weights(critic_params, cfg.clip_c)

    # Generator update: recompute fakes through the tape.
    tape = ad.Tape()
    bp = ad.BoundParams(params, tape)
    raw_t = networks.generator_apply(bp, tape.leaf(gen_in))
    comp = ad.where_mask(masks, raw_t, ad.Tensor(gapped))
    if cfg.lambda_adv > 0:
        g_score = ad.reduce_mean(networks.critic_apply(bp, "dglob", comp))
        patches = [
            networks.local_patch_tensor(ad.batch_slice(comp, j), batch[j].mask)
            for j in range(nb)
        ]
        l_score = ad.reduce_mean(networks.critic_apply(bp, "dloc", ad.concat_batch(patches)))
    else:
        zero = np.zeros((), dtype=np.float32)
        g_score, l_score = ad.Tensor(zero), ad.Tensor(zero)
    loss = generator_loss(comp, truth, g_score, l_score, cfg)
    g_loss = _finite_or_diverged(loss.item(), it, "generator loss")
    tape.backward(loss)
    gen_params = _subset(params, GEN_PREFIX)
    gen_grads = _subset(bp.grads(), GEN_PREFIX)
    gen_state = _subset(state.opt_state, GEN_PREFIX)
    optim.rmsprop_step(gen_params, gen_grads, gen_state, lr_now)

    diff = comp.data.astype(np.float64) - truth.astype(np.float64)
    recon_mse = _finite_or_diverged(float(np.mean(diff * diff)), it, "reconstruction MSE")
    state.iteration = it
    rec = LogRecord(
        iteration=it,
        g_loss=g_loss,
        c_global_loss=c_global,
        c_local_loss=c_local,
        recon_mse=recon_mse,
        wall_s=time.perf_counter() - t_start,
    )
    return state, rec


# ---------------------------------------------------------------------------
# Scheduling: stateless, so a resumed run replays the same batch stream


@functools.lru_cache(maxsize=16)
def _epoch_perm(seed: int, corpus_size: int, epoch: int) -> tuple[int, ...]:
    ss = np.random.SeedSequence([seed, _SCHEDULE_TAG, epoch])
    return tuple(np.random.default_rng(ss).permutation(corpus_size).tolist())


def batch_indices(seed: int, corpus_size: int, batch_size: int, iteration: int) -> list[tuple[int, int]]:
    """(epoch, image index) pairs for the 0-based iteration number.

    Batches consume a per-epoch reshuffled index stream; a batch may span
    an epoch boundary, and small corpora simply recycle through epochs.
    """
    start = iteration * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch = pos // corpus_size
        out.append((epoch, _epoch_perm(seed, corpus_size, epoch)[pos % corpus_size]))
    return out


def _sample_for(
    item: dataset.CorpusItem, index: int, epoch: int, run_seed: int, mask_cfg: dataset.MaskConfig
) -> dataset.Sample:
    if item.mask is not None:
        mask = item.mask
    else:
        mask = dataset.synthesize_mask(
            dataset.mask_seed(run_seed, index, epoch), mask_cfg, size=item.image.shape[0]
        )
    return dataset.make_sample(item.image, mask, item.name)


# ---------------------------------------------------------------------------
# Snapshots

SNAPSHOT_GUTTER = 4
SNAPSHOT_GUTTER_GRAY = 127


def render_panel_grid(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Tile [-1, 1] panels into one uint8 grid with gray gutters."""
    if not rows or not rows[0]:
        raise ValueError("render_panel_grid needs at least one panel")
    byte_rows = []
    for row in rows:
        panels = [dataset.to_bytes(p) for p in row]
        h = panels[0].shape[0]
        gut = np.full((h, SNAPSHOT_GUTTER), SNAPSHOT_GUTTER_GRAY, dtype=np.uint8)
        strip = panels[0]
        for p in panels[1:]:
            strip = np.hstack([strip, gut, p])
        byte_rows.append(strip)
    w = byte_rows[0].shape[1]
    gut = np.full((SNAPSHOT_GUTTER, w), SNAPSHOT_GUTTER_GRAY, dtype=np.uint8)
    grid = byte_rows[0]
    for r in byte_rows[1:]:
        grid = np.vstack([grid, gut, r])
    return grid


def _write_snapshot(
    path: str, corpus: Sequence[dataset.CorpusItem], state: ModelParams, mask_cfg: dataset.MaskConfig
) -> None:
    rows = []
    for i in range(min(4, len(corpus))):
        sample = _sample_for(corpus[i], i, 0, state.config.seed, mask_cfg)
        raw = networks.generator_forward(state.params, sample.gapped, sample.mask)
        comp = networks.composite(raw, sample.gapped, sample.mask)
        rows.append([sample.gapped, comp, sample.truth])
    dataset.write_pgm(render_panel_grid(rows), path)


def snapshot_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, f"snapshot_{iteration:06d}.pgm")


def checkpoint_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, f"checkpoint_{iteration:06d}.bhgan")


# ---------------------------------------------------------------------------
# Full loop


def train(
    corpus: Sequence[dataset.CorpusItem],
    cfg: TrainConfig,
    out_dir: str | None = None,
    *,
    state: ModelParams | None = None,
    mask_cfg: dataset.MaskConfig | None = None,
    progress: Callable[[LogRecord], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Run cfg.iterations train_steps over per-epoch reshuffled batches.

    ``state`` resumes from a loaded checkpoint: the batch schedule and
    per-epoch synthesized masks depend only on (cfg.seed, iteration), so
    a resumed run continues the exact same stream. With ``out_dir`` set,
    a snapshot grid and checkpoint land there every cfg.snapshot_every
    iterations, plus a final checkpoint, a final snapshot, and the CSV
    training log (appended to when resuming).
    """
    cfg.validate()
    if not corpus:
        raise ValueError("train needs a non-empty corpus")
    kernels.tune_malloc()
    if mask_cfg is None:
        mask_cfg = dataset.MaskConfig()
    mask_cfg.validate()
    if state is None:
        state = ModelParams.fresh(cfg)
    log = TrainLog()
    n = len(corpus)

    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "train_log.csv")
        append = state.iteration > 0 and os.path.exists(csv_path)
        csv_file = open(csv_path, "a" if append else "w", encoding="utf-8")
        if not append:
            csv_file.write(",".join(LOG_COLUMNS) + "\n")
    try:
        for it in range(state.iteration, cfg.iterations):
            batch = [
                _sample_for(corpus[idx], idx, epoch, cfg.seed, mask_cfg)
                for epoch, idx in batch_indices(cfg.seed, n, cfg.batch_size, it)
            ]
            state, rec = train_step(state, batch, cfg)
            log.append(rec)
            if csv_file is not None:
                csv_file.write(rec.csv_line() + "\n")
                csv_file.flush()
            if progress is not None:
                progress(rec)
            if out_dir is not None and state.iteration % cfg.snapshot_every == 0:
                _write_snapshot(snapshot_path(out_dir, state.iteration), corpus, state, mask_cfg)
                save_checkpoint(state, checkpoint_path(out_dir, state.iteration))
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, "model.bhgan"))
            final_snap = snapshot_path(out_dir, state.iteration)
            if not os.path.exists(final_snap):
                _write_snapshot(final_snap, corpus, state, mask_cfg)
    finally:
        if csv_file is not None:
            csv_file.close()
    return state, log


# ---------------------------------------------------------------------------
# Checkpoint serialization


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.at = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise ValueError(f"truncated checkpoint file: {self.path}")
        out = self.data[self.at : self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_table(r: _Reader) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        table[name] = arr.astype(np.float32)  # fresh writable copy in native order
    return table


def save_checkpoint(state: ModelParams, path: str) -> None:
    """Write the model atomically; load_checkpoint round-trips bit-exactly."""
    cfg_json = json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8")
    blob = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<B", state.version),
            struct.pack("<I", len(cfg_json)),
            cfg_json,
            _pack_table(state.params),
            _pack_table(state.opt_state),
            struct.pack("<Q", state.iteration),
        ]
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    version = r.u8()
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version} in {path} is not supported; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    cfg = TrainConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    params = _unpack_table(r)
    opt_state = _unpack_table(r)
    iteration = r.u64()
    if r.at != len(r.data):
        raise ValueError(f"trailing data after checkpoint payload: {path}")
    if set(params) != set(opt_state):
        raise ValueError(f"checkpoint parameter and optimizer tables disagree: {path}")
    return ModelParams(
        params=params, opt_state=opt_state, iteration=iteration, config=cfg, version=version
    )
