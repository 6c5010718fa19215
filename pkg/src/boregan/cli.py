"""Command-line pipeline: mask synthesis, training, inpainting, evaluation.

Four subcommands share one JSON-configurable run configuration. Flag values
override config-file values, which override built-in defaults, and the fully
resolved configuration is echoed to stdout and embedded in checkpoints (the
training fields) and evaluation reports (all fields). Exit codes: 0 success,
1 usage error, 2 I/O error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import dataset, evaluation, kernels, training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    """Bad flags, bad config-file contents, or invalid option values."""


class IOFailure(Exception):
    """Missing, unreadable, or unwritable inputs and outputs."""


# ---------------------------------------------------------------------------
# Run configuration: defaults < config file < flags

_TRAIN_KEYS = {
    "iterations": int,
    "learning-rate": float,
    "n-critic": int,
    "clip-c": float,
    "batch-size": int,
    "lambda-rec": float,
    "lambda-adv": float,
    "snapshot-every": int,
}
_MASK_KEYS = {
    "min-cover": float,
    "max-cover": float,
    "min-stripes": int,
    "max-stripes": int,
}
_ALL_KEYS: dict[str, type] = {
    **_TRAIN_KEYS,
    **_MASK_KEYS,
    "seed": int,
    "data": str,
    "out": str,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: training recipe, mask bounds, paths, seed."""

    train: training.TrainConfig
    mask: dataset.MaskConfig
    seed: int
    data: str | None
    out: str | None

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed, "data": self.data, "out": self.out}
        for f in dataclasses.fields(training.TrainConfig):
            if f.name != "seed":
                out[f.name.replace("_", "-")] = getattr(self.train, f.name)
        for f in dataclasses.fields(dataset.MaskConfig):
            out[f.name.replace("_", "-")] = getattr(self.mask, f.name)
        return out


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise IOFailure(f"{path}: cannot read config file ({e})") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(_ALL_KEYS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
    for key, value in raw.items():
        want = _ALL_KEYS[key]
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise UsageError(f"{path}: key {key!r} must be {want.__name__}, got {value!r}")
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file, and explicit flags."""
    merged: dict = {"seed": 0, "data": None, "out": None}
    for f in dataclasses.fields(training.TrainConfig):
        if f.name != "seed":
            merged[f.name.replace("_", "-")] = f.default
    for f in dataclasses.fields(dataset.MaskConfig):
        merged[f.name.replace("_", "-")] = f.default
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for key, want in _ALL_KEYS.items():
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            merged[key] = want(flag)

    seed = merged["seed"]
    if not 0 <= seed < 2**64:
        raise UsageError(f"--seed must be an unsigned 64-bit integer, got {seed}")
    try:
        train_cfg = training.TrainConfig(
            seed=seed,
            **{k.replace("-", "_"): merged[k] for k in _TRAIN_KEYS},
        ).validate()
        mask_cfg = dataset.MaskConfig(**{k.replace("-", "_"): merged[k] for k in _MASK_KEYS})
        mask_cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    return RunConfig(
        train=train_cfg, mask=mask_cfg, seed=seed, data=merged["data"], out=merged["out"]
    )


def _require(rc: RunConfig, command: str, *names: str) -> None:
    for name in names:
        if getattr(rc, name) is None:
            raise UsageError(f"{command} requires --{name} (flag or config file)")


def _write_text_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise IOFailure(f"{path}: unwritable ({e})") from e


def _write_json(path: str, payload: dict) -> None:
    _write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_checkpoint(path: str) -> training.ModelParams:
    try:
        return training.load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise IOFailure(f"cannot load checkpoint: {e}") from e


def _ensure_out_dir(rc: RunConfig) -> str:
    assert rc.out is not None
    try:
        os.makedirs(rc.out, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"{rc.out}: cannot create output directory ({e})") from e
    return rc.out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_make_masks(args: argparse.Namespace, rc: RunConfig) -> int:
    _require(rc, "make-masks", "data", "out")
    try:
        paths = dataset.list_corpus_paths(rc.data)
    except dataset.ImageFormatError as e:
        raise IOFailure(str(e)) from e
    if not paths:
        raise IOFailure(f"{rc.data}: no corpus images found")
    out_dir = _ensure_out_dir(rc)
    wrote = 0
    for index, path in enumerate(paths):
        try:
            dataset.load_image(path)
        except dataset.ImageFormatError as e:
            print(f"warning: skipping {path}: {e}", file=sys.stderr)
            continue
        mask = dataset.synthesize_mask(dataset.mask_seed(rc.seed, index, 0), rc.mask)
        stem = os.path.splitext(os.path.basename(path))[0]
        mask_file = os.path.join(out_dir, stem + ".mask.pgm")
        try:
            dataset.save_mask(mask, mask_file)
        except dataset.ImageFormatError as e:
            raise IOFailure(str(e)) from e
        print(f"wrote {mask_file} (coverage {dataset.mask_coverage(mask):.4f})")
        wrote += 1
    if wrote == 0:
        raise IOFailure(f"{rc.data}: every image failed to load")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, rc: RunConfig) -> int:
    _require(rc, "train", "data", "out")
    try:
        corpus = dataset.load_corpus(rc.data)
    except dataset.ImageFormatError as e:
        raise IOFailure(str(e)) from e
    out_dir = _ensure_out_dir(rc)

    if len(corpus) >= 2:
        train_idx, test_idx = dataset.split_dataset(
            len(corpus), dataset.SplitSpec(seed=rc.seed)
        )
    else:
        train_idx, test_idx = [0], []
    split = {
        "train": [corpus[i].name for i in train_idx],
        "test": [corpus[i].name for i in test_idx],
    }
    _write_json(os.path.join(out_dir, "split.json"), split)
    _write_json(os.path.join(out_dir, "config.json"), rc.to_dict())
    items = [corpus[i] for i in train_idx]
    print(f"training on {len(items)} images, holding out {len(test_idx)}")

    cfg = rc.train

    def progress(rec: training.LogRecord) -> None:
        if rec.iteration % 100 == 0 or rec.iteration == cfg.iterations:
            print(
                f"iter {rec.iteration}/{cfg.iterations} "
                f"g_loss {rec.g_loss:+.4f} recon_mse {rec.recon_mse:.5f}"
            )

    training.train(items, cfg, out_dir=out_dir, mask_cfg=rc.mask, progress=progress)
    print(f"final checkpoint: {os.path.join(out_dir, 'model.bhgan')}")
    return EXIT_OK


def cmd_inpaint(args: argparse.Namespace, rc: RunConfig) -> int:
    _require(rc, "inpaint", "out")
    state = _load_checkpoint(args.checkpoint)
    try:
        image = dataset.load_image(args.image)
        mask = dataset.load_mask(args.mask)
    except dataset.ImageFormatError as e:
        raise IOFailure(str(e)) from e
    stem = os.path.splitext(os.path.basename(args.image))[0]
    sample = dataset.make_sample(image, mask, name=stem)
    filled = evaluation.model_fill(state.params, sample)
    out_dir = _ensure_out_dir(rc)
    out_path = os.path.join(out_dir, stem + ".inpainted.pgm")
    try:
        dataset.save_image(filled, out_path)
    except dataset.ImageFormatError as e:
        raise IOFailure(str(e)) from e
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, rc: RunConfig) -> int:
    _require(rc, "evaluate", "data", "out")
    state = _load_checkpoint(args.checkpoint)
    try:
        corpus = dataset.load_corpus(rc.data)
    except dataset.ImageFormatError as e:
        raise IOFailure(str(e)) from e
    samples = []
    for index, item in enumerate(corpus):
        mask = item.mask
        if mask is None:
            mask = dataset.synthesize_mask(dataset.mask_seed(rc.seed, index, 0), rc.mask)
        samples.append(dataset.make_sample(item.image, mask, name=item.name))

    report = evaluation.evaluate(state, samples, config=rc.to_dict())
    out_dir = _ensure_out_dir(rc)
    report_path = os.path.join(out_dir, "report.json")
    _write_text_atomic(report_path, report.to_json())
    for im in report.images:
        print(
            f"{im.name}: mse_model {im.mse_model:.6f} mse_baseline {im.mse_baseline:.6f} "
            f"(masked {im.mse_model_masked:.6f} / {im.mse_baseline_masked:.6f})"
        )
    print(
        f"mean mse: model {report.mean_mse_model:.6f} "
        f"baseline {report.mean_mse_baseline:.6f}; "
        f"model beats baseline: {report.model_beats_baseline}"
    )
    print(f"timing: model {report.t_model_s:.3f}s baseline {report.t_baseline_s:.3f}s "
          f"speedup x{report.speedup:.3f}")
    if args.render:
        for sample in samples:
            model_out = evaluation.model_fill(state.params, sample)
            base_out = evaluation.linear_interp_fill(sample.gapped, sample.mask)
            grid_path = os.path.join(out_dir, f"{sample.name}.compare.pgm")
            evaluation.render_comparison(sample, model_out, base_out, grid_path)
            print(f"wrote {grid_path}")
    print(f"wrote {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise UsageError(message)


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit run seed")
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--data", type=str, default=None, help="corpus directory")
    p.add_argument("--out", type=str, default=None, help="output directory")


def _add_mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-cover", type=float, default=None, help="minimum mask coverage")
    p.add_argument("--max-cover", type=float, default=None, help="maximum mask coverage")
    p.add_argument("--min-stripes", type=int, default=None, help="minimum stripe count")
    p.add_argument("--max-stripes", type=int, default=None, help="maximum stripe count")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", "--iters", dest="iterations", type=int, default=None,
                   help="training iterations")
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float,
                   default=None, help="RMSProp base step size")
    p.add_argument("--n-critic", type=int, default=None, help="critic updates per step")
    p.add_argument("--clip-c", type=float, default=None, help="critic weight clip bound")
    p.add_argument("--batch-size", type=int, default=None, help="images per batch")
    p.add_argument("--lambda-rec", type=float, default=None, help="reconstruction weight")
    p.add_argument("--lambda-adv", type=float, default=None, help="adversarial weight")
    p.add_argument("--snapshot-every", type=int, default=None,
                   help="iterations between snapshots/checkpoints")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="boregan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("make-masks", help="synthesize stripe masks for a corpus")
    _add_shared(p)
    _add_mask_flags(p)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("train", help="train the inpainting model")
    _add_shared(p)
    _add_mask_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="fill one image with a trained model")
    _add_shared(p)
    p.add_argument("--checkpoint", type=str, required=True, help="trained model file")
    p.add_argument("--image", type=str, required=True, help="input image (PGM or PNG)")
    p.add_argument("--mask", type=str, required=True, help="mask PGM (255 = missing)")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("evaluate", help="score a model against the baseline")
    _add_shared(p)
    _add_mask_flags(p)
    p.add_argument("--checkpoint", type=str, required=True, help="trained model file")
    p.add_argument("--render", action="store_true", help="write comparison grids")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        rc = resolve_config(args)
        print(f"config: {json.dumps(rc.to_dict(), sort_keys=True)}")
        kernels.tune_malloc()
        return args.func(args, rc)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except training.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
