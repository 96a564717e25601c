"""Command-line interface: ``colodiff <verb> [options]``.

Verbs: gen-data, fit-codec, fit-extractor, train, sample, eval,
bench-steps, ablate.  Exit codes: 0 success, 2 usage or configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import metrics
from .config import RunConfig, config_from_dict, load_config
from .denoiser import VARIANTS, Denoiser, load_denoiser, variant_config
from .diffusion import linear_schedule, sample
from .errors import ColodiffError, NumericalError
from .numerics import cdt
from .synthdata import SyntheticDataset, ToyClassSpec, generate_dataset, load_dataset
from .trainer import Trainer

log = logging.getLogger("colodiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(ColodiffError):
    """Missing inputs or invalid command-line values."""


# ----------------------------------------------------------------- helpers


def resolve(config: RunConfig, seed: int | None) -> RunConfig:
    """Apply ``--seed`` and propagate the run seed to every seeded section."""
    if seed is not None:
        if seed < 0 or seed >= 2**64:
            raise UsageError(f"--seed must be a u64, got {seed}")
        config = replace(config, seed=seed)
    config.model = replace(config.model, seed=config.seed)
    config.trainer = replace(config.trainer, seed=config.seed)
    return config


def prepare_out(out: str | None, config: RunConfig, command: str, argv: list[str], **inputs) -> Path:
    if not out:
        raise UsageError(f"{command}: --out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    config.dump(path / "config.json")
    run = {"command": command, "argv": argv, "seed": config.seed,
           "inputs": {k: str(v) for k, v in inputs.items() if v is not None}}
    write_json(path / "run.json", run)
    return path


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def require_dir(path, what: str, marker: str) -> Path:
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not (p / marker).exists():
        raise UsageError(f"{what} directory {p} does not contain {marker}")
    return p


def dataset_from_config(config: RunConfig) -> SyntheticDataset:
    d = config.data
    classes = [ToyClassSpec.from_dict(c) for c in d.classes] if d.classes is not None else None
    return generate_dataset(d.n_per_class, classes, d.frames, d.size, config.seed, config.codec.patch)


def split_of(ds: SyntheticDataset, config: RunConfig):
    return ds.split(config.trainer.val_fraction, config.seed)


def select(ds: SyntheticDataset, config: RunConfig, which: str) -> SyntheticDataset:
    if which == "all":
        return ds
    train, val = split_of(ds, config)
    return ds.subset(val if which == "val" else train)


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6 PPM from a [3, H, W] float frame in [0, 1]."""
    rgb = np.clip(np.rint(np.asarray(frame, np.float64) * 255.0), 0, 255).astype(np.uint8)
    hwc = np.ascontiguousarray(rgb.transpose(1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{hwc.shape[1]} {hwc.shape[0]}\n255\n".encode("ascii"))
        fh.write(hwc.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm`; returns [3, H, W] uint8."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise UsageError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise UsageError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1)


def balanced_labels(num_classes: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes), per_class)


def sample_clips(model: Denoiser, codec, labels: np.ndarray, n_steps: int, seed: int, config: RunConfig,
                 frames: int, batch_size: int = 64):
    """Sample and decode a batch of clips; returns (clips, latents, wall seconds)."""
    sched = linear_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    size = config.data.size // codec.patch
    shape = (frames, codec.channels, size, size)
    t0 = time.perf_counter()
    z = sample(lambda x, t, y: model.predict_batched(x, t, y, batch_size), labels, n_steps, seed, sched, shape)
    clips = codec_mod.decode(z, codec)
    return clips, z, time.perf_counter() - t0


def load_checkpoint(path, weights: str):
    """(model, codec, training config) from a ``train`` output directory."""
    root = require_dir(path, "checkpoint", "codec")
    model_dir = root / weights
    if not (model_dir / "manifest.json").exists():
        raise UsageError(f"checkpoint {root} has no {weights}/ weights")
    with open(root / "config.json") as fh:
        trained = config_from_dict(json.load(fh))
    return load_denoiser(model_dir), codec_mod.load_codec(root / "codec"), trained


def load_clip_set(path):
    """Pixel clips and labels from a dataset directory or a ``sample`` output directory."""
    p = Path(path)
    if (p / "index.json").exists():
        ds = load_dataset(p)
        return ds.videos, ds.labels
    if (p / "clips.cdt").exists():
        with open(p / "manifest.json") as fh:
            manifest = json.load(fh)
        return cdt.load(p / "clips.cdt"), np.asarray(manifest["labels"], dtype=np.int64)
    raise UsageError(f"{p} holds neither a dataset nor sampled clips")


def evaluate(real: np.ndarray, gen: np.ndarray, gen_labels: np.ndarray | None, ext, splits: int) -> dict:
    out = {
        "fid": metrics.fid(real, gen, ext),
        "fvd_analog": metrics.fvd_analog(real, gen, ext),
        "real_clips": int(real.shape[0]),
        "gen_clips": int(gen.shape[0]),
        "real_frames": int(real.shape[0] * real.shape[1]),
        "gen_frames": int(gen.shape[0] * gen.shape[1]),
    }
    out["is_mean"], out["is_std"] = metrics.inception_score(gen, ext, splits)
    if gen_labels is not None:
        out["label_agreement"] = metrics.clip_accuracy(ext, gen, gen_labels)
        per_class = {}
        for c in np.unique(gen_labels):
            subset = gen[gen_labels == c]
            if subset.shape[0] * subset.shape[1] >= splits:
                per_class[str(int(c))] = metrics.inception_score(subset, ext, splits)[0]
        out["is_per_class"] = per_class
    return out


def extractor_id(path) -> str:
    with open(Path(path) / "manifest.json") as fh:
        manifest = json.load(fh)
    return manifest.get("id", str(Path(path).resolve()))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, config: RunConfig) -> int:
    out = prepare_out(args.out, config, "gen-data", args.argv)
    ds = dataset_from_config(config)
    ds.save(out)
    log.info("wrote %d clips to %s", len(ds), out)
    return EXIT_OK


def cmd_fit_codec(args, config: RunConfig) -> int:
    data = require_dir(args.data, "data", "index.json")
    out = prepare_out(args.out, config, "fit-codec", args.argv, data=data)
    ds = load_dataset(data)
    train, val = split_of(ds, config)
    params = codec_mod.fit_codec(ds.videos[train], config.codec.patch, config.codec.channels)
    params.save(out)
    recon = codec_mod.decode(codec_mod.encode(ds.videos[val], params), params)
    report = {"val_psnr_db": codec_mod.psnr(ds.videos[val], recon), "train_clips": int(train.size),
              "val_clips": int(val.size), "channels": params.channels, "patch": params.patch}
    write_json(out / "report.json", report)
    log.info("codec PSNR on held-out clips: %.2f dB", report["val_psnr_db"])
    return EXIT_OK


def cmd_fit_extractor(args, config: RunConfig) -> int:
    data = require_dir(args.data, "data", "index.json")
    out = prepare_out(args.out, config, "fit-extractor", args.argv, data=data)
    ds = load_dataset(data)
    e = config.extractor
    train, val = ds.split(e.val_fraction, config.seed)
    ext_cfg = metrics.ExtractorConfig(size=ds.size, hidden=e.hidden, features=e.features,
                                      num_classes=len(ds.classes), seed=config.seed)
    ext = metrics.train_extractor(ds.videos[train], ds.labels[train], ds.centers[train], ext_cfg,
                                  epochs=e.epochs, lr=e.lr)
    acc = metrics.clip_accuracy(ext, ds.videos[val], ds.labels[val])
    ext.save(out, {"id": f"extractor-seed{config.seed}-{len(ds)}clips", "heldout_clip_accuracy": acc})
    log.info("extractor held-out clip accuracy %.4f", acc)
    return EXIT_OK


def _train(args, config: RunConfig, variant: str, out: Path) -> Trainer:
    data = require_dir(args.data, "data", "index.json")
    codec_dir = require_dir(args.codec, "codec", "manifest.json")
    ds = load_dataset(data)
    params = codec_mod.load_codec(codec_dir)
    if (out / "codec").resolve() != codec_dir.resolve():
        shutil.copytree(codec_dir, out / "codec", dirs_exist_ok=True)
    lat = codec_mod.encode(ds.videos, params)
    train, val = split_of(ds, config)
    model = Denoiser(variant_config(config.model, variant))
    sched = linear_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    trainer = Trainer(model, sched, lat[train], ds.labels[train], lat[val], ds.labels[val], config.trainer)
    if getattr(args, "resume", False) and (out / "trainer_state.json").exists():
        trainer.resume(out)
        log.info("resumed from step %d", trainer.state.step)
    else:
        trainer.sanity_check()

    def report(entry):
        if "val_loss" in entry:
            log.info("step %d loss %.4f val %.4f", entry["step"], entry["loss"], entry["val_loss"])

    trainer.run(None, checkpoint_dir=out, on_log=report)
    write_json(out / "manifest.json", {
        "kind": "training-run", "variant": variant, "steps": trainer.state.step,
        "stopped_early": trainer.state.stopped_early, "parameter_count": model.parameter_count(),
        "final_val_loss": trainer.state.history[-1] if trainer.state.history else None,
        "weights": {"raw": "raw", "ema": "ema"}, "codec": "codec", "log": "train_log.json",
    })
    return trainer


def cmd_train(args, config: RunConfig) -> int:
    out = prepare_out(args.out, config, "train", args.argv, data=args.data, codec=args.codec)
    _train(args, config, args.variant, out)
    return EXIT_OK


def cmd_sample(args, config: RunConfig) -> int:
    model, params, trained = load_checkpoint(args.checkpoint, args.weights)
    s = config.sample
    label = s.label if args.label is None else args.label
    n_steps = s.n_steps if args.steps is None else args.steps
    count = s.count if args.count is None else args.count
    if not (0 <= label < model.config.num_classes):
        raise UsageError(f"label {label} outside 0..{model.config.num_classes - 1}")
    if count < 1:
        raise UsageError("--count must be >= 1")
    out = prepare_out(args.out, config, "sample", args.argv, checkpoint=args.checkpoint)
    frames = trained.data.frames
    clips, latents, labels = [], [], []
    for i in range(count):
        seed = [config.seed, i]
        clip, z, wall = sample_clips(model, params, np.array([label]), n_steps, seed, trained, frames)
        clip_dir = out / f"clip_{i:04d}"
        clip_dir.mkdir(exist_ok=True)
        for f in range(frames):
            write_ppm(clip_dir / f"frame_{f:03d}.ppm", clip[0, f])
        write_json(clip_dir / "manifest.json", {"label": label, "steps": n_steps, "seed": seed,
                                                "frames": frames, "wall_time_s": wall,
                                                "frames_per_s": frames / wall})
        clips.append(clip[0])
        latents.append(z[0])
        labels.append(label)
    cdt.save(out / "latents.cdt", np.stack(latents))
    cdt.save(out / "clips.cdt", np.stack(clips))
    write_json(out / "manifest.json", {"kind": "samples", "count": count, "label": label, "steps": n_steps,
                                       "seed": config.seed, "weights": args.weights, "labels": labels,
                                       "clips": [f"clip_{i:04d}" for i in range(count)],
                                       "latents": "latents.cdt", "pixels": "clips.cdt"})
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    ext_dir = require_dir(args.extractor, "extractor", "manifest.json")
    real_dir = require_dir(args.real, "real", "index.json")
    if args.gen is None or not Path(args.gen).exists():
        raise UsageError("missing --gen")
    ext = metrics.load_extractor(ext_dir)
    real = select(load_dataset(real_dir), config, args.split).videos
    gen, gen_labels = load_clip_set(args.gen)
    out = prepare_out(args.out, config, "eval", args.argv, real=real_dir, gen=args.gen, extractor=ext_dir)
    result = evaluate(real, gen, gen_labels, ext, config.metrics.is_splits)
    result.update({"seed": config.seed, "extractor": extractor_id(ext_dir), "real_split": args.split,
                   "fvd_note": "clip-level Fréchet distance over pooled frame features and temporal deltas"})
    write_json(out / "metrics.json", result)
    log.info("FID %.4f  FVD-analog %.4f  IS %.3f", result["fid"], result["fvd_analog"], result["is_mean"])
    return EXIT_OK


def parse_steps(text: str | None, default: list[int]) -> list[int]:
    if text is None:
        return list(default)
    try:
        steps = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid --steps-list {text!r}") from exc
    if not steps:
        raise UsageError("--steps-list is empty")
    return steps


def cmd_bench_steps(args, config: RunConfig) -> int:
    model, params, trained = load_checkpoint(args.checkpoint, args.weights)
    ext_dir = require_dir(args.extractor, "extractor", "manifest.json")
    real_dir = require_dir(args.real, "real", "index.json")
    steps_list = parse_steps(args.steps_list, config.bench.steps)
    out = prepare_out(args.out, config, "bench-steps", args.argv, checkpoint=args.checkpoint,
                      real=real_dir, extractor=ext_dir)
    ext = metrics.load_extractor(ext_dir)
    real = select(load_dataset(real_dir), trained, "val").videos
    labels = balanced_labels(model.config.num_classes, config.bench.clips_per_class)
    frames = trained.data.frames
    rows = []
    for n in steps_list:
        clips, _, wall = sample_clips(model, params, labels, n, config.seed, trained, frames,
                                      config.metrics.batch_size)
        row = {"steps": n, "clips": int(labels.size), "wall_time_s": wall,
               "time_per_clip_s": wall / labels.size, "frames_per_s": labels.size * frames / wall,
               "fid": metrics.fid(real, clips, ext), "fvd_analog": metrics.fvd_analog(real, clips, ext),
               "is_mean": metrics.inception_score(clips, ext, config.metrics.is_splits)[0]}
        rows.append(row)
        log.info("steps %d: %.2fs  FID %.3f", n, wall, row["fid"])
    write_json(out / "bench.json", {"seed": config.seed, "weights": args.weights,
                                    "extractor": extractor_id(ext_dir), "rows": rows})
    return EXIT_OK


def cmd_ablate(args, config: RunConfig) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    ext_dir = require_dir(args.extractor, "extractor", "manifest.json")
    out = prepare_out(args.out, config, "ablate", args.argv, data=args.data, codec=args.codec,
                      extractor=ext_dir)
    trainer = _train(args, config, args.variant, out)
    model = trainer.ema_model()
    params = codec_mod.load_codec(out / "codec")
    m = config.metrics
    labels = balanced_labels(model.config.num_classes, m.eval_clips_per_class)
    clips, _, wall = sample_clips(model, params, labels, m.n_steps, config.seed, config, config.data.frames,
                                  m.batch_size)
    real = select(load_dataset(args.data), config, "val").videos
    result = evaluate(real, clips, labels, metrics.load_extractor(ext_dir), m.is_splits)
    result["sample_wall_time_s"] = wall
    counts = {v: Denoiser(variant_config(config.model, v)).parameter_count() for v in VARIANTS}
    reference = "content_aware"
    comparison = {
        "variant": args.variant, "reference": reference, "steps_trained": trainer.state.step,
        "parameter_count": counts[args.variant], "reference_parameter_count": counts[reference],
        "parameter_ratio": counts[args.variant] / counts[reference], "parameter_counts": counts,
        "metrics": result, "seed": config.seed, "extractor": extractor_id(ext_dir),
    }
    others = []
    for other in args.against or []:
        with open(Path(other) / "comparison.json") as fh:
            o = json.load(fh)
        others.append({"variant": o["variant"], "fvd_analog": o["metrics"]["fvd_analog"],
                       "fid": o["metrics"]["fid"], "is_per_class": o["metrics"].get("is_per_class")})
    if others:
        comparison["against"] = others
    write_json(out / "comparison.json", comparison)
    log.info("%s: FVD-analog %.3f  FID %.3f", args.variant, result["fvd_analog"], result["fid"])
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="colodiff", parents=[common],
                                     description="Latent video diffusion on synthetic endoscopy-like clips.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")

    p = sub.add_parser("fit-codec", parents=[common], help="fit the PCA patch codec")
    p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("fit-extractor", parents=[common], help="train the metric feature extractor")
    p.add_argument("--data", help="dataset directory")

    for name, helptext in (("train", "train the denoiser"), ("ablate", "train and evaluate a variant")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--codec", help="codec directory")
        p.add_argument("--steps", type=int, help="override trainer.max_steps")
        if name == "train":
            p.add_argument("--variant", default="content_aware", choices=sorted(VARIANTS))
            p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
        else:
            p.add_argument("--variant", required=True)
            p.add_argument("--extractor", help="feature extractor directory")
            p.add_argument("--against", nargs="*", help="other ablate outputs to tabulate")

    p = sub.add_parser("sample", parents=[common], help="sample clips and write PPM frames")
    p.add_argument("--checkpoint", help="training output directory")
    p.add_argument("--label", type=int)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--count", type=int)
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")

    p = sub.add_parser("eval", parents=[common], help="FID, FVD-analog and IS of a clip set")
    p.add_argument("--real", help="real dataset directory")
    p.add_argument("--gen", help="sample output or dataset directory")
    p.add_argument("--extractor", help="feature extractor directory")
    p.add_argument("--split", choices=("val", "train", "all"), default="val",
                   help="which part of the real dataset to compare against")

    p = sub.add_parser("bench-steps", parents=[common], help="wall time and FID per sampling step count")
    p.add_argument("--checkpoint", help="training output directory")
    p.add_argument("--real", help="real dataset directory")
    p.add_argument("--extractor", help="feature extractor directory")
    p.add_argument("--steps-list", help="comma-separated step counts")
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "fit-codec": cmd_fit_codec, "fit-extractor": cmd_fit_extractor,
    "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "bench-steps": cmd_bench_steps,
    "ablate": cmd_ablate,
}


def _limit_threads():
    value = os.environ.get("COLODIFF_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"COLODIFF_THREADS must be an integer, got {value!r}") from exc
    if n < 1:
        raise UsageError("COLODIFF_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    args.argv = argv
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        config = resolve(load_config(args.config), args.seed)
        if getattr(args, "steps", None) is not None and args.command in ("train", "ablate"):
            config.trainer = replace(config.trainer, max_steps=args.steps)
        try:
            return COMMANDS[args.command](args, config)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except NumericalError as exc:
        print(f"colodiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ColodiffError, ValueError, KeyError, OSError) as exc:
        print(f"colodiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
