"""``nhvt`` command-line tool.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or inconsistent files, bad checkpoints), 3 numeric failure
(non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checks
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .datapipe import (
    BatchStream,
    DataError,
    NormStats,
    compute_norm_stats,
    extract_patches,
    load_dataset,
    normalize,
    read_image,
    read_image_u8,
    read_mask,
    save_dataset,
    synthetic_nuclei,
    write_image,
    write_mask,
)
from .metrics import render_error_map
from .models import ModelConfig, flop_estimate, init_params
from .trainer import NonFiniteLossError, evaluate, predict_mask, train, write_loss_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_OUT = "nhvt-out"
CHECKPOINT_NAME = "checkpoint.nhvt"
NEEDS_CONFIG = ("train", "eval", "predict")
NEEDS_DATA = ("train", "eval")

log = logging.getLogger("nhvt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# shared helpers


def _threads(args, cfg: RunConfig | None = None) -> int | None:
    if args.deterministic or (cfg is not None and cfg.deterministic):
        return 1
    env = os.environ.get("NHVT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"NHVT_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"NHVT_THREADS must be a positive integer, got {env!r}")
        return n
    return cfg.threads if cfg is not None else None


def _limit_threads(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _config(args, required: bool = True) -> RunConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required for this command")
        return None
    cfg = load_config(args.config, check_paths=args.command in NEEDS_DATA)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_stats(cfg: RunConfig, train_samples=None) -> NormStats:
    """Normalization statistics of the training set, cached by prepare."""
    path = cfg.data.train / "norm_stats.txt"
    if path.exists():
        return NormStats.load(path)
    if train_samples is None:
        train_samples = load_dataset(cfg.data.train, cfg.model.num_classes)
    return compute_norm_stats(s.image for s in train_samples)


def _write_report(report, out: Path, stem: str, class_names) -> None:
    from .plotting import plot_classwise

    (out / f"{stem}.txt").write_text(report.to_text(class_names))
    (out / f"{stem}.kv").write_text(report.to_keyvalue())
    plot_classwise(report, out / f"{stem}_classwise.png", class_names)


def _load_model(cfg: RunConfig, path):
    if not Path(path).is_file():
        raise CheckpointError(f"{path}: checkpoint does not exist")
    return load_checkpoint(path, cfg.model)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg) -> int:
    out = _out(args)
    size, stride = args.size, args.stride or args.size
    samples, stems = [], []
    if args.synthetic:
        for s in synthetic_nuclei(args.synthetic, size=args.size, num_classes=args.classes or 2, seed=args.seed or 0):
            samples.append(s)
            stems.append(s.source)
    else:
        if args.raw is None:
            raise UsageError("prepare needs a raw data directory or --synthetic N")
        raw = Path(args.raw)
        images = sorted((raw / "images").glob("*.ppm"))
        if not images:
            raise DataError(f"{raw}: no images/*.ppm files found")
        failed = 0
        for path in images:
            mask_path = raw / "masks" / f"{path.stem}.pgm"
            try:
                image = read_image_u8(path)
                mask = read_mask(mask_path, args.classes)
                patches = extract_patches(image, mask, size, stride, path.stem)
            except (DataError, OSError) as exc:
                failed += 1
                print(f"nhvt prepare: skipping {path.name}: {exc}", file=sys.stderr)
                continue
            for p in patches:
                samples.append(p)
                stems.append(f"{path.stem}_r{p.offset[0]:04d}_c{p.offset[1]:04d}")
        if not samples:
            raise DataError(f"{raw}: all {failed} source images failed to decode")
    stats = compute_norm_stats(s.image for s in samples)
    save_dataset(out, samples, stems, stats)
    print(f"wrote {len(samples)} patches to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .plotting import plot_loss_curve

    out = _out(args)
    samples = load_dataset(cfg.data.train, cfg.model.num_classes)
    stats = _train_stats(cfg, samples)
    stream = BatchStream(samples, cfg.train.batch_size, stats, cfg.augment, cfg.seed)
    cfg.train.checkpoint_path = str(out / CHECKPOINT_NAME)
    resume = _load_model(cfg, args.resume) if args.resume else None
    params = init_params(cfg.model)
    every = max(1, cfg.train.total_steps // 20)

    def progress(step, lr, loss):
        if step % every == 0 or step + 1 == cfg.train.total_steps:
            log.info("step %d/%d lr %.3e loss %.5f", step + 1, cfg.train.total_steps, lr, loss)
        return False

    try:
        final, history = train(cfg.model, params, stream, cfg.train, resume=resume, on_step=progress)
    except NonFiniteLossError as exc:
        log.error("%s; last good checkpoint (step %d) kept at %s", exc, exc.last_good.step, cfg.train.checkpoint_path)
        return EXIT_NUMERIC
    write_loss_log(out / "loss.log", history)
    if history:
        plot_loss_curve(history, out / "loss.png", title=f"{cfg.model.variant} training loss")
    eval_root = cfg.data.val or cfg.data.train
    eval_samples = samples if eval_root == cfg.data.train else load_dataset(eval_root, cfg.model.num_classes)
    report = evaluate(final.params, cfg.model, eval_samples, stats, cfg.train.batch_size)
    _write_report(report, out, "metrics", cfg.data.class_names)
    print(f"trained {final.step} steps; mDice {report.mdice:.4f} mIoU {report.miou:.4f}; checkpoint {cfg.train.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = _out(args)
    ckpt = _load_model(cfg, args.checkpoint)
    root = Path(args.data) if args.data else (cfg.data.val or cfg.data.train)
    samples = load_dataset(root, cfg.model.num_classes)
    stats = _train_stats(cfg)
    report = evaluate(ckpt.params, cfg.model, samples, stats, cfg.train.batch_size)
    _write_report(report, out, "metrics", cfg.data.class_names)
    sys.stdout.write(report.to_text(cfg.data.class_names))
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    out = _out(args)
    ckpt = _load_model(cfg, args.checkpoint)
    stats = _train_stats(cfg)
    image = read_image(args.image).transpose(2, 0, 1)
    mask = predict_mask(ckpt.params, cfg.model, normalize(image, stats)[None])[0]
    target = out / f"{Path(args.image).stem}_pred.pgm"
    write_mask(target, mask)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_errormap(args, cfg) -> int:
    out = _out(args)
    pred, truth = read_mask(args.pred), read_mask(args.truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {truth.shape} differ in size")
    image = render_error_map(pred, truth)
    target = out / "errormap.ppm"
    write_image(target, image)
    wrong = int(np.count_nonzero(pred != truth))
    print(f"wrote {target}; {wrong} of {pred.size} pixels differ")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    out = _out(args)
    header = checks.format_table([]).rstrip("\n")
    print(header, flush=True)
    results = checks.run_suite(args.scope, on_result=lambda r: print(checks.format_row(r), flush=True))
    (out / "gradcheck.txt").write_text(checks.format_table(results))
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def _summary_lines(model: ModelConfig, size: int) -> list[str]:
    params = init_params(model)
    groups: dict[str, int] = {}
    for name, t in params.trainable():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + t.size
    total = params.num_parameters()
    flops = flop_estimate(model, (1, 3, size, size))
    lines = [
        f"variant={model.variant}",
        f"decoder={model.decoder}",
        f"base_channels={model.base_channels}",
        f"widths={','.join(map(str, model.widths))}",
        f"params={total}",
        f"params_millions={total / 1e6:.4f}",
        f"input={size}x{size}",
        f"flops={flops}",
        f"gflops={flops / 1e9:.4f}",
    ]
    lines += [f"params.{k}={v}" for k, v in sorted(groups.items())]
    return lines


def cmd_summary(args, cfg) -> int:
    out = _out(args)
    model = cfg.model if cfg else ModelConfig()
    text = "\n".join(_summary_lines(model, args.size)) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, byte-reproducible outputs")
    common.add_argument("--out", default=DEFAULT_OUT, help=f"output directory (default {DEFAULT_OUT})")

    parser = _Parser(prog="nhvt", description="NucleiHVT / CB-NucleiHVT nuclei segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="tile raw image/mask pairs into a dataset")
    p.add_argument("raw", nargs="?", help="directory with images/*.ppm and masks/*.pgm")
    p.add_argument("--size", type=int, default=256, help="patch size (default 256)")
    p.add_argument("--stride", type=int, help="patch stride (default: size)")
    p.add_argument("--classes", type=int, help="number of classes (validates masks; synthetic default 2)")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic patches instead")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: data.val, else data.train)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="input PPM image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("errormap", parents=[common], help="render a prediction error map")
    p.add_argument("--pred", required=True, help="predicted mask PGM")
    p.add_argument("--truth", required=True, help="ground-truth mask PGM")
    p.set_defaults(func=cmd_errormap)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("all", "ops", "units"), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("summary", parents=[common], help="parameter and FLOP report")
    p.add_argument("--size", type=int, default=256, help="input side for the FLOP estimate")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.INFO)
    try:
        cfg = _config(args, required=args.command in NEEDS_CONFIG)
        with _limit_threads(_threads(args, cfg)):
            return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"nhvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"nhvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"nhvt {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
