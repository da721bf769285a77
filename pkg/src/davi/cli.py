"""``davi`` command line: gen-data, train, eval, infer, ablate, validate.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 training abort, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import config as run_config
from . import data
from . import tensor as T
from .evaluate import ConfigMismatch, ensemble_predict, evaluate, run_ablation
from .train import TrainingAborted, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ABORT, EXIT_MISMATCH = 0, 1, 2, 3, 4

log = logging.getLogger("davi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors here are exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag name → config key, for the flags shared by train and ablate
_CONFIG_FLAGS = {
    "seed": "seed",
    "steps": "steps",
    "lr": "lr",
    "batch_size": "batch_size",
    "mask_loss_weight": "mask_loss_weight",
    "ema_decay": "ema_decay",
    "eval_every": "eval_every",
    "precision": "precision",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask-loss-weight", type=float)
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--precision", choices=sorted(run_config.PRECISIONS))
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)"
    )


def _overrides(args, extra: dict | None = None) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    out.update({k: v for k, v in (extra or {}).items() if v is not None})
    return out


def _load_config(args, extra: dict | None = None) -> run_config.RunConfig:
    try:
        cfg = run_config.load(args.config, _overrides(args, extra))
    except T.ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    T.set_default_dtype(cfg.dtype)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="davi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    for split in data.SPLITS:
        p.add_argument(f"--{split}", type=int, default=data.DEFAULT_SPLIT_SIZES[split])

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=run_config.MODEL_KINDS)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate one checkpoint or an ensemble")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out", help="report directory (default: beside the first checkpoint)")

    p = sub.add_parser("infer", help="answer one question and write its mask")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--mask-out", required=True)

    p = sub.add_parser("ablate", help="dual vs single interaction over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", type=float, nargs="+", default=None, help="mask weights cycled over seeds")
    _add_config_flags(p)

    p = sub.add_parser("validate", help="re-check every sample of a dataset")
    p.add_argument("--data", required=True)
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if any(getattr(args, s) < 0 for s in data.SPLITS):
        raise UsageError("split counts must be >= 0")
    sizes = {s: getattr(args, s) for s in data.SPLITS}
    splits = data.generate_dataset(args.seed, sizes)
    data.write_dataset(splits, args.out)
    for s in data.SPLITS:
        print(f"{s}\t{len(splits[s])}")
    return EXIT_OK


def _read_split(root, split) -> list[data.Sample]:
    samples = data.read_dataset(root, split)
    if not samples:
        raise FileNotFoundError(f"split {split!r} is empty or missing under {root}")
    return samples


def cmd_train(args) -> int:
    cfg = _load_config(args, {"model": args.model, "data": args.data, "out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    train_set = _read_split(args.data, "train")
    val_set = data.read_dataset(args.data, "val") if cfg.train.eval_every else None
    try:
        res = train(
            cfg.run.model,
            train_set,
            cfg.model,
            cfg.train,
            val_samples=val_set,
            log_path=out / "metrics.jsonl",
            dump_dir=out,
        )
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_ABORT
    ckpt_io.save(res.checkpoint, out / "model.ckpt")
    print(f"checkpoint\t{out / 'model.ckpt'}")
    return EXIT_OK


def _load_checkpoints(paths) -> list[ckpt_io.Checkpoint]:
    cks = [ckpt_io.load(p) for p in paths]
    ref = cks[0].config
    for p, c in zip(paths[1:], cks[1:]):
        if c.config != ref:
            raise ConfigMismatch(f"{p}: ModelConfig differs from {paths[0]}")
    return cks


def cmd_eval(args) -> int:
    cks = _load_checkpoints(args.ckpt)
    samples = _read_split(args.data, args.split)
    report = evaluate(cks, samples, names=[str(p) for p in args.ckpt])
    out = Path(args.out) if args.out else Path(args.ckpt[0]).parent
    report.write(out, stem=f"eval_{args.split}")
    print(report.table(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    cks = _load_checkpoints(args.ckpt)
    image = data.read_ppm(args.image)
    size = cks[0].config.image_size
    if image.shape != (3, size, size):
        raise UsageError(f"image is {image.shape[2]}×{image.shape[1]}, model expects {size}×{size}")
    pred = ensemble_predict(cks, image, args.question)
    data.write_pgm(args.mask_out, pred.mask)
    print(pred.answer if pred.answer is not None else "")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args, {"data": args.data, "out": args.out})
    if args.seeds < 3:
        raise UsageError("--seeds must be at least 3")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    train_set = _read_split(args.data, "train")
    test_set = _read_split(args.data, "test")
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    lambdas = tuple(args.lambdas) if args.lambdas else (cfg.train.mask_loss_weight,)
    try:
        result = run_ablation(train_set, test_set, seeds, cfg.model, cfg.train, lambdas=lambdas, out_dir=out)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_ABORT
    print(result.text(), end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"no dataset directory at {args.data}")
    problems = data.validate_dataset(args.data)
    for p in problems:
        print(p)
    n = len(data.read_dataset(args.data))
    print(f"checked {n} samples, {len(problems)} problems")
    return EXIT_OK if not problems else EXIT_IO


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    previous = T.get_default_dtype()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"davi {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatch as exc:
        print(f"davi {args.command}: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, data.ParseError, ckpt_io.CheckpointError) as exc:
        print(f"davi {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        T.set_default_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
