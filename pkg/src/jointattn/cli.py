"""Command-line entry point: ``jointattn <command> ...``.

Exit codes: 0 success, 1 contract or config error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .data import CLASS_NAMES, generate, read_dataset, write_dataset
from .errors import FormatError, JointAttnError

log = logging.getLogger("jointattn")


def _cmd_gen_data(args) -> int:
    ds = generate(args.classes, args.seed, args.count, args.frames, args.size, args.jitter)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} videos ({args.classes} classes, {args.frames}x{args.size}x{args.size}) to {args.out}")
    return 0


def _load_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    if args.set:
        pairs = {}
        for item in args.set:
            if "=" not in item:
                raise JointAttnError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value.strip()
        cfg = ModelConfig.from_mapping(pairs, cfg)
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    report = train(cfg, args.data, args.out, figures=not args.no_figures)
    last = report.rows[-1] if report.rows else None
    if last is not None:
        print(f"epoch {last['epoch']}: train_acc {last['train_acc']:.3f} test_acc {last['test_acc']:.3f}")
    print(f"metrics: {Path(args.out) / 'metrics.csv'}")
    print(f"checkpoint: {report.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    from .train import evaluate

    acc, confusion = evaluate(args.ckpt, args.data)
    names = CLASS_NAMES[:confusion.shape[0]]
    print(f"accuracy {acc:.4f} over {int(confusion.sum())} videos")
    print("true\\pred," + ",".join(names))
    for name, row in zip(names, confusion):
        print(name + "," + ",".join(str(int(v)) for v in row))
    if args.out:
        from .report import plot_confusion

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "confusion.csv", confusion, fmt="%d", delimiter=",")
        plot_confusion(confusion, out / "confusion.png", names)
    return 0


def _cmd_dump_attention(args) -> int:
    from .train import dump_attention, load_model

    model, _ = load_model(args.ckpt)
    dataset = read_dataset(args.data)
    result = dump_attention(model, dataset, args.video, args.out, figure=not args.no_figures)
    out = Path(args.out)
    lines = ["step,ratio"] + [f"{t},{r!r}" for t, r in enumerate(result["ratios"])]
    (out / f"ratios_{args.video:04d}.csv").write_text("\n".join(lines) + "\n")
    print(f"video {args.video} (label {CLASS_NAMES[result['label']]}): "
          f"mean attention-in-box ratio {result['mean_ratio']:.3f} over {len(result['ratios'])} steps")
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import grad_check

    report = grad_check(tolerance=args.tol, n_coords=args.coords, seed=args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic video dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoint and figures")
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="video-level accuracy and confusion matrix of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for confusion.csv and confusion.png")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("dump-attention", help="export per-step attention maps of one video as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_dump_attention)

    p = sub.add_parser("grad-check", help="finite-difference check of the tiny pipeline")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except JointAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
