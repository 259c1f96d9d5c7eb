"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as dp
from . import harness
from .errors import Pix2PixError
from .models import SCHEMES, SchemeConfig
from .trainer import TrainConfig, infer, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {"lam": 10.0, "lr": 0.0002, "stop_l1": 0.005, "size": 512, "folds": 5,
            "epochs": 300, "seed": 0, "base_width": 64, "batch_size": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _training_flags(p: argparse.ArgumentParser):
    p.add_argument("--size", type=int, choices=(64, 128, 256, 512), default=None,
                   help=f"image side length (default {DEFAULTS['size']})")
    p.add_argument("--base-width", type=int, default=None,
                   help=f"width of the first layer; others scale with it (default {DEFAULTS['base_width']})")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"L1 weight (default {DEFAULTS['lam']})")
    p.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default {DEFAULTS['lr']})")
    p.add_argument("--epochs", type=int, default=None, help=f"maximum epochs (default {DEFAULTS['epochs']})")
    p.add_argument("--stop-l1", type=float, default=None,
                   help=f"stop once the epoch-mean L1 term is at or below this (default {DEFAULTS['stop_l1']})")
    p.add_argument("--batch-size", type=int, default=None, help=f"(default {DEFAULTS['batch_size']})")
    p.add_argument("--seed", type=int, default=None, help=f"(default {DEFAULTS['seed']})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtpix2pix", description="Multitask pix2pix: one input image, two aligned outputs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("make-toy", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--size", type=int, default=DEFAULTS["size"])
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])

    p = sub.add_parser("prepare", help="resize and augment a dataset into a new directory")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int, default=DEFAULTS["size"])

    p = sub.add_parser("train", help="train one scheme on a whole dataset (augmented)")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="mtdg")
    _training_flags(p)

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="score a checkpoint on every original sample of a dataset")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    for verb, helptext in (("cv", "subject-level cross-validation"),
                           ("ablate", "cross-validate several schemes on one shared split")):
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--config", type=Path, help="JSON run config (keys mirror the run spec)")
        p.add_argument("--data", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--scheme", action="append", choices=sorted(SCHEMES),
                       help="repeatable; cv defaults to mtdg, ablate to all six")
        p.add_argument("--folds", type=int, default=None, help=f"(default {DEFAULTS['folds']})")
        p.add_argument("--loso", action="store_true", help="leave-one-subject-out")
        p.add_argument("--no-preds", action="store_true", help="skip prediction PNGs")
        _training_flags(p)

    p = sub.add_parser("report", help="rebuild summary and box-plot files of a finished run")
    p.add_argument("--out", required=True, type=Path)
    return parser


def _pick(args, name, config=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    if config and name in config:
        return config[name]
    return DEFAULTS[name]


def _train_overrides(args, config=None) -> dict:
    base = dict((config or {}).get("train", {}))
    for flag, key in (("lam", "lam"), ("lr", "lr"), ("stop_l1", "stop_l1"),
                      ("epochs", "max_epochs"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
        base.setdefault(key, DEFAULTS[flag])
    return base


def _cmd_make_toy(args):
    idx = harness.make_toy_dataset(args.subjects, args.size, args.seed, args.out)
    print(f"wrote {len(idx)} samples to {args.out}")


def _cmd_prepare(args):
    index = dp.load_manifest(args.data)
    samples = dp.augment_dataset(dp.load_samples(index, size=args.size))
    for d in dp.SUBDIRS:
        (args.out / d).mkdir(parents=True, exist_ok=True)
    with open(args.out / "subjects.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "subject"))
        for s in samples:
            Image.fromarray(dp.denormalize(s.X[..., 0]), "L").save(args.out / "images" / f"{s.id}.png")
            Image.fromarray(dp.denormalize(s.Y1), "RGB").save(args.out / "masks" / f"{s.id}.png")
            Image.fromarray(dp.denormalize(s.Y2[..., 0]), "L").save(args.out / "suppressed" / f"{s.id}.png")
            w.writerow((s.id, s.subject))
    print(f"wrote {len(samples)} samples to {args.out}")


def _cmd_train(args):
    size = _pick(args, "size")
    scheme = SchemeConfig(args.scheme, size, _pick(args, "base_width"))
    cfg = TrainConfig(scheme=scheme, seed=_pick(args, "seed"), checkpoint_dir=args.out,
                      **_train_overrides(args))
    index = dp.load_manifest(args.data)
    samples = dp.augment_dataset(dp.load_samples(index, size=size))
    result = train(cfg, samples)
    print(f"trained {result.epochs} epochs ({result.steps} steps); checkpoint {args.out / 'final.ckpt'}")


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except OSError as exc:
        raise dp.DecodeError(f"cannot decode {path}: {exc}") from exc


def _cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    size = ckpt.scheme.image_size
    img = _read_image(args.input)
    if img.shape != (size, size):
        img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    args.out.mkdir(parents=True, exist_ok=True)
    for task, out in zip(ckpt.scheme.tasks, infer(ckpt, img)):
        path = args.out / f"{args.input.stem}_{task}.png"
        Image.fromarray(out, "RGB" if out.ndim == 3 else "L").save(path)
        print(path)


def _cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    index = dp.load_manifest(args.data)
    samples = dp.load_samples(index, size=ckpt.scheme.image_size)
    records = harness.evaluate_checkpoint(ckpt, samples)
    harness.write_fold_metrics(records, args.out)
    report = harness.Report({"checkpoint": str(args.checkpoint), "data": str(args.data)},
                            dp.FoldSplit(1, {}), records, [], {ckpt.scheme.scheme: 0})
    summaries = {m: st.to_dict() for m, st in report.summaries()[ckpt.scheme.scheme].items()}
    (args.out / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True))
    print(f"scored {len(records)} samples; metrics under {args.out}")


def _run_spec(args, ablate: bool) -> harness.RunSpec:
    config = json.loads(args.config.read_text()) if args.config else {}
    schemes = args.scheme or config.get("schemes") or (list(harness.ALL_SCHEMES) if ablate else ["mtdg"])
    data = args.data or config.get("data")
    out = args.out or config.get("out")
    if data is None or out is None:
        raise UsageError("cv/ablate need --data and --out (or a config providing them)")
    return harness.RunSpec(
        schemes=schemes, data=data, out=out,
        k=_pick(args, "folds", {"folds": config["k"]} if "k" in config else None),
        loso=args.loso or config.get("loso", False),
        image_size=_pick(args, "size", {"size": config["image_size"]} if "image_size" in config else None),
        base_width=_pick(args, "base_width", config),
        seed=_pick(args, "seed", config),
        train=_train_overrides(args, config),
        save_predictions=not args.no_preds and config.get("save_predictions", True),
    )


def _cmd_cv(args, ablate=False):
    spec = _run_spec(args, ablate)
    report = (harness.run_ablation if ablate else harness.run_cross_validation)(spec)
    harness.write_report(report, spec.out)
    print(f"report written to {spec.out}")


def _cmd_report(args):
    report = harness.load_report(args.out)
    harness.write_report(report, args.out)
    print(f"report regenerated under {args.out}")


COMMANDS = {
    "make-toy": _cmd_make_toy, "prepare": _cmd_prepare, "train": _cmd_train,
    "infer": _cmd_infer, "evaluate": _cmd_evaluate, "cv": _cmd_cv,
    "ablate": lambda a: _cmd_cv(a, ablate=True), "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"{parser.format_usage()}{exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Pix2PixError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
