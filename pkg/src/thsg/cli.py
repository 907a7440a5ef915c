"""``thsg`` command line: gen-data, train, eval, project.

Exit codes: 0 success, 1 internal error, 2 config/usage error,
3 data/model mismatch or unreadable data, 4 training diverged (NaN).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from .dataset import generate_gaussian_mixture, load_features, save_features, split_by_class
from .errors import ConfigError, ContractError, DataFormatError, TrainingDiverged
from .evaluation import evaluate, pca_2d
from .networks import embed, load_checkpoint
from .trainer import load_config, train

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISMATCH, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("thsg")


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _parse_ks(text):
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def _load_data(path):
    try:
        return load_features(path)
    except FileNotFoundError:
        raise _Fail(EXIT_MISMATCH, f"data file not found: {path}") from None
    except (DataFormatError, ContractError) as exc:
        raise _Fail(EXIT_MISMATCH, f"{path}: {exc}") from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise _Fail(EXIT_MISMATCH, f"model file not found: {path}") from None
    except DataFormatError as exc:
        raise _Fail(EXIT_MISMATCH, f"{path}: {exc}") from None


def _embed_checked(bundle, ds):
    if bundle.F.in_dim != ds.dim:
        raise _Fail(
            EXIT_MISMATCH,
            f"model expects {bundle.F.in_dim}-dimensional features, data has {ds.dim}",
        )
    return embed(bundle.F, ds.features, ds.labels)


def run_gen_data(args):
    ds = generate_gaussian_mixture(
        args.classes, args.per_class, args.dim, args.center_scale, args.noise_scale, args.seed
    )
    save_features(ds, args.out, args.format)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes, dim {ds.dim}) to {args.out}")
    return EXIT_OK


def run_train(args):
    try:
        config = load_config(args.config)
        overrides = {k: getattr(args, k) for k in ("seed", "miner", "mode", "epochs") if getattr(args, k) is not None}
        if overrides:
            config = config.replace(**overrides)
    except FileNotFoundError:
        raise _Fail(EXIT_CONFIG, f"config file not found: {args.config}") from None
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    ds = _load_data(args.data)
    try:
        train_ds, test_ds, _ = split_by_class(ds, config.train_fraction, config.seed)
    except ContractError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    save_features(train_ds, os.path.join(args.out, "train.thsgdata"))
    save_features(test_ds, os.path.join(args.out, "test.thsgdata"))
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(config.to_text())
    try:
        result = train(train_ds, config, test=test_ds, out_dir=args.out)
    except ContractError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    except TrainingDiverged as exc:
        raise _Fail(EXIT_DIVERGED, f"training aborted: {exc}") from None
    if result.reports:
        text = result.reports[-1][1].to_text()
        with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
            fh.write(text)
        sys.stdout.write(text)
    return EXIT_OK


def run_eval(args):
    bundle = _load_model(args.model)
    ds = _load_data(args.data)
    emb = _embed_checked(bundle, ds)
    if args.ks[-1] >= len(ds) - 1:
        raise _Fail(EXIT_CONFIG, f"largest K ({args.ks[-1]}) must be below the gallery size ({len(ds) - 1})")
    report = evaluate(emb, args.ks, seed=args.seed)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def run_project(args):
    bundle = _load_model(args.model)
    ds = _load_data(args.data)
    emb = _embed_checked(bundle, ds)
    coords = pca_2d(emb.embeddings)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("label", "x", "y"))
        for lab, (x, y) in zip(emb.labels, coords):
            writer.writerow((int(lab), repr(float(x)), repr(float(y))))
    print(f"wrote {len(coords)} projected points to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="thsg", description="Two-stage hard-sample generation for metric learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic Gaussian-mixture dataset")
    g.add_argument("--classes", type=int, default=16)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--center-scale", type=float, default=1.0)
    g.add_argument("--noise-scale", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("binary", "csv"), default=None,
                   help="defaults to csv for *.csv paths, binary otherwise")
    g.add_argument("--out", required=True)
    g.set_defaults(func=run_gen_data)

    t = sub.add_parser("train", help="train on a class-disjoint split of a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--miner", choices=("random", "semihard", "softhard", "distance_weighted"))
    t.add_argument("--mode", choices=("thsg", "no_g2", "baseline"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=run_train)

    e = sub.add_parser("eval", help="retrieval and clustering metrics of a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", type=_parse_ks, default=[1, 2, 4, 8])
    e.add_argument("--seed", type=int, default=0, help="k-means seed")
    e.set_defaults(func=run_eval)

    p = sub.add_parser("project", help="export a 2-D PCA projection of the embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_project)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"thsg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"thsg {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
