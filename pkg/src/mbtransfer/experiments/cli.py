"""``mb`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 partial sweep.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, DataError, DivergenceError, InvalidInputError, ShapeError
from .config import METHODS, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4, 5


def _data_cmd(args) -> int:
    from ..data import apply_cloud_masks, load_dataset, save_dataset, split_dataset
    from .pipeline import mask_library, synthetic_dataset

    cfg = load_config(args.config)
    seed = args.seed
    if args.data_cmd == "gen-synthetic":
        ds = synthetic_dataset(cfg.dataset.gap, seed)
    else:
        if args.input is None:
            raise ConfigError(f"data {args.data_cmd} needs --in <dataset dir>")
        ds = load_dataset(args.input)
        if args.data_cmd == "simulate-clouds":
            c = cfg.clouds
            ds = apply_cloud_masks(ds, c.fraction, c.coverage, c.thin_thick_ratio, mask_library(cfg), seed)
        else:
            ds = split_dataset(ds, cfg.split.test_fraction, cfg.split.labeled_per_class, seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _print_metrics(reports) -> None:
    for tag, rep in reports.items():
        if rep is None:
            print(f"{tag:14s} (absent)")
        else:
            print(f"{tag:14s} OA {rep.oa:.6f}  AA {rep.aa:.6f}  kappa {rep.kappa:.6f}  n={rep.n}")


def _train_cmd(args) -> int:
    from .pipeline import run_method

    cfg = load_config(args.config)
    if args.method:
        cfg = cfg.replace(method=args.method)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = args.out or str(Path(cfg.output_dir) / cfg.method / f"seed_{seed}")
    rec = run_method(cfg, seed, out)
    _print_metrics(rec.metrics)
    print(f"run written to {out}")
    return EXIT_OK


def _eval_cmd(args) -> int:
    from .pipeline import evaluate_run

    reports = evaluate_run(args.run)
    _print_metrics(reports)
    stored = json.loads((Path(args.run) / "metrics.json").read_text())
    fresh = {k: (None if v is None else v.to_dict()) for k, v in reports.items()}
    if stored != fresh:
        print("warning: re-evaluated metrics differ from the stored metrics.json", file=sys.stderr)
    return EXIT_OK


def _sweep_cmd(args) -> int:
    from .sweep import DEFAULT_FRACTIONS, PartialSweepError, sweep_cloud_content

    cfg = load_config(args.config)
    seeds = args.seeds if args.seeds is not None else list(cfg.seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    fractions = args.fractions or list(DEFAULT_FRACTIONS)
    out = args.out or str(Path(cfg.output_dir) / "sweep")
    try:
        path = sweep_cloud_content(cfg, out, fractions, seeds, jobs=args.jobs)
    except PartialSweepError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_PARTIAL
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"sweep written to {path}")
    return EXIT_OK


def _plot_cmd(args) -> int:
    from .plots import emit_plots

    for p in emit_plots(args.input, args.out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    data = sub.add_parser("data", help="dataset generation, cloud simulation and splitting")
    data.add_argument("data_cmd", choices=["gen-synthetic", "simulate-clouds", "split"])
    data.add_argument("--config")
    data.add_argument("--seed", type=int, default=0)
    data.add_argument("--in", dest="input")
    data.add_argument("--out", required=True)
    data.set_defaults(func=_data_cmd)

    train = sub.add_parser("train", help="train and evaluate one method")
    train.add_argument("--method", choices=METHODS)
    train.add_argument("--config")
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.set_defaults(func=_train_cmd)

    ev = sub.add_parser("eval", help="re-evaluate a persisted run")
    ev.add_argument("--run", required=True)
    ev.set_defaults(func=_eval_cmd)

    sw = sub.add_parser("sweep", help="IRM vs no-IRM over cloud fractions")
    sw.add_argument("--config")
    sw.add_argument("--fractions", type=float, nargs="+")
    sw.add_argument("--seeds", type=int, nargs="*")
    sw.add_argument("--out")
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(func=_sweep_cmd)

    pl = sub.add_parser("plot", help="figures + CSVs from a run or sweep directory")
    pl.add_argument("--in", dest="input", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_plot_cmd)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, InvalidInputError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
