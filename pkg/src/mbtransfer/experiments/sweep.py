"""Cloud-content sweep: IRM vs no-IRM on identically masked data."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from ..core import Classifier
from ..distill import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, save_config
from .pipeline import Session, run_method

log = logging.getLogger(__name__)

SWEEP_HEADER = ["fraction", "seed", "method", "oa", "aa", "kappa", "oa_cloud", "oa_clear"]
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))


class PartialSweepError(RuntimeError):
    def __init__(self, csv_path: Path, failed: list[tuple[float, int, str]]):
        super().__init__(f"{len(failed)} sweep cell(s) failed; partial results in {csv_path}")
        self.csv_path = csv_path
        self.failed = failed


def cell_dir(out_dir: Path, fraction: float, seed: int) -> Path:
    return Path(out_dir) / "cells" / f"fraction_{fraction:.2f}" / f"seed_{seed}"


def _source_encoder(cfg: ExperimentConfig, seed: int, out_dir: Path) -> Classifier:
    """f_pre depends only on the seed, so it is shared by every fraction."""
    path = Path(out_dir) / "cache" / f"f_pre_seed_{seed}.pt"
    if path.exists():
        return load_checkpoint(path)
    f_pre = Session(cfg, seed).f_pre
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(f_pre, path)
    return f_pre


def run_cell(cfg: ExperimentConfig, fraction: float, seed: int, out_dir: str | Path) -> list[dict]:
    """Both arms of one (fraction, seed) cell, sharing one session."""
    out_dir = Path(out_dir)
    cell_cfg = cfg.replace(clouds=replace(cfg.clouds, fraction=float(fraction)))
    session = Session(cell_cfg, seed, f_pre=_source_encoder(cfg, seed, out_dir))
    rows = []
    for method in ("ours-no-irm", "ours-irm"):
        rec = run_method(cell_cfg, seed, cell_dir(out_dir, fraction, seed) / method, method=method, session=session)
        m = rec.metrics
        nan = float("nan")
        rows.append({
            "fraction": float(fraction), "seed": int(seed), "method": method,
            "oa": m["all"].oa, "aa": m["all"].aa, "kappa": m["all"].kappa,
            "oa_cloud": m["cloud_covered"].oa if m["cloud_covered"] else nan,
            "oa_clear": m["cloud_free"].oa if m["cloud_free"] else nan,
        })
    return rows


def write_sweep_csv(rows: list[dict], path: Path) -> None:
    rows = sorted(rows, key=lambda r: (r["fraction"], r["seed"], r["method"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([f"{r['fraction']:.2f}", r["seed"], r["method"]]
                       + [f"{r[k]:.6f}" for k in SWEEP_HEADER[3:]])


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise ValueError(f"{path}: unexpected sweep header {reader.fieldnames}")
        return [{"fraction": float(r["fraction"]), "seed": int(r["seed"]), "method": r["method"],
                 **{k: float(r[k]) for k in SWEEP_HEADER[3:]}} for r in reader]


def sweep_cloud_content(cfg: ExperimentConfig, out_dir: str | Path, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                        seeds: Sequence[int] | None = None, jobs: int = 1, plot: bool = True) -> Path:
    """Run every (fraction, seed) cell and write ``sweep.csv`` (+ plot).

    Cells are independent and may complete in any order; rows are sorted
    before writing. Raises ``PartialSweepError`` after writing whatever
    finished if any cell failed.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 <= f <= 1.0 or math.isnan(f) for f in fractions):
        raise ValueError("fractions must be a non-empty list of values in [0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg.replace(seeds=tuple(seeds)), out_dir / "config.yaml")
    cells = [(f, s) for s in seeds for f in fractions]
    rows: list[dict] = []
    failed: list[tuple[float, int, str]] = []
    if jobs <= 1:
        for f, s in cells:
            try:
                rows += run_cell(cfg, f, s, out_dir)
            except Exception as exc:  # recorded, sweep continues
                log.exception("cell fraction=%s seed=%s failed", f, s)
                failed.append((f, s, repr(exc)))
    else:
        for s in seeds:  # pretrain once per seed before fanning out
            _source_encoder(cfg, s, out_dir)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_cell, cfg, f, s, out_dir): (f, s) for f, s in cells}
            for fut in as_completed(futures):
                f, s = futures[fut]
                try:
                    rows += fut.result()
                except Exception as exc:
                    failed.append((f, s, repr(exc)))
    csv_path = out_dir / "sweep.csv"
    write_sweep_csv(rows, csv_path)
    if plot and rows:
        from .plots import plot_sweep
        plot_sweep(csv_path, out_dir)
    if failed:
        raise PartialSweepError(csv_path, failed)
    return csv_path
