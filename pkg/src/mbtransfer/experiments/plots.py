"""Static figures for loss traces and the cloud-content sweep. Each figure
is written next to a CSV holding exactly the plotted numbers."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..evaluation import LossTrace  # noqa: E402
from .sweep import read_sweep_csv  # noqa: E402

_PNG_META = {"Software": None}


def trace_series(trace: LossTrace) -> dict[str, list[float]]:
    lo, ls = trace.epoch_means("loss_opt"), trace.epoch_means("loss_sar")
    ro, rs = trace.epoch_means("rho_opt"), trace.epoch_means("rho_sar")
    epochs = sorted(lo)
    return {"epoch": [float(e) for e in epochs], "loss_opt": [lo[e] for e in epochs],
            "loss_sar": [ls[e] for e in epochs], "rho_opt": [ro[e] for e in epochs],
            "rho_sar": [rs[e] for e in epochs]}


def plot_trace(trace_csv: str | Path, out_dir: str | Path, stem: str = "loss_trace") -> tuple[Path, Path]:
    series = trace_series(LossTrace.read_csv(trace_csv))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(series))
        for row in zip(*series.values()):
            w.writerow([repr(v) for v in row])

    fig, (ax_loss, ax_rho) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                          gridspec_kw={"height_ratios": [2, 1]})
    ax_loss.plot(series["epoch"], series["loss_opt"], label="optical")
    ax_loss.plot(series["epoch"], series["loss_sar"], label="SAR")
    ax_loss.set_ylabel("distillation loss")
    ax_loss.legend()
    ax_rho.plot(series["epoch"], series["rho_opt"], label="rho optical")
    ax_rho.plot(series["epoch"], series["rho_sar"], label="rho SAR")
    ax_rho.axhline(1.0, color="grey", lw=0.5)
    ax_rho.set_xlabel("epoch")
    ax_rho.set_ylabel("weight")
    ax_rho.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return png_path, csv_path


def sweep_deltas(rows: list[dict], metric: str = "oa") -> dict[float, dict[int, float]]:
    """{fraction: {seed: metric(ours-irm) - metric(ours-no-irm)}} over complete pairs."""
    by = {(r["fraction"], r["seed"], r["method"]): r[metric] for r in rows}
    out: dict[float, dict[int, float]] = {}
    for (f, s, m), v in sorted(by.items()):
        if m == "ours-irm" and (f, s, "ours-no-irm") in by:
            out.setdefault(f, {})[s] = v - by[(f, s, "ours-no-irm")]
    return out


def plot_sweep(sweep_csv: str | Path, out_dir: str | Path, stem: str = "sweep") -> tuple[Path, Path]:
    rows = read_sweep_csv(sweep_csv)
    deltas = sweep_deltas(rows)
    if not deltas:
        raise ValueError(f"{sweep_csv}: no paired ours-irm / ours-no-irm rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fractions = sorted(deltas)
    means = [float(np.mean(list(deltas[f].values()))) for f in fractions]
    stds = [float(np.std(list(deltas[f].values()))) for f in fractions]

    csv_path = out_dir / f"{stem}_plot.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "fraction", "seed", "value"])
        for f, m, s in zip(fractions, means, stds):
            w.writerow(["mean", repr(f), "", repr(m)])
            w.writerow(["std", repr(f), "", repr(s)])
        for f in fractions:
            for seed, d in sorted(deltas[f].items()):
                w.writerow(["seed", repr(f), seed, repr(d)])

    fig, ax = plt.subplots(figsize=(6, 4))
    for f in fractions:
        ys = [deltas[f][s] for s in sorted(deltas[f])]
        ax.scatter([f] * len(ys), ys, s=12, color="grey", alpha=0.6)
    ax.errorbar(fractions, means, yerr=stds, marker="o", capsize=3, label="mean OA delta (IRM - no IRM)")
    ax.axhline(0.0, color="black", lw=0.5)
    ax.set_xlabel("cloud content (image-level fraction)")
    ax.set_ylabel("OA delta")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return png_path, csv_path


def emit_plots(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Plot whatever ``in_dir`` holds: a run's trace.csv and/or a sweep.csv."""
    in_dir = Path(in_dir)
    written: list[Path] = []
    trace_csv, sweep_csv = in_dir / "trace.csv", in_dir / "sweep.csv"
    if not trace_csv.exists() and not sweep_csv.exists():
        raise FileNotFoundError(f"nothing to plot in {in_dir}: missing trace.csv and sweep.csv")
    if trace_csv.exists():
        written += plot_trace(trace_csv, out_dir)
    if sweep_csv.exists():
        written += plot_sweep(sweep_csv, out_dir)
    return written
