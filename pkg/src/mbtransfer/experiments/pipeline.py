"""End-to-end runs: dataset -> source pretraining -> fine-tuning -> F1 -> F2
-> evaluation, plus the baseline methods, all persisted per run."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..core import Classifier, derive_seed
from ..data import (GapConfig, MaskLibrary, PairedDataset, apply_cloud_masks, generate_synthetic_pairs,
                    load_dataset, save_dataset, split_dataset)
from ..distill import (TeacherSet, fine_tune_source, load_checkpoint, predict, pretrain_source,
                       save_checkpoint, train_auxiliaries, train_target)
from ..evaluation import (SCORE_HEADER, MetricsReport, confusion_matrix, metrics, record_loss_trace,
                          subset_metrics, write_metrics)
from ..errors import ConfigError
from . import baselines
from .config import ExperimentConfig, save_config

log = logging.getLogger(__name__)

CACHE_ENV = "MB_DATA_CACHE"
OURS = ("ours-irm", "ours-no-irm")


@dataclass
class RunRecord:
    config: ExperimentConfig
    seed: int
    method: str
    run_dir: Path | None = None
    status: str = "ok"
    failed_stage: str | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, MetricsReport | None] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    teacher_checksums: dict[str, list[str]] = field(default_factory=dict)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _cache_dir(kind: str, payload: dict) -> Path | None:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
    return Path(root) / f"{kind}-{key}"


def synthetic_dataset(gap: GapConfig, seed: int, optical_only: bool = False) -> PairedDataset:
    cache = _cache_dir("synthetic", {"gap": gap.to_dict(), "seed": seed, "optical_only": optical_only})
    if cache is not None and (cache / "manifest.json").exists():
        return load_dataset(cache)
    ds = generate_synthetic_pairs(gap, seed, optical_only=optical_only)
    if cache is not None:
        save_dataset(ds, cache)
    return ds


def mask_library(cfg: ExperimentConfig) -> MaskLibrary:
    c = cfg.clouds
    size = 2 * (cfg.dataset.gap.image_size if cfg.dataset.kind == "synthetic" else 16)
    lib = MaskLibrary.procedural(size=max(size, 32), count=c.library_size, seed=c.library_seed)
    for kind, d in (("thin", c.thin_mask_dir), ("thick", c.thick_mask_dir)):
        if d:
            paths = sorted(p for p in Path(d).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif"))
            if not paths:
                raise ConfigError(f"no mask images found in {d}")
            lib = lib.merged(MaskLibrary.from_images(paths, kind))
    return lib


def build_dataset(cfg: ExperimentConfig, seed: int) -> PairedDataset:
    """Clean pairs -> clouds -> split, all keyed on ``seed``."""
    if cfg.dataset.kind == "synthetic":
        ds = synthetic_dataset(cfg.dataset.gap, seed)
    else:
        ds = load_dataset(cfg.dataset.path)
    if not ds.cloud_covered.any():
        c = cfg.clouds
        ds = apply_cloud_masks(ds, c.fraction, c.coverage, c.thin_thick_ratio, mask_library(cfg), seed)
    if ds.split is None:
        ds = split_dataset(ds, cfg.split.test_fraction, cfg.split.labeled_per_class, seed)
    return ds


def source_task(cfg: ExperimentConfig, seed: int) -> PairedDataset:
    """Cloud-free optical source task: same primitive dictionary, different
    class templates and class count."""
    g = cfg.dataset.gap
    st = cfg.source_task
    gap = GapConfig(**{**g.to_dict(), "num_classes": st.num_classes, "samples_per_class": st.samples_per_class,
                       "info_opt": st.info})
    return synthetic_dataset(gap, derive_seed(seed, "source-task") % (2 ** 31), optical_only=True)


# --------------------------------------------------------------------------
# staged session
# --------------------------------------------------------------------------

class Session:
    """Memoised stages for one (config, seed).

    Baselines and both IRM arms drawn from one session share dataset,
    masks, split, source model and auxiliaries, which is what makes
    comparisons paired.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, f_pre: Classifier | None = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.stage_seconds: dict[str, float] = {}
        self.current_stage: str | None = None
        self._f_pre = f_pre
        self._dataset: PairedDataset | None = None
        self._f_s: Classifier | None = None
        self._aux: dict[str, Classifier] = {}
        self.diagnostics: dict = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        self.current_stage = name
        t0 = time.perf_counter()
        yield
        self.stage_seconds[name] = self.stage_seconds.get(name, 0.0) + time.perf_counter() - t0
        self.current_stage = None

    def settings(self, epochs: int):
        return self.cfg.settings(epochs, self.seed)

    @property
    def dataset(self) -> PairedDataset:
        if self._dataset is None:
            with self.stage("data"):
                self._dataset = build_dataset(self.cfg, self.seed)
        return self._dataset

    @property
    def f_pre(self) -> Classifier:
        if self._f_pre is None:
            src = source_task(self.cfg, self.seed)
            with self.stage("pretrain"):
                self._f_pre = pretrain_source(src.optical, src.labels, src.num_classes,
                                              self.settings(self.cfg.training.pretrain_epochs))
        return self._f_pre

    @property
    def f_s(self) -> Classifier:
        if self._f_s is None:
            labeled = self.dataset.view("train-labeled")
            f_pre = self.f_pre
            with self.stage("finetune"):
                self._f_s, hist = fine_tune_source(f_pre, labeled, self.settings(self.cfg.training.finetune_epochs),
                                                   freeze_encoder=self.cfg.training.freeze_encoder)
            self.diagnostics["finetune_loss"] = [hist[0], hist[-1]] if hist else []
        return self._f_s

    def auxiliary(self, modality: str) -> Classifier:
        if modality not in self._aux:
            f_s = self.f_s
            t = self.cfg.training
            warm = self.f_pre if t.aux_init == "warm" else None
            labeled = self.dataset.view("train-labeled") if t.supervised_weight else None
            with self.stage("f1"):
                ao, as_, _ = train_auxiliaries(
                    f_s, self.dataset.view("train-unlabeled"), self.settings(t.f1_epochs),
                    train_opt=modality == "opt", train_sar=modality == "sar", warm_start=warm,
                    labeled=labeled, head_init=self.cfg.model.head_init)
            self._aux[modality] = ao if modality == "opt" else as_
        return self._aux[modality]

    def teachers(self) -> TeacherSet:
        return TeacherSet(self.f_s, self.auxiliary("opt"), self.auxiliary("sar"))

    # ---------------------------------------------------------------
    def evaluate(self, model: torch.nn.Module, inputs: str) -> dict[str, MetricsReport | None]:
        ds = self.dataset
        te = ds.view("test")
        x = {"opt": te.optical, "sar": te.sar, "fused": np.concatenate([te.optical, te.sar], axis=1)}[inputs]
        y = ds.oracle_labels(te.indices)
        pred = predict(model, x)
        cloudy, clear = subset_metrics(pred, y, te.cloud_covered, ds.num_classes)
        return {"all": metrics(confusion_matrix(pred, y, ds.num_classes)),
                "cloud_covered": cloudy, "cloud_free": clear}


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

def _version_stamp() -> dict:
    stamp = {"package": __version__, "torch": torch.__version__}
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0:
            stamp["git"] = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def _train_method(session: Session, method: str, record: RunRecord) -> tuple[torch.nn.Module, str, dict]:
    """Returns (model to evaluate, input kind, named checkpoints)."""
    cfg = session.cfg
    t = cfg.training
    if method in OURS:
        teachers = session.teachers()
        before = teachers.checksums()
        unlabeled = session.dataset.view("train-unlabeled")
        labeled = session.dataset.view("train-labeled") if t.supervised_weight else None
        with session.stage("f2"):
            target, trace = train_target(teachers, unlabeled, method == "ours-irm", session.settings(t.f2_epochs),
                                         clamp=cfg.clamp, labeled=labeled, head_init=cfg.model.head_init)
        record.trace = trace
        record.teacher_checksums = {"before": before, "after": teachers.checksums()}
        record.diagnostics["aux_opt"] = session.evaluate(teachers.aux_opt, "opt")["all"].to_dict()
        record.diagnostics["aux_sar"] = session.evaluate(teachers.aux_sar, "sar")["all"].to_dict()
        record.diagnostics["source"] = session.evaluate(teachers.source, "opt")["all"].to_dict()
        ckpts = {"source": teachers.source, "aux_opt": teachers.aux_opt, "aux_sar": teachers.aux_sar,
                 "final": target}
        return target, "fused", ckpts
    if method == "finetune-opt":
        return session.f_s, "opt", {"final": session.f_s}
    if method == "kd-soft-opt":
        aux = session.auxiliary("opt")
        return aux, "opt", {"source": session.f_s, "final": aux}
    labeled = session.dataset.view("train-labeled")
    settings = session.settings(t.finetune_epochs)
    if method == "finetune-sar":
        f_pre = session.f_pre
        with session.stage("finetune"):
            model = baselines.finetune_sar(f_pre, labeled, settings)
        return model, "sar", {"final": model}
    if method == "supervised-fusion":
        with session.stage("train"):
            model = baselines.supervised_fusion(labeled, settings)
        return model, "fused", {"final": model}
    if method == "late-fusion":
        f_pre = session.f_pre
        with session.stage("train"):
            model = baselines.late_fusion(f_pre, labeled, settings)
        return model, "fused", {"final": model}
    raise ConfigError(f"unknown method {method!r}")


def run_method(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None,
               method: str | None = None, session: Session | None = None) -> RunRecord:
    """Train and evaluate one method for one seed, persisting the run when
    ``out_dir`` is given. A failing stage is recorded before re-raising."""
    method = method or cfg.method
    seed = cfg.seeds[0] if seed is None else int(seed)
    cfg = cfg.replace(method=method, seeds=(seed,))
    if session is None:
        session = Session(cfg, seed)
    record = RunRecord(config=cfg, seed=seed, method=method)
    run_dir = Path(out_dir) if out_dir is not None else None
    record.run_dir = run_dir
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.yaml")
    try:
        model, inputs, ckpts = _train_method(session, method, record)
        with session.stage("evaluate"):
            record.metrics = session.evaluate(model, inputs)
    except Exception:
        record.status = "failed"
        record.failed_stage = session.current_stage or "setup"
        record.stage_seconds = dict(session.stage_seconds)
        if run_dir is not None:
            _write_run_json(record, run_dir)
        raise
    record.stage_seconds = dict(session.stage_seconds)
    record.diagnostics.update(session.diagnostics)
    if run_dir is not None:
        _persist(record, run_dir, ckpts, inputs)
    return record


def run_pipeline(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None,
                 session: Session | None = None) -> RunRecord:
    if cfg.method not in OURS:
        raise ConfigError(f"run_pipeline runs ours-irm / ours-no-irm, got {cfg.method!r}; use run_baseline")
    return run_method(cfg, seed, out_dir, session=session)


def run_baseline(cfg: ExperimentConfig, method: str, seed: int | None = None, out_dir: str | Path | None = None,
                 session: Session | None = None) -> RunRecord:
    return run_method(cfg, seed, out_dir, method=method, session=session)


def _write_run_json(record: RunRecord, run_dir: Path) -> None:
    payload = {
        "method": record.method,
        "seed": record.seed,
        "status": record.status,
        "failed_stage": record.failed_stage,
        "stage_seconds": {k: round(v, 3) for k, v in record.stage_seconds.items()},
        "version": _version_stamp(),
    }
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2) + "\n")


def save_model(model: torch.nn.Module, path: Path) -> None:
    if isinstance(model, Classifier):
        save_checkpoint(model, path)
    else:
        torch.save({"format_version": 1, "descriptor": model.descriptor(), "state_dict": model.state_dict()}, path)


def load_model(path: Path) -> torch.nn.Module:
    blob = torch.load(path, weights_only=True)
    d = blob["descriptor"]
    if d.get("kind") == "late-fusion":
        model = baselines.LateFusionClassifier(d["opt_channels"], d["sar_channels"], d["num_classes"], d["blocks"])
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return model
    return load_checkpoint(path)


def _persist(record: RunRecord, run_dir: Path, ckpts: dict, inputs: str) -> None:
    ck = run_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    torch.manual_seed(derive_seed(record.seed, "checkpoint-rng"))
    for name, model in ckpts.items():
        save_model(model, ck / f"{name}.pt")
    write_metrics(run_dir / "metrics.json", record.metrics)
    diag = dict(record.diagnostics)
    diag["eval_inputs"] = inputs
    (run_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    if record.trace:
        record_loss_trace(record.trace, run_dir / "trace.csv")
        with open(run_dir / "scores.csv", "w") as fh:
            fh.write(",".join(SCORE_HEADER) + "\n")
            for b in record.trace:
                fh.write(f"{b.epoch},{b.batch},{b.batch_size},{b.sum_s_opt!r},{b.sum_s_sar!r}\n")
    if record.teacher_checksums:
        (run_dir / "teacher_checksums.json").write_text(json.dumps(record.teacher_checksums, indent=2) + "\n")
    _write_run_json(record, run_dir)


def evaluate_run(run_dir: str | Path) -> dict[str, MetricsReport | None]:
    """Re-evaluate a persisted run from its config snapshot and final checkpoint."""
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    inputs = json.loads((run_dir / "diagnostics.json").read_text())["eval_inputs"]
    session = Session(cfg, cfg.seeds[0])
    return session.evaluate(load_model(run_dir / "checkpoints" / "final.pt"), inputs)
