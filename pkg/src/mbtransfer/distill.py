"""Collaborative transfer: source fine-tuning, auxiliary distillation (F1)
and fused-target distillation (F2) with optional information regulation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import irm
from .core import (DEFAULT_BLOCKS, Classifier, Optimizer, OptimizerState, cross_entropy, freeze,
                   param_checksum, torch_generator)
from .data.dataset import SplitView
from .errors import ConfigError, DivergenceError, InvalidInputError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PseudoLabel:
    soft: np.ndarray
    hard: int
    confidence: float


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    decay: float = 0.0

    def make_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, decay=self.decay, momentum=self.momentum, kind=self.kind)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 40
    batch_size: int = 64
    optim: OptimSpec = field(default_factory=OptimSpec)
    seed: int = 0
    pseudo_labels: str = "soft"          # "soft" | "hard"
    supervised_weight: float = 0.0       # optional CE term on the labeled pool
    blocks: tuple = DEFAULT_BLOCKS

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.pseudo_labels not in ("soft", "hard"):
            raise ConfigError(f"pseudo_labels must be soft or hard, got {self.pseudo_labels!r}")


@dataclass(frozen=True)
class F2LossBreakdown:
    epoch: int
    batch: int
    loss_opt: float
    loss_sar: float
    loss_src: float
    rho_opt: float
    rho_sar: float
    rho_opt_pre: float
    rho_sar_pre: float
    total: float
    sum_s_opt: float
    sum_s_sar: float
    batch_size: int


@dataclass
class TeacherSet:
    source: Classifier
    aux_opt: Classifier
    aux_sar: Classifier

    def __post_init__(self):
        ms = {self.source.num_classes, self.aux_opt.num_classes, self.aux_sar.num_classes}
        if len(ms) != 1:
            raise ConfigError(f"teachers disagree on class count: {sorted(ms)}")
        for m in self.models():
            freeze(m).eval()

    def models(self) -> list[Classifier]:
        return [self.source, self.aux_opt, self.aux_sar]

    def checksums(self) -> list[str]:
        return [param_checksum(m) for m in self.models()]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def iterate_batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def soft_targets(model: nn.Module, x: torch.Tensor, mode: str = "soft") -> tuple[torch.Tensor, torch.Tensor]:
    """(targets, logits) from a frozen teacher."""
    with torch.no_grad():
        logits = model(x)
        probs = torch.softmax(logits, dim=-1)
        if mode == "hard":
            probs = torch.nn.functional.one_hot(probs.argmax(-1), probs.shape[-1]).to(probs.dtype)
    return probs, logits


def predict(model: nn.Module, x: np.ndarray | torch.Tensor, batch_size: int = 512) -> np.ndarray:
    xt = x if isinstance(x, torch.Tensor) else _tensor(x)
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(xt), batch_size):
            out.append(model(xt[s:s + batch_size]).argmax(-1))
    return torch.cat(out).numpy() if out else np.empty(0, dtype=np.int64)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, batch: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{stage}: non-finite loss at epoch {epoch}, batch {batch}")


def _student_logits(model: nn.Module, x: torch.Tensor, stage: str, epoch: int | None = None,
                    batch: int | None = None) -> torch.Tensor:
    # a trained model emitting inf/nan has diverged; report it as such rather than as bad input
    z = model(x)
    if not torch.isfinite(z).all():
        where = "" if epoch is None else f" at epoch {epoch}, batch {batch}"
        raise DivergenceError(f"{stage}: non-finite logits{where}")
    return z


def train_supervised(model: nn.Module, x: np.ndarray, targets: np.ndarray, settings: TrainSettings,
                     params: Sequence[torch.Tensor] | None = None, stage: str = "supervised") -> list[float]:
    """Cross-entropy training on hard labels (int array) or soft targets (M-column array).

    Returns the mean loss of each epoch.
    """
    xt = _tensor(x)
    y = torch.as_tensor(np.asarray(targets))
    if y.dim() == 1:
        num_classes = model.num_classes if hasattr(model, "num_classes") else int(y.max()) + 1
        y = torch.nn.functional.one_hot(y.long(), num_classes).float()
    if len(xt) != len(y):
        raise ShapeError(f"{len(xt)} inputs but {len(y)} targets")
    params = list(model.parameters()) if params is None else list(params)
    opt = Optimizer(params, settings.optim.make_state())
    gen = torch_generator(settings.seed, stage, "order")
    history = []
    model.train()
    for epoch in range(settings.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(iterate_batches(len(xt), settings.batch_size, gen)):
            opt.zero_grad()
            loss = cross_entropy(y[idx], _student_logits(model, xt[idx], stage, epoch, b))
            _check_finite(loss, stage, epoch, b)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    model.eval()
    return history


# --------------------------------------------------------------------------
# source model
# --------------------------------------------------------------------------

def pretrain_source(x: np.ndarray, labels: np.ndarray, num_classes: int, settings: TrainSettings) -> Classifier:
    """f_pre: a classifier trained on the cloud-free source task."""
    model = Classifier(x.shape[1], num_classes, settings.blocks, role="source",
                       generator=torch_generator(settings.seed, "pretrain", "init"))
    train_supervised(model, x, labels, settings, stage="pretrain")
    return model


def fine_tune_source(f_pre: Classifier, labeled: SplitView, settings: TrainSettings,
                     freeze_encoder: bool = True, head_init: str = "fan_in") -> tuple[Classifier, list[float]]:
    """f_S: f_pre with a fresh head for the target classes, trained on the
    labeled optical pool; the encoder stays frozen unless asked otherwise."""
    if labeled.labels is None or len(labeled) == 0:
        raise InvalidInputError("fine-tuning needs a non-empty labeled pool")
    missing = set(range(labeled.num_classes)) - set(np.unique(labeled.labels).tolist())
    if missing:
        raise InvalidInputError(f"labeled pool lacks classes {sorted(missing)}")
    f_s = copy.deepcopy(f_pre)
    f_s.role = "source"
    f_s.reset_head(labeled.num_classes, torch_generator(settings.seed, "finetune", "head"), head_init)
    if freeze_encoder:
        for p in f_s.encoder_parameters():
            p.requires_grad_(False)
        params = list(f_s.head.parameters())
    else:
        params = list(f_s.parameters())
    history = train_supervised(f_s, labeled.optical, labeled.labels, settings, params=params, stage="finetune")
    for p in f_s.parameters():
        p.requires_grad_(True)
    return f_s, history


def generate_pseudo_labels(model: Classifier, inputs: np.ndarray | torch.Tensor) -> list[PseudoLabel]:
    x = inputs if isinstance(inputs, torch.Tensor) else _tensor(inputs)
    probs, _ = soft_targets(model, x)
    probs = probs.double().numpy()
    out = []
    for p in probs:
        k = int(np.argmax(p))
        out.append(PseudoLabel(soft=p, hard=k, confidence=float(p[k])))
    return out


# --------------------------------------------------------------------------
# F1: source -> auxiliaries
# --------------------------------------------------------------------------

def _new_model(in_channels: int, num_classes: int, role: str, settings: TrainSettings, key: str,
               warm_start: Classifier | None = None, head_init: str = "fan_in") -> Classifier:
    model = Classifier(in_channels, num_classes, settings.blocks, role=role,
                       generator=torch_generator(settings.seed, key, "init"), head_init=head_init)
    if warm_start is not None:
        if warm_start.in_channels != in_channels or warm_start.blocks != model.blocks:
            raise ConfigError(f"cannot warm-start {role} from an encoder with a different layout")
        model.encoder.load_state_dict(warm_start.encoder.state_dict())
    return model


def _distill(student: Classifier, x_student: torch.Tensor, teacher: Classifier, x_teacher: torch.Tensor,
             settings: TrainSettings, key: str, labeled: SplitView | None, labeled_x: torch.Tensor | None
             ) -> list[float]:
    opt = Optimizer(student.parameters(), settings.optim.make_state())
    gen = torch_generator(settings.seed, key, "order")
    history = []
    student.train()
    for epoch in range(settings.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(iterate_batches(len(x_student), settings.batch_size, gen)):
            targets, _ = soft_targets(teacher, x_teacher[idx], settings.pseudo_labels)
            opt.zero_grad()
            loss = cross_entropy(targets, _student_logits(student, x_student[idx], key, epoch, b))
            if settings.supervised_weight and labeled is not None:
                loss = loss + settings.supervised_weight * _labeled_term(student, labeled, labeled_x)
            _check_finite(loss, key, epoch, b)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    student.eval()
    return history


def _labeled_term(model: nn.Module, labeled: SplitView, x: torch.Tensor) -> torch.Tensor:
    y = torch.nn.functional.one_hot(torch.as_tensor(labeled.labels), labeled.num_classes).float()
    return cross_entropy(y, model(x))


def train_auxiliaries(f_s: Classifier, unlabeled: SplitView, settings: TrainSettings,
                      train_opt: bool = True, train_sar: bool = True, warm_start: Classifier | None = None,
                      labeled: SplitView | None = None, head_init: str = "fan_in"
                      ) -> tuple[Classifier | None, Classifier | None, dict]:
    """F1: distill the frozen source into an optical and a SAR auxiliary.

    Both students learn the source's pseudo-labels on the optical image;
    the SAR student only ever sees the paired SAR image. Each student has
    its own seeded init/order streams, so training one does not perturb
    the other.
    """
    if len(unlabeled) == 0:
        raise InvalidInputError("F1 needs a non-empty unlabeled pool")
    freeze(f_s).eval()
    before = param_checksum(f_s)
    m = f_s.num_classes
    x_opt = _tensor(unlabeled.optical)
    aux_opt = aux_sar = None
    info: dict = {}
    if train_opt:
        aux_opt = _new_model(3, m, "aux-opt", settings, "aux-opt", warm_start, head_init)
        lx = _tensor(labeled.optical) if labeled is not None else None
        info["aux_opt_loss"] = _distill(aux_opt, x_opt, f_s, x_opt, settings, "aux-opt", labeled, lx)
    if train_sar:
        if len(unlabeled.sar) == 0:
            raise InvalidInputError("F1 SAR auxiliary needs SAR tensors")
        x_sar = _tensor(unlabeled.sar)
        aux_sar = _new_model(x_sar.shape[1], m, "aux-sar", settings, "aux-sar",
                             warm_start if warm_start is not None and warm_start.in_channels == x_sar.shape[1] else None,
                             head_init)
        lx = _tensor(labeled.sar) if labeled is not None else None
        info["aux_sar_loss"] = _distill(aux_sar, x_sar, f_s, x_opt, settings, "aux-sar", labeled, lx)
    if param_checksum(f_s) != before:
        raise RuntimeError("source model changed during F1")
    return aux_opt, aux_sar, info


# --------------------------------------------------------------------------
# F2: source + auxiliaries -> fused target
# --------------------------------------------------------------------------

def f2_losses(target: nn.Module, teachers: TeacherSet, x_opt: torch.Tensor, x_sar: torch.Tensor,
              irm_enabled: bool, clamp: tuple[float, float] | None = irm.DEFAULT_CLAMP, mode: str = "soft"
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, irm.BatchRatios]:
    """(total, loss_opt, loss_sar, loss_src, ratios) for one batch."""
    p_opt, z_opt = soft_targets(teachers.aux_opt, x_opt, mode)
    p_sar, z_sar = soft_targets(teachers.aux_sar, x_sar, mode)
    p_src, _ = soft_targets(teachers.source, x_opt, mode)
    ratios = irm.discrepancy_ratios(irm.contribution_scores(z_opt), irm.contribution_scores(z_sar), clamp)
    logits = _student_logits(target, torch.cat([x_opt, x_sar], dim=1), "F2")
    loss_opt = cross_entropy(p_opt, logits)
    loss_sar = cross_entropy(p_sar, logits)
    loss_src = cross_entropy(p_src, logits)
    if irm_enabled:
        total = irm.irm_weighted_loss(loss_opt, loss_sar, loss_src, ratios)
    else:
        total = loss_opt + loss_sar + loss_src
    return total, loss_opt, loss_sar, loss_src, ratios


def train_target(teachers: TeacherSet, unlabeled: SplitView, irm_enabled: bool, settings: TrainSettings,
                 clamp: tuple[float, float] | None = irm.DEFAULT_CLAMP, labeled: SplitView | None = None,
                 head_init: str = "fan_in", on_batch: Callable[[F2LossBreakdown], None] | None = None
                 ) -> tuple[Classifier, list[F2LossBreakdown]]:
    """F2: train the early-fusion target against the three frozen teachers.

    Ratios are recomputed on every batch from the auxiliaries' scores and
    enter the loss as constants. With IRM off the breakdown still logs the
    ratios that would have been applied (pre-clamp) but weights are 1.
    """
    if len(unlabeled) == 0:
        raise InvalidInputError("F2 needs a non-empty unlabeled pool")
    before = teachers.checksums()
    x_opt = _tensor(unlabeled.optical)
    x_sar = _tensor(unlabeled.sar)
    m = teachers.source.num_classes
    target = _new_model(x_opt.shape[1] + x_sar.shape[1], m, "target", settings, "target", head_init=head_init)
    lx = None
    if labeled is not None and settings.supervised_weight:
        lx = torch.cat([_tensor(labeled.optical), _tensor(labeled.sar)], dim=1)
    opt = Optimizer(target.parameters(), settings.optim.make_state())
    gen = torch_generator(settings.seed, "target", "order")
    trace: list[F2LossBreakdown] = []
    target.train()
    for epoch in range(settings.epochs):
        for b, idx in enumerate(iterate_batches(len(x_opt), settings.batch_size, gen)):
            opt.zero_grad()
            total, l_opt, l_sar, l_src, r = f2_losses(target, teachers, x_opt[idx], x_sar[idx], irm_enabled,
                                                      clamp, settings.pseudo_labels)
            if lx is not None:
                total = total + settings.supervised_weight * _labeled_term(target, labeled, lx)
            _check_finite(total, "F2", epoch, b)
            total.backward()
            opt.step()
            rec = F2LossBreakdown(
                epoch=epoch, batch=b, loss_opt=l_opt.item(), loss_sar=l_sar.item(), loss_src=l_src.item(),
                rho_opt=r.rho_opt if irm_enabled else 1.0, rho_sar=r.rho_sar if irm_enabled else 1.0,
                rho_opt_pre=r.rho_opt_pre, rho_sar_pre=r.rho_sar_pre, total=total.item(),
                sum_s_opt=r.sum_opt, sum_s_sar=r.sum_sar, batch_size=len(idx),
            )
            trace.append(rec)
            if on_batch is not None:
                on_batch(rec)
    target.eval()
    if teachers.checksums() != before:
        raise RuntimeError("a teacher changed during F2")
    return target, trace


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: Classifier, path: str | Path, rng_state: torch.Tensor | None = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "descriptor": model.descriptor(),
        "state_dict": model.state_dict(),
        "rng_state": rng_state if rng_state is not None else torch.get_rng_state(),
    }, path)


def load_checkpoint(path: str | Path) -> Classifier:
    blob = torch.load(path, weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    d = blob["descriptor"]
    model = Classifier(d["in_channels"], d["num_classes"], d["blocks"], role=d["role"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
