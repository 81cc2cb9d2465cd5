"""Information regulation: per-sample contribution values from auxiliary
logits, per-batch discrepancy ratios, and the ratio-weighted target loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidInputError

DEFAULT_CLAMP = (0.2, 5.0)


@dataclass(frozen=True)
class ContributionScore:
    value: float
    modality: str
    sample_id: int | None = None


@dataclass(frozen=True)
class BatchRatios:
    rho_opt: float
    rho_sar: float
    rho_opt_pre: float
    rho_sar_pre: float
    clamp: tuple[float, float]
    batch_size: int
    sum_opt: float
    sum_sar: float

    @classmethod
    def identity(cls, batch_size: int = 0) -> "BatchRatios":
        return cls(1.0, 1.0, 1.0, 1.0, (1.0, 1.0), batch_size, float(batch_size), float(batch_size))


def contribution_scores(aux_logits: torch.Tensor) -> torch.Tensor:
    """Softmax probability of the predicted class, for a (B, M) logit batch."""
    z = torch.as_tensor(aux_logits)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape[-1] < 2:
        raise InvalidInputError("contribution score needs M >= 2 classes")
    if not torch.isfinite(z).all():
        raise InvalidInputError("auxiliary logits contain non-finite values")
    probs = torch.softmax(z.detach(), dim=-1)
    pred = probs.argmax(dim=-1)  # first maximal index
    return probs.gather(-1, pred.unsqueeze(-1)).squeeze(-1)


def contribution_score(aux_logits, modality: str = "opt", sample_id: int | None = None) -> ContributionScore:
    z = torch.as_tensor(np.asarray(aux_logits, dtype=np.float64)) if not isinstance(aux_logits, torch.Tensor) else aux_logits
    if z.dim() != 1:
        raise InvalidInputError("contribution_score takes one logit vector; use contribution_scores for batches")
    return ContributionScore(float(contribution_scores(z)[0]), modality, sample_id)


def _as_float64(scores) -> np.ndarray:
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    return np.asarray(scores, dtype=np.float64).reshape(-1)


def discrepancy_ratios(scores_opt: Sequence[float] | torch.Tensor, scores_sar: Sequence[float] | torch.Tensor,
                       clamp: tuple[float, float] | None = DEFAULT_CLAMP) -> BatchRatios:
    s_opt, s_sar = _as_float64(scores_opt), _as_float64(scores_sar)
    if s_opt.size != s_sar.size:
        raise InvalidInputError(f"score length mismatch: {s_opt.size} optical vs {s_sar.size} SAR")
    if s_opt.size == 0:
        raise InvalidInputError("empty score batch")
    for s in (s_opt, s_sar):
        if not np.all(np.isfinite(s)) or np.any(s <= 0) or np.any(s > 1):
            raise InvalidInputError("contribution scores must lie in (0, 1]")
    sum_opt = math.fsum(s_opt.tolist())
    sum_sar = math.fsum(s_sar.tolist())
    pre_opt = sum_sar / sum_opt
    pre_sar = sum_opt / sum_sar
    if clamp is None:
        lo, hi = 0.0, math.inf
    else:
        lo, hi = float(clamp[0]), float(clamp[1])
        if not 0 < lo <= hi:
            raise InvalidInputError(f"invalid clamp bounds {clamp}")
    return BatchRatios(
        rho_opt=min(max(pre_opt, lo), hi),
        rho_sar=min(max(pre_sar, lo), hi),
        rho_opt_pre=pre_opt,
        rho_sar_pre=pre_sar,
        clamp=(lo, hi),
        batch_size=int(s_opt.size),
        sum_opt=sum_opt,
        sum_sar=sum_sar,
    )


def irm_weighted_loss(loss_opt, loss_sar, loss_src, ratios: BatchRatios):
    """rho_opt * loss_opt + rho_sar * loss_sar + loss_src.

    The ratios are plain floats, so no gradient flows through them; the
    losses may be tensors (training) or floats (bookkeeping).
    """
    for name, v in (("loss_opt", loss_opt), ("loss_sar", loss_sar), ("loss_src", loss_src)):
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x) or x < 0:
            raise InvalidInputError(f"{name} must be finite and non-negative, got {x}")
    return ratios.rho_opt * loss_opt + ratios.rho_sar * loss_sar + loss_src
