"""Shared test utilities."""

from __future__ import annotations

import torch

from mbtransfer.core import Classifier, cross_entropy, torch_generator
from mbtransfer.irm import contribution_scores, discrepancy_ratios, irm_weighted_loss

FD_EPS = 1e-5

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"


def relu_margin(model: Classifier, x: torch.Tensor) -> float:
    """Smallest |pre-activation| over every conv output for input ``x``."""
    seen: list[float] = []
    hooks = [m.register_forward_hook(lambda mod, i, o: seen.append(o.abs().min().item()))
             for m in model.modules() if isinstance(m, torch.nn.Conv2d)]
    with torch.no_grad():
        model(x)
    for h in hooks:
        h.remove()
    return min(seen)


def gradcheck_instances(count: int, in_channels: int = 6, num_classes: int = 4,
                        blocks=((4, 3, 2), (4, 3, 2)), batch: int = 4, size: int = 6, eps: float = FD_EPS):
    """Deterministic random (model, input, targets) instances in float64.

    Central differences are meaningless when a perturbation of size ``eps``
    can push a ReLU input across zero, so draws whose smallest
    pre-activation is within ``10 * eps`` of the kink are skipped.
    """
    out, seed = [], 0
    while len(out) < count:
        g = torch_generator(seed, "gradcheck")
        model = Classifier(in_channels, num_classes, blocks, generator=g, dtype=torch.float64)
        x = torch.rand(batch, in_channels, size, size, dtype=torch.float64, generator=g)
        targets = [torch.softmax(2 * torch.randn(batch, num_classes, dtype=torch.float64, generator=g), -1)
                   for _ in range(3)]
        aux_logits = [torch.randn(batch, num_classes, dtype=torch.float64, generator=g) for _ in range(2)]
        seed += 1
        if relu_margin(model, x) > 10 * eps:
            out.append((model, x, targets, aux_logits))
    return out


def three_teacher_loss(model, x, targets):
    z = model(x)
    return sum(cross_entropy(t, z) for t in targets)


def irm_total_loss(model, x, targets, aux_logits):
    """IRM-weighted loss with the batch ratios computed outside the graph."""
    ratios = discrepancy_ratios(contribution_scores(aux_logits[0]).tolist(),
                                contribution_scores(aux_logits[1]).tolist())
    z = model(x)
    return irm_weighted_loss(cross_entropy(targets[0], z), cross_entropy(targets[1], z),
                             cross_entropy(targets[2], z), ratios)


def brute_force_metrics(preds, labels, num_classes: int) -> tuple[float, float, float]:
    """OA, AA and kappa from a per-sample recount with plain Python arithmetic."""
    n = len(labels)
    hits, rows, cols = [0] * num_classes, [0] * num_classes, [0] * num_classes
    for p, t in zip(preds, labels):
        rows[t] += 1
        cols[p] += 1
        if p == t:
            hits[t] += 1
    p_o = sum(hits) / n
    recalls = [hits[k] / rows[k] for k in range(num_classes) if rows[k]]
    aa = sum(recalls) / len(recalls)
    p_e = sum(rows[k] * cols[k] for k in range(num_classes)) / n ** 2
    kappa = (p_o - p_e) / (1 - p_e) if p_e != 1 else (1.0 if p_o == 1 else 0.0)
    return p_o, aa, kappa
