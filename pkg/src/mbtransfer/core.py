"""Learning substrate: the small CNN classifier, softmax/cross-entropy, the
optimizer contract and finite-difference gradient checking."""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import DivergenceError, InvalidInputError, ShapeError

ROLES = ("source", "aux-opt", "aux-sar", "target")

# (out_channels, kernel_size, stride)
DEFAULT_BLOCKS: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (64, 3, 2))


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------

def derive_seed(seed: int, *keys: int | str) -> int:
    """Stable 63-bit seed derived from a root seed and a path of keys."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def torch_generator(seed: int, *keys: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class Classifier(nn.Module):
    """Conv blocks -> global average pool -> linear head.

    Each block is conv(k, stride, padding=k//2) followed by ReLU. The
    descriptor fully determines the parameter layout, so two classifiers
    with equal descriptors are interchangeable via ``load_state_dict``.
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        blocks: Sequence[Sequence[int]] = DEFAULT_BLOCKS,
        role: str = "source",
        generator: torch.Generator | None = None,
        head_init: str = "fan_in",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if role not in ROLES:
            raise InvalidInputError(f"unknown role {role!r}")
        if in_channels < 1 or num_classes < 1 or not blocks:
            raise InvalidInputError("classifier needs >= 1 input channel, >= 1 class and >= 1 block")
        self.in_channels = int(in_channels)
        self.num_classes = int(num_classes)
        self.blocks = tuple(tuple(int(v) for v in b) for b in blocks)
        self.role = role
        layers: list[nn.Module] = []
        c = self.in_channels
        for out_c, k, s in self.blocks:
            layers += [nn.Conv2d(c, out_c, k, stride=s, padding=k // 2, dtype=dtype), nn.ReLU()]
            c = out_c
        self.encoder = nn.Sequential(*layers)
        self.feature_dim = c
        self.head = nn.Linear(c, self.num_classes, dtype=dtype)
        self.reset_parameters(generator, head_init)

    def descriptor(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "blocks": [list(b) for b in self.blocks],
            "role": self.role,
        }

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None, head_init: str = "fan_in") -> None:
        for m in self.encoder:
            if isinstance(m, nn.Conv2d):
                _uniform_fan_in(m, generator)
        self.reset_head(generator=generator, head_init=head_init)

    @torch.no_grad()
    def reset_head(self, num_classes: int | None = None, generator: torch.Generator | None = None,
                   head_init: str = "fan_in") -> None:
        if num_classes is not None and num_classes != self.num_classes:
            self.num_classes = int(num_classes)
            self.head = nn.Linear(self.feature_dim, self.num_classes, dtype=self.head.weight.dtype)
        if head_init == "zeros":
            self.head.weight.zero_()
            self.head.bias.zero_()
        elif head_init == "fan_in":
            _uniform_fan_in(self.head, generator)
        else:
            raise InvalidInputError(f"unknown head_init {head_init!r}")

    def encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters())

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.role} classifier expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        return self.encoder(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _uniform_fan_in(layer: nn.Module, generator: torch.Generator | None) -> None:
    w = layer.weight
    fan_in = w[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    w.uniform_(-bound, bound, generator=generator)
    if layer.bias is not None:
        layer.bias.uniform_(-bound, bound, generator=generator)


def count_parameters(blocks: Sequence[Sequence[int]], in_channels: int, num_classes: int) -> int:
    total, c = 0, in_channels
    for out_c, k, _ in blocks:
        total += out_c * c * k * k + out_c
        c = out_c
    return total + c * num_classes + num_classes


def forward(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Inference-only forward pass (no autograd graph)."""
    if batch.dim() != 4 or batch.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (B, C, H, W) batch, got {tuple(batch.shape)}")
    with torch.no_grad():
        return model(batch)


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# --------------------------------------------------------------------------
# softmax / cross-entropy
# --------------------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def softmax(logits) -> torch.Tensor:
    z = _as_tensor(logits)
    if z.numel() == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not torch.isfinite(z).all():
        raise InvalidInputError("softmax input contains non-finite values")
    return torch.softmax(z, dim=-1)


def cross_entropy(target, logits, validate: bool = True) -> torch.Tensor:
    """-sum_k target_k log softmax(logits)_k, averaged over the batch when 2-D."""
    t = _as_tensor(target)
    z = _as_tensor(logits)
    if t.shape != z.shape:
        raise ShapeError(f"target {tuple(t.shape)} and logits {tuple(z.shape)} differ in shape")
    if validate:
        with torch.no_grad():
            if not torch.isfinite(z).all():
                raise InvalidInputError("logits contain non-finite values")
            if (t < 0).any() or ((t.sum(-1) - 1).abs() > 1e-6).any():
                raise InvalidInputError("target is not a probability distribution")
    t = t.to(z.dtype)
    per_sample = -(t * torch.log_softmax(z, dim=-1)).sum(-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def entropy(p) -> torch.Tensor:
    p = _as_tensor(p)
    return -(torch.where(p > 0, p * torch.log(p), torch.zeros_like(p))).sum(-1)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Learning-rate schedule and per-parameter buffers.

    ``decay`` applies inverse-time decay: lr_t = lr / (1 + decay * t).
    ``kind`` is "sgd" (optionally with momentum) or "adam".
    """

    lr: float = 1e-3
    decay: float = 0.0
    momentum: float = 0.0
    kind: str = "sgd"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: dict[int, list[torch.Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise InvalidInputError(f"learning rate must be a finite non-negative float, got {self.lr}")
        if self.kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer kind {self.kind!r}")

    def current_lr(self) -> float:
        return self.lr / (1.0 + self.decay * self.step)


@torch.no_grad()
def optimizer_step(state: OptimizerState, params: Sequence[torch.Tensor],
                   grads: Sequence[torch.Tensor | None]) -> OptimizerState:
    """Apply one in-place update to ``params``; parameters whose grad is None are skipped."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad {i} has shape {tuple(g.shape)}, param has {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise DivergenceError(
                f"non-finite gradient at step {state.step}: param {i} shape {tuple(p.shape)}, {bad} bad entries"
            )
    lr = state.current_lr()
    state.step += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if state.kind == "sgd":
            if state.momentum:
                buf = state.buffers.get(i)
                if buf is None:
                    buf = [g.clone()]
                    state.buffers[i] = buf
                else:
                    buf[0].mul_(state.momentum).add_(g)
                g = buf[0]
            p.add_(g, alpha=-lr)
        else:
            b1, b2 = state.betas
            buf = state.buffers.setdefault(i, [torch.zeros_like(p), torch.zeros_like(p)])
            m, v = buf
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return state


class Optimizer:
    """Binds an ``OptimizerState`` to a fixed parameter list and reads ``.grad``."""

    def __init__(self, params: Iterable[torch.Tensor], state: OptimizerState):
        self.params = [p for p in params]
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        optimizer_step(self.state, self.params, [p.grad for p in self.params])


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def finite_difference_gradcheck(loss_fn: Callable[[], torch.Tensor],
                                params: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Max elementwise relative error between autograd and central differences.

    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    ``params`` should be float64 leaf tensors with ``requires_grad=True``.
    """
    params = list(params)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat, aflat = p.view(-1), a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                num = (f_plus - f_minus) / (2 * eps)
                an = aflat[i].item()
                err = abs(an - num) / max(abs(an), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
