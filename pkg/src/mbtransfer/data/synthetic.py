"""Synthetic paired optical/SAR scenes with controllable modality gaps.

Every class owns a template built from a shared dictionary of oriented,
coloured gratings ("primitives"). The SAR view of a primitive is its
spatial transpose with reversed channel order, which keeps the class
geometry of the two modalities identical; only the per-modality
informativeness, noise level and the per-sample strength coupling
(redundancy) make the modalities differ.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..core import derive_seed
from ..errors import InvalidInputError
from .dataset import PairedDataset

# affine map from raw signal to pixel values
PIXEL_OFFSET = 0.45
PIXEL_SCALE = 0.12


@dataclass(frozen=True)
class GapConfig:
    info_opt: float = 0.9
    info_sar: float = 0.6
    noise_opt: float = 1.0
    noise_sar: float = 1.0
    redundancy: float = 0.5
    num_classes: int = 4
    samples_per_class: int = 500
    image_size: int = 16
    sar_channels: int = 3
    # background clutter drawn from the same primitive dictionary
    clutter: float = 1.0
    num_primitives: int = 10
    primitives_per_class: int = 3
    dictionary_seed: int = 0

    def __post_init__(self):
        for name in ("info_opt", "info_sar", "redundancy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must be in [0, 1], got {v}")
        if self.info_opt + self.info_sar <= 0:
            raise InvalidInputError("at least one modality must carry class signal")
        if min(self.noise_opt, self.noise_sar, self.clutter) < 0:
            raise InvalidInputError("noise and clutter levels must be >= 0")
        if self.num_classes < 2 or self.samples_per_class < 1 or self.image_size < 2 or self.sar_channels < 1:
            raise InvalidInputError("degenerate synthetic config")
        if not 1 <= self.primitives_per_class <= self.num_primitives:
            raise InvalidInputError("primitives_per_class must be in [1, num_primitives]")

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GapConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown GapConfig keys: {sorted(unknown)}")
        return cls(**d)


def make_primitives(count: int, size: int, seed: int = 0) -> np.ndarray:
    """(count, 3, size, size) unit-RMS coloured gratings."""
    rng = np.random.default_rng(derive_seed(seed, "primitives"))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((count, 3, size, size))
    base_theta = rng.uniform(0, np.pi)
    for p in range(count):
        theta = base_theta + np.pi * p / count
        freq = rng.uniform(1.0, max(1.5, size / 5.0))
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.normal(size=3)
        color /= np.linalg.norm(color)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
        img = color[:, None, None] * wave[None]
        out[p] = img / np.sqrt(np.mean(img ** 2))
    return out


def sar_view(primitives: np.ndarray, channels: int) -> np.ndarray:
    """SAR appearance of optical primitives: transpose + reversed channels."""
    t = primitives[:, ::-1].transpose(0, 1, 3, 2)
    idx = [j % t.shape[1] for j in range(channels)]
    out = t[:, idx]
    rms = np.sqrt(np.mean(out ** 2, axis=(1, 2, 3), keepdims=True))
    return np.ascontiguousarray(out / rms)


def class_templates(gap: GapConfig, seed: int, primitives: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mixing weights (M, P) and unit-RMS templates (M, C, H, W)."""
    rng = np.random.default_rng(derive_seed(seed, "templates"))
    m, p = gap.num_classes, gap.num_primitives
    weights = np.zeros((m, p))
    for k in range(m):
        chosen = rng.choice(p, size=gap.primitives_per_class, replace=False)
        weights[k, chosen] = rng.choice([-1.0, 1.0], size=chosen.size) * rng.uniform(0.5, 1.0, size=chosen.size)
    templates = np.einsum("mp,pchw->mchw", weights, primitives)
    rms = np.sqrt(np.mean(templates ** 2, axis=(1, 2, 3), keepdims=True))
    return weights, templates / rms


def _render(template: np.ndarray, strength: float, clutter_w: np.ndarray, prims: np.ndarray,
            noise: float, rng: np.random.Generator) -> np.ndarray:
    raw = strength * template + np.einsum("p,pchw->chw", clutter_w, prims)
    raw = raw + noise * rng.standard_normal(template.shape)
    return np.clip(PIXEL_OFFSET + PIXEL_SCALE * raw, 0.0, 1.0)


def generate_synthetic_pairs(gap: GapConfig, seed: int, optical_only: bool = False) -> PairedDataset:
    """Class-balanced paired dataset; sample i has label i % M.

    Per-sample randomness comes from a stream keyed by (seed, i), so the
    output does not depend on generation order.
    """
    if gap.num_samples < 1:
        raise InvalidInputError("synthetic config yields zero samples")
    size, m = gap.image_size, gap.num_classes
    prims_opt = make_primitives(gap.num_primitives, size, gap.dictionary_seed)
    prims_sar = sar_view(prims_opt, gap.sar_channels)
    weights, t_opt = class_templates(gap, seed, prims_opt)
    t_sar = np.einsum("mp,pchw->mchw", weights, prims_sar)
    t_sar /= np.sqrt(np.mean(t_sar ** 2, axis=(1, 2, 3), keepdims=True))

    n = gap.num_samples
    optical = np.empty((n, 3, size, size), dtype=np.float32)
    sar = np.empty((0 if optical_only else n, gap.sar_channels, size, size), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % m
    clutter_scale = gap.clutter / np.sqrt(gap.num_primitives)
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, "sample", i))
        k = labels[i]
        u = rng.random()
        shared = rng.random() < gap.redundancy
        v = u if shared else 1.0 - u
        c_opt = rng.normal(0.0, clutter_scale, gap.num_primitives)
        c_sar = rng.normal(0.0, clutter_scale, gap.num_primitives)
        optical[i] = _render(t_opt[k], gap.info_opt * (0.5 + u), c_opt, prims_opt, gap.noise_opt, rng)
        if not optical_only:
            sar[i] = _render(t_sar[k], gap.info_sar * (0.5 + v), c_sar, prims_sar, gap.noise_sar, rng)

    return PairedDataset(
        optical=optical,
        sar=sar,
        labels=labels,
        class_names=[f"class_{k}" for k in range(m)],
        meta={"generator": "synthetic", "gap": gap.to_dict(), "seed": int(seed)},
    )


def linear_probe_accuracy(x: np.ndarray, labels: np.ndarray, seed: int = 0, test_fraction: float = 0.3) -> float:
    """Held-out accuracy of an L2-regularised multinomial logistic regression
    on flattened pixels, with a fixed-seed stratified split."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    feats = x.reshape(len(x), -1).astype(np.float64)
    feats = (feats - feats.mean(0)) / (feats.std(0) + 1e-8)
    xtr, xte, ytr, yte = train_test_split(feats, labels, test_size=test_fraction,
                                          random_state=seed % (2 ** 32), stratify=labels)
    clf = LogisticRegression(C=0.05, max_iter=2000)
    clf.fit(xtr, ytr)
    return float((clf.predict(xte) == yte).mean())
