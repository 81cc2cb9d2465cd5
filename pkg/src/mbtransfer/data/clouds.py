"""Cloud-contamination simulator for the optical modality.

Masks come from a library of density fields (procedural or imported
images). A field is cropped/resized to the image, randomly flipped and
rotated, and its densest pixels are selected until the requested coverage
is met exactly (to pixel granularity). Thick clouds saturate the covered
pixels to 1.0; thin clouds alpha-blend them toward 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..core import derive_seed
from ..errors import ConfigError, InvalidInputError
from .dataset import CLOUD_KINDS, PairedDataset

THIN_ALPHA_RANGE = (0.35, 0.8)


@dataclass(frozen=True)
class CloudMask:
    alpha: np.ndarray  # (H, W) in [0, 1]
    kind: str

    @property
    def coverage(self) -> float:
        return float((self.alpha > 0).mean())


@dataclass
class MaskLibrary:
    thick: list[np.ndarray] = field(default_factory=list)
    thin: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def procedural(cls, size: int = 32, count: int = 16, seed: int = 0) -> "MaskLibrary":
        rng = np.random.default_rng(derive_seed(seed, "mask-library"))
        thick, thin = [], []
        for _ in range(count):
            # multi-scale noise gives ragged, clumpy cloud shapes
            f = sum(ndimage.gaussian_filter(rng.standard_normal((size, size)), s, mode="wrap") * s
                    for s in (size / 8, size / 16, size / 32 + 0.5))
            thick.append(_normalise(f))
            thin.append(_normalise(ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 6, mode="wrap")))
        return cls(thick=thick, thin=thin)

    @classmethod
    def from_images(cls, paths: Sequence[str | Path], kind: str) -> "MaskLibrary":
        from PIL import Image

        if kind not in ("thin", "thick"):
            raise ConfigError(f"mask kind must be thin or thick, got {kind!r}")
        fields_ = [_normalise(np.asarray(Image.open(p).convert("L"), dtype=np.float64)) for p in paths]
        return cls(**{kind: fields_})

    def merged(self, other: "MaskLibrary") -> "MaskLibrary":
        return MaskLibrary(thick=self.thick + other.thick, thin=self.thin + other.thin)

    def render(self, kind: str, coverage: float, size: tuple[int, int], rng: np.random.Generator) -> CloudMask:
        pool = self.thick if kind == "thick" else self.thin
        if not pool:
            raise ConfigError(f"mask library has no {kind} masks")
        density = _fit(pool[rng.integers(len(pool))], size, rng)
        h, w = size
        n_px = int(math.floor(coverage * h * w + 0.5))
        if coverage > 0:
            n_px = max(n_px, 1)
        order = np.argsort(-density.reshape(-1), kind="stable")
        alpha = np.zeros(h * w)
        chosen = order[:n_px]
        if kind == "thick":
            alpha[chosen] = 1.0
        else:
            lo, hi = THIN_ALPHA_RANGE
            d = density.reshape(-1)[chosen]
            span = d.max() - d.min() if n_px else 0.0
            rel = (d - d.min()) / span if span > 0 else np.full(n_px, 0.5)
            alpha[chosen] = lo + (hi - lo) * rel
        return CloudMask(alpha.reshape(h, w), kind)


def _normalise(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    span = f.max() - f.min()
    return (f - f.min()) / span if span > 0 else np.zeros_like(f)


def _fit(field_: np.ndarray, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    if field_.shape[0] < h or field_.shape[1] < w:
        zoom = max(h / field_.shape[0], w / field_.shape[1])
        field_ = ndimage.zoom(field_, zoom, order=1)
    y = rng.integers(field_.shape[0] - h + 1)
    x = rng.integers(field_.shape[1] - w + 1)
    out = field_[y:y + h, x:x + w]
    if rng.random() < 0.5:
        out = out[::-1]
    if h == w:
        out = np.rot90(out, rng.integers(4))
    # tiny deterministic jitter breaks ties in flat regions
    return out + 1e-9 * rng.random(out.shape)


def _thin_count(n_masked: int, thin_thick_ratio: float) -> int:
    if thin_thick_ratio < 0 or math.isnan(thin_thick_ratio):
        raise InvalidInputError("thin_thick_ratio must be >= 0 (inf for thin only)")
    if math.isinf(thin_thick_ratio):
        return n_masked
    return int(math.floor(n_masked * thin_thick_ratio / (1.0 + thin_thick_ratio) + 0.5))


def apply_cloud_masks(dataset: PairedDataset, image_level_fraction: float, per_sample_coverage: float,
                      thin_thick_ratio: float, mask_library: MaskLibrary, seed: int) -> PairedDataset:
    """Return a copy of ``dataset`` with clouds applied to a random subset.

    Exactly round(fraction * N) samples are masked; among them thin and
    thick counts follow ``thin_thick_ratio`` (thin : thick). The selection
    is a prefix of one seeded permutation, so for a fixed seed the masked
    set at a lower fraction is contained in the set at a higher one.
    """
    for name, v in (("image_level_fraction", image_level_fraction), ("per_sample_coverage", per_sample_coverage)):
        if not 0.0 <= v <= 1.0:
            raise InvalidInputError(f"{name} must be in [0, 1], got {v}")
    n = len(dataset)
    n_masked = int(math.floor(image_level_fraction * n + 0.5))
    n_thin = _thin_count(n_masked, thin_thick_ratio)
    if n_thin and not mask_library.thin:
        raise ConfigError("mask library has no thin masks")
    if n_masked - n_thin and not mask_library.thick:
        raise ConfigError("mask library has no thick masks")

    out = dataset.copy()
    if n_masked == 0 or per_sample_coverage == 0:
        return out
    rng = np.random.default_rng(derive_seed(seed, "cloud-select"))
    selected = rng.permutation(n)[:n_masked]
    kinds = np.array(["thin"] * n_thin + ["thick"] * (n_masked - n_thin))
    rng.shuffle(kinds)

    h, w = dataset.optical.shape[2:]
    if out.masks is None:
        out.masks = np.zeros((n, h, w), dtype=np.float32)
    for i, kind in zip(selected.tolist(), kinds.tolist()):
        mask = mask_library.render(kind, per_sample_coverage, (h, w), np.random.default_rng(derive_seed(seed, "mask", i)))
        a = mask.alpha.astype(np.float32)
        out.optical[i] = out.optical[i] * (1.0 - a) + a  # blend toward white
        out.masks[i] = np.maximum(out.masks[i], a)
        out.cloud_coverage[i] = float((out.masks[i] > 0).mean())
        out.cloud_kind[i] = CLOUD_KINDS.index(kind)
    out.meta = dict(out.meta)
    out.meta["clouds"] = {
        "image_level_fraction": image_level_fraction,
        "per_sample_coverage": per_sample_coverage,
        "thin_thick_ratio": thin_thick_ratio,
        "seed": int(seed),
        "n_masked": n_masked,
        "n_thin": n_thin,
    }
    return out
