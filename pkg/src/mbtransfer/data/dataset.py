"""In-memory paired dataset and the read-only views handed to trainers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import InvalidInputError

CLOUD_KINDS = ("none", "thin", "thick")
SPLITS = ("train-labeled", "train-unlabeled", "test")


@dataclass(frozen=True)
class SceneSample:
    optical: np.ndarray
    sar: np.ndarray
    label: Optional[int]
    cloud_covered: bool
    cloud_coverage: float
    cloud_kind: str


@dataclass
class PairedDataset:
    """Paired optical/SAR tensors plus labels, cloud metadata and split.

    ``labels`` always holds the true class; trainers only ever see them
    through ``view``, which hides labels outside the labeled pool.
    """

    optical: np.ndarray                      # (N, 3, H, W) float32 in [0, 1]
    sar: np.ndarray                          # (N, C_s, H, W) float32
    labels: np.ndarray                       # (N,) int64
    class_names: list[str]
    cloud_coverage: np.ndarray = None        # (N,) float64
    cloud_kind: np.ndarray = None            # (N,) int8 index into CLOUD_KINDS
    split: Optional[np.ndarray] = None       # (N,) int8 index into SPLITS
    masks: Optional[np.ndarray] = None       # (N, H, W) float32 alpha, zero where clear
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if self.cloud_coverage is None:
            self.cloud_coverage = np.zeros(n)
        if self.cloud_kind is None:
            self.cloud_kind = np.zeros(n, dtype=np.int8)
        if len(self.optical) != n or (len(self.sar) and len(self.sar) != n):
            raise InvalidInputError("optical, sar and labels must have equal length")
        if len(self.sar) and self.sar.shape[2:] != self.optical.shape[2:]:
            raise InvalidInputError("optical and SAR must share H, W")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def cloud_covered(self) -> np.ndarray:
        return self.cloud_coverage > 0

    def sample(self, i: int, reveal_label: bool = False) -> SceneSample:
        visible = reveal_label or (self.split is not None and self.split[i] == 0)
        return SceneSample(
            optical=self.optical[i],
            sar=self.sar[i],
            label=int(self.labels[i]) if visible else None,
            cloud_covered=bool(self.cloud_coverage[i] > 0),
            cloud_coverage=float(self.cloud_coverage[i]),
            cloud_kind=CLOUD_KINDS[int(self.cloud_kind[i])],
        )

    def indices(self, split: str) -> np.ndarray:
        if self.split is None:
            raise InvalidInputError("dataset has not been split")
        return np.flatnonzero(self.split == SPLITS.index(split))

    def view(self, split: str) -> "SplitView":
        idx = self.indices(split)
        return SplitView(
            indices=idx,
            optical=self.optical[idx],
            sar=self.sar[idx] if len(self.sar) else self.sar,
            labels=self.labels[idx] if split == "train-labeled" else None,
            cloud_covered=self.cloud_covered[idx],
            num_classes=self.num_classes,
        )

    def oracle_labels(self, indices: np.ndarray) -> np.ndarray:
        """True labels for evaluation; not to be passed to trainers."""
        return self.labels[indices]

    def copy(self) -> "PairedDataset":
        return PairedDataset(
            optical=self.optical.copy(), sar=self.sar.copy(), labels=self.labels.copy(),
            class_names=list(self.class_names), cloud_coverage=self.cloud_coverage.copy(),
            cloud_kind=self.cloud_kind.copy(),
            split=None if self.split is None else self.split.copy(),
            masks=None if self.masks is None else self.masks.copy(), meta=dict(self.meta),
        )


@dataclass(frozen=True)
class SplitView:
    indices: np.ndarray
    optical: np.ndarray
    sar: np.ndarray
    labels: Optional[np.ndarray]
    cloud_covered: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.indices)
