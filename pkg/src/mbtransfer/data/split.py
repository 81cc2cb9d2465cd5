from __future__ import annotations

import math

import numpy as np

from ..core import derive_seed
from ..errors import InvalidInputError
from .dataset import SPLITS, PairedDataset


def split_dataset(dataset: PairedDataset, test_fraction: float, labeled_per_class: int, seed: int) -> PairedDataset:
    """Stratified test split, then exactly ``labeled_per_class`` labeled
    training samples per class; the rest of train is the unlabeled pool."""
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidInputError(f"test_fraction must be in [0, 1), got {test_fraction}")
    if labeled_per_class < 0:
        raise InvalidInputError("labeled_per_class must be >= 0")
    split = np.empty(len(dataset), dtype=np.int8)
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        rng = np.random.default_rng(derive_seed(seed, "split", k))
        idx = idx[rng.permutation(idx.size)]
        n_test = int(math.floor(test_fraction * idx.size + 0.5))
        train = idx[n_test:]
        if train.size < labeled_per_class:
            raise InvalidInputError(
                f"class {k} has {train.size} training samples, fewer than labeled_per_class={labeled_per_class}"
            )
        split[idx[:n_test]] = SPLITS.index("test")
        split[train[:labeled_per_class]] = SPLITS.index("train-labeled")
        split[train[labeled_per_class:]] = SPLITS.index("train-unlabeled")
    out = dataset.copy()
    out.split = split
    out.meta = dict(out.meta)
    out.meta["split"] = {"test_fraction": test_fraction, "labeled_per_class": labeled_per_class, "seed": int(seed)}
    return out
