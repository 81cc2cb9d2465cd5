from .dataset import CLOUD_KINDS, SPLITS, PairedDataset, SceneSample, SplitView
from .synthetic import GapConfig, generate_synthetic_pairs, linear_probe_accuracy

__all__ = [
    "CLOUD_KINDS", "SPLITS", "PairedDataset", "SceneSample", "SplitView",
    "GapConfig", "generate_synthetic_pairs", "linear_probe_accuracy",
]

from .clouds import CloudMask, MaskLibrary, apply_cloud_masks  # noqa: E402
from .io import DatasetManifest, load_dataset, save_dataset  # noqa: E402
from .split import split_dataset  # noqa: E402

__all__ += ["CloudMask", "MaskLibrary", "apply_cloud_masks", "DatasetManifest",
            "load_dataset", "save_dataset", "split_dataset"]
