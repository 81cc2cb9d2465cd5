"""Comparison models that need their own architecture or training recipe."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

from ..core import Classifier, torch_generator
from ..data.dataset import SplitView
from ..distill import TrainSettings, train_supervised
from ..errors import ConfigError


class LateFusionClassifier(nn.Module):
    """Separate optical and SAR encoders; their pooled features are
    concatenated and classified by one joint head."""

    def __init__(self, opt_channels: int, sar_channels: int, num_classes: int, blocks, generator=None):
        super().__init__()
        self.opt_channels = opt_channels
        self.sar_channels = sar_channels
        self.num_classes = num_classes
        self.blocks = tuple(tuple(b) for b in blocks)
        self.opt_branch = Classifier(opt_channels, num_classes, blocks, role="target", generator=generator)
        self.sar_branch = Classifier(sar_channels, num_classes, blocks, role="target", generator=generator)
        self.head = nn.Linear(self.opt_branch.feature_dim + self.sar_branch.feature_dim, num_classes)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(self.head.in_features)
            self.head.weight.uniform_(-bound, bound, generator=generator)
            self.head.bias.uniform_(-bound, bound, generator=generator)

    def descriptor(self) -> dict:
        return {"kind": "late-fusion", "opt_channels": self.opt_channels, "sar_channels": self.sar_channels,
                "num_classes": self.num_classes, "blocks": [list(b) for b in self.blocks]}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xo, xs = x[:, :self.opt_channels], x[:, self.opt_channels:]
        return self.head(torch.cat([self.opt_branch.features(xo), self.sar_branch.features(xs)], dim=1))


def finetune_sar(f_pre: Classifier, labeled: SplitView, settings: TrainSettings) -> Classifier:
    """Source encoder applied to SAR, frozen; only a fresh head is trained."""
    if labeled.sar.shape[1] != f_pre.in_channels:
        raise ConfigError(
            f"finetune-sar reuses the optical encoder and needs {f_pre.in_channels} SAR channels, "
            f"got {labeled.sar.shape[1]}"
        )
    model = copy.deepcopy(f_pre)
    model.reset_head(labeled.num_classes, torch_generator(settings.seed, "finetune-sar", "head"))
    for p in model.encoder_parameters():
        p.requires_grad_(False)
    train_supervised(model, labeled.sar, labeled.labels, settings, params=list(model.head.parameters()),
                     stage="finetune-sar")
    return model


def supervised_fusion(labeled: SplitView, settings: TrainSettings) -> Classifier:
    x = np.concatenate([labeled.optical, labeled.sar], axis=1)
    model = Classifier(x.shape[1], labeled.num_classes, settings.blocks, role="target",
                       generator=torch_generator(settings.seed, "supervised-fusion", "init"))
    train_supervised(model, x, labeled.labels, settings, stage="supervised-fusion")
    return model


def late_fusion(f_pre: Classifier, labeled: SplitView, settings: TrainSettings) -> LateFusionClassifier:
    """Optical branch starts from the source encoder, SAR branch fresh; all
    parameters are trained on the labeled pairs."""
    x = np.concatenate([labeled.optical, labeled.sar], axis=1)
    model = LateFusionClassifier(3, labeled.sar.shape[1], labeled.num_classes, settings.blocks,
                                 generator=torch_generator(settings.seed, "late-fusion", "init"))
    if f_pre.blocks == model.opt_branch.blocks and f_pre.in_channels == 3:
        model.opt_branch.encoder.load_state_dict(f_pre.encoder.state_dict())
    train_supervised(model, x, labeled.labels, settings, stage="late-fusion")
    return model
