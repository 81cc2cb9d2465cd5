from __future__ import annotations

import dataclasses

import pytest
import torch

from helpers import ACCEPTANCE_RESULTS
from mbtransfer.data import GapConfig
from mbtransfer.experiments.config import (DatasetSpec, ExperimentConfig, ModelSpec, SourceTaskSpec, SplitSpec,
                                           TrainingSpec)



@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """A config that runs the whole pipeline in about a second."""
    return ExperimentConfig(
        dataset=DatasetSpec(gap=GapConfig(num_classes=3, samples_per_class=40, image_size=8)),
        source_task=SourceTaskSpec(num_classes=4, samples_per_class=20),
        split=SplitSpec(test_fraction=0.25, labeled_per_class=5),
        model=ModelSpec(blocks=((4, 3, 2), (8, 3, 2))),
        training=TrainingSpec(pretrain_epochs=2, finetune_epochs=3, f1_epochs=2, f2_epochs=2),
    )


@pytest.fixture
def replace():
    return dataclasses.replace


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
