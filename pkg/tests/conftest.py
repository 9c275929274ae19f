"""Shared fixtures: a small trained backbone and a downstream model.

These are intentionally tiny (image 16, d=32, 4 blocks) so the module
test files run in seconds. The desk-scale pipeline used by the
acceptance suite lives in test_acceptance.py.
"""

import numpy as np
import pytest

from dtalab.dataset import LabeledData, SyntheticSpec, generate_synthetic
from dtalab.training import TrainConfig, finetune, pretrain_supervised
from dtalab.vit import ModelConfig

SMALL_CONFIG = ModelConfig(
    image_size=16, patch_size=8, embed_dim=32, depth=4,
    num_heads=4, mlp_hidden=64, num_classes=4,
)

TOY_CONFIG = ModelConfig(
    image_size=16, patch_size=8, embed_dim=8, depth=2,
    num_heads=2, mlp_hidden=16, num_classes=3,
)


@pytest.fixture(scope="session")
def small_pretrain_data():
    return generate_synthetic(
        SyntheticSpec("pretrain", classes=4, per_class=60, image_size=16, seed=7)
    )


@pytest.fixture(scope="session")
def small_downstream_data():
    return generate_synthetic(
        SyntheticSpec("downstream", classes=3, per_class=60, image_size=16, seed=7)
    )


@pytest.fixture(scope="session")
def small_downstream_test():
    return generate_synthetic(
        SyntheticSpec("downstream", classes=3, per_class=20, image_size=16, seed=7, part="test")
    )


@pytest.fixture(scope="session")
def small_pretrained(small_pretrain_data):
    tcfg = TrainConfig(mode="pretrain", epochs=8, batch_size=16, learning_rate=1e-3, seed=7)
    return pretrain_supervised(SMALL_CONFIG, small_pretrain_data, tcfg)


@pytest.fixture(scope="session")
def small_finetuned(small_pretrained, small_downstream_data):
    tcfg = TrainConfig(mode="full", epochs=8, batch_size=16, learning_rate=5e-4, seed=8)
    return finetune(small_pretrained, "full", small_downstream_data, tcfg)
