import numpy as np
import pytest

from fairtune.data import SplitSpec, SyntheticSpec, generate_synthetic, split_standardize
from fairtune.metrics import ObjectiveSpec
from fairtune.network import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_splits():
    ds = generate_synthetic(
        SyntheticSpec(n=4000, d=6, target_spd=0.3, group0_fraction=0.75, seed=3)
    )
    return split_standardize(ds, SplitSpec(seed=5))


@pytest.fixture(scope="session")
def tiny_net(tiny_splits):
    tr, va, _ = tiny_splits
    return train(tr, va, (16,), TrainConfig(max_epochs=15, patience=3, seed=1))


@pytest.fixture
def spd_spec():
    return ObjectiveSpec(measure="spd", epsilon=0.05)
