import numpy as np
import pytest

from backdoorlab import (TrainHyper, build_victim, make_synthetic, set_determinism,
                         train_clean)


@pytest.fixture(autouse=True)
def _deterministic():
    set_determinism(0)


@pytest.fixture(scope="session")
def tiny_train():
    return make_synthetic(700, 32, 32, 3, 4, seed=13, split="train", name="tiny")


@pytest.fixture(scope="session")
def tiny_test():
    return make_synthetic(200, 32, 32, 3, 4, seed=13, split="test", name="tiny")


@pytest.fixture(scope="session")
def tiny_cnn(tiny_train):
    handle = build_victim("cnn_small", 4, (32, 32, 3), seed=5,
                          channels=(16, 32, 32, 32), fc_width=64)
    train_clean(handle, tiny_train, TrainHyper(epochs=6, lr=2e-3, batch_size=64, seed=2))
    return handle
