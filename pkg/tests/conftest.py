import warnings

import numpy as np
import pytest

from dtl_lab.vit import ViT, ViTConfig


@pytest.fixture(scope="session")
def toy_vit():
    return ViT.init(ViTConfig(), seed=0)


@pytest.fixture(scope="session")
def small_cfg():
    return ViTConfig(N=4, d=16, heads=2, img=8, patch=4, mlp_ratio=2)


@pytest.fixture(scope="session")
def small_vit(small_cfg):
    return ViT.init(small_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_bottleneck_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*defeats the purpose")
        yield
