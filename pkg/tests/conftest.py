import numpy as np
import pytest

from headsplat.config import PipelineConfig
from headsplat.images import synthetic_portrait
from headsplat.runtime import build_avatar, save_avatar


@pytest.fixture(scope="session")
def portrait():
    return synthetic_portrait(seed=0)


@pytest.fixture(scope="session")
def avatar(portrait):
    """One default-config build shared by everything downstream."""
    return build_avatar(portrait, config=PipelineConfig())


@pytest.fixture(scope="session")
def snapshot_path(avatar, tmp_path_factory):
    path = tmp_path_factory.mktemp("snap") / "avatar.omga"
    save_avatar(avatar, str(path))
    return str(path)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
