import numpy as np
import pytest

from dehazekit import autograd as ag
from dehazekit.backbone import ArchConfig
from dehazekit.attention import EncoderConfig
from dehazekit.dataset import make_mini_dataset, read_manifest

# reduced configs for finite-difference checks
TINY_ARCH = ArchConfig(input_size=8, trans_channels=8, slice_groups=2, trans_pool=3, residual_depth=4, residual_width=4)
TINY_ENC = EncoderConfig(patch_size=4, embed_dim=8, n_layers=1, heads=1, global_count=4)


@pytest.fixture(autouse=True)
def double_precision():
    with ag.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_manifest_path(tmp_path_factory):
    return make_mini_dataset(tmp_path_factory.mktemp("mini"))


@pytest.fixture(scope="session")
def mini_manifest(mini_manifest_path):
    return read_manifest(mini_manifest_path)
