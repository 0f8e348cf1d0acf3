import pytest

from wino2pc.zoo import write_minionn16, write_resnet16


@pytest.fixture(scope="session")
def minionn_model_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("minionn16")
    return write_minionn16(str(d))


@pytest.fixture(scope="session")
def resnet_model_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("resnet16")
    return write_resnet16(str(d), channels=64, lw=2, la=6)
