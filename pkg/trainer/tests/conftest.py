import shutil

import pytest

from semtrainer.data import load_dataset
from semtrainer.train import TrainConfig, train_pgm, train_semcom


def require_semverify():
    if shutil.which("semverify") is None:
        pytest.skip("semverify CLI not installed (primary component required)")


@pytest.fixture(scope="session")
def synthetic_data():
    return load_dataset("synthetic", seed=0)


@pytest.fixture(scope="session")
def synthetic_cfg():
    return TrainConfig(dataset="synthetic", latent_dim=16, epochs=2, pgm_epochs=5, seed=0)


@pytest.fixture(scope="session")
def trained_semcom(synthetic_cfg, synthetic_data):
    return train_semcom(synthetic_cfg, synthetic_data)


@pytest.fixture(scope="session")
def trained_pgm_5db(synthetic_cfg, trained_semcom, synthetic_data):
    return train_pgm(synthetic_cfg, trained_semcom, synthetic_data, pnr_db=5.0)
