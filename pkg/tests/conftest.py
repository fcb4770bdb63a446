import numpy as np
import pytest

from handqa.forge import ForgeConfig, build_dataset
from handqa.model import TrainConfig, save_checkpoint, train

# criterion line -> "PASS" / "FAIL", filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def forge_2000():
    """The 2000-pair, seed-42 dataset used for the training checks."""
    _, samples = build_dataset(ForgeConfig(n_pairs=2000), 42)
    return samples


@pytest.fixture(scope="session")
def trained_gcn(forge_2000):
    return train(forge_2000, TrainConfig(epochs=5, lr=0.01, seed=42, encoder_variant="gcn"))


@pytest.fixture(scope="session")
def checkpoint_path(trained_gcn, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.json"
    save_checkpoint(trained_gcn.params, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{status}] criterion {key}: {detail}")
