import numpy as np
import pytest

from vnibcreg.config import ExperimentConfig
from vnibcreg.dataset import SyntheticSpec, generate_synthetic
from vnibcreg.preprocess import SpectrogramCache

TINY_OVERRIDES = {
    "dataset.synthetic_n_per_class": 6,
    "train.epochs": 2,
    "train.batch_size": 8,
    "eval.epochs": 5,
    "eval.finetune_epochs": 1,
    "eval.seeds": [0],
    "preprocess.target_height": 32,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ExperimentConfig.build("desk", overrides=TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_collection(tiny_config):
    return generate_synthetic(tiny_config.synthetic_spec(), 0)


@pytest.fixture(scope="session")
def tiny_cache(tiny_config):
    return SpectrogramCache(tiny_config.spectrogram_params())


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_per_class=2, n_channels=3, n_samples=2000)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Register one acceptance line: ``record_criterion(name, passed, detail)``."""
    store = request.config.stash.setdefault(_CRITERIA, [])

    def record(name, passed, detail=""):
        status = "PASS" if passed is True else ("SKIP" if passed is None else "FAIL")
        line = f"[{status}] {name}: {detail}"
        store.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
