import numpy as np
import pytest

from freqrobust.dataio import LabeledDataset
from freqrobust.synthetic import write_synthetic_cifar


def random_dataset(n=20, seed=0, num_classes=10):
    rng = np.random.default_rng(seed)
    return LabeledDataset(
        rng.random((n, 32, 32, 3)).astype(np.float32), rng.integers(0, num_classes, n), num_classes, "rand"
    )


@pytest.fixture
def small_ds():
    return random_dataset()


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return write_synthetic_cifar(tmp_path_factory.mktemp("synth"), n_train=500, n_test=100, seed=0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; echoed live and in the summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(name, passed, detail):
        line = f"[acceptance] {'PASS' if passed else 'FAIL'} {name}: {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
