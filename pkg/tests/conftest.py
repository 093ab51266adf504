import numpy as np
import pytest

from biped.data.manifest import Dataset
from biped.data.synth import WorldConfig, synthesize_dataset


def small_world(**kw):
    base = dict(n_crossing=4, n_noncrossing=4, n_background=3, raster_downsample=8,
                val_fraction=0.25, test_fraction=0.25)
    base.update(kw)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_ds")
    synthesize_dataset(small_world(), seed=11, out_dir=str(out))
    return out


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return Dataset.load(small_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """record(name, passed, detail): one summary line per acceptance criterion."""

    def record(name, passed, detail):
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
