import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cvggnet.data import generate_phase_dataset, load_split

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """3 classes x 10 samples of 32x32 phase data (21 train, 9 test)."""
    out = tmp_path_factory.mktemp("tiny")
    generate_phase_dataset(out, num_classes=3, samples_per_class=10, size=32, seed=7)
    return out


@pytest.fixture(scope="session")
def tiny_splits(tiny_data_dir):
    return load_split(tiny_data_dir, "train", 32), load_split(tiny_data_dir, "test", 32)


@pytest.fixture(scope="session")
def phase_data_dir(tmp_path_factory):
    """The standard phase task: 3 classes x 200 samples, 32x32, noise 0.3."""
    out = tmp_path_factory.mktemp("phase")
    generate_phase_dataset(out, num_classes=3, samples_per_class=200, size=32,
                           amplitude_discriminable=False, noise_sigma=0.3, seed=0)
    return out


@pytest.fixture(scope="session")
def phase_splits(phase_data_dir):
    return load_split(phase_data_dir, "train", 32), load_split(phase_data_dir, "test", 32)


@pytest.fixture(scope="session")
def amplitude_splits(tmp_path_factory):
    """Control task whose classes differ in amplitude as well as phase."""
    out = tmp_path_factory.mktemp("amplitude")
    generate_phase_dataset(out, num_classes=3, samples_per_class=200, size=32,
                           amplitude_discriminable=True, noise_sigma=0.3, seed=0)
    return load_split(out, "train", 32), load_split(out, "test", 32)


# One PASS/FAIL line per acceptance criterion, echoed in the terminal summary
# so it survives output capture.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def emit(number: int, passed: bool | str, detail: str) -> None:
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"[criterion {number}] {status}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
