import numpy as np
import pytest

from mioir.dataio import synth_gt_image
from mioir.degrade import make_rng


@pytest.fixture
def natural():
    """A 64x64 procedural scene with edges, gradients and texture."""
    return synth_gt_image(64, 64, make_rng(123, "fixture"))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def photo():
    """128x128 crop of a real photograph."""
    data = pytest.importorskip("skimage.data")
    return data.astronaut()[:128, :128].astype(np.float64) / 255.0


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdicts():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
