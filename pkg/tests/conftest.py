import numpy as np
import pytest

from selfensemble.archive import WeightArchive
from selfensemble.backbone import DenoiserSpec, init_weights

# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def tiny_backbone():
    """Small randomly initialized denoiser; fast enough for unit tests."""
    return init_weights(DenoiserSpec(depth=3, channels=4), seed=1)


@pytest.fixture
def passthrough_backbone():
    """All-zero weights: predicts zero noise, so denoise(x) == clip(x, 0, 1)."""
    arc = init_weights(DenoiserSpec(depth=2, channels=2), seed=0)
    return WeightArchive(arc.kind, arc.spec, {k: np.zeros_like(v) for k, v in arc.params.items()})


@pytest.fixture
def clean_images():
    rng = np.random.default_rng(11)
    y, x = np.mgrid[:20, :20]
    base = 0.5 + 0.3 * np.sin(x / 3.0) * np.cos(y / 4.0)
    return [np.clip(base + 0.05 * rng.standard_normal((20, 20)), 0, 1).astype(np.float32)
            for _ in range(3)]
