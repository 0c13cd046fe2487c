import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def natural_like(rng, h, w):
    """Smooth random field plus mild noise, as uint8."""
    base = rng.normal(size=(h // 8 + 2, w // 8 + 2))
    up = np.kron(base, np.ones((8, 8)))[:h, :w]
    ys, xs = np.mgrid[0:h, 0:w]
    img = 128 + 40 * up + 30 * np.sin(xs / 7.0) * np.cos(ys / 11.0) + rng.normal(0, 3, (h, w))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


@pytest.fixture
def textured(rng):
    return natural_like(rng, 48, 64)


def pytest_terminal_summary(terminalreporter):
    from criteria_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
