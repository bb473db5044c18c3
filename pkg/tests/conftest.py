import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def enumerate_tile_order(t, h, w, ct, ch, cw):
    """Raster positions listed in tile order, by explicit nested loops."""
    order = []
    for nt in range(t // ct):
        for nh in range(h // ch):
            for nw in range(w // cw):
                for it in range(ct):
                    for ih in range(ch):
                        for iw in range(cw):
                            tt, hh, ww = nt * ct + it, nh * ch + ih, nw * cw + iw
                            order.append(tt * h * w + hh * w + ww)
    return order


ACCEPTANCE_LINES = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
