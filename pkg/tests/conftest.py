import numpy as np
import pytest
import torch

from flowmag.core import Frame
from flowmag.data import Texture


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def textured(size=64, seed=0, shift=(0.0, 0.0)) -> np.ndarray:
    """Smooth texture sampled so that ``out(x + shift) = textured(x)``."""
    tex = Texture(np.random.default_rng(seed))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return tex(xs - shift[0], ys - shift[1])


@pytest.fixture
def shifted_pair():
    def make(size=64, shift=(2.0, 0.0), seed=0):
        return Frame(textured(size, seed)), Frame(textured(size, seed, shift))
    return make


# criterion number -> (passed, description, detail); filled by test_acceptance
CRITERIA: dict[int, tuple[bool, str, str]] = {}


def record(n: int, desc: str, ok: bool, detail: str = "") -> None:
    CRITERIA[n] = (bool(ok), desc, detail)
    print(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {desc} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, desc, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {desc} {detail}")
