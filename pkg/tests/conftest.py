import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class BrightnessDetector:
    """Score map is the mean image brightness; lets attack tests use a closed-form target."""

    kind = "synthetic"
    supports_gradients = True
    target_class_id = 2

    def __init__(self, N):
        self.N = N

    def score_map(self, images):
        x = images if images.ndim == 4 else images.unsqueeze(0)
        return x.mean(dim=(1, 2, 3)).reshape(-1, 1, 1)


@pytest.fixture
def brightness_detector():
    return BrightnessDetector


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance verdict and returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
