import numpy as np
import pytest

from dynalign.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A run small enough to train all three stages in a couple of seconds."""
    return RunConfig(classes=2, sentences=2, tokens=4, embd=16, encoder_heads=2, tower_heads=2,
                     tkn_max=8, image_size=16, image_patch=8, frames=4, data_frames=4,
                     data_samples_per_class=6, data_pad=2, epochs_stage1=2, epochs_stage2=2,
                     epochs_stage3=2, batch=4, growth_schedule="1:2")


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Collect one pass/fail line per acceptance criterion for the summary."""
    def add(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
