import os

import numpy as np
import pytest
import torch

from multiamp.dataset import AudioClip

torch.set_num_threads(int(os.environ.get("MULTIAMP_TEST_THREADS", "1")))

# acceptance criteria results, filled by tests/test_acceptance.py
CRITERIA = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_clip(samples, tone="t0", content="c0", sr=44100, role="wet"):
    return AudioClip(np.asarray(samples, dtype=np.float32), sr, role, tone, content)
