from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from les import grammar
from les.checkpoint import load_checkpoint

DATA_DIR = Path(__file__).parent / "data"
REFERENCE_CKPT = DATA_DIR / "reference.ckpt"

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def reference_model():
    """The reference VAE: 20k expressions from seed 1, TrainConfig defaults.

    Committed as a checkpoint; ``test_vae.py::test_reference_checkpoint_reproduces``
    retrains it and checks the bytes match.
    """
    return load_checkpoint(REFERENCE_CKPT)


@pytest.fixture(scope="session")
def reference_data():
    rng = np.random.default_rng(1)
    return [grammar.sample_expression(rng) for _ in range(20000)]


@pytest.fixture
def record():
    def _record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
