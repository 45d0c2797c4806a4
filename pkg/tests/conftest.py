import numpy as np
import pytest
import torch

from vsdn.glyphforge import Vocabulary, synthesize_dataset
from vsdn.netcore import VSDN, tiny_config


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return VSDN(tiny_config())


@pytest.fixture
def tiny_model64():
    torch.manual_seed(0)
    return VSDN(tiny_config()).double()


@pytest.fixture(scope="session")
def small_dataset():
    vocab = Vocabulary(("ab", "ba", "c1", "q7", "zz"), "test")
    return synthesize_dataset(vocab, 4, seed=3, height=8, width=16,
                              test_words=("ab", "cd"), test_samples_per_word=2)


def rng(seed=0):
    return np.random.default_rng(seed)


# one PASS/FAIL line per acceptance criterion, printed at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str = ""):
        CRITERIA[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
