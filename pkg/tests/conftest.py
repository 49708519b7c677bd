import os

import pytest
from hypothesis import HealthCheck, settings

from ianus.config import ModelConfig, default_hardware, validate_model

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def tiny_model(input_tokens: int = 16, output_tokens: int = 3, blocks: int = 2, heads: int = 4) -> ModelConfig:
    """Heads of 64 over two blocks; small enough for the cycle-level trace."""
    return validate_model(ModelConfig("tiny", "gpt", embedding_dim=64 * heads, head_dim=64, num_heads=heads,
                                      num_blocks=blocks, num_params=2_000_000, vocab_size=512,
                                      max_positions=128, input_tokens=input_tokens,
                                      output_tokens=output_tokens))


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def hw():
    return default_hardware("unified")


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion, printed after the run

SESSION_START = None
ACCEPTANCE: dict[int, str] = {}


def pytest_sessionstart(session):
    global SESSION_START
    import time
    SESSION_START = time.monotonic()


def pytest_collection_modifyitems(items):
    # acceptance last, so the suite-time budget sees every other test
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
