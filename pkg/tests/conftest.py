import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prompt_adapter.encoder import ClassTokenSequence, EncoderConfig, FrozenTextEncoder  # noqa: E402

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_encoder():
    return FrozenTextEncoder.from_config(EncoderConfig(seed=3, token_dim=16, embed_dim=8))


@pytest.fixture(scope="session")
def small_classes():
    return [ClassTokenSequence(i, (i, (7 * i + 3) % 64)) for i in range(4)]


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def tiny_world():
    """A small pretrained-mode dataset and its encoder."""
    from prompt_adapter.data import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(seed=0, n_classes=4, n_train=8, n_val=10, n_test=20, pretrain_steps=100)
    return generate_synthetic(cfg, name="tiny")
