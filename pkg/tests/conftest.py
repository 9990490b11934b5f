import numpy as np
import pytest

from streamasr.model import ModelConfig, init_weights


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, vocab_size=24,
                       n_audio_frames=12, d_feat=6, n_text_ctx=24, seed=3)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
