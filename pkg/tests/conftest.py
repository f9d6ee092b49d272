import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evanet.encoder import EncoderConfig  # noqa: E402
from evanet.model import ModelConfig  # noqa: E402

VERDICTS = pytest.StashKey[dict]()


def tiny_model_config(**kw) -> ModelConfig:
    """T=32, d_model=16, one layer, two heads, 8-d latent."""
    enc = EncoderConfig(n_layers=1, d_model=16, n_heads=2, seq_len=32,
                        attention_mode=kw.pop("attention_mode", "probsparse_sampled_measure"))
    return ModelConfig(encoder=enc, d_latent=8, **kw)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    log = request.config.stash.setdefault(VERDICTS, {})

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        log[number] = (title, bool(ok), detail)
        print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(VERDICTS, None)
    if not log:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(log):
        title, ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
