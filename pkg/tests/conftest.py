import numpy as np
import pytest

from slic_lab.model import ModelConfig, Seq2Seq


def micro_config(**kw):
    base = dict(
        vocab_size=8, num_enc_layers=1, num_dec_layers=1, d_model=8, num_heads=2, d_ff=12,
        max_enc_len=10, max_dec_len=6, init_std=0.5,
    )
    base.update(kw)
    return ModelConfig(**base)


def micro_model(seed=0, **kw):
    return Seq2Seq.initialize(micro_config(**kw), seed)


def uniform_model(usable=4, **kw):
    """All output logits equal: embeddings and output bias zeroed."""
    model = micro_model(vocab_size=usable + 2, **kw)
    model.params["embed"].data[:] = 0.0
    model.params["out.b"].data[:] = 0.0
    return model


@pytest.fixture
def model():
    return micro_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> "PASS/FAIL ..." line, filled by the acceptance module
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
