import sys

import numpy as np
import pytest

from modstream.model import ModelConfig, MoDDecoder
from modstream.sequence import EOR_ID, Frame, StreamSample, TextSpan, canonical_order

FIRST_CONTENT_ID = 3


def random_sample(rng, frames=4, V=5, vocab=16, text_prob=0.4, max_text=3, prompts=False):
    """Frames of random content ids with random response (and optional prompt) spans."""
    fr = [Frame(t, tuple(int(x) for x in rng.integers(FIRST_CONTENT_ID, vocab, V))) for t in range(frames)]
    spans = []
    for t in range(frames):
        if rng.random() < text_prob:
            body = tuple(int(x) for x in rng.integers(FIRST_CONTENT_ID, vocab, rng.integers(1, max_text + 1)))
            spans.append(TextSpan(body + (EOR_ID,), "response", t))
        if prompts and rng.random() < 0.2:
            spans.append(TextSpan((int(rng.integers(FIRST_CONTENT_ID, vocab)),), "prompt", t))
    return StreamSample(canonical_order(fr, spans), frames)


def small_config(**kw):
    base = dict(L=4, d=16, heads=2, m=32, vocab=16, V=5, insertion="interleaved", r=0.4, max_positions=256)
    base.update(kw)
    return ModelConfig(**base)


def randomize_routers(model, rng, scale=1.0):
    for name, p in model.params.items():
        if name.endswith("w_theta"):
            p.data = rng.normal(0, scale, p.shape).astype(p.dtype)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    return randomize_routers(MoDDecoder(small_config(), seed=7), rng)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
