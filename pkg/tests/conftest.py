import sys

import numpy as np
import pytest
from hypothesis import settings

from multipivot.model import ModelConfig, TransformerModel
from multipivot.vocab import SPECIALS, Vocab

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def make_vocab(prefix: str, n: int) -> Vocab:
    return Vocab(list(SPECIALS) + [f"{prefix}{i}" for i in range(n - len(SPECIALS))])


def tiny_model(num_encoders=1, seed=0, src=20, tgt=20, causal=True, layers=2, hidden=16, heads=2,
               ff=32, dropout=0.0, max_len=32, src_prefix="s", tgt_prefix="t") -> TransformerModel:
    cfg = ModelConfig(src_vocab_size=src, tgt_vocab_size=tgt, num_encoders=num_encoders, layers=layers,
                      heads=heads, hidden_size=hidden, ff_size=ff, dropout=dropout, max_len=max_len,
                      causal_encoder=causal, seed=seed)
    return TransformerModel(cfg, src_vocab=make_vocab(src_prefix, src), tgt_vocab=make_vocab(tgt_prefix, tgt))


def random_ids(rng, n, lo=4, hi=20):
    return [int(x) for x in rng.integers(lo, hi, size=n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
