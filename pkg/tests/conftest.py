import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gatedexit.data import CLS_ID, Dataset, Vocabulary
from gatedexit.encoder import ModelConfig
from gatedexit.model import ModelParams

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TINY = ModelConfig(
    num_layers=3,
    hidden_dim=8,
    num_heads=2,
    ffn_dim=16,
    vocab_size=16,
    max_seq_len=8,
    num_classes=2,
    classifier_inner_dim=4,
    gate_inner_dim=4,
    proj_dim=4,
    init_std=0.3,
)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    return ModelParams.initialize(TINY, seed=3)


def random_ids(rng, batch, length, vocab=16, pad_tail=0):
    """[CLS] followed by random non-special ids; the last ``pad_tail``
    positions of every row but the first are padding."""
    ids = rng.integers(4, vocab, size=(batch, length))
    ids[:, 0] = CLS_ID
    if pad_tail:
        ids[1:, length - pad_tail :] = 0
    return ids


def random_dataset(rng, n, cfg=TINY, min_len=3, split="test"):
    vocab = Vocabulary(["[PAD]", "[CLS]", "[UNK]", "[SEP]"] + [f"t{i}" for i in range(cfg.vocab_size - 4)])
    seqs, labels = [], []
    for _ in range(n):
        length = int(rng.integers(min_len, cfg.max_seq_len + 1))
        seqs.append([CLS_ID] + rng.integers(4, cfg.vocab_size, size=length - 1).tolist())
        labels.append(int(rng.integers(0, cfg.num_classes)))
    tags = ["easy" if i % 2 else "hard" for i in range(n)]
    return Dataset(split, seqs, labels, vocab, cfg.num_classes, tags)


def set_gate_bias(params, layer, value):
    """Force gate ``layer`` (0-based) towards skip (large positive) or execute."""
    params.values[f"gate{layer}.b_out"].data[...] = value
    params.values[f"gate{layer}.w_out"].data[...] = 0.0


# acceptance bookkeeping: one pass/fail line per criterion at session end

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
