import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from gatedexit.data import (
    CLS_ID,
    DataError,
    SyntheticTaskSpec,
    TsvSchema,
    Vocabulary,
    detokenize,
    generate_synthetic,
    iterate_batches,
    load_tsv,
    split_validation,
    tokenize,
    write_tsv,
)

SMALL = SyntheticTaskSpec(n_train=600, n_val=100, n_test=300, seed=4)


def oracle_label(tokens: list[str], classes: int) -> int:
    """Independent re-implementation of the labelling rules on strings."""
    body = tokens[1:]
    keys = [t for t in body if t.startswith("key")]
    if keys:
        return int(keys[0][3:])
    a = [i for i, t in enumerate(body) if t[0] == "a" and t[1:].isdigit()]
    b = [i for i, t in enumerate(body) if t[0] == "b" and t[1:].isdigit()]
    if a and b:
        assert len(a) == len(b) == 1 and a[0] < b[0]
        return (int(body[a[0]][1:]) + int(body[b[0]][1:])) % classes
    return 0


def test_same_seed_same_splits(tmp_path):
    for ds_a, ds_b in zip(generate_synthetic(SMALL), generate_synthetic(SMALL)):
        write_tsv(ds_a, tmp_path / "a.tsv")
        write_tsv(ds_b, tmp_path / "b.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


@given(st.sampled_from(["mixture", "keyword", "composition"]), st.integers(2, 4), st.integers(0, 50))
def test_labels_follow_the_rules(family, classes, seed):
    spec = SyntheticTaskSpec(family=family, n_train=80, n_val=8, n_test=8, num_classes=classes, seed=seed)
    for ds in generate_synthetic(spec):
        for seq, y in zip(ds.sequences, ds.labels):
            assert seq[0] == CLS_ID and spec.min_len <= len(seq) <= spec.max_len
            assert oracle_label(ds.vocab.decode(seq), classes) == y


def test_balance_and_mixture_fraction():
    train, _, _ = generate_synthetic(SyntheticTaskSpec(n_train=2000, seed=1))
    assert abs(np.mean(train.labels) - 0.5) <= 0.02
    easy = np.array(train.tags) == "easy"
    assert easy.mean() == pytest.approx(0.6)
    for group in (easy, ~easy):
        assert abs(np.mean(np.asarray(train.labels)[group]) - 0.5) <= 0.02


def test_keyword_task_is_linearly_easy():
    spec = SyntheticTaskSpec(family="keyword", n_train=2000, n_val=10, n_test=1000, seed=2)
    train, _, test = generate_synthetic(spec)

    def bag(ds):
        x = np.zeros((len(ds), len(ds.vocab)))
        for i, s in enumerate(ds.sequences):
            np.add.at(x[i], s, 1.0)
        return x

    probe = LogisticRegression(max_iter=2000).fit(bag(train), train.labels)
    assert probe.score(bag(test), test.labels) > 0.95


def test_vocab_too_small():
    with pytest.raises(DataError):
        generate_synthetic(SyntheticTaskSpec(vocab_size=10, num_classes=3))


def test_spec_validation():
    with pytest.raises(DataError):
        SyntheticTaskSpec(easy_fraction=1.5)
    with pytest.raises(DataError):
        SyntheticTaskSpec(family="parity")


def test_vocabulary_order_and_tokenize():
    v = Vocabulary.build([["b", "a", "b"], ["c", "[SEP]"]])
    assert v.tokens[4:] == ["b", "a", "c"]
    assert v.encode(["zzz"]) == [2]
    assert tokenize("Hello  WORLD [sep]") == ["hello", "world", "[SEP]"]


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_tsv_load_unk_and_roundtrip(tmp_path):
    train = write(tmp_path / "train.tsv", "text\tlabel\nThe cat sat\t1\na dog\t0\n")
    test = write(tmp_path / "test.tsv", "text\tlabel\nthe bird\t0\n")
    tr = load_tsv(train)
    te = load_tsv(test, vocab=tr.vocab, split="test")
    assert te.sequences[0][2] == 2  # "bird" is unseen
    assert detokenize(tr.sequences[0], tr.vocab) == "the cat sat"
    assert load_tsv(train).sequences == tr.sequences


def test_tsv_pairs_and_truncation(tmp_path):
    f = write(tmp_path / "p.tsv", "a\tb\tlabel\nx y\tz\t1\n")
    ds = load_tsv(f, TsvSchema(("a", "b")), max_seq_len=4)
    assert ds.vocab.decode(ds.sequences[0]) == ["[CLS]", "x", "y", "[SEP]"]


def test_tsv_errors(tmp_path):
    with pytest.raises(DataError, match="missing columns"):
        load_tsv(write(tmp_path / "a.tsv", "sentence\tlabel\nx\t1\n"))
    with pytest.raises(DataError, match=":3: cannot parse label"):
        load_tsv(write(tmp_path / "b.tsv", "text\tlabel\nx\t1\ny\tpos\n"))
    with pytest.raises(DataError, match="empty"):
        load_tsv(write(tmp_path / "c.tsv", ""))
    with pytest.raises(DataError, match="no data rows"):
        load_tsv(write(tmp_path / "d.tsv", "text\tlabel\n"))
    with pytest.raises(DataError, match="outside"):
        load_tsv(write(tmp_path / "e.tsv", "text\tlabel\nx\t3\n"), num_classes=2)


@given(st.integers(1, 64), st.integers(0, 40), st.integers(0, 5))
def test_batches_cover_each_sample_once(batch_size, chunk, seed):
    train, _, _ = generate_synthetic(SyntheticTaskSpec(n_train=150, n_val=1, n_test=1, seed=seed))
    rng = np.random.default_rng(seed)
    seen = np.concatenate([b.indices for b in iterate_batches(train, batch_size, rng, chunk)])
    assert sorted(seen.tolist()) == list(range(150))
    again = np.concatenate([b.indices for b in iterate_batches(train, batch_size, np.random.default_rng(seed), chunk)])
    assert np.array_equal(seen, again)


def test_bucketing_reduces_padding():
    train, _, _ = generate_synthetic(SMALL)
    pads = [
        sum(int((~b.mask).sum()) for b in iterate_batches(train, 32, np.random.default_rng(0), chunk))
        for chunk in (0, 10)
    ]
    assert pads[1] < pads[0] / 2


def test_split_validation_deterministic_and_disjoint():
    train, _, _ = generate_synthetic(SMALL)
    a, b = split_validation(train, 0.2, 0)
    assert len(b) == 120 and len(a) == 480
    assert split_validation(train, 0.2, 0)[1].sequences == b.sequences
