"""Datasets: whitespace vocabulary, synthetic easy/hard tasks, TSV loading and
padded batching."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, CLS, UNK, SEP = "[PAD]", "[CLS]", "[UNK]", "[SEP]"
SPECIALS = (PAD, CLS, UNK, SEP)
PAD_ID, CLS_ID, UNK_ID, SEP_ID = range(4)

FAMILIES = ("keyword", "composition", "mixture")


class DataError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Sequence[Sequence[str]], max_size: int | None = None) -> "Vocabulary":
        """Specials first, then tokens by descending count, ties alphabetical."""
        counts = Counter(t for text in texts for t in text if t not in SPECIALS)
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + ranked)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace split; reserved tokens keep their spelling."""
    out = []
    for tok in text.split():
        upper = tok.upper()
        out.append(upper if upper in SPECIALS else tok.lower())
    return out


@dataclass
class Dataset:
    split: str
    sequences: list[list[int]]
    labels: list[int]
    vocab: Vocabulary
    num_classes: int
    tags: list[str] | None = None

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise DataError("sequences and labels differ in length")
        if self.tags is not None and len(self.tags) != len(self.labels):
            raise DataError("tags and labels differ in length")
        for i, (seq, y) in enumerate(zip(self.sequences, self.labels)):
            if not seq or seq[0] != CLS_ID:
                raise DataError(f"{self.split} sample {i} does not start with {CLS}")
            if not 0 <= y < self.num_classes:
                raise DataError(f"{self.split} sample {i} label {y} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset(
            split or self.split,
            [self.sequences[i] for i in indices],
            [self.labels[i] for i in indices],
            self.vocab,
            self.num_classes,
            None if self.tags is None else [self.tags[i] for i in indices],
        )

    def max_len(self) -> int:
        return max((len(s) for s in self.sequences), default=0)


@dataclass
class Batch:
    ids: np.ndarray  # [B, N] int64, PAD_ID padded
    labels: np.ndarray  # [B]
    indices: np.ndarray  # positions in the source dataset

    @property
    def mask(self) -> np.ndarray:
        return self.ids != PAD_ID


def pad_sequences(sequences: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in sequences) if length is None else length
    out = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out


def make_batch(ds: Dataset, indices: Sequence[int]) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    return Batch(
        pad_sequences([ds.sequences[i] for i in idx]),
        np.asarray([ds.labels[i] for i in idx], dtype=np.int64),
        idx,
    )


def iterate_batches(
    ds: Dataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    bucket_chunk: int = 0,
) -> Iterator[Batch]:
    """Consecutive batches; shuffled with ``rng`` when given.

    With ``bucket_chunk > 0`` (and an rng) the shuffled order is cut into
    chunks of ``bucket_chunk`` batches, each chunk is sorted by length to
    reduce padding, and the resulting batches are visited in random order.
    """
    if len(ds) == 0:
        raise DataError(f"{ds.split} dataset is empty")
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    batches = []
    if rng is not None and bucket_chunk > 0:
        lengths = np.asarray([len(s) for s in ds.sequences])
        span = batch_size * bucket_chunk
        for start in range(0, len(order), span):
            chunk = order[start : start + span]
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
            batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
        batches = [batches[i] for i in rng.permutation(len(batches))]
    else:
        batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    for idx in batches:
        yield make_batch(ds, idx)


# synthetic tasks ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Generator settings.

    keyword: label c > 0 iff marker ``key{c}`` occurs once; label 0 has no
    marker.  composition: one ``a{i}`` in the first half of the body and one
    ``b{j}`` in the second half, label (i + j) mod C (XOR for two classes).
    mixture: ``easy_fraction`` keyword samples, the rest composition.
    """

    family: str = "mixture"
    n_train: int = 10_000
    n_val: int = 1_000
    n_test: int = 2_000
    min_len: int = 8
    max_len: int = 32
    vocab_size: int = 64
    num_classes: int = 2
    easy_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown task family {self.family!r}")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise DataError("easy_fraction must lie in [0, 1]")
        if self.min_len < 3 or self.max_len < self.min_len:
            raise DataError("need 3 <= min_len <= max_len")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")

    def marker_tokens(self) -> tuple[list[str], list[str], list[str]]:
        c = self.num_classes
        keys = [f"key{i}" for i in range(1, c)]
        a = [f"a{i}" for i in range(c)]
        b = [f"b{i}" for i in range(c)]
        return keys, a, b

    def filler_tokens(self) -> list[str]:
        keys, a, b = self.marker_tokens()
        used = len(SPECIALS) + len(keys) + len(a) + len(b)
        return [f"w{i}" for i in range(self.vocab_size - used)]


MIN_FILLERS = 4


def synthetic_vocabulary(spec: SyntheticTaskSpec) -> Vocabulary:
    keys, a, b = spec.marker_tokens()
    fillers = spec.filler_tokens()
    if len(fillers) < MIN_FILLERS:
        raise DataError(
            f"vocab_size {spec.vocab_size} too small for {spec.num_classes}-class "
            f"{spec.family} task (needs >= {len(SPECIALS) + len(keys) + len(a) + len(b) + MIN_FILLERS})"
        )
    return Vocabulary(list(SPECIALS) + keys + a + b + fillers)


def _balanced_labels(count: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % classes)


def _keyword_sample(label: int, length: int, spec, vocab, fillers, rng) -> list[int]:
    body = list(rng.choice(fillers, size=length - 1))
    if label > 0:
        body[int(rng.integers(0, length - 1))] = vocab.index[f"key{label}"]
    return [CLS_ID] + [int(t) for t in body]


def _composition_sample(label: int, length: int, spec, vocab, fillers, rng) -> list[int]:
    body = list(rng.choice(fillers, size=length - 1))
    half = (length - 1) // 2
    first = int(rng.integers(0, spec.num_classes))
    second = (label - first) % spec.num_classes
    body[int(rng.integers(0, half))] = vocab.index[f"a{first}"]
    body[int(rng.integers(half, length - 1))] = vocab.index[f"b{second}"]
    return [CLS_ID] + [int(t) for t in body]


def _generate_split(spec: SyntheticTaskSpec, count: int, vocab: Vocabulary, rng, split: str) -> Dataset:
    fillers = np.asarray(vocab.encode(spec.filler_tokens()))
    if spec.family == "keyword":
        n_easy = count
    elif spec.family == "composition":
        n_easy = 0
    else:
        n_easy = int(round(spec.easy_fraction * count))
    tags = np.array(["easy"] * n_easy + ["hard"] * (count - n_easy))
    tags = tags[rng.permutation(count)]
    labels = np.zeros(count, dtype=np.int64)
    for tag in ("easy", "hard"):
        where = np.flatnonzero(tags == tag)
        labels[where] = _balanced_labels(len(where), spec.num_classes, rng)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=count)
    seqs = []
    for tag, y, n in zip(tags, labels, lengths):
        make = _keyword_sample if tag == "easy" else _composition_sample
        seqs.append(make(int(y), int(n), spec, vocab, fillers, rng))
    return Dataset(split, seqs, [int(y) for y in labels], vocab, spec.num_classes, [str(t) for t in tags])


def generate_synthetic(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, val, test) splits for ``spec``."""
    vocab = synthetic_vocabulary(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return tuple(
        _generate_split(spec, n, vocab, rng, name)
        for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))
    )


# TSV -----------------------------------------------------------------------


@dataclass(frozen=True)
class TsvSchema:
    text_columns: tuple[str, ...] = ("text",)
    label_column: str = "label"
    tag_column: str | None = None

    def __post_init__(self):
        if not 1 <= len(self.text_columns) <= 2:
            raise DataError("text_columns must name one column or a sentence pair")


def read_tsv_tokens(path: str | Path, schema: TsvSchema) -> tuple[list[list[str]], list[int], list[str] | None]:
    path = Path(path)
    try:
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file")
            wanted = list(schema.text_columns) + [schema.label_column]
            if schema.tag_column:
                wanted.append(schema.tag_column)
            missing = [c for c in wanted if c not in reader.fieldnames]
            if missing:
                raise DataError(f"{path}: missing columns {missing} (have {reader.fieldnames})")
            texts, labels, tags = [], [], []
            for row_no, row in enumerate(reader, start=2):
                parts = [tokenize(row[c] or "") for c in schema.text_columns]
                tokens = parts[0] if len(parts) == 1 else parts[0] + [SEP] + parts[1]
                try:
                    labels.append(int(row[schema.label_column]))
                except (TypeError, ValueError) as exc:
                    raise DataError(
                        f"{path}:{row_no}: cannot parse label {row[schema.label_column]!r}"
                    ) from exc
                texts.append(tokens)
                if schema.tag_column:
                    tags.append(row[schema.tag_column])
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not texts:
        raise DataError(f"{path}: no data rows")
    return texts, labels, (tags if schema.tag_column else None)


def load_tsv(
    path: str | Path,
    schema: TsvSchema = TsvSchema(),
    vocab: Vocabulary | None = None,
    *,
    split: str = "train",
    max_seq_len: int = 32,
    num_classes: int | None = None,
    max_vocab: int | None = None,
) -> Dataset:
    """Load a UTF-8 TSV with a header row.

    Without ``vocab`` the vocabulary is built from this file, so pass the
    train split's vocabulary when loading validation or test files.
    Sequences get a leading [CLS] and are truncated to ``max_seq_len``.
    """
    texts, labels, tags = read_tsv_tokens(path, schema)
    if vocab is None:
        vocab = Vocabulary.build(texts, max_vocab)
    if num_classes is None:
        num_classes = max(2, max(labels) + 1)
    seqs = [([CLS_ID] + vocab.encode(t))[:max_seq_len] for t in texts]
    for row_no, y in enumerate(labels, start=2):
        if not 0 <= y < num_classes:
            raise DataError(f"{path}:{row_no}: label {y} outside [0, {num_classes})")
    return Dataset(split, seqs, labels, vocab, num_classes, tags)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Space-joined tokens without the leading [CLS]."""
    body = ids[1:] if ids and ids[0] == CLS_ID else ids
    return " ".join(vocab.decode(body))


def write_tsv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        header = ["text", "label"] + (["tag"] if ds.tags is not None else [])
        fh.write("\t".join(header) + "\n")
        for i, (seq, y) in enumerate(zip(ds.sequences, ds.labels)):
            row = [detokenize(seq, ds.vocab), str(y)]
            if ds.tags is not None:
                row.append(ds.tags[i])
            fh.write("\t".join(row) + "\n")


def split_validation(train: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of train (deterministic in ``seed``)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(train))
    n_val = max(1, int(round(fraction * len(train))))
    return (
        train.subset(sorted(order[n_val:]), "train"),
        train.subset(sorted(order[:n_val]), "val"),
    )
