"""Datasets: a planted-signal synthetic generator and a TSV loader."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import CLASSIFICATION, REGRESSION, Sample

OOV = "<unk>"


@dataclass(frozen=True)
class SyntheticSpec:
    """Each class owns ``signal_tokens`` vocabulary ids; a sentence's label is the
    class whose signal tokens occur most often in it. All other positions are
    filled with non-signal tokens. Id 0 is never emitted."""

    n: int = 2000
    n_test: int = 500
    vocab_size: int = 1000
    min_len: int = 5
    max_len: int = 20
    signal_tokens: int = 5
    n_classes: int = 2
    max_signal: int = 3
    label_noise: float = 0.1
    task: str = CLASSIFICATION

    def validate(self) -> None:
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n < 1 or self.n_test < 0:
            raise ValueError("n must be >= 1 and n_test >= 0")
        if self.n_classes < 2 or self.signal_tokens < 1 or self.max_signal < 1:
            raise ValueError("need n_classes >= 2, signal_tokens >= 1, max_signal >= 1")
        if 1 + self.n_classes * self.signal_tokens >= self.vocab_size:
            raise ValueError("vocabulary too small for the signal tokens")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task {self.task!r}")

    def signal_ids(self, c: int) -> np.ndarray:
        start = 1 + c * self.signal_tokens
        return np.arange(start, start + self.signal_tokens)


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    vocab_size: int
    n_classes: int
    task: str = CLASSIFICATION


def _draw_sentence(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, int, np.ndarray]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    c = int(rng.integers(spec.n_classes))
    counts = np.zeros(spec.n_classes, dtype=np.int64)
    counts[c] = int(rng.integers(1, min(spec.max_signal, length) + 1))
    others = [k for k in range(spec.n_classes) if k != c]
    for _ in range(int(rng.integers(0, counts[c]))):
        counts[others[int(rng.integers(len(others)))]] += 1
    # other classes stay strictly below the dominant count
    counts[others] = np.minimum(counts[others], counts[c] - 1)
    tokens = [rng.choice(spec.signal_ids(k), size=counts[k]) for k in range(spec.n_classes)]
    n_noise = length - int(counts.sum())
    first_noise = 1 + spec.n_classes * spec.signal_tokens
    tokens.append(rng.integers(first_noise, spec.vocab_size, size=n_noise))
    sentence = rng.permutation(np.concatenate(tokens).astype(np.int64))
    return sentence, c, counts


def _make_split(spec: SyntheticSpec, size: int, rng: np.random.Generator,
                noisy: bool) -> list[Sample]:
    samples = []
    for i in range(size):
        tokens, c, counts = _draw_sentence(spec, rng)
        if spec.task == CLASSIFICATION:
            label = float(c)
            if noisy and rng.random() < spec.label_noise:
                label = float((c + 1 + int(rng.integers(spec.n_classes - 1))) % spec.n_classes)
        else:
            # signed dominance score in [-1, 1]: class 0 counts up, others down
            label = float(counts[0] - counts[1:].sum()) / spec.max_signal
            if noisy:
                label += float(rng.normal(0.0, spec.label_noise))
        samples.append(Sample(i, tokens, label))
    return samples


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Train split with label noise, clean test split; deterministic per seed."""
    spec.validate()
    train_ss, test_ss = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    train = _make_split(spec, spec.n, np.random.default_rng(train_ss), noisy=True)
    test = _make_split(spec, spec.n_test, np.random.default_rng(test_ss), noisy=False)
    return Dataset(train, test, spec.vocab_size, spec.n_classes, spec.task)


def load_tsv(path: str | Path, vocab: dict[str, int] | None = None,
             task: str = CLASSIFICATION) -> tuple[list[Sample], dict[str, int]]:
    """Read ``text<TAB>label`` rows; whitespace tokens.

    Without ``vocab`` a new one is built from this file (index 0 reserved for
    out-of-vocabulary words); with it, unknown words map to 0.
    """
    build = vocab is None
    if build:
        vocab = {OOV: 0}
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected text<TAB>label")
            text, raw_label = line.rsplit("\t", 1)
            words = text.split()
            if not words:
                raise ValueError(f"{path}:{lineno}: empty text")
            try:
                label = float(raw_label)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad label {raw_label!r}") from None
            if task == CLASSIFICATION and (label != int(label) or label < 0):
                raise ValueError(f"{path}:{lineno}: class label must be a non-negative integer")
            ids = []
            for w in words:
                if build and w not in vocab:
                    vocab[w] = len(vocab)
                ids.append(vocab.get(w, 0))
            samples.append(Sample(len(samples), np.array(ids), label))
    return samples, vocab


def load_tsv_dataset(train_path: str | Path, test_path: str | Path | None,
                     task: str = CLASSIFICATION) -> Dataset:
    train, vocab = load_tsv(train_path, task=task)
    test = load_tsv(test_path, vocab, task)[0] if test_path else []
    labels = [s.label for s in train + test]
    n_classes = int(max(labels)) + 1 if task == CLASSIFICATION else 1
    return Dataset(train, test, len(vocab), max(n_classes, 2) if task == CLASSIFICATION else 1, task)
