"""Mean-pooled embedding classifier/regressor operating on token embeddings.

The network is ``softmax(W2 tanh(W1 mean(x + delta) + b1) + b2)`` for
classification, or a linear scalar head for regression. All parameters live
in a single flat float64 vector; :class:`ParamLayout` maps it to named
blocks. The embedding matrix is stored with shape ``(dim, vocab)`` so that
column ``k`` is the embedding of token ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

CLASSIFICATION = "classification"
REGRESSION = "regression"
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Sample:
    id: int
    tokens: np.ndarray
    label: float

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 1:
            raise ValueError(f"sample {self.id}: needs at least one token")
        object.__setattr__(self, "tokens", tokens)

    @property
    def length(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of each parameter block inside the flat vector."""

    blocks: tuple[tuple[str, int, int, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return self.blocks[-1][2]

    def slice(self, name: str) -> tuple[int, int, tuple[int, ...]]:
        for block, start, stop, shape in self.blocks:
            if block == name:
                return start, stop, shape
        raise KeyError(name)

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        return {name: theta[a:b].reshape(shape) for name, a, b, shape in self.blocks}


@dataclass
class Batch:
    """Padded, stacked view of a list of samples."""

    ids: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, L) int, padding = 0
    mask: np.ndarray  # (B, L) float
    lengths: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        if not samples:
            raise ValueError("empty batch")
        width = max(s.length for s in samples)
        tokens = np.zeros((len(samples), width), dtype=np.int64)
        mask = np.zeros((len(samples), width))
        for r, s in enumerate(samples):
            tokens[r, : s.length] = s.tokens
            mask[r, : s.length] = 1.0
        return cls(
            ids=np.array([s.id for s in samples], dtype=np.int64),
            tokens=tokens,
            mask=mask,
            lengths=np.array([s.length for s in samples], dtype=np.float64),
            labels=np.array([s.label for s in samples], dtype=np.float64),
        )

    @property
    def size(self) -> int:
        return int(self.ids.size)

    def pad(self, deltas: Sequence[np.ndarray]) -> np.ndarray:
        """Stack per-sample (len_i, d) perturbations into a zero-padded (B, L, d) array."""
        dim = deltas[0].shape[1]
        out = np.zeros(self.tokens.shape + (dim,))
        for r, d in enumerate(deltas):
            out[r, : d.shape[0]] = d
        return out

    def unpad(self, padded: np.ndarray) -> list[np.ndarray]:
        return [padded[r, : int(n)].copy() for r, n in enumerate(self.lengths)]


class Model:
    """Shape description of the task network; parameters are passed explicitly."""

    def __init__(self, vocab_size: int = 1000, dim: int = 16, hidden: int = 64,
                 n_classes: int = 2, task: str = CLASSIFICATION):
        if task not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task {task!r}")
        self.vocab_size = vocab_size
        self.dim = dim
        self.hidden = hidden
        self.task = task
        self.n_out = n_classes if task == CLASSIFICATION else 1
        self.n_classes = n_classes
        shapes = [
            ("W", (dim, vocab_size)),
            ("W1", (dim, hidden)),
            ("b1", (hidden,)),
            ("W2", (hidden, self.n_out)),
            ("b2", (self.n_out,)),
        ]
        blocks, offset = [], 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            blocks.append((name, offset, offset + size, shape))
            offset += size
        self.layout = ParamLayout(tuple(blocks))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        theta = np.zeros(self.layout.size)
        p = self.layout.unpack(theta)
        p["W"][...] = rng.uniform(-0.1, 0.1, size=p["W"].shape)
        # uniform(-0.1, 0.1) gives zero columns with probability 0; guard anyway
        dead = np.linalg.norm(p["W"], axis=0) == 0.0
        if dead.any():
            p["W"][:, dead] = 0.1
        bound1 = 1.0 / np.sqrt(self.dim)
        p["W1"][...] = rng.uniform(-bound1, bound1, size=p["W1"].shape)
        bound2 = 1.0 / np.sqrt(self.hidden)
        p["W2"][...] = rng.uniform(-bound2, bound2, size=p["W2"].shape)
        return theta

    def embedding(self, theta: np.ndarray) -> np.ndarray:
        return self.layout.unpack(theta)["W"]

    def embed(self, sample: Sample, W: np.ndarray) -> np.ndarray:
        """Rows of the returned (len, d) array are the embedding columns of the tokens."""
        tokens = sample.tokens
        if tokens.min() < 0 or tokens.max() >= W.shape[1]:
            raise IndexError(f"sample {sample.id}: token index out of range")
        return W[:, tokens].T.copy()

    # -- graph construction ---------------------------------------------------

    def params(self, theta: ad.Node) -> dict[str, ad.Node]:
        return {name: ad.view(theta, a, b, shape) for name, a, b, shape in self.layout.blocks}

    def head(self, params: dict[str, ad.Node], x: ad.Node, mask: np.ndarray,
             lengths: np.ndarray) -> ad.Node:
        """Pool (B, L, d) rows under ``mask`` and apply the FFN; returns (B, n_out)."""
        pooled = ad.sum(x * mask[:, :, None], axis=1) * (1.0 / lengths)[:, None]
        h = ad.tanh(pooled @ params["W1"] + params["b1"])
        out = h @ params["W2"] + params["b2"]
        if self.task == CLASSIFICATION:
            return ad.softmax(out)
        return out

    def batch_output(self, params: dict[str, ad.Node], batch: Batch,
                     delta: ad.Node | None = None) -> ad.Node:
        x = ad.embed(params["W"], batch.tokens)
        if delta is not None:
            x = x + delta
        return self.head(params, x, batch.mask, batch.lengths)

    def loss_node(self, out: ad.Node, labels: np.ndarray) -> ad.Node:
        """Per-sample task loss, shape (B,)."""
        if self.task == CLASSIFICATION:
            onehot = np.zeros((labels.size, self.n_out))
            onehot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
            return -ad.sum(ad.log(ad.clip(out, PROB_FLOOR, 1.0)) * onehot, axis=1)
        return ad.square(ad.sum(out, axis=1) - labels)

    # -- numeric conveniences -------------------------------------------------

    def predict(self, x_embed: np.ndarray, delta: np.ndarray | None,
                theta: np.ndarray) -> np.ndarray:
        """Output for one embedded sentence: a probability vector, or a length-1 array."""
        x_embed = np.asarray(x_embed, dtype=np.float64)
        if delta is not None and np.shape(delta) != x_embed.shape:
            raise ValueError(f"perturbation shape {np.shape(delta)} != embedding shape {x_embed.shape}")
        tape = ad.Tape()
        params = self.params(tape.leaf("theta"))
        x = tape.leaf("x")
        if delta is not None:
            x = x + tape.leaf("delta")
        out = self.head(params, x, np.ones((1, x_embed.shape[0])), np.array([x_embed.shape[0]], float))
        values = {"theta": theta, "x": x_embed[None]}
        if delta is not None:
            values["delta"] = np.asarray(delta, dtype=np.float64)[None]
        return tape.forward(values, out)[0]

    def task_loss(self, output: np.ndarray, label) -> float:
        output = np.asarray(output, dtype=np.float64)
        if self.task == CLASSIFICATION:
            k = int(label)
            if k != label or not 0 <= k < output.size:
                raise ValueError(f"invalid class label {label!r}")
            return float(-np.log(np.clip(output[k], PROB_FLOOR, 1.0)))
        if not np.isfinite(label):
            raise ValueError(f"invalid regression target {label!r}")
        return float((output.reshape(-1)[0] - label) ** 2)

    def empirical_risk(self, theta: np.ndarray, batch: Sequence[Sample]) -> float:
        """Mean task loss over ``batch``."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        b = Batch.from_samples(batch)
        tape = ad.Tape()
        params = self.params(tape.leaf("theta"))
        loss = ad.sum(self.loss_node(self.batch_output(params, b), b.labels)) * (1.0 / b.size)
        return float(tape.forward({"theta": theta}, loss))

    def batch_predict(self, theta: np.ndarray, samples: Sequence[Sample] | Batch) -> np.ndarray:
        b = samples if isinstance(samples, Batch) else Batch.from_samples(samples)
        tape = ad.Tape()
        out = self.batch_output(self.params(tape.leaf("theta")), b)
        return tape.forward({"theta": theta}, out)
