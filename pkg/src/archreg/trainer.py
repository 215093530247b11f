"""Training loop for the four regularization strategies, with pass accounting
and per-iteration gradient-norm tracing.

Strategies:

``standard``  task loss only
``smart``     fresh PGD perturbations every iteration
``r3f``       Gaussian perturbations every iteration
``arch``      PGD perturbations refreshed every ``cache_gap`` epochs, EMA-blended
              into a cache; optionally only a fraction ``p`` of samples is stored
              and the rest are rebuilt from nearest cached neighbors
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import knn
from .cache import PerturbationCache, should_refresh
from .model import CLASSIFICATION, Batch, Model, Sample
from .perturb import (DEFAULT_EPS, INIT_MODES, NORM_KINDS, random_noise_batch,
                      solve_inner_max_batch)
from .regularizer import build_objective, build_risk

log = logging.getLogger(__name__)

STRATEGIES = ("standard", "smart", "r3f", "arch")


@dataclass
class TrainingConfig:
    strategy: str = "arch"
    lam: float = 1.0
    eps: float | None = None  # None: 0.1 for l2, 1.0 for linf
    eta: float = 0.1
    steps: int = 3
    epochs: int = 30
    cache_gap: float = 15
    alpha: float = 0.01
    p: float = 0.1
    k: int = 1
    random_neighbors: bool = False
    batch_size: int = 32
    lr: float = 0.1
    optimizer: str = "sgd"
    seed: int = 0
    norm_kind: str = "l2"
    init: str = "uniform"
    clean_grad: bool = True

    def __post_init__(self):
        if self.eps is None:
            self.eps = DEFAULT_EPS.get(self.norm_kind, 0.1)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.eps <= 0 or self.eta < 0:
            problems.append("eps must be > 0 and eta >= 0")
        if not (self.cache_gap == math.inf or (self.cache_gap >= 1 and int(self.cache_gap) == self.cache_gap)):
            problems.append("cache_gap must be a positive integer or inf")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if not 0.0 < self.p <= 1.0:
            problems.append("p must lie in (0, 1]")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            problems.append("optimizer must be sgd or adam")
        if self.norm_kind not in NORM_KINDS:
            problems.append(f"norm_kind must be one of {NORM_KINDS}")
        if self.init not in INIT_MODES:
            problems.append(f"init must be one of {INIT_MODES}")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))


class PassCounter:
    """Forward/backward pass tally, kept per iteration."""

    def __init__(self):
        self.forward_count = 0
        self.backward_count = 0
        self.per_iteration: list[tuple[int, int]] = []
        self._fwd = 0
        self._bwd = 0

    def record(self, forward: int = 0, backward: int = 0) -> None:
        if forward < 0 or backward < 0:
            raise ValueError("pass counts only increase")
        self.forward_count += forward
        self.backward_count += backward
        self._fwd += forward
        self._bwd += backward

    def end_iteration(self) -> tuple[int, int]:
        row = (self._fwd, self._bwd)
        self.per_iteration.append(row)
        self._fwd = self._bwd = 0
        return row

    @property
    def iterations(self) -> int:
        return len(self.per_iteration)

    def average(self) -> tuple[Fraction, Fraction]:
        n = self.iterations
        return Fraction(self.forward_count, n), Fraction(self.backward_count, n)


def count_passes_expected(strategy: str, steps: int = 3, cache_gap: float = 15) -> tuple[Fraction, Fraction]:
    """Average (forward, backward) passes per iteration, in closed form."""
    s = Fraction(steps)
    if strategy == "standard":
        return Fraction(1), Fraction(1)
    if strategy == "smart":
        return 1 + s, 1 + s
    if strategy == "r3f":
        return Fraction(2), Fraction(1)
    if strategy == "arch":
        if cache_gap == math.inf:
            return Fraction(2), Fraction(1)
        tc = Fraction(int(cache_gap))
        return 2 + (s - 1) / tc, 1 + s / tc
    raise ValueError(f"unknown strategy {strategy!r}")


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if theta.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise FloatingPointError(f"non-finite gradient at {bad.size} coordinates (first: {bad[:5].tolist()})")
    return theta - lr * grad


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.98), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def grad_norm_variance(trace: Sequence[float], window: slice | None = None) -> float:
    """Sample variance (ddof=1) of the gradient norms inside ``window``."""
    values = np.asarray(trace, dtype=np.float64)
    if window is not None:
        values = values[window]
    if values.size < 2:
        raise ValueError("variance needs at least two gradient norms")
    return float(np.var(values, ddof=1))


def evaluate(model: Model, theta: np.ndarray, samples: Sequence[Sample],
             batch_size: int = 512) -> float:
    """Accuracy for classification, mean squared error for regression."""
    if not samples:
        raise ValueError("empty dataset")
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = model.batch_predict(theta, chunk)
        labels = np.array([s.label for s in chunk])
        if model.task == CLASSIFICATION:
            scores.append(np.argmax(out, axis=1) == labels.astype(np.int64))
        else:
            scores.append((out[:, 0] - labels) ** 2)
    return float(np.mean(np.concatenate(scores)))


@dataclass
class TrainResult:
    theta: np.ndarray
    counter: PassCounter
    grad_norms: np.ndarray
    history: list[tuple[int, int, int, float, float, float]]
    cache: PerturbationCache | None = None
    index: knn.NeighborIndex | None = None

    @property
    def iterations(self) -> int:
        return self.counter.iterations


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "order", "perturb", "cache_set", "neighbors")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def train(model: Model, samples: Sequence[Sample], config: TrainingConfig,
          embedding: np.ndarray | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs of minibatch training.

    ``samples[i].id`` must equal ``i``. ``embedding`` optionally supplies the
    (d, |V|) matrix used for neighbor search; by default the model's
    embedding at initialization is used.
    """
    config.validate()
    n = len(samples)
    if n == 0:
        raise ValueError("empty training set")
    if any(s.id != i for i, s in enumerate(samples)):
        raise ValueError("sample ids must be 0..n-1 in order")

    rngs = _streams(config.seed)
    theta = model.init_params(rngs["init"])
    optimizer = Adam(config.lr) if config.optimizer == "adam" else None
    counter = PassCounter()
    grad_norms: list[float] = []
    history = []

    cache = index = None
    if config.strategy == "arch":
        memory_saving = config.p < 1.0
        cache = PerturbationCache(config.alpha, config.cache_gap, memory_saving)
        cache_set = knn.sample_cache_set(n, config.p, rngs["cache_set"])
        W = model.embedding(theta).copy() if embedding is None else embedding
        if memory_saving:
            if config.random_neighbors:
                index = knn.random_neighbor_index(n, cache_set, config.k, rngs["neighbors"])
            else:
                vectors = knn.sentence_vectors(samples, W)
                index = knn.build_neighbor_index(vectors, cache_set, config.k)
        else:
            index = knn.NeighborIndex(cache_set)

    regularized = config.strategy != "standard" and config.lam > 0
    step = 0
    for epoch in range(config.epochs):
        order = rngs["order"].permutation(n)
        refresh = config.strategy == "arch" and should_refresh(epoch, config.cache_gap)
        for start in range(0, n, config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            batch = Batch.from_samples(chunk)

            if regularized:
                deltas, ascended = _perturbations(model, batch, theta, config, rngs["perturb"],
                                                  counter, cache, index, refresh)
                graph = build_objective(model, batch, config.lam, config.clean_grad)
                padded = batch.pad(deltas)
                # descent pass; the perturbed branch adds one forward unless
                # the ascent steps already paid for it
                counter.record(forward=1 if ascended else 2, backward=1)
            else:
                graph = build_risk(model, batch)
                padded = np.zeros(batch.tokens.shape + (model.dim,))
                counter.record(forward=1, backward=1)

            risk, reg, _ = graph.evaluate(theta, padded)
            grad = graph.grad_theta()
            gnorm = float(np.linalg.norm(grad))
            if optimizer is None:
                theta = sgd_step(theta, grad, config.lr)
            else:
                theta = optimizer.step(theta, grad)
            fwd, bwd = counter.end_iteration()
            grad_norms.append(gnorm)
            history.append((step, fwd, bwd, gnorm, risk, reg))
            step += 1
        log.debug("epoch %d: loss %.4f reg %.4g", epoch, history[-1][4], history[-1][5])

    return TrainResult(theta, counter, np.array(grad_norms), history, cache, index)


def _perturbations(model: Model, batch: Batch, theta: np.ndarray, config: TrainingConfig,
                   rng: np.random.Generator, counter: PassCounter,
                   cache: PerturbationCache | None, index: knn.NeighborIndex | None,
                   refresh: bool) -> tuple[list[np.ndarray], bool]:
    """Perturbations for one batch and whether they came from ascent steps."""
    if config.strategy == "r3f":
        return random_noise_batch(batch.lengths, model.dim, config.eps, rng, config.norm_kind), False

    if config.strategy == "smart" or refresh:
        fresh = solve_inner_max_batch(model, batch, theta, config.steps, config.eta, config.eps,
                                      config.norm_kind, config.init, rng, counter)
        if config.strategy == "smart":
            return fresh, True
        deltas = []
        for sample_id, delta in zip(batch.ids, fresh):
            sample_id = int(sample_id)
            deltas.append(cache.put(sample_id, delta) if index.is_cached(sample_id) else delta)
        return deltas, True

    deltas = []
    for sample_id, length in zip(batch.ids, batch.lengths):
        sample_id = int(sample_id)
        if index.is_cached(sample_id):
            deltas.append(cache.get(sample_id))
        else:
            deltas.append(knn.construct_perturbation(sample_id, index, cache, int(length)))
    return deltas, False
