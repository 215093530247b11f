"""Inner maximization: perturbation init, norm-ball projection and PGD ascent.

Perturbations are (len, d) float64 arrays added to a sentence's token
embeddings. Two constraint sets are supported:

* ``"l2"``  -- sentence level, Frobenius norm of the whole matrix <= eps
* ``"linf"`` -- word level, every entry in [-eps, eps]

Batched routines work on zero-padded (B, L, d) arrays; padded positions
carry no gradient, so they stay at zero through every step.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import Batch, Model, Sample
from .regularizer import divergence_node

L2 = "l2"
LINF = "linf"
NORM_KINDS = (L2, LINF)
UNIFORM = "uniform"
NORMAL = "normal"
INIT_MODES = (UNIFORM, NORMAL)
NORMAL_INIT_STD = 1e-5
GRAD_FLOOR = 1e-12

DEFAULT_EPS = {L2: 0.1, LINF: 1.0}


def _check_norm(norm_kind: str) -> None:
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {norm_kind!r}")


def init_perturbation(shape, mode: str, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Draw a starting point: uniform on (-eps/10, eps/10) or normal(0, 1e-5)."""
    while True:
        if mode == UNIFORM:
            delta = rng.uniform(-eps / 10.0, eps / 10.0, size=shape)
        elif mode == NORMAL:
            delta = rng.normal(0.0, NORMAL_INIT_STD, size=shape)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        # an exactly-zero start has zero KL gradient; redraw
        if np.any(delta):
            return delta


def project(delta: np.ndarray, eps: float, norm_kind: str) -> np.ndarray:
    _check_norm(norm_kind)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if norm_kind == LINF:
        return np.clip(delta, -eps, eps)
    norm = np.linalg.norm(delta)
    if norm <= eps:
        return delta.copy()
    return delta * (eps / norm)


def project_batch(delta: np.ndarray, eps: float, norm_kind: str) -> np.ndarray:
    """Per-sample projection of a padded (B, L, d) array."""
    _check_norm(norm_kind)
    if norm_kind == LINF:
        return np.clip(delta, -eps, eps)
    norms = np.sqrt(np.sum(delta * delta, axis=(1, 2)))
    factor = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * factor[:, None, None]


def within_ball(delta: np.ndarray, eps: float, norm_kind: str) -> bool:
    if norm_kind == LINF:
        return bool(np.max(np.abs(delta), initial=0.0) <= eps + 1e-12)
    return bool(np.linalg.norm(delta) <= eps + 1e-9)


class Adversary:
    """Regularizer and its perturbation gradient on one batch at frozen parameters.

    The clean prediction is computed once and held constant, so gradients
    flow only through the perturbed branch.
    """

    def __init__(self, model: Model, batch: Batch, theta: np.ndarray):
        self.model = model
        self.batch = batch
        self.theta = theta
        clean = model.batch_predict(theta, batch)
        self.tape = ad.Tape()
        params = model.params(self.tape.leaf("theta"))
        delta = self.tape.leaf("delta")
        pert = model.batch_output(params, batch, delta)
        self.per_sample = divergence_node(model.task, self.tape.const(clean), pert)
        self.total = ad.sum(self.per_sample)

    def values(self, delta: np.ndarray) -> np.ndarray:
        self.tape.forward({"theta": self.theta, "delta": delta}, self.total)
        return self.per_sample.value.copy()

    def gradient(self, delta: np.ndarray) -> np.ndarray:
        self.tape.forward({"theta": self.theta, "delta": delta}, self.total)
        return self.tape.backward(wrt=["delta"], output=self.total)["delta"]

    def step(self, delta: np.ndarray, eta: float, eps: float, norm_kind: str) -> np.ndarray:
        """One normalized-gradient ascent step per sample, then projection."""
        g = self.gradient(delta)
        norms = np.sqrt(np.sum(g * g, axis=(1, 2)))
        # degenerate gradient: skip normalization, take the raw step
        scale = np.where(norms < GRAD_FLOOR, 1.0, 1.0 / np.where(norms < GRAD_FLOOR, 1.0, norms))
        return project_batch(delta + eta * g * scale[:, None, None], eps, norm_kind)


def pgd_step(model: Model, sample: Sample, delta: np.ndarray, theta: np.ndarray,
             eta: float, eps: float, norm_kind: str) -> np.ndarray:
    batch = Batch.from_samples([sample])
    adv = Adversary(model, batch, theta)
    return adv.step(delta[None], eta, eps, norm_kind)[0]


def solve_inner_max_batch(model: Model, batch: Batch, theta: np.ndarray, steps: int,
                          eta: float, eps: float, norm_kind: str, init: str,
                          rng: np.random.Generator, counter=None) -> list[np.ndarray]:
    """Approximate argmax of the regularizer for every sample of ``batch``.

    Initial draws are taken per sample in batch order. Each ascent step is
    charged as one forward and one backward pass on ``counter``.
    """
    if steps < 1:
        raise ValueError("number of ascent steps must be >= 1")
    _check_norm(norm_kind)
    dim = model.dim
    starts = [init_perturbation((int(n), dim), init, eps, rng) for n in batch.lengths]
    delta = project_batch(batch.pad(starts), eps, norm_kind)
    adv = Adversary(model, batch, theta)
    for _ in range(steps):
        delta = adv.step(delta, eta, eps, norm_kind)
        if counter is not None:
            counter.record(forward=1, backward=1)
    return batch.unpad(delta)


def solve_inner_max(model: Model, sample: Sample, theta: np.ndarray, steps: int, eta: float,
                    eps: float, norm_kind: str, init: str, rng: np.random.Generator,
                    counter=None) -> np.ndarray:
    batch = Batch.from_samples([sample])
    return solve_inner_max_batch(model, batch, theta, steps, eta, eps, norm_kind, init,
                                 rng, counter)[0]


def random_noise(shape, eps: float, rng: np.random.Generator, norm_kind: str = L2) -> np.ndarray:
    """Gaussian draw with std eps/10, projected into the ball. Costs no passes."""
    return project(rng.normal(0.0, eps / 10.0, size=shape), eps, norm_kind)


def random_noise_batch(lengths: Sequence[int], dim: int, eps: float,
                       rng: np.random.Generator, norm_kind: str = L2) -> list[np.ndarray]:
    return [random_noise((int(n), dim), eps, rng, norm_kind) for n in lengths]
