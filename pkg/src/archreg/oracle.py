"""Brute-force cross-checks behind ``arch-reg oracle``.

Each check recomputes a quantity along an independent path (exhaustive
scan, central differences, closed-form pass counts) and compares it with
the library's result.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import knn
from .data import SyntheticSpec, generate_synthetic
from .model import Batch, Model
from .perturb import Adversary, init_perturbation
from .regularizer import build_objective
from .trainer import TrainingConfig, count_passes_expected, train


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


def brute_force_neighbors(vectors: np.ndarray, cache_set, k: int) -> dict[int, list[int]]:
    cached = sorted(int(j) for j in cache_set)
    members = set(cached)
    out = {}
    for i in range(len(vectors)):
        if i in members:
            continue
        scored = [(-knn.cosine_sim(vectors[i], vectors[j]), j) for j in cached]
        scored.sort()
        out[i] = [j for _, j in scored[:k]]
    return out


def check_knn(n: int = 200, p: float = 0.1, ks=(1, 5), seed: int = 0) -> list[Check]:
    data = generate_synthetic(SyntheticSpec(n=n, n_test=0), seed)
    rng = np.random.default_rng(seed)
    W = Model(1000).init_params(rng)[: 16 * 1000].reshape(16, 1000)
    vectors = knn.sentence_vectors(data.train, W)
    cache_set = knn.sample_cache_set(n, p, rng)
    checks = []
    for k in ks:
        index = knn.build_neighbor_index(vectors, cache_set, k)
        expected = brute_force_neighbors(vectors, cache_set, k)
        bad = [i for i, nbrs in expected.items() if list(index.neighbors[i]) != nbrs]
        checks.append(Check(f"knn top-{k} vs exhaustive scan (n={n})", not bad,
                            f"{len(bad)} mismatching samples" if bad else f"{len(expected)} samples agree"))
    return checks


def _active_coords(model: Model, batch: Batch, rng: np.random.Generator, count: int) -> np.ndarray:
    """Random parameter coordinates that influence this batch."""
    start, _, _ = model.layout.slice("W")
    tokens = np.unique(batch.tokens[batch.mask > 0])
    emb = (start + np.arange(model.dim)[:, None] * model.vocab_size + tokens[None, :]).ravel()
    ffn = np.arange(model.layout.slice("W1")[0], model.layout.size)
    pool = np.concatenate([emb, ffn])
    return rng.choice(pool, size=min(count, pool.size), replace=False)


def gradient_errors(points: int = 10, seed: int = 0, h: float = 1e-5,
                    theta_coords: int = 20) -> tuple[list[float], list[float]]:
    """Relative errors of the perturbation gradient and the parameter gradient."""
    rng = np.random.default_rng(seed)
    data = generate_synthetic(SyntheticSpec(n=4 * points, n_test=0, vocab_size=200), seed)
    model = Model(200, dim=8, hidden=16)
    delta_errs, theta_errs = [], []
    for t in range(points):
        theta = model.init_params(rng)
        theta[model.layout.slice("W1")[0]:] *= 3.0
        samples = data.train[4 * t: 4 * t + 4]
        batch = Batch.from_samples(samples)
        deltas = [init_perturbation((s.length, model.dim), "normal", 0.1, rng) * 1e3 for s in samples]
        padded = batch.pad(deltas)

        adv = Adversary(model, batch, theta)
        delta_errs.append(ad.grad_check(adv.tape, "delta", {"theta": theta, "delta": padded}, h,
                                        coords=np.flatnonzero(batch.mask[:, :, None].repeat(model.dim, 2)),
                                        output=adv.total))

        graph = build_objective(model, batch, lam=1.0)
        coords = _active_coords(model, batch, rng, theta_coords)
        theta_errs.append(ad.grad_check(graph.tape, "theta", {"theta": theta, "delta": padded}, h,
                                        coords=coords, output=graph.total))
    return delta_errs, theta_errs


def check_gradients(tol: float = 1e-4) -> list[Check]:
    d_errs, t_errs = gradient_errors()
    return [
        Check("perturbation gradient vs central differences", max(d_errs) < tol,
              f"max rel err {max(d_errs):.2e}"),
        Check("parameter gradient vs central differences", max(t_errs) < tol,
              f"max rel err {max(t_errs):.2e}"),
    ]


def check_pass_counts(configs=((1, 5), (3, 15), (2, 10)), n: int = 64) -> list[Check]:
    data = generate_synthetic(SyntheticSpec(n=n, n_test=0), 0)
    model = Model(data.vocab_size)
    checks = []
    for steps, gap in configs:
        for strategy in ("standard", "smart", "r3f", "arch"):
            cfg = TrainingConfig(strategy=strategy, steps=steps, cache_gap=gap, epochs=gap,
                                 batch_size=16, p=0.25)
            measured = train(model, data.train, cfg).counter.average()
            expected = count_passes_expected(strategy, steps, gap)
            checks.append(Check(f"passes {strategy} S={steps} T_c={gap}", measured == expected,
                                f"measured {tuple(map(str, measured))}, expected {tuple(map(str, expected))}"))
    return checks


ALL_CHECKS: tuple[Callable[[], list[Check]], ...] = (check_knn, check_gradients, check_pass_counts)


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for group in ALL_CHECKS:
        for check in group():
            echo(f"{'PASS' if check.passed else 'FAIL'}  {check.name}: {check.detail}")
            ok &= check.passed
    return ok
