"""Smoothness regularizer and the combined training objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .model import CLASSIFICATION, PROB_FLOOR, Batch, Model, Sample


def adv_kl(p_clean, q_pert) -> float:
    """KL(p || q) = sum_k p_k log(p_k / q_k), logs taken on clipped probabilities."""
    p = np.asarray(p_clean, dtype=np.float64)
    q = np.asarray(q_pert, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    lp = np.log(np.clip(p, PROB_FLOOR, 1.0))
    lq = np.log(np.clip(q, PROB_FLOOR, 1.0))
    return float(np.sum(p * (lp - lq)))


def adv_sq(f_clean: float, f_pert: float) -> float:
    return float((f_clean - f_pert) ** 2)


def divergence_node(task: str, clean: ad.Node, pert: ad.Node) -> ad.Node:
    """Per-row regularizer between clean and perturbed outputs, shape (B,)."""
    if task == CLASSIFICATION:
        lp = ad.log(ad.clip(clean, PROB_FLOOR, 1.0))
        lq = ad.log(ad.clip(pert, PROB_FLOOR, 1.0))
        return ad.sum(clean * (lp - lq), axis=1)
    return ad.square(ad.sum(clean - pert, axis=1))


def ell_v(model: Model, x_embed: np.ndarray, delta: np.ndarray, theta: np.ndarray) -> float:
    """Regularizer value for one embedded sentence and its perturbation."""
    clean = model.predict(x_embed, None, theta)
    pert = model.predict(x_embed, delta, theta)
    if model.task == CLASSIFICATION:
        return adv_kl(clean, pert)
    return adv_sq(float(clean[0]), float(pert[0]))


@dataclass
class ObjectiveGraph:
    """Tape computing risk + lam * mean regularizer for a fixed batch.

    Leaves: ``theta`` (flat parameters) and ``delta`` (padded (B, L, d)).
    """

    tape: ad.Tape
    risk: ad.Node
    reg: ad.Node
    total: ad.Node
    batch: Batch

    def evaluate(self, theta: np.ndarray, delta: np.ndarray) -> tuple[float, float, float]:
        self.tape.forward({"theta": theta, "delta": delta}, self.total)
        return float(self.risk.value), float(self.reg.value), float(self.total.value)

    def grad_theta(self) -> np.ndarray:
        return self.tape.backward(wrt=["theta"], output=self.total)["theta"]


def build_objective(model: Model, batch: Batch, lam: float,
                    clean_grad: bool = True) -> ObjectiveGraph:
    """``clean_grad=False`` blocks the parameter gradient through the clean branch."""
    tape = ad.Tape()
    params = model.params(tape.leaf("theta"))
    delta = tape.leaf("delta")
    clean = model.batch_output(params, batch)
    pert = model.batch_output(params, batch, delta)
    ref = clean if clean_grad else ad.stop_gradient(clean)
    inv_b = 1.0 / batch.size
    risk = ad.sum(model.loss_node(clean, batch.labels)) * inv_b
    reg = ad.sum(divergence_node(model.task, ref, pert)) * inv_b
    total = risk + ad.scale(reg, lam)
    return ObjectiveGraph(tape, risk, reg, total, batch)


def build_risk(model: Model, batch: Batch) -> ObjectiveGraph:
    """Objective graph without a regularizer (the ``delta`` leaf is ignored)."""
    tape = ad.Tape()
    params = model.params(tape.leaf("theta"))
    tape.leaf("delta")
    clean = model.batch_output(params, batch)
    risk = ad.sum(model.loss_node(clean, batch.labels)) * (1.0 / batch.size)
    zero = tape.const(0.0)
    total = risk + zero
    return ObjectiveGraph(tape, risk, zero, total, batch)


def total_objective(model: Model, theta: np.ndarray, batch: Sequence[Sample],
                    deltas: Mapping[int, np.ndarray], lam: float) -> float:
    """Empirical risk plus ``lam`` times the batch-mean regularizer."""
    missing = [s.id for s in batch if s.id not in deltas]
    if missing:
        raise KeyError(f"no perturbation for sample ids {missing}")
    b = Batch.from_samples(batch)
    graph = build_objective(model, b, lam)
    return graph.evaluate(theta, b.pad([deltas[s.id] for s in batch]))[2]
