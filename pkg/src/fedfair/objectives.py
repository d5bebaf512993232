"""Server-side aggregation: FedAvg and loss-reweighted averaging (q-FFL, TERM)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("fedavg", "qffl", "term")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "fedavg"
    q: float = 0.0
    t_tilt: float = 1.0
    eta: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        if not self.q >= 0:
            raise ValueError("objective.q must be >= 0")
        if not self.t_tilt > 0:
            raise ValueError("objective.t_tilt must be > 0")
        if not self.eta > 0:
            raise ValueError("objective.eta must be > 0")

    @property
    def label(self) -> str:
        if self.kind == "qffl":
            return f"q={self.q:g}"
        if self.kind == "term":
            return f"t={self.t_tilt:g}"
        return "fedavg"


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    pre_loss: float
    n_k: int


def aggregation_weights(updates: Sequence[ClientUpdate], spec: ObjectiveSpec) -> np.ndarray:
    """Normalised per-update weights, aligned with ``updates``.

    Sample counts are renormalised over the sampled cohort. q-FFL scales them by
    ``F_k**q`` and TERM by ``exp(t*(F_k - max F))``.
    """
    if not updates:
        raise ValueError("need at least one client update")
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    losses = np.array([u.pre_loss for u in updates], dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("client losses must be finite")
    base = n / n.sum()
    if spec.kind == "qffl":
        raw = base * losses**spec.q
    elif spec.kind == "term":
        raw = base * np.exp(spec.t_tilt * (losses - losses.max()))
    else:
        raw = base * 1.0
    total = raw.sum()
    if not total > 0:
        log.warning("all %s weights are zero; falling back to sample-count weights", spec.kind)
        raw, total = base * 1.0, base.sum()
    return raw / total


def aggregate(global_params: np.ndarray, updates: Sequence[ClientUpdate], weights, eta: float) -> np.ndarray:
    """``G + eta * sum_k w_k * delta_k``, summed in ascending client id order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(updates):
        raise ValueError("one weight per update required")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {weights.sum()}, expected 1")
    acc = np.zeros_like(global_params, dtype=np.float64)
    for i in sorted(range(len(updates)), key=lambda i: updates[i].client_id):
        if updates[i].delta.shape != global_params.shape:
            raise ValueError(f"client {updates[i].client_id} delta layout does not match the global model")
        acc += weights[i] * updates[i].delta
    return global_params + eta * acc


def objective_value(losses, props, spec: ObjectiveSpec) -> float:
    F = np.asarray(losses, dtype=np.float64)
    p = np.asarray(props, dtype=np.float64)
    if spec.kind == "qffl":
        return float(np.sum(p / (spec.q + 1.0) * F ** (spec.q + 1.0)))
    if spec.kind == "term":
        t = spec.t_tilt
        m = F.max()
        return float(m + math.log(np.sum(p * np.exp(t * (F - m)))) / t)
    return float(np.sum(p * F))


def weight_entropy(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-np.sum(w * np.log(w)))
