"""EWC, knowledge-distillation and proximal losses, and the round-scheduled
composite loss used for personalisation-aware local training."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    Batch,
    Loss,
    ModelSpec,
    check_params,
    cross_entropy_grad,
    forward,
    log_softmax,
    loss_and_grad,
    per_sample_grads,
)

LOSS_KINDS = ("none", "ewc", "kd", "prox")


@dataclass(frozen=True)
class FisherDiag:
    values: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class KdConfig:
    T: float = 6.0
    alpha: float = 0.95

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError("kd temperature T must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("kd alpha must be in [0, 1]")


@dataclass(frozen=True)
class Segment:
    """Schedule entry active from ``from_round`` until the next segment.

    ``lam`` is the EWC or proximal weight; ``kd`` configures distillation.
    """

    from_round: int
    mu: float = 1.0
    kind: str = "none"
    lam: float = 0.0
    kd: Optional[KdConfig] = None

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must be in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.kind == "kd" and self.kd is None:
            object.__setattr__(self, "kd", KdConfig())


@dataclass(frozen=True)
class PaflSchedule:
    segments: tuple[Segment, ...] = (Segment(0),)

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs or segs[0].from_round != 0:
            raise ValueError("the first schedule segment must start at round 0")
        for a, b in zip(segs, segs[1:]):
            if b.from_round <= a.from_round:
                raise ValueError(
                    f"schedule segments must have strictly increasing from_round ({a.from_round} then {b.from_round})"
                )

    @classmethod
    def fedavg(cls) -> "PaflSchedule":
        return cls((Segment(0),))

    @classmethod
    def halfway(cls, rounds: int, kind: str, lam: float = 5000.0, kd: Optional[KdConfig] = None) -> "PaflSchedule":
        """Plain training for the first half, then a constant personalisation loss.

        KD segments use mu=0 because the distillation loss already carries the
        label term. EWC segments use mu=0.5 so the data and penalty terms keep
        the same relative weighting as in post-training adaptation.
        """
        half = rounds // 2
        if kind == "kd":
            tail = Segment(half, mu=0.0, kind="kd", kd=kd or KdConfig())
        elif kind in ("ewc", "prox"):
            tail = Segment(half, mu=0.5, kind=kind, lam=lam)
        else:
            raise ValueError(f"no halfway schedule for loss kind {kind!r}")
        if half == 0:
            return cls((Segment(0, tail.mu, tail.kind, tail.lam, tail.kd),))
        return cls((Segment(0), tail))

    def lookup(self, round: int) -> Segment:
        return schedule_lookup(self, round)

    @property
    def needs_fisher(self) -> bool:
        return any(s.kind == "ewc" for s in self.segments)


def schedule_lookup(schedule: PaflSchedule, round: int) -> Segment:
    """The segment with the largest ``from_round`` not exceeding ``round``."""
    if round < 0:
        raise ValueError("round must be >= 0")
    starts = [s.from_round for s in schedule.segments]
    return schedule.segments[bisect.bisect_right(starts, round) - 1]


def fisher_diagonal(
    params: np.ndarray, spec: ModelSpec, data: Batch, max_samples: Optional[int] = None, seed: int = 0
) -> FisherDiag:
    """Empirical diagonal Fisher: mean squared per-sample gradient of the NLL
    at the true labels, over at most ``max_samples`` rows."""
    if len(data) == 0:
        raise ValueError("fisher_diagonal needs at least one sample")
    if max_samples is not None and len(data) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(data), size=max_samples, replace=False))
        data = data.subset(idx)
    g = per_sample_grads(params, spec, data)
    return FisherDiag(values=np.mean(g * g, axis=0), sample_count=len(data))


def _diff(C: np.ndarray, G: np.ndarray) -> np.ndarray:
    if C.shape != G.shape:
        raise ValueError(f"parameter layouts differ: {C.shape} vs {G.shape}")
    return C - G


def ewc_penalty(C: np.ndarray, G: np.ndarray, M: FisherDiag | np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    m = M.values if isinstance(M, FisherDiag) else np.asarray(M, dtype=np.float64)
    d = _diff(C, G)
    if m.shape != d.shape:
        raise ValueError(f"fisher layout {m.shape} does not match params {d.shape}")
    return float((0.5 * lam) * np.sum(m * d * d)), lam * m * d


def prox_penalty(C: np.ndarray, G: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    d = _diff(C, G)
    return float((0.5 * lam) * np.sum(d * d)), lam * d


def kd_loss(
    student_logits: np.ndarray, teacher_logits: np.ndarray, labels, cfg: KdConfig
) -> tuple[float, np.ndarray]:
    """alpha*T^2*CE(student) + (1-alpha)*KL(teacher_T || student_T), batch mean.

    The teacher is treated as a constant; the gradient is with respect to the
    student logits only.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"student logits {s.shape} and teacher logits {t.shape} differ")
    ce, dce = cross_entropy_grad(s, labels)
    T, a = cfg.T, cfg.alpha
    n = s.shape[0]
    log_ps = log_softmax(s, T)
    log_pt = log_softmax(t, T)
    pt = np.exp(log_pt)
    kl = float(np.sum(pt * (log_pt - log_ps)) / n)
    dkl = (np.exp(log_ps) - pt) / (T * n)
    w = a * T * T
    return w * ce + (1.0 - a) * kl, w * dce + (1.0 - a) * dkl


@dataclass(frozen=True)
class PaflContext:
    fisher: Optional[FisherDiag] = None
    teacher: Optional[np.ndarray] = None


def segment_loss(seg: Segment, spec: ModelSpec, global_params: np.ndarray, context: PaflContext) -> Loss:
    """Build the composite ``mu*CE + (1-mu)*D`` for one schedule segment.

    For ``none`` the loss is plain cross-entropy regardless of mu. For ``kd``
    D is the full distillation loss; for ``ewc`` and ``prox`` D is the
    parameter penalty alone.
    """
    mu = seg.mu
    if seg.kind == "none" or mu == 1.0:
        return Loss()

    if seg.kind == "kd":
        if context.teacher is None:
            raise ValueError("kd segment requires teacher parameters in the context")
        teacher, cfg = context.teacher, seg.kd

        def data(logits: np.ndarray, batch: Batch):
            v, g = kd_loss(logits, forward(teacher, spec, batch.features), batch.labels, cfg)
            if mu == 0.0:
                return v, g
            cv, cg = cross_entropy_grad(logits, batch.labels)
            return mu * cv + (1.0 - mu) * v, mu * cg + (1.0 - mu) * g

        return Loss(data=data)

    if seg.kind == "ewc":
        if context.fisher is None:
            raise ValueError("ewc segment requires a Fisher diagonal in the context")
        fisher, lam = context.fisher, seg.lam

        def pen(C: np.ndarray):
            return ewc_penalty(C, global_params, fisher, lam)

    else:
        lam = seg.lam

        def pen(C: np.ndarray):
            return prox_penalty(C, global_params, lam)

    if mu == 0.0:
        return Loss(data=_zero_data, penalty=pen)

    def data_scaled(logits: np.ndarray, batch: Batch):
        v, g = cross_entropy_grad(logits, batch.labels)
        return mu * v, mu * g

    def pen_scaled(C: np.ndarray):
        v, g = pen(C)
        return (1.0 - mu) * v, (1.0 - mu) * g

    return Loss(data=data_scaled, penalty=pen_scaled)


def _zero_data(logits: np.ndarray, batch: Batch):
    return 0.0, np.zeros_like(logits)


def pafl_loss(
    round: int,
    params: np.ndarray,
    global_params: np.ndarray,
    batch: Batch,
    schedule: PaflSchedule,
    spec: ModelSpec,
    context: PaflContext = PaflContext(),
) -> tuple[float, np.ndarray]:
    check_params(params, spec)
    check_params(global_params, spec)
    seg = schedule_lookup(schedule, round)
    return loss_and_grad(params, spec, batch, segment_loss(seg, spec, global_params, context))
