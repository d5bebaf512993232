"""Per-client accuracy evaluation and population fairness statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import FederatedDataset
from .model import Batch, ModelSpec, predict

REPORT_COLUMNS = ("objective", "adapt", "avg_pct", "acc_lt_0", "b10_pct", "w10_pct", "var_avg", "var_b", "var_w")
CLIENT_COLUMNS = ("objective", "client_id", "method", "acc", "local_acc", "rel_acc")
FED_METHOD = "fed"


class ReportError(ValueError):
    pass


def accuracy(params: np.ndarray, spec: ModelSpec, test: Batch) -> Optional[float]:
    """Percent correct under argmax; ``None`` for an empty test set."""
    if len(test) == 0:
        return None
    correct = int(np.sum(predict(params, spec, test.features) == test.labels))
    return 100.0 * correct / len(test)


def relative_accuracy(model_acc: Optional[float], local_acc: Optional[float]) -> Optional[float]:
    if model_acc is None or local_acc is None:
        return None
    return model_acc - local_acc


@dataclass(frozen=True)
class FairnessReport:
    avg_pct: float
    count_neg: int
    b10_pct: float
    w10_pct: float
    var_avg: float
    var_b: float
    var_w: float


def decile_size(n: int) -> int:
    return -(-n // 10)


def population_stats(values: Sequence[float], ids: Optional[Sequence[int]] = None) -> FairnessReport:
    """Mean, count below zero, and best/worst-decile means with population variances.

    Values are ranked descending with ascending id as the tie-break; each
    decile holds ceil(N/10) clients.
    """
    v = [float(x) for x in values]
    if not v:
        raise ValueError("population_stats needs at least one value")
    ids = list(range(len(v))) if ids is None else list(ids)
    order = sorted(range(len(v)), key=lambda i: (-v[i], ids[i]))
    ranked = np.array([v[i] for i in order])
    k = decile_size(len(v))
    best, worst = ranked[:k], ranked[-k:]
    arr = np.array(v)
    return FairnessReport(
        avg_pct=float(arr.mean()),
        count_neg=int(np.sum(arr < 0)),
        b10_pct=float(best.mean()),
        w10_pct=float(worst.mean()),
        var_avg=float(arr.var()),
        var_b=float(best.var()),
        var_w=float(worst.var()),
    )


@dataclass
class ClientEval:
    client_id: int
    fed_acc: float
    local_acc: float
    adapted_acc: dict[str, float] = field(default_factory=dict)

    def acc(self, method: str) -> float:
        return self.fed_acc if method == FED_METHOD else self.adapted_acc[method]

    def rel_acc(self, method: str = FED_METHOD) -> float:
        return self.acc(method) - self.local_acc


def evaluate_clients(
    dataset: FederatedDataset,
    spec: ModelSpec,
    fed_params: np.ndarray,
    adapted: Mapping[str, Mapping[int, np.ndarray]],
    local_models: Mapping[int, np.ndarray],
) -> list[ClientEval]:
    """Evaluate every client that has a local test set and a local baseline."""
    out = []
    for c in dataset.clients:
        if not c.has_local_test or c.client_id not in local_models:
            continue
        ev = ClientEval(
            c.client_id,
            accuracy(fed_params, spec, c.local_test),
            accuracy(local_models[c.client_id], spec, c.local_test),
        )
        for method, models in adapted.items():
            if c.client_id in models:
                ev.adapted_acc[method] = accuracy(models[c.client_id], spec, c.local_test)
        out.append(ev)
    return out


@dataclass(frozen=True)
class ReportRow:
    objective: str
    adapt: str
    stats: FairnessReport


def build_report(
    evals: Mapping[str, Sequence[ClientEval]], methods: Sequence[str], mode: str = "relative"
) -> list[ReportRow]:
    """One row per (objective, method); ``fed`` is the unadapted federated model.

    Relative rows use model-minus-local accuracy, absolute rows the raw
    accuracy. Absolute tables also get a ``local`` row per objective. Every row
    must cover the same client ids.
    """
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown report mode {mode!r}")
    reference: Optional[set[int]] = None
    rows = []
    for objective, client_evals in evals.items():
        row_methods = list(methods) + (["local"] if mode == "absolute" else [])
        for method in row_methods:
            ids, vals = [], []
            for ev in client_evals:
                if method == "local":
                    val = ev.local_acc
                elif method != FED_METHOD and method not in ev.adapted_acc:
                    continue
                else:
                    val = ev.rel_acc(method) if mode == "relative" else ev.acc(method)
                ids.append(ev.client_id)
                vals.append(val)
            present = set(ids)
            if reference is None:
                reference = present
            elif present != reference:
                diff = sorted(present ^ reference)
                raise ReportError(f"{objective}/{method}: client set differs from other rows at ids {diff}")
            if not vals:
                raise ReportError(f"{objective}/{method}: no clients to report")
            label = objective if method == FED_METHOD else method
            rows.append(ReportRow(objective, label, population_stats(vals, ids)))
    return rows


def fmt(x: float) -> str:
    s = f"{x:.3f}"
    return "0.000" if s == "-0.000" else s


def write_report_csv(path, rows: Iterable[ReportRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            s = r.stats
            w.writerow(
                [r.objective, r.adapt, fmt(s.avg_pct), s.count_neg, fmt(s.b10_pct), fmt(s.w10_pct),
                 fmt(s.var_avg), fmt(s.var_b), fmt(s.var_w)]
            )


def write_clients_csv(path, evals: Mapping[str, Sequence[ClientEval]], methods: Sequence[str]) -> None:
    """Long format: one line per (objective, client, method).

    Accuracies are written with ``repr`` so the file round-trips exactly.
    """
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLIENT_COLUMNS)
        for objective, client_evals in evals.items():
            for ev in sorted(client_evals, key=lambda e: e.client_id):
                for method in methods:
                    if method != FED_METHOD and method not in ev.adapted_acc:
                        continue
                    acc = ev.acc(method)
                    w.writerow([objective, ev.client_id, method, repr(acc), repr(ev.local_acc), repr(acc - ev.local_acc)])


def read_clients_csv(path) -> tuple[dict[str, list[ClientEval]], list[str]]:
    """Inverse of :func:`write_clients_csv`; returns evals and methods in file order."""
    path = Path(path)
    evals: dict[str, dict[int, ClientEval]] = {}
    methods: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CLIENT_COLUMNS:
            raise ReportError(f"{path}:1: expected header {','.join(CLIENT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CLIENT_COLUMNS):
                raise ReportError(f"{path}:{lineno}: expected {len(CLIENT_COLUMNS)} fields, got {len(row)}")
            objective, cid, method, acc, local, _rel = (c.strip() for c in row)
            try:
                cid_i, acc_f, local_f = int(cid), float(acc), float(local)
            except ValueError:
                raise ReportError(f"{path}:{lineno}: malformed number") from None
            if not (math.isfinite(acc_f) and math.isfinite(local_f)):
                raise ReportError(f"{path}:{lineno}: non-finite accuracy")
            if method not in methods:
                methods.append(method)
            per_obj = evals.setdefault(objective, {})
            ev = per_obj.get(cid_i)
            if ev is None:
                ev = per_obj[cid_i] = ClientEval(cid_i, math.nan, local_f)
            elif ev.local_acc != local_f:
                raise ReportError(f"{path}:{lineno}: client {cid_i} has conflicting local accuracies")
            if method == FED_METHOD:
                ev.fed_acc = acc_f
            else:
                ev.adapted_acc[method] = acc_f
    for objective, per_obj in evals.items():
        missing = sorted(cid for cid, ev in per_obj.items() if math.isnan(ev.fed_acc))
        if missing and FED_METHOD in methods:
            raise ReportError(f"{path}: objective {objective} lacks '{FED_METHOD}' rows for clients {missing}")
    return {o: list(d.values()) for o, d in evals.items()}, methods
