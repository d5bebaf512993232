"""End-to-end pipeline: dataset → federated training → local baselines and
adaptation → per-client evaluation → fairness reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adaptation import adapt, train_local_only
from .config import ExperimentConfig, Variant
from .data import FederatedDataset, dirichlet_federated, load_csv_clients, synth_generate, synth_pool
from .metrics import (
    FED_METHOD,
    ClientEval,
    accuracy,
    build_report,
    write_clients_csv,
    write_report_csv,
)
from .model import ModelSpec
from .objectives import weight_entropy
from .runtime import RoundRecord, load_checkpoint, run_training

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("objective", "round", "centralised_acc", "objective_value", "weight_entropy")


class Artifacts:
    """Files are written as ``<name>.partial`` and renamed only on :meth:`commit`."""

    def __init__(self, out_dir) -> None:
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        return self.dir / f"{name}.partial"

    def final(self, name: str) -> Path:
        return self.dir / name

    def commit(self) -> None:
        for name in self.names:
            part = self.dir / f"{name}.partial"
            if part.exists():
                os.replace(part, self.dir / name)


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    d = cfg.data
    split = cfg.split
    if d["source"] == "csv":
        return load_csv_clients(d["csv_dir"], split, d["min_samples"], d["ordered"], cfg.seed)
    if d["source"] == "dirichlet":
        pool = synth_pool(d["samples"], d["classes"], d["dims"], cfg.seed, d["separation"], d["noise"])
        return dirichlet_federated(pool, d["num_clients"], d["alpha"], cfg.seed, split, d["ordered"])
    return synth_generate(
        d["num_clients"], d["classes"], d["dims"], (d["per_client_min"], d["per_client_max"]),
        d["heterogeneity"], cfg.seed, split, d["ordered"], d["separation"], d["noise"], d["global_test_size"],
    )


def model_spec(cfg: ExperimentConfig, dataset: FederatedDataset) -> ModelSpec:
    return ModelSpec((dataset.dims, *cfg.hidden, dataset.class_count))


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._+-]+", "_", name)


def checkpoint_name(cfg: ExperimentConfig, variant: Variant) -> str:
    return "checkpoint.bin" if len(cfg.variants) == 1 else f"checkpoint-{slug(variant.name)}.bin"


def _num(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def write_history(path, histories: dict[str, list[RoundRecord]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for name, hist in histories.items():
            for rec in hist:
                w.writerow([name, rec.round, _num(rec.centralised_acc), _num(rec.objective_value),
                            _num(weight_entropy(rec.weights))])


def write_manifest(path, cfg: ExperimentConfig, command: str, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.resolved,
        "versions": {"fedfair": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_variants(
    cfg: ExperimentConfig, dataset: FederatedDataset, arts: Artifacts, workers: int = 1
) -> dict[str, np.ndarray]:
    spec = model_spec(cfg, dataset)
    finals: dict[str, np.ndarray] = {}
    histories: dict[str, list[RoundRecord]] = {}
    for v in cfg.variants:
        log.info("training %s", v.name)
        ckpt = arts.path(checkpoint_name(cfg, v))
        params, hist = run_training(dataset, spec, cfg.fed_config(v), workers, ckpt)
        finals[v.name] = params
        histories[v.name] = hist
    write_history(arts.path("history.csv"), histories)
    return finals


def load_trained(cfg: ExperimentConfig, checkpoint_dir) -> dict[str, np.ndarray]:
    out = {}
    for v in cfg.variants:
        path = Path(checkpoint_dir) / checkpoint_name(cfg, v)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path} for variant {v.name}")
        out[v.name], _ = load_checkpoint(path)
    return out


def _adapt_client(args):
    client, spec, cfg, finals = args
    a = cfg.adapt
    local = train_local_only(client, spec, a.sgd, cfg.seed)
    local_acc = accuracy(local, spec, client.local_test)
    evals = {}
    for name, fed in finals.items():
        ev = ClientEval(client.client_id, accuracy(fed, spec, client.local_test), local_acc)
        for method in a.methods:
            adapted = adapt(method, client, fed, spec, a.sgd, cfg.seed, a.ewc_lambda, a.kd, a.fisher_samples)
            ev.adapted_acc[method] = accuracy(adapted, spec, client.local_test)
        evals[name] = ev
    return evals


def evaluate_variants(
    cfg: ExperimentConfig, dataset: FederatedDataset, finals: dict[str, np.ndarray], workers: int = 1
) -> dict[str, list[ClientEval]]:
    """Local baselines, adaptation and per-client evaluation for every variant.

    Clients without a local test set are skipped; ``adapt.max_clients`` keeps
    the lowest client ids so every table covers the same clients.
    """
    spec = model_spec(cfg, dataset)
    clients = [c for c in dataset.clients if c.has_local_test]
    if cfg.adapt.max_clients:
        clients = clients[: cfg.adapt.max_clients]
    tasks = [(c, spec, cfg, finals) for c in clients]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_adapt_client, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_adapt_client(t) for t in tasks]
    return {name: [r[name] for r in results] for name in finals}


def write_evaluation(cfg: ExperimentConfig, evals: dict[str, list[ClientEval]], arts: Artifacts) -> None:
    methods = [FED_METHOD, *cfg.adapt.methods]
    write_clients_csv(arts.path("clients.csv"), evals, methods)
    write_report_csv(arts.path("report.csv"), build_report(evals, methods, "relative"))
    write_report_csv(arts.path("report_absolute.csv"), build_report(evals, methods, "absolute"))


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int = 1) -> None:
    arts = Artifacts(out_dir)
    dataset = build_dataset(cfg)
    finals = train_variants(cfg, dataset, arts, workers)
    evals = evaluate_variants(cfg, dataset, finals, workers)
    write_evaluation(cfg, evals, arts)
    write_manifest(arts.path("manifest.json"), cfg, "run", {"clients": dataset.m, "variants": list(finals)})
    arts.commit()
