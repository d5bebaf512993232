"""Federated training loop: sampling, local training, fair aggregation,
evaluation and checkpointing."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import ClientDataset, FederatedDataset
from .losses import PaflContext, PaflSchedule, fisher_diagonal, segment_loss
from .model import (
    Batch,
    ModelSpec,
    NonFiniteLossError,
    SgdConfig,
    cross_entropy,
    forward,
    init_params,
    predict,
    train,
)
from .objectives import (
    ClientUpdate,
    ObjectiveSpec,
    aggregate,
    aggregation_weights,
    objective_value,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FEDSIM1\n"
CHECKPOINT_EVERY = 100

# SeedSequence tags keep the independent random streams apart
_TAG_SAMPLE, _TAG_LOCAL, _TAG_FISHER, _TAG_EVAL = 101, 102, 103, 104


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    clients_per_round: int = 10
    objective: ObjectiveSpec = ObjectiveSpec()
    local: SgdConfig = SgdConfig()
    schedule: PaflSchedule = PaflSchedule()
    seed: int = 0
    eval_every: int = 10
    loss_probe: str = "pre"
    fed_test_fraction: float = 1.0
    fisher_samples: Optional[int] = 256

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.loss_probe not in ("pre", "post"):
            raise ValueError("loss_probe must be 'pre' or 'post'")
        if not 0.0 < self.fed_test_fraction <= 1.0:
            raise ValueError("fed_test_fraction must be in (0, 1]")


@dataclass
class RoundRecord:
    round: int
    sampled_ids: list[int]
    pre_losses: list[float]
    weights: list[float]
    objective_value: float
    centralised_acc: Optional[float] = None
    errors: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ClientFailure:
    client_id: int
    message: str


def sample_clients(population_size: int, k: int, seed: int, round: int) -> list[int]:
    """Uniform sample without replacement from a (seed, round) stream, sorted."""
    if not 1 <= k <= population_size:
        raise ValueError(f"cannot sample {k} of {population_size} clients")
    rng = np.random.default_rng([seed, round, _TAG_SAMPLE])
    return sorted(int(i) for i in rng.choice(population_size, size=k, replace=False))


def local_train(
    client: ClientDataset, global_params: np.ndarray, spec: ModelSpec, cfg: FedConfig, round: int
) -> ClientUpdate:
    """Train from the received model under the round's scheduled loss.

    Raises ``NonFiniteLossError`` if the loss diverges.
    """
    pre_loss = cross_entropy(forward(global_params, spec, client.train.features), client.train.labels)
    seg = cfg.schedule.lookup(round)
    ctx = PaflContext()
    if seg.kind == "ewc" and seg.mu < 1.0:
        fseed = int(np.random.SeedSequence([cfg.seed, round, client.client_id, _TAG_FISHER]).generate_state(1)[0])
        ctx = PaflContext(fisher=fisher_diagonal(global_params, spec, client.train, cfg.fisher_samples, fseed))
    elif seg.kind == "kd" and seg.mu < 1.0:
        ctx = PaflContext(teacher=global_params)
    loss = segment_loss(seg, spec, global_params, ctx)
    rng = np.random.default_rng([cfg.seed, round, client.client_id, _TAG_LOCAL])
    final = train(global_params, spec, client.train, cfg.local, rng, loss)
    if cfg.loss_probe == "post":
        pre_loss = cross_entropy(forward(final, spec, client.train.features), client.train.labels)
    return ClientUpdate(client.client_id, final - global_params, pre_loss, client.n_k)


def _train_task(args) -> Union[ClientUpdate, ClientFailure]:
    client, global_params, spec, cfg, round = args
    try:
        return local_train(client, global_params, spec, cfg, round)
    except (NonFiniteLossError, FloatingPointError) as exc:
        return ClientFailure(client.client_id, str(exc))


def accuracy_pct(params: np.ndarray, spec: ModelSpec, test: Batch) -> Optional[float]:
    if len(test) == 0:
        return None
    return 100.0 * float(np.mean(predict(params, spec, test.features) == test.labels))


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: np.ndarray, next_round: int, seed: int, spec: ModelSpec) -> None:
    """Atomically write a ``FEDSIM1`` checkpoint.

    Layout: the magic line, one line of JSON header, then the parameters as
    little-endian float64. The random streams are keyed on (seed, round), so
    the seed plus the next round index fully restores the RNG position.
    """
    path = Path(path)
    header = {
        "version": 1,
        "round": int(next_round),
        "seed": int(seed),
        "rng": {"kind": "seedsequence", "key": [int(seed), int(next_round)]},
        "layer_sizes": list(spec.layer_sizes),
        "activation": spec.activation,
        "n_params": int(params.size),
        "dtype": "<f8",
    }
    blob = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n"
    blob += np.asarray(params, dtype="<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a FEDSIM1 checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1 :]
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {params.size}")
    return params, header


# --- training loop -------------------------------------------------------------


def run_training(
    dataset: FederatedDataset,
    spec: ModelSpec,
    cfg: FedConfig,
    workers: int = 1,
    checkpoint_path=None,
    init: Optional[np.ndarray] = None,
    start_round: int = 0,
) -> tuple[np.ndarray, list[RoundRecord]]:
    """Run rounds ``start_round .. cfg.rounds-1`` and return the final model.

    Local training may fan out to ``workers`` processes; the reduction always
    happens here in client-id order, so results do not depend on ``workers``.
    """
    m = dataset.m
    if cfg.clients_per_round > m:
        raise ValueError(f"clients_per_round={cfg.clients_per_round} exceeds population size {m}")
    params = init_params(spec, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    history: list[RoundRecord] = []
    eval_set = _eval_subset(dataset.fed_test, cfg)

    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(start_round, cfg.rounds):
            ids = sample_clients(m, cfg.clients_per_round, cfg.seed, rnd)
            tasks = [(dataset.clients[i], params, spec, cfg, rnd) for i in ids]
            results = list(pool.map(_train_task, tasks)) if pool else [_train_task(t) for t in tasks]
            updates = [r for r in results if isinstance(r, ClientUpdate)]
            errors = {r.client_id: r.message for r in results if isinstance(r, ClientFailure)}
            for cid, msg in errors.items():
                log.warning("round %d: client %d dropped: %s", rnd, cid, msg)

            if updates:
                weights = aggregation_weights(updates, cfg.objective)
                n = np.array([u.n_k for u in updates], dtype=np.float64)
                obj = objective_value([u.pre_loss for u in updates], n / n.sum(), cfg.objective)
                params = aggregate(params, updates, weights, cfg.objective.eta)
            else:
                weights, obj = np.zeros(0), float("nan")

            rec = RoundRecord(
                round=rnd,
                sampled_ids=[u.client_id for u in updates],
                pre_losses=[u.pre_loss for u in updates],
                weights=[float(w) for w in weights],
                objective_value=obj,
                errors=errors,
            )
            last = rnd == cfg.rounds - 1
            if (rnd + 1) % cfg.eval_every == 0 or last:
                rec.centralised_acc = accuracy_pct(params, spec, eval_set)
                log.info("round %d: centralised accuracy %s", rnd, rec.centralised_acc)
            history.append(rec)
            if checkpoint_path is not None and ((rnd + 1) % CHECKPOINT_EVERY == 0 or last):
                save_checkpoint(checkpoint_path, params, rnd + 1, cfg.seed, spec)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path is not None and start_round >= cfg.rounds:
        save_checkpoint(checkpoint_path, params, start_round, cfg.seed, spec)
    return params, history


def _eval_subset(test: Batch, cfg: FedConfig) -> Batch:
    if cfg.fed_test_fraction >= 1.0 or len(test) == 0:
        return test
    k = max(1, int(round(cfg.fed_test_fraction * len(test))))
    idx = np.random.default_rng([cfg.seed, _TAG_EVAL]).permutation(len(test))[:k]
    return test.subset(np.sort(idx))


def majority_baseline_pct(labels: Sequence[int]) -> float:
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    return 100.0 * counts.max() / counts.sum()
