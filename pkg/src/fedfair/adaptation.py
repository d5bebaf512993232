"""Post-training personalisation of the federated model on each client, and
the purely local baseline models."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import ClientDataset
from .losses import KdConfig, fisher_diagonal, kd_loss, ewc_penalty
from .model import Batch, Loss, ModelSpec, SgdConfig, forward, init_params, train

METHODS = ("ft", "fb", "ewc", "kd")

_TAG_ADAPT, _TAG_LOCAL_INIT, _TAG_LOCAL_TRAIN, _TAG_FISHER = 201, 202, 203, 204


def _rng(seed: int, client_id: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, tag])


def adapt_finetune(
    client: ClientDataset, start: np.ndarray, spec: ModelSpec, cfg: SgdConfig, seed: int = 0
) -> np.ndarray:
    return train(start, spec, client.train, cfg, _rng(seed, client.client_id, _TAG_ADAPT))


def adapt_freezebase(
    client: ClientDataset, start: np.ndarray, spec: ModelSpec, cfg: SgdConfig, seed: int = 0
) -> np.ndarray:
    """Fine-tune only the final affine layer; everything else stays bit-identical."""
    rng = _rng(seed, client.client_id, _TAG_ADAPT)
    return train(start, spec, client.train, cfg, rng, mask=spec.top_layer_mask())


def adapt_ewc(
    client: ClientDataset,
    start: np.ndarray,
    spec: ModelSpec,
    cfg: SgdConfig,
    lam: float = 5000.0,
    seed: int = 0,
    fisher_samples: Optional[int] = None,
) -> np.ndarray:
    """Cross-entropy plus an EWC penalty anchored at ``start``.

    The Fisher diagonal is computed once, on the client's training data at
    ``start``, with its own random stream.
    """
    fseed = int(np.random.SeedSequence([seed, client.client_id, _TAG_FISHER]).generate_state(1)[0])
    fisher = fisher_diagonal(start, spec, client.train, fisher_samples, fseed)
    anchor = np.array(start, dtype=np.float64)
    loss = Loss(penalty=lambda C: ewc_penalty(C, anchor, fisher, lam))
    return train(start, spec, client.train, cfg, _rng(seed, client.client_id, _TAG_ADAPT), loss)


def adapt_kd(
    client: ClientDataset,
    start: np.ndarray,
    spec: ModelSpec,
    cfg: SgdConfig,
    kd: KdConfig = KdConfig(),
    seed: int = 0,
) -> np.ndarray:
    """Distil from the frozen ``start`` model into a student initialised at it."""
    teacher = np.array(start, dtype=np.float64)

    def data(logits: np.ndarray, batch: Batch):
        return kd_loss(logits, forward(teacher, spec, batch.features), batch.labels, kd)

    return train(start, spec, client.train, cfg, _rng(seed, client.client_id, _TAG_ADAPT), Loss(data=data))


def local_init_seed(seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([seed, client_id, _TAG_LOCAL_INIT]).generate_state(1)[0])


def train_local_only(client: ClientDataset, spec: ModelSpec, cfg: SgdConfig, seed: int = 0) -> np.ndarray:
    """A model trained from scratch on this client's training data alone."""
    start = init_params(spec, local_init_seed(seed, client.client_id))
    return train(start, spec, client.train, cfg, _rng(seed, client.client_id, _TAG_LOCAL_TRAIN))


def adapt(
    method: str,
    client: ClientDataset,
    start: np.ndarray,
    spec: ModelSpec,
    cfg: SgdConfig,
    seed: int = 0,
    ewc_lambda: float = 5000.0,
    kd: KdConfig = KdConfig(),
    fisher_samples: Optional[int] = None,
) -> np.ndarray:
    if method == "ft":
        return adapt_finetune(client, start, spec, cfg, seed)
    if method == "fb":
        return adapt_freezebase(client, start, spec, cfg, seed)
    if method == "ewc":
        return adapt_ewc(client, start, spec, cfg, ewc_lambda, seed, fisher_samples)
    if method == "kd":
        return adapt_kd(client, start, spec, cfg, kd, seed)
    raise ValueError(f"unknown adaptation method {method!r}; expected one of {METHODS}")
