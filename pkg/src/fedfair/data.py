"""Federated dataset construction: synthetic clients, CSV ingestion, Dirichlet
label-skew partitioning and per-client train/local-test/federated-test splits."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Batch

_EPS = 1e-9
_CLIENT_FILE = re.compile(r"^client_(\d+)\.csv$")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    local_test_frac: float = 0.1
    fed_test_frac: float = 0.2

    def __post_init__(self) -> None:
        fr = (self.train_frac, self.local_test_frac, self.fed_test_frac)
        if any(not 0.0 <= f <= 1.0 for f in fr):
            raise ValueError(f"split fractions must lie in [0, 1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Batch
    local_test: Batch

    def __post_init__(self) -> None:
        if len(self.train) < 1:
            raise ValueError(f"client {self.client_id} has no training samples")

    @property
    def n_k(self) -> int:
        return len(self.train)

    @property
    def has_local_test(self) -> bool:
        return len(self.local_test) > 0


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientDataset, ...]
    fed_test: Batch
    class_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", tuple(self.clients))
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate client ids")

    @property
    def n(self) -> int:
        return sum(c.n_k for c in self.clients)

    @property
    def m(self) -> int:
        return len(self.clients)

    @property
    def proportions(self) -> np.ndarray:
        n_k = np.array([c.n_k for c in self.clients], dtype=np.float64)
        return n_k / n_k.sum()

    @property
    def dims(self) -> int:
        return self.clients[0].train.features.shape[1]


def largest_remainder(weights: Sequence[float], total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Remaining units go to the largest fractional parts, ties to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    exact = w * total
    counts = np.floor(exact).astype(np.int64)
    rem = total - int(counts.sum())
    if rem > 0:
        frac = exact - counts
        order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
        for i in order[:rem]:
            counts[i] += 1
    return counts


def dirichlet_partition(labels, num_clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Split sample indices across clients with Dirichlet(alpha) class mixtures.

    Client sizes are as equal as possible. Each client draws its own class
    proportions, converts them to integer targets and takes samples without
    replacement from per-class pools; when a pool runs dry the shortfall is
    filled from the client's next most preferred classes that still have
    samples. Every index is assigned exactly once.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > n:
        raise ValueError(f"cannot split {n} samples across {num_clients} clients")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    classes = int(labels.max()) + 1
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(classes)]
    sizes = np.full(num_clients, n // num_clients)
    sizes[: n % num_clients] += 1

    out = []
    for k in range(num_clients):
        props = rng.dirichlet(np.full(classes, alpha))
        target = largest_remainder(props, int(sizes[k]))
        taken: list[int] = []
        short = 0
        for c in range(classes):
            got = min(int(target[c]), len(pools[c]))
            taken.extend(pools[c][:got])
            del pools[c][:got]
            short += int(target[c]) - got
        for c in sorted(range(classes), key=lambda c: (-props[c], c)):
            if short == 0:
                break
            got = min(short, len(pools[c]))
            taken.extend(pools[c][:got])
            del pools[c][:got]
            short -= got
        out.append(np.sort(np.array(taken, dtype=np.int64)))
    return out


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    local = int(math.floor(spec.local_test_frac * n + _EPS))
    fed = int(math.floor(spec.fed_test_frac * n + _EPS))
    return n - local - fed, local, fed


def split_client(samples: Batch, spec: SplitSpec, ordered: bool, seed: int) -> tuple[Batch, Batch, Batch]:
    """Cut into (train, local_test, fed_test) with floor-sized test parts.

    Ordered splits keep the input order (prefix to train); otherwise rows are
    shuffled with ``seed`` first.
    """
    n = len(samples)
    if n < 1:
        raise ValueError("cannot split an empty client")
    n_train, n_local, _ = split_sizes(n, spec)
    idx = np.arange(n) if ordered else np.random.default_rng(seed).permutation(n)
    return (
        samples.subset(idx[:n_train]),
        samples.subset(idx[n_train : n_train + n_local]),
        samples.subset(idx[n_train + n_local :]),
    )


def _client_seed(seed: int, client_id: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, client_id, tag])


def build_federated(
    per_client: Sequence[tuple[int, Batch]],
    spec: SplitSpec,
    class_count: int,
    ordered: bool = False,
    seed: int = 0,
    extra_test: Optional[Batch] = None,
) -> FederatedDataset:
    """Split each client's samples and pool the federated-test parts by client id."""
    clients, fed_parts = [], []
    for cid, samples in sorted(per_client, key=lambda p: p[0]):
        split_seed = int(_client_seed(seed, cid, 1).generate_state(1)[0])
        train, local, fed = split_client(samples, spec, ordered, split_seed)
        clients.append(ClientDataset(cid, train, local))
        fed_parts.append(fed)
    dims = per_client[0][1].features.shape[1]
    if extra_test is not None:
        fed_parts.append(extra_test)
    return FederatedDataset(tuple(clients), Batch.concat(fed_parts, dims), class_count)


def class_means(classes: int, dims: int, separation: float, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 7]).normal(0.0, separation, size=(classes, dims))


def _draw(means: np.ndarray, labels: np.ndarray, noise: float, rng: np.random.Generator) -> Batch:
    X = means[labels] + rng.normal(0.0, noise, size=(len(labels), means.shape[1]))
    return Batch(X, labels)


def synth_generate(
    num_clients: int,
    classes: int,
    dims: int,
    per_client_range: tuple[int, int],
    heterogeneity: float,
    seed: int,
    split: SplitSpec = SplitSpec(),
    ordered: bool = False,
    separation: float = 1.0,
    noise: float = 1.0,
    global_test_size: int = 0,
) -> FederatedDataset:
    """Gaussian class clusters with controllable label skew.

    Client k's label distribution is ``(1-h)*uniform + h*onehot(k % classes)``
    turned into exact integer counts, so h=0 gives balanced clients and h=1
    single-class clients. ``global_test_size`` adds a balanced global test set
    to the federated test pool.
    """
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must be in [0, 1]")
    lo, hi = per_client_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad per-client range {per_client_range}")
    means = class_means(classes, dims, separation, seed)
    uniform = np.full(classes, 1.0 / classes)
    per_client = []
    for k in range(num_clients):
        rng = np.random.default_rng(_client_seed(seed, k, 0))
        n_k = int(rng.integers(lo, hi + 1))
        mix = (1.0 - heterogeneity) * uniform
        mix[k % classes] += heterogeneity
        counts = largest_remainder(mix, n_k)
        labels = rng.permutation(np.repeat(np.arange(classes), counts))
        per_client.append((k, _draw(means, labels, noise, rng)))
    extra = None
    if global_test_size:
        rng = np.random.default_rng([seed, 13])
        labels = rng.permutation(np.repeat(np.arange(classes), largest_remainder(uniform, global_test_size)))
        extra = _draw(means, labels, noise, rng)
    return build_federated(per_client, split, classes, ordered, seed, extra)


def synth_pool(
    samples: int, classes: int, dims: int, seed: int, separation: float = 1.0, noise: float = 1.0, stream: int = 0
) -> Batch:
    """A balanced, shuffled pool of Gaussian-cluster samples.

    Cluster means depend on ``seed`` only; ``stream`` selects independent draws.
    """
    means = class_means(classes, dims, separation, seed)
    rng = np.random.default_rng([seed, 11, stream])
    labels = rng.permutation(np.repeat(np.arange(classes), largest_remainder(np.ones(classes), samples)))
    return _draw(means, labels, noise, rng)


def dirichlet_federated(
    pool: Batch, num_clients: int, alpha: float, seed: int, split: SplitSpec = SplitSpec(), ordered: bool = False
) -> FederatedDataset:
    parts = dirichlet_partition(pool.labels, num_clients, alpha, seed)
    classes = int(pool.labels.max()) + 1
    return build_federated([(k, pool.subset(idx)) for k, idx in enumerate(parts)], split, classes, ordered, seed)


# --- CSV ---------------------------------------------------------------------


def read_csv_batch(path: Path, dims: Optional[int] = None) -> Batch:
    """Read ``f0,...,f{d-1},label`` rows. Errors name the file and line."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (missing header)") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise DataFormatError(f"{path}:1: header must be f0,...,f{{d-1}},label, got {','.join(header)}")
        if dims is not None and d != dims:
            raise DataFormatError(f"{path}:1: inconsistent feature width {d}, expected {dims}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                x = [float(c) for c in row[:-1]]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: malformed feature value") from None
            if not all(math.isfinite(v) for v in x):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            lab = row[-1].strip()
            if not lab.isdigit():
                raise DataFormatError(f"{path}:{lineno}: unknown label {lab!r} (need a non-negative integer)")
            feats.append(x)
            labels.append(int(lab))
    return Batch(np.array(feats, dtype=np.float64).reshape(len(feats), d), np.array(labels, dtype=np.int64))


def write_csv_batch(path: Path, batch: Batch) -> None:
    d = batch.features.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for x, y in zip(batch.features, batch.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv_clients(
    dir_path, spec: SplitSpec, min_samples: int = 1, ordered: bool = True, seed: int = 0
) -> FederatedDataset:
    """Load ``client_<id>.csv`` files (plus optional ``fed_test.csv``).

    Clients with fewer than ``min_samples`` rows are dropped.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DataFormatError(f"{root}: not a directory")
    files = []
    for p in root.iterdir():
        m = _CLIENT_FILE.match(p.name)
        if m:
            files.append((int(m.group(1)), p))
    if not files:
        raise DataFormatError(f"{root}: no clients (expected client_<id>.csv files)")
    files.sort()
    dims = None
    per_client = []
    for cid, path in files:
        b = read_csv_batch(path, dims)
        dims = b.features.shape[1]
        if len(b) >= max(min_samples, 1):
            per_client.append((cid, b))
    if not per_client:
        raise DataFormatError(f"{root}: no clients with at least {min_samples} samples")
    class_count = max(int(b.labels.max()) for _, b in per_client) + 1
    extra = None
    test_path = root / "fed_test.csv"
    if test_path.exists():
        extra = read_csv_batch(test_path, dims)
        if len(extra) and int(extra.labels.max()) >= class_count:
            raise DataFormatError(
                f"{test_path}: unknown label {int(extra.labels.max())} not present in any client file"
            )
    return build_federated(per_client, spec, max(class_count, 2), ordered, seed, extra)
