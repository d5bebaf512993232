import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfair.data import (
    DataFormatError,
    SplitSpec,
    build_federated,
    dirichlet_federated,
    dirichlet_partition,
    largest_remainder,
    load_csv_clients,
    read_csv_batch,
    split_client,
    split_sizes,
    synth_generate,
    synth_pool,
    write_csv_batch,
)
from fedfair.model import Batch


def _seq_batch(n, dims=2):
    return Batch(np.arange(n * dims, dtype=float).reshape(n, dims), np.arange(n) % 3)


@pytest.mark.parametrize("n, spec, expected", [
    (10, SplitSpec(0.9, 0.1, 0.0), (9, 1, 0)),
    (10, SplitSpec(0.7, 0.1, 0.2), (7, 1, 2)),
    (1, SplitSpec(0.7, 0.1, 0.2), (1, 0, 0)),
    (19, SplitSpec(0.7, 0.1, 0.2), (15, 1, 3)),
    (30, SplitSpec(0.7, 0.1, 0.2), (21, 3, 6)),
])
def test_split_sizes(n, spec, expected):
    assert split_sizes(n, spec) == expected


def test_ordered_split_keeps_prefix_for_training():
    train, local, fed = split_client(_seq_batch(10), SplitSpec(0.9, 0.1, 0.0), ordered=True, seed=0)
    assert train.features[:, 0].tolist() == [float(2 * i) for i in range(9)]
    assert local.features[:, 0].tolist() == [18.0]
    assert len(fed) == 0


def test_shuffled_split_is_seeded_partition():
    b = _seq_batch(20)
    parts = split_client(b, SplitSpec(), ordered=False, seed=4)
    again = split_client(b, SplitSpec(), ordered=False, seed=4)
    rows = sorted(np.concatenate([p.features[:, 0] for p in parts]).tolist())
    assert rows == b.features[:, 0].tolist()
    assert all(p.features.tobytes() == q.features.tobytes() for p, q in zip(parts, again))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.8, 0.1, 0.2)
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.1, -0.1)


def test_build_federated_pools_fed_test_by_client_id():
    per_client = [(2, _seq_batch(10)), (0, Batch(np.full((10, 2), -1.0), np.zeros(10)))]
    ds = build_federated(per_client, SplitSpec(0.8, 0.0, 0.2), 3, ordered=True)
    assert [c.client_id for c in ds.clients] == [0, 2]
    assert ds.fed_test.features[:2, 0].tolist() == [-1.0, -1.0]
    assert ds.fed_test.features[2:, 0].tolist() == [16.0, 18.0]
    assert not ds.clients[0].has_local_test
    np.testing.assert_allclose(ds.proportions, [0.5, 0.5])
    assert (ds.n, ds.m, ds.dims) == (16, 2, 2)


def test_largest_remainder_ties_to_lower_index():
    assert largest_remainder([1, 1, 1], 2).tolist() == [1, 1, 0]
    # exact shares (1.5, 0.75, 0.75): the two 0.75 remainders win
    assert largest_remainder([0.5, 0.25, 0.25], 3).tolist() == [1, 1, 1]
    assert largest_remainder([1, 1, 1, 1], 6).tolist() == [2, 2, 1, 1]
    assert largest_remainder([0.2, 0.8], 10).tolist() == [2, 8]


@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=12), st.integers(0, 500))
def test_largest_remainder_properties(weights, total):
    counts = largest_remainder(weights, total)
    exact = np.asarray(weights) / np.sum(weights) * total
    assert counts.sum() == total
    assert np.all(np.abs(counts - exact) < 1.0 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=5, max_size=200), st.integers(1, 5),
       st.floats(0.05, 100.0), st.integers(0, 2**16))
def test_dirichlet_partition_assigns_every_index_once(labels, clients, alpha, seed):
    labels = np.array(labels)
    parts = dirichlet_partition(labels, clients, alpha, seed)
    assert len(parts) == clients
    assert sorted(np.concatenate(parts).tolist()) == list(range(len(labels)))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_dirichlet_partition_deterministic_and_skewed():
    labels = np.repeat(np.arange(10), 200)
    a = dirichlet_partition(labels, 10, 0.1, seed=1)
    b = dirichlet_partition(labels, 10, 0.1, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    share = np.mean([np.bincount(labels[p], minlength=10).max() / len(p) for p in a])
    assert share > 0.4


def test_dirichlet_partition_validation():
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 3, 1.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 1, 0.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 0, 1.0, 0)


def test_dirichlet_federated_builds_clients():
    pool = synth_pool(600, 4, 3, seed=2)
    ds = dirichlet_federated(pool, 6, 0.9, seed=2)
    assert ds.m == 6 and ds.class_count == 4
    assert ds.n + len(ds.fed_test) + sum(len(c.local_test) for c in ds.clients) == 600


def test_synth_pool_balanced_and_streams_differ():
    pool = synth_pool(100, 4, 3, seed=0)
    assert np.bincount(pool.labels).tolist() == [25, 25, 25, 25]
    other = synth_pool(100, 4, 3, seed=0, stream=1)
    assert not np.array_equal(pool.features, other.features)


def _label_counts(ds, k):
    c = ds.clients[k]
    labels = np.concatenate([c.train.labels, c.local_test.labels])
    return np.bincount(labels, minlength=ds.class_count)


def test_synth_generate_heterogeneity_extremes():
    single = synth_generate(6, 3, 2, (30, 30), 1.0, seed=0, split=SplitSpec(1.0, 0.0, 0.0))
    for k in range(6):
        counts = _label_counts(single, k)
        assert counts[k % 3] == 30 and counts.sum() == 30
    flat = synth_generate(6, 3, 2, (30, 30), 0.0, seed=0, split=SplitSpec(1.0, 0.0, 0.0))
    assert all(_label_counts(flat, k).tolist() == [10, 10, 10] for k in range(6))


def test_synth_generate_deterministic_with_global_test():
    a = synth_generate(5, 3, 2, (10, 20), 0.5, seed=9, global_test_size=30)
    b = synth_generate(5, 3, 2, (10, 20), 0.5, seed=9, global_test_size=30)
    assert a.fed_test.features.tobytes() == b.fed_test.features.tobytes()
    assert np.bincount(a.fed_test.labels[-30:]).tolist() == [10, 10, 10]
    assert all(10 * 0.7 <= c.n_k + len(c.local_test) <= 20 for c in a.clients)
    with pytest.raises(ValueError):
        synth_generate(5, 3, 2, (10, 5), 0.5, seed=0)
    with pytest.raises(ValueError):
        synth_generate(5, 3, 2, (10, 20), 1.5, seed=0)


# --- CSV ---------------------------------------------------------------------


def test_csv_round_trip_exact(tmp_path):
    b = Batch(np.random.default_rng(0).normal(size=(5, 3)), [0, 2, 1, 1, 0])
    path = tmp_path / "c.csv"
    write_csv_batch(path, b)
    back = read_csv_batch(path)
    assert back.features.tobytes() == b.features.tobytes()
    assert back.labels.tolist() == b.labels.tolist()


@pytest.mark.parametrize("body, fragment", [
    ("", "empty file"),
    ("x0,x1,label\n1,2,0\n", ":1: header"),
    ("f0,f1,label\n1,2\n", ":2: expected 3 fields"),
    ("f0,f1,label\n1,2,0\n1,abc,0\n", ":3: malformed"),
    ("f0,f1,label\n1,nan,0\n", ":2: non-finite"),
    ("f0,f1,label\n1,2,cat\n", ":2: unknown label 'cat'"),
    ("f0,f1,label\n1,2,-1\n", ":2: unknown label '-1'"),
])
def test_csv_errors_name_file_and_line(tmp_path, body, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataFormatError) as err:
        read_csv_batch(path)
    assert "bad.csv" in str(err.value) and fragment in str(err.value)


def _write_client(root, cid, n, label_offset=0, dims=2):
    b = Batch(np.full((n, dims), float(cid)), (np.arange(n) + label_offset) % 3)
    write_csv_batch(root / f"client_{cid}.csv", b)


def test_load_csv_clients_min_samples(tmp_path):
    _write_client(tmp_path, 0, 12)
    _write_client(tmp_path, 3, 5)
    _write_client(tmp_path, 7, 10)
    ds = load_csv_clients(tmp_path, SplitSpec(0.9, 0.1, 0.0), min_samples=10)
    assert [c.client_id for c in ds.clients] == [0, 7]
    assert ds.class_count == 3
    with pytest.raises(DataFormatError, match="no clients with at least 50"):
        load_csv_clients(tmp_path, SplitSpec(0.9, 0.1, 0.0), min_samples=50)


def test_load_csv_clients_fed_test_and_errors(tmp_path):
    with pytest.raises(DataFormatError, match="no clients"):
        load_csv_clients(tmp_path, SplitSpec())
    with pytest.raises(DataFormatError, match="not a directory"):
        load_csv_clients(tmp_path / "missing", SplitSpec())
    _write_client(tmp_path, 1, 10)
    write_csv_batch(tmp_path / "fed_test.csv", Batch(np.zeros((2, 2)), [0, 2]))
    ds = load_csv_clients(tmp_path, SplitSpec(0.9, 0.1, 0.0))
    assert len(ds.fed_test) == 2
    write_csv_batch(tmp_path / "fed_test.csv", Batch(np.zeros((1, 2)), [5]))
    with pytest.raises(DataFormatError, match="unknown label 5"):
        load_csv_clients(tmp_path, SplitSpec(0.9, 0.1, 0.0))


def test_load_csv_clients_inconsistent_width(tmp_path):
    _write_client(tmp_path, 0, 5)
    _write_client(tmp_path, 1, 5, dims=3)
    with pytest.raises(DataFormatError, match="client_1.csv:1: inconsistent feature width"):
        load_csv_clients(tmp_path, SplitSpec())
