import numpy as np
import pytest

from fedgkd import data
from fedgkd.data import Dataset, PartitionSpec


def test_toy_quadrant_rule():
    xs = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    assert data.quadrant_labels(xs).tolist() == [0, 1, 2, 3]


def test_toy_range_and_determinism():
    ds = data.gen_toy_dataset(2000, seed=9)
    assert ds.n == 2000 and ds.num_classes == 4
    assert np.all((ds.xs > -4.0) & (ds.xs < 4.0))
    again = data.gen_toy_dataset(2000, seed=9)
    assert np.array_equal(ds.xs, again.xs) and np.array_equal(ds.ys, again.ys)
    assert np.any(ds.xs != data.gen_toy_dataset(2000, seed=10).xs)


def test_toy_class_balance():
    # binomial concentration: each quadrant within 4*sqrt(n) of n/4
    n = 4000
    ds = data.gen_toy_dataset(n, seed=3)
    counts = ds.class_counts()
    assert np.all(np.abs(counts - n / 4) <= 4 * np.sqrt(n))


def test_toy_labels_match_coordinates():
    ds = data.gen_toy_dataset(500, seed=1)
    assert np.array_equal(ds.ys, data.quadrant_labels(ds.xs))


def test_toy_minimum_size():
    with pytest.raises(ValueError):
        data.gen_toy_dataset(3, seed=0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), num_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), num_classes=2)


def test_partition_single_client_is_identity():
    ds = data.gen_toy_dataset(100, seed=0)
    shards = data.dirichlet_partition(ds, PartitionSpec(alpha=0.5, num_clients=1, seed=0))
    assert len(shards) == 1
    assert shards[0].train.n == 100
    # same multiset of rows as the source
    assert np.array_equal(np.sort(shards[0].train.ys), np.sort(ds.ys))


def test_partition_disjoint_cover():
    ds = data.gen_toy_dataset(500, seed=2)
    for seed in range(5):
        spec = PartitionSpec(alpha=0.1, num_clients=7, seed=seed)
        index_lists = data.dirichlet_partition_indices(ds, spec)
        pooled = np.concatenate(index_lists)
        assert np.array_equal(np.sort(pooled), np.arange(500))
        assert all(idx.size >= 1 for idx in index_lists)


def test_partition_deterministic():
    ds = data.gen_toy_dataset(300, seed=4)
    spec = PartitionSpec(alpha=0.3, num_clients=5, seed=77)
    a = data.dirichlet_partition_indices(ds, spec)
    b = data.dirichlet_partition_indices(ds, spec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_partition_large_alpha_balanced():
    # alpha=1e6 concentrates Dir near uniform: per-class counts within 5% of n_c/K
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(4000, 2))
    ys = np.repeat(np.arange(4), 1000)
    ds = Dataset(xs, ys, num_classes=4)
    for seed in range(3):
        shards = data.dirichlet_partition(ds, PartitionSpec(alpha=1e6, num_clients=4, seed=seed))
        for shard in shards:
            counts = shard.train.class_counts()
            assert np.all(np.abs(counts - 250) <= 0.05 * 250)


def test_partition_small_alpha_starves_classes():
    # alpha=0.1 with many clients: someone misses at least one class
    ds = data.gen_toy_dataset(1000, seed=5)
    for seed in range(3):
        shards = data.dirichlet_partition(ds, PartitionSpec(alpha=0.1, num_clients=20, seed=seed))
        missing = any(np.any(s.train.class_counts() == 0) for s in shards)
        assert missing


def test_partition_heterogeneity_monotone_in_alpha():
    tv_low, tv_high = [], []
    for seed in range(20):
        ds = data.gen_toy_dataset(600, seed=seed)
        high = data.dirichlet_partition(ds, PartitionSpec(alpha=0.1, num_clients=6, seed=seed))
        low = data.dirichlet_partition(ds, PartitionSpec(alpha=10.0, num_clients=6, seed=seed))
        tv_high.append(data.max_client_tv_distance(high, 4))
        tv_low.append(data.max_client_tv_distance(low, 4))
    assert np.mean(tv_high) > np.mean(tv_low)


def test_partition_rejects_more_clients_than_examples():
    ds = data.gen_toy_dataset(5, seed=0)
    with pytest.raises(ValueError):
        data.dirichlet_partition(ds, PartitionSpec(alpha=1.0, num_clients=6, seed=0))


def test_split_fraction_zero_is_identity():
    ds = data.gen_toy_dataset(50, seed=0)
    shard = data.ClientShard(client_id=0, train=ds)
    out = data.train_val_split(shard, 0.0, seed=1)
    assert out is shard
    assert out.val is None


def test_split_sizes():
    ds = data.gen_toy_dataset(100, seed=0)
    shard = data.ClientShard(client_id=0, train=ds)
    out = data.train_val_split(shard, 0.1, seed=1)
    assert out.val.n == 10 and out.train.n == 90


def test_split_deterministic_and_disjoint():
    ds = data.gen_toy_dataset(60, seed=2)
    shard = data.ClientShard(client_id=3, train=ds)
    a = data.train_val_split(shard, 0.25, seed=9)
    b = data.train_val_split(shard, 0.25, seed=9)
    assert np.array_equal(a.train.xs, b.train.xs) and np.array_equal(a.val.xs, b.val.xs)
    combined = np.vstack([a.train.xs, a.val.xs])
    assert np.array_equal(np.sort(combined, axis=0), np.sort(ds.xs, axis=0))


def test_split_rejects_empty_train():
    ds = data.gen_toy_dataset(4, seed=0).subset(np.array([0]))
    shard = data.ClientShard(client_id=0, train=ds)
    with pytest.raises(ValueError, match="no training data"):
        data.train_val_split(shard, 0.5, seed=0)


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "ds.csv"
    path.write_text("0.5,1.0,2\n-1.5,0.25,0\n", encoding="utf-8")
    ds = data.load_csv_dataset(path, num_classes=3)
    assert ds.n == 2
    assert np.array_equal(ds.xs, [[0.5, 1.0], [-1.5, 0.25]])
    assert ds.ys.tolist() == [2, 0]


def test_csv_label_out_of_range_names_line(tmp_path):
    path = tmp_path / "ds.csv"
    path.write_text("0.0,0.0,0\n1.0,1.0,3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        data.load_csv_dataset(path, num_classes=3)


def test_csv_malformed_row_names_line(tmp_path):
    path = tmp_path / "ds.csv"
    path.write_text("0.0,0.0,0\noops,0.0,1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        data.load_csv_dataset(path, num_classes=2)
    path.write_text("0.0,0.0,0\n0.0,1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="line 2"):
        data.load_csv_dataset(path, num_classes=2)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="no examples"):
        data.load_csv_dataset(path, num_classes=2)


def test_partition_audit_counts():
    ds = data.gen_toy_dataset(200, seed=0)
    spec = PartitionSpec(alpha=1.0, num_clients=4, seed=0, val_fraction=0.1)
    shards = data.make_client_shards(ds, spec)
    audit = data.partition_audit(shards, 4)
    assert set(audit) == {"0", "1", "2", "3"}
    assert sum(entry["n"] for entry in audit.values()) == 200
    for entry in audit.values():
        assert entry["n"] == entry["n_train"] + entry["n_val"]
        assert sum(entry["class_counts"].values()) == entry["n"]
