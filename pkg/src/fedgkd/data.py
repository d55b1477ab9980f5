"""Dataset generation, CSV ingestion, and non-IID partitioning across clients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d), integer labels (n,), and the class count."""

    xs: np.ndarray
    ys: np.ndarray
    num_classes: int

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.int64)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise ValueError(f"inconsistent dataset shapes xs={xs.shape} ys={ys.shape}")
        if xs.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        if ys.min() < 0 or ys.max() >= self.num_classes:
            raise ValueError(f"labels must be in [0, {self.num_classes}), got range [{ys.min()}, {ys.max()}]")

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.xs.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.xs[idx], self.ys[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.ys, minlength=self.num_classes)


@dataclass
class ClientShard:
    """One client's local data: a training split and an optional validation split."""

    client_id: int
    train: Dataset
    val: Dataset | None = None

    @property
    def n_k(self) -> int:
        return self.train.n


@dataclass(frozen=True)
class PartitionSpec:
    """Dirichlet partition settings: concentration, client count, seed, validation fraction."""

    alpha: float
    num_clients: int
    seed: int
    val_fraction: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def gen_toy_dataset(n: int, seed: int) -> Dataset:
    """2-D points uniform in (-4, 4)^2 labeled by quadrant (4 classes)."""
    if n < 4:
        raise ValueError(f"toy dataset needs n >= 4, got {n}")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-4.0, 4.0, size=(n, 2))
    ys = quadrant_labels(xs)
    return Dataset(xs, ys, num_classes=4)


def quadrant_labels(xs: np.ndarray) -> np.ndarray:
    """Quadrant rule: (+,+) -> 0, (-,+) -> 1, (-,-) -> 2, (+,-) -> 3 (axes count as +)."""
    x, y = xs[:, 0], xs[:, 1]
    labels = np.empty(xs.shape[0], dtype=np.int64)
    labels[(x >= 0) & (y >= 0)] = 0
    labels[(x < 0) & (y >= 0)] = 1
    labels[(x < 0) & (y < 0)] = 2
    labels[(x >= 0) & (y < 0)] = 3
    return labels


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of `total` by `proportions` (largest remainder, ties to lower index)."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = raw - counts
        # stable sort so equal remainders resolve deterministically to lower indices
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition_indices(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Index lists of the label-skewed partition: per class, split that class's
    examples across clients by proportions drawn from Dir(alpha).

    The lists are disjoint and cover range(n) exactly. Clients left empty are
    repaired by moving one example from the currently largest shard.
    """
    k = spec.num_clients
    if k > ds.n:
        raise ValueError(f"cannot partition {ds.n} examples across {k} clients")
    rng = np.random.default_rng(spec.seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        idx_c = np.flatnonzero(ds.ys == c)
        proportions = rng.dirichlet(np.full(k, spec.alpha))
        if idx_c.size == 0:
            continue
        idx_c = rng.permutation(idx_c)
        counts = _largest_remainder_counts(proportions, idx_c.size)
        splits = np.split(idx_c, np.cumsum(counts)[:-1])
        for client, part in enumerate(splits):
            if part.size:
                assigned[client].append(part)
    index_lists = [np.concatenate(parts) if parts else np.empty(0, dtype=np.int64) for parts in assigned]
    return _repair_empty(index_lists)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Label-skewed Dirichlet partition of a dataset into disjoint client shards."""
    index_lists = dirichlet_partition_indices(ds, spec)
    return [ClientShard(client_id=i, train=ds.subset(idx)) for i, idx in enumerate(index_lists)]


def _repair_empty(index_lists: list[np.ndarray]) -> list[np.ndarray]:
    for i, idx in enumerate(index_lists):
        while index_lists[i].size == 0:
            donor = max(range(len(index_lists)), key=lambda j: (index_lists[j].size, -j))
            if index_lists[donor].size <= 1:
                raise ValueError("not enough examples to give every client at least one")
            index_lists[i] = index_lists[donor][-1:]
            index_lists[donor] = index_lists[donor][:-1]
    return index_lists


def train_val_split(shard: ClientShard, fraction: float, seed: int) -> ClientShard:
    """Deterministically carve ceil(fraction * n_k) examples out of a shard's train split as validation."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if fraction == 0:
        return shard
    n = shard.train.n
    n_val = int(np.ceil(fraction * n))
    if n - n_val < 1:
        raise ValueError(
            f"client {shard.client_id}: val fraction {fraction} leaves no training data (n_k={n})"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return ClientShard(
        client_id=shard.client_id,
        train=shard.train.subset(perm[n_val:]),
        val=shard.train.subset(perm[:n_val]),
    )


def make_client_shards(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Partition then apply the per-client validation split from the spec."""
    shards = dirichlet_partition(ds, spec)
    if spec.val_fraction == 0:
        return shards
    return [
        train_val_split(s, spec.val_fraction, seeding.derive_seed(spec.seed, seeding.SPLIT, s.client_id))
        for s in shards
    ]


def load_csv_dataset(path, num_classes: int) -> Dataset:
    """Parse a CSV of `d` feature columns followed by one integer label column."""
    xs_rows: list[list[float]] = []
    ys_rows: list[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            cols = line.split(",")
            if len(cols) < 2:
                raise ValueError(f"{path}: line {lineno}: need at least one feature and a label")
            if width is None:
                width = len(cols)
            elif len(cols) != width:
                raise ValueError(f"{path}: line {lineno}: expected {width} columns, got {len(cols)}")
            try:
                features = [float(c) for c in cols[:-1]]
                label = int(cols[-1])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= label < num_classes:
                raise ValueError(f"{path}: line {lineno}: label {label} out of range [0, {num_classes})")
            xs_rows.append(features)
            ys_rows.append(label)
    if not xs_rows:
        raise ValueError(f"{path}: no examples")
    return Dataset(np.array(xs_rows, dtype=np.float64), np.array(ys_rows, dtype=np.int64), num_classes)


def partition_audit(shards: list[ClientShard], num_classes: int) -> dict:
    """Per-client sample and class counts (train + val), for the audit JSON."""
    clients = {}
    for s in shards:
        counts = s.train.class_counts().copy()
        n = s.train.n
        if s.val is not None:
            counts = counts + s.val.class_counts()
            n += s.val.n
        clients[str(s.client_id)] = {
            "n": int(n),
            "n_train": int(s.train.n),
            "n_val": int(s.val.n) if s.val is not None else 0,
            "class_counts": {str(c): int(counts[c]) for c in range(num_classes)},
        }
    return clients


def max_client_tv_distance(shards: list[ClientShard], num_classes: int) -> float:
    """Max over clients of the total-variation distance between the client's
    class distribution and the pooled distribution (train + val)."""
    per_client = []
    for s in shards:
        counts = s.train.class_counts().astype(np.float64)
        if s.val is not None:
            counts = counts + s.val.class_counts()
        per_client.append(counts)
    stacked = np.stack(per_client)
    global_dist = stacked.sum(axis=0)
    global_dist = global_dist / global_dist.sum()
    client_dists = stacked / stacked.sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(client_dists - global_dist).sum(axis=1)
    return float(tv.max())
