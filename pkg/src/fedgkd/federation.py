"""Federated round engine.

Implements the server loop: client sampling, per-strategy local training,
historical-global-model buffering and ensembling, vote coefficients, weighted
aggregation, and per-round evaluation. Every random draw comes from a stream
keyed on (master seed, round, client), so a round's outcome is identical for
any worker count and any client execution order.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses, nn, seeding
from .data import ClientShard, Dataset
from .losses import DistillConfig, ProxConfig
from .nn import MlpSpec, SgdHyper

STRATEGIES = losses.STRATEGIES


class ClientDivergenceError(RuntimeError):
    """A client hit a non-finite loss mid-training; the round must be marked failed."""

    def __init__(self, client_id: int, round_index: int, detail: str):
        super().__init__(f"client {client_id} diverged in round {round_index}: {detail}")
        self.client_id = client_id
        self.round_index = round_index
        self.detail = detail


@dataclass(frozen=True)
class FedConfig:
    """Federation hyperparameters. Defaults follow the reference CV setup."""

    num_clients: int
    strategy: str = "fedavg"
    rounds: int = 100
    local_epochs: int = 20
    batch_size: int = 64
    participation: float = 0.2
    buffer_size: int = 5
    distill: DistillConfig = DistillConfig()
    prox: ProxConfig = ProxConfig()
    sgd: SgdHyper = SgdHyper()
    vote_lambda: float = 0.1
    vote_beta: float | None = None  # None resolves to 1 / buffer_size
    master_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.buffer_size < 1:
            raise ValueError(f"buffer_size must be >= 1, got {self.buffer_size}")
        if not self.vote_lambda > 0:
            raise ValueError(f"vote_lambda must be > 0, got {self.vote_lambda}")
        if self.vote_beta is not None and not self.vote_beta > 0:
            raise ValueError(f"vote_beta must be > 0, got {self.vote_beta}")
        if self.master_seed < 0:
            raise ValueError(f"master_seed must be >= 0, got {self.master_seed}")

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.participation * self.num_clients)

    @property
    def resolved_vote_beta(self) -> float:
        return self.vote_beta if self.vote_beta is not None else 1.0 / self.buffer_size


class TeacherBuffer:
    """Ring of the most recent global parameter vectors, oldest first, capped at capacity.

    Immutable: `pushed` returns a new buffer. Stored arrays are read-only views
    of what the server published.
    """

    def __init__(self, capacity: int, entries: tuple[tuple[int, np.ndarray], ...] = ()):
        if capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries = entries

    def pushed(self, params: np.ndarray, round_tag: int) -> "TeacherBuffer":
        frozen = np.asarray(params, dtype=np.float64).copy()
        frozen.flags.writeable = False
        entries = (self._entries + ((round_tag, frozen),))[-self.capacity:]
        return TeacherBuffer(self.capacity, entries)

    @property
    def occupancy(self) -> int:
        return len(self._entries)

    @property
    def round_tags(self) -> tuple[int, ...]:
        return tuple(tag for tag, _ in self._entries)

    def teachers_oldest_first(self) -> list[np.ndarray]:
        return [params for _, params in self._entries]

    @property
    def latest(self) -> np.ndarray:
        if not self._entries:
            raise ValueError("teacher buffer is empty")
        return self._entries[-1][1]


@dataclass
class ClientResult:
    """Outcome of one client's local training in one round."""

    client_id: int
    params: np.ndarray
    n_k: int
    train_loss: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.params)):
            raise nn.NonFiniteError(f"client {self.client_id} returned non-finite parameters")


@dataclass
class RoundRecord:
    """Per-round metrics emitted by the server loop."""

    round: int
    test_accuracy: float
    test_loss: float
    mean_train_loss: float
    wall_time_s: float
    payload_multiplier: int
    diag: dict | None = None

    def metrics_dict(self) -> dict:
        """JSON-ready dict for metrics.jsonl. Wall time is deliberately excluded
        (it is not deterministic); it lives in the timings sidecar instead."""
        d = {
            "round": self.round,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "mean_train_loss": self.mean_train_loss,
            "payload_multiplier": self.payload_multiplier,
        }
        if self.diag is not None:
            d["diag"] = self.diag
        return d


@dataclass
class ServerState:
    """Mutable-by-replacement server state between rounds."""

    round_index: int
    params: np.ndarray
    buffer: TeacherBuffer


@dataclass
class RunContext:
    """Everything a round needs besides the server state."""

    cfg: FedConfig
    spec: MlpSpec
    shards: list[ClientShard]
    test_set: Dataset
    workers: int = 1
    diagnostics: bool = False
    probe_c: float = 0.0


def sample_clients(round_index: int, cfg: FedConfig) -> list[int]:
    """Uniform sample without replacement of ceil(C*K) client ids; deterministic in (seed, round)."""
    m = cfg.clients_per_round
    rng = seeding.derive_rng(cfg.master_seed, seeding.SAMPLE, round_index)
    return sorted(int(i) for i in rng.choice(cfg.num_clients, size=m, replace=False))


def ensemble_teacher(buffer: TeacherBuffer) -> np.ndarray:
    """Elementwise mean of the buffered global models (over current occupancy)."""
    teachers = buffer.teachers_oldest_first()
    if not teachers:
        raise ValueError("cannot ensemble an empty teacher buffer")
    return np.mean(np.stack(teachers), axis=0)


def vote_coefficients(val_losses: np.ndarray, lam: float, beta: float) -> np.ndarray:
    """Per-teacher coefficients gamma_i = 2 * lam * softmax(-L/beta)_i (max-shifted)."""
    l = np.asarray(val_losses, dtype=np.float64)
    if l.ndim != 1 or l.size < 1:
        raise ValueError(f"val_losses must be a nonempty 1-D array, got shape {l.shape}")
    if not np.all(np.isfinite(l)):
        raise nn.NonFiniteError("vote coefficients need finite validation losses")
    if not (lam > 0 and beta > 0):
        raise ValueError(f"lambda and beta must be > 0, got {lam}, {beta}")
    z = -l / beta
    z = z - z.max()
    e = np.exp(z)
    return 2.0 * lam * e / e.sum()


def evaluate(params: np.ndarray, spec: MlpSpec, ds: Dataset) -> tuple[float, float]:
    """Full-batch cross-entropy loss and top-1 accuracy on a dataset."""
    logits, _ = nn.forward(params, spec, ds.xs)
    probs = nn.softmax(logits)
    loss, _ = losses.cross_entropy(probs, ds.ys)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == ds.ys))
    return loss, accuracy


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    return [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def client_update(
    shard: ClientShard,
    global_params: np.ndarray,
    ctx: RunContext,
    round_index: int,
    teachers: list[np.ndarray] | None,
) -> ClientResult:
    """E local epochs of minibatch SGD on the strategy's objective, from the
    client's own RNG stream. Teachers are frozen; their logits are recomputed
    per batch."""
    cfg = ctx.cfg
    train = shard.train
    rng = seeding.derive_rng(cfg.master_seed, seeding.CLIENT, round_index, shard.client_id)

    teacher_gammas = None
    stats: dict = {}
    if cfg.strategy == "fedgkd_vote":
        if shard.val is None:
            raise ValueError(f"client {shard.client_id} has no validation split; fedgkd_vote requires one")
        if not teachers:
            raise ValueError("fedgkd_vote needs at least one buffered teacher")
        val_losses = np.array([evaluate(t, ctx.spec, shard.val)[0] for t in teachers])
        teacher_gammas = vote_coefficients(val_losses, cfg.vote_lambda, cfg.resolved_vote_beta)
        stats["vote_gammas"] = [float(g) for g in teacher_gammas]

    w = np.array(global_params, dtype=np.float64, copy=True)
    velocity = None
    loss_sum = 0.0
    example_count = 0
    full_batch = cfg.batch_size >= train.n
    for _epoch in range(cfg.local_epochs):
        # a single full batch needs no shuffle, which keeps one-step runs exactly
        # equal to a directly computed gradient step
        order = np.arange(train.n) if full_batch else rng.permutation(train.n)
        for sl in _batch_slices(train.n, cfg.batch_size):
            idx = order[sl]
            xb, yb = train.xs[idx], train.ys[idx]
            try:
                loss, dlogits, addend, cache = losses.local_objective(
                    cfg.strategy,
                    w,
                    ctx.spec,
                    xb,
                    yb,
                    teachers=teachers,
                    teacher_gammas=teacher_gammas,
                    anchor=global_params,
                    distill=cfg.distill,
                    prox=cfg.prox,
                    stats=stats,
                )
            except nn.NonFiniteError as exc:
                raise ClientDivergenceError(shard.client_id, round_index, str(exc)) from exc
            if not np.isfinite(loss):
                raise ClientDivergenceError(shard.client_id, round_index, f"loss={loss}")
            grad = nn.backprop(cache, w, ctx.spec, dlogits)
            if addend is not None:
                grad = grad + addend
            w, velocity = nn.sgd_step(w, grad, velocity, cfg.sgd)
            loss_sum += loss * len(idx)
            example_count += len(idx)
    return ClientResult(
        client_id=shard.client_id,
        params=w,
        n_k=train.n,
        train_loss=loss_sum / example_count,
        diagnostics=stats,
    )


def aggregate(results: list[ClientResult]) -> np.ndarray:
    """Weighted mean of client parameter vectors, weights n_k normalized over the sampled set."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    ordered = sorted(results, key=lambda r: r.client_id)
    dims = {r.params.shape for r in ordered}
    if len(dims) != 1:
        raise ValueError(f"client parameter dimensions disagree: {sorted(dims)}")
    total = float(sum(r.n_k for r in ordered))
    out = np.zeros_like(ordered[0].params)
    for r in ordered:
        out += (r.n_k / total) * r.params
    return out


def payload_multiplier(strategy: str, buffer_size: int, occupancy: int) -> int:
    """Models sent per client per round, relative to plain weight exchange."""
    if strategy == "fedgkd_vote":
        return occupancy
    if strategy == "fedgkd" and buffer_size > 1:
        return 2
    return 1


def init_server_state(ctx: RunContext) -> ServerState:
    params = nn.init_params(ctx.spec, seeding.derive_seed(ctx.cfg.master_seed, seeding.INIT))
    return ServerState(round_index=0, params=params, buffer=TeacherBuffer(ctx.cfg.buffer_size))


def _dispatch_teachers(cfg: FedConfig, buffer: TeacherBuffer) -> list[np.ndarray] | None:
    if cfg.strategy == "fedgkd":
        return [ensemble_teacher(buffer)]
    if cfg.strategy == "fedgkd_vote":
        return buffer.teachers_oldest_first()
    return None


def run_round(state: ServerState, ctx: RunContext) -> tuple[ServerState, RoundRecord]:
    """One communication round. On client divergence the round raises and the
    input state stays valid (not advanced)."""
    t0 = time.perf_counter()
    cfg = ctx.cfg
    t = state.round_index
    buffer = state.buffer.pushed(state.params, t)  # teachers for round t end at w_t
    sampled = sample_clients(t, cfg)
    teachers = _dispatch_teachers(cfg, buffer)

    shard_by_id = {s.client_id: s for s in ctx.shards}

    def _run(cid: int) -> ClientResult:
        return client_update(shard_by_id[cid], state.params, ctx, t, teachers)

    if ctx.workers > 1:
        with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
            results = list(pool.map(_run, sampled))
    else:
        results = [_run(cid) for cid in sampled]
    results.sort(key=lambda r: r.client_id)

    new_params = aggregate(results)
    if not np.all(np.isfinite(new_params)):
        raise ClientDivergenceError(-1, t, "aggregated parameters are non-finite")
    test_loss, test_accuracy = evaluate(new_params, ctx.spec, ctx.test_set)

    diag = None
    if ctx.diagnostics:
        from . import diagnostics

        diag = diagnostics.drift_report(state.params, results, ctx.shards, ctx.spec, ctx.probe_c).as_dict()

    record = RoundRecord(
        round=t,
        test_accuracy=test_accuracy,
        test_loss=test_loss,
        mean_train_loss=float(np.mean([r.train_loss for r in results])),
        wall_time_s=time.perf_counter() - t0,
        payload_multiplier=payload_multiplier(cfg.strategy, cfg.buffer_size, buffer.occupancy),
        diag=diag,
    )
    published = new_params.copy()
    published.flags.writeable = False
    return ServerState(round_index=t + 1, params=published, buffer=buffer), record


def run_federation(ctx: RunContext, on_record=None) -> tuple[ServerState, list[RoundRecord]]:
    """Run the full configured number of rounds from a fresh initialization."""
    state = init_server_state(ctx)
    records = []
    for _ in range(ctx.cfg.rounds):
        state, record = run_round(state, ctx)
        records.append(record)
        if on_record is not None:
            on_record(record)
    return state, records
