"""Client-drift and convergence instrumentation.

Everything here is read-only over immutable snapshots: enabling diagnostics
never consumes training RNG streams and never changes a training metric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, nn, seeding
from .data import ClientShard, Dataset
from .losses import DistillConfig, ProxConfig
from .nn import MlpSpec


@dataclass(frozen=True)
class InexactnessProbe:
    """User-set stand-in coefficient for the (unmeasurable) curvature constant
    multiplying the parameter displacement in the inexactness bound."""

    coefficient: float = 0.0

    def __post_init__(self):
        if self.coefficient < 0:
            raise ValueError(f"probe coefficient must be >= 0, got {self.coefficient}")


@dataclass
class DriftReport:
    """Per sampled client: parameter displacement, mean output KL against the
    round-start global model, inexactness ratio; plus the global gradient norm."""

    param_distance: dict[int, float]
    output_kl: dict[int, float]
    inexactness: dict[int, float]
    global_grad_norm: float

    def as_dict(self) -> dict:
        return {
            "param_distance": {str(k): v for k, v in sorted(self.param_distance.items())},
            "output_kl": {str(k): v for k, v in sorted(self.output_kl.items())},
            "inexactness": {str(k): v for k, v in sorted(self.inexactness.items())},
            "global_grad_norm": self.global_grad_norm,
        }


def dataset_grad(params: np.ndarray, spec: MlpSpec, ds: Dataset) -> np.ndarray:
    """Full-batch parameter gradient of the mean cross-entropy on a dataset."""
    logits, cache = nn.forward(params, spec, ds.xs)
    probs = nn.softmax(logits)
    _, dlogits = losses.cross_entropy(probs, ds.ys)
    return nn.backprop(cache, params, spec, dlogits)


def client_grad_fn(shard: ClientShard, spec: MlpSpec):
    """Gradient oracle for one client: params -> full-batch grad on its training shard."""

    def grad(params: np.ndarray) -> np.ndarray:
        return dataset_grad(params, spec, shard.train)

    return grad


def inexactness_ratio(grad_fn, w_before: np.ndarray, w_after: np.ndarray, coefficient: float = 0.0) -> float:
    """||grad(w_after) + c * (w_after - w_before)|| / max(||grad(w_before)||, 1e-12)."""
    g_after = grad_fn(w_after)
    g_before = grad_fn(w_before)
    numerator = np.linalg.norm(g_after + coefficient * (np.asarray(w_after) - np.asarray(w_before)))
    denominator = max(np.linalg.norm(g_before), 1e-12)
    return float(numerator / denominator)


def mean_output_kl(params_p: np.ndarray, params_q: np.ndarray, spec: MlpSpec, ds: Dataset) -> float:
    """Mean over examples of KL(softmax h(params_p) || softmax h(params_q))."""
    probs_p = nn.softmax(nn.forward(params_p, spec, ds.xs)[0])
    probs_q = nn.softmax(nn.forward(params_q, spec, ds.xs)[0])
    ratio = np.maximum(probs_p, losses.EPS) / np.maximum(probs_q, losses.EPS)
    per_row = np.where(probs_p > 0, probs_p * np.log(ratio), 0.0).sum(axis=1)
    return float(per_row.mean())


def global_grad_norm(params: np.ndarray, shards: list[ClientShard], spec: MlpSpec) -> float:
    """||sum_k p_k grad_k(w)|| with p_k = n_k / sum n_k, over every client's training shard."""
    total = float(sum(s.train.n for s in shards))
    acc = np.zeros_like(np.asarray(params, dtype=np.float64))
    for s in shards:
        acc += (s.train.n / total) * dataset_grad(params, spec, s.train)
    return float(np.linalg.norm(acc))


def drift_report(
    w_before: np.ndarray,
    results,
    shards: list[ClientShard],
    spec: MlpSpec,
    probe_c: float = 0.0,
) -> DriftReport:
    """Quantify this round's client drift. `results` are the sampled clients'
    ClientResult objects; `shards` is the full client list."""
    shard_by_id = {s.client_id: s for s in shards}
    distances: dict[int, float] = {}
    kls: dict[int, float] = {}
    ratios: dict[int, float] = {}
    for r in sorted(results, key=lambda r: r.client_id):
        shard = shard_by_id[r.client_id]
        distances[r.client_id] = float(np.linalg.norm(r.params - w_before))
        kls[r.client_id] = mean_output_kl(w_before, r.params, spec, shard.train)
        ratios[r.client_id] = inexactness_ratio(client_grad_fn(shard, spec), w_before, r.params, probe_c)
    return DriftReport(
        param_distance=distances,
        output_kl=kls,
        inexactness=ratios,
        global_grad_norm=global_grad_norm(w_before, shards, spec),
    )


# Composite objectives checked by finite differences, keyed by selector name.
FD_LOSS_KINDS = ("ce", "ce_kd_kl", "ce_kd_mse", "ce_prox")


@dataclass
class FdCheckReport:
    """Worst-case relative gradient error, overall and per layer."""

    loss_kind: str
    max_rel_error: float
    per_layer: dict[str, float]

    @property
    def worst_layer(self) -> str:
        return max(self.per_layer, key=lambda k: self.per_layer[k])


def _fd_point(spec: MlpSpec, rng: np.random.Generator, batch: int):
    params = 0.5 * rng.standard_normal(spec.param_dim)
    xs = rng.standard_normal((batch, spec.input_dim))
    ys = rng.integers(0, spec.output_dim, size=batch)
    teacher = 0.5 * rng.standard_normal(spec.param_dim)
    anchor = 0.5 * rng.standard_normal(spec.param_dim)
    return params, xs, ys, teacher, anchor


def _min_abs_preactivation(params, spec, xs) -> float:
    _, cache = nn.forward(params, spec, xs)
    return min(float(np.abs(z).min()) for z in cache.pre_activations[:-1]) if spec.num_layers > 1 else 1.0


def finite_diff_check(
    spec: MlpSpec,
    loss_kind: str = "ce",
    seed: int = 0,
    n_points: int = 100,
    step: float = 1e-5,
    batch: int = 5,
    grad_transform=None,
) -> FdCheckReport:
    """Compare the analytic composite gradient against central finite differences
    at random (params, batch) points; returns the max relative error per layer.

    `grad_transform` is a test hook applied to the analytic gradient (sensitivity
    fixtures corrupt one layer through it). ReLU points whose pre-activations sit
    within `step` of the kink are redrawn, since the difference quotient crosses
    the nondifferentiable point there.
    """
    if loss_kind not in FD_LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {FD_LOSS_KINDS}, got {loss_kind!r}")
    strategy = {"ce": "fedavg", "ce_kd_kl": "fedgkd", "ce_kd_mse": "fedgkd", "ce_prox": "fedprox"}[loss_kind]
    distill = DistillConfig(gamma=0.2, regularizer_kind="mse" if loss_kind == "ce_kd_mse" else "kl")
    prox = ProxConfig(mu=0.01)

    per_layer = {f"layer{i}.{part}": 0.0 for i in range(spec.num_layers) for part in ("W", "b")}
    for point in range(n_points):
        rng = seeding.derive_rng(seed, point)
        params, xs, ys, teacher, anchor = _fd_point(spec, rng, batch)
        if spec.activation == "relu":
            attempts = 0
            while _min_abs_preactivation(params, spec, xs) < 10 * step and attempts < 50:
                params, xs, ys, teacher, anchor = _fd_point(spec, rng, batch)
                attempts += 1
        teachers = [teacher] if strategy == "fedgkd" else None

        def objective(p: np.ndarray) -> float:
            loss, _, _, _ = losses.local_objective(
                strategy, p, spec, xs, ys, teachers=teachers, anchor=anchor, distill=distill, prox=prox
            )
            return loss

        _, dlogits, addend, cache = losses.local_objective(
            strategy, params, spec, xs, ys, teachers=teachers, anchor=anchor, distill=distill, prox=prox
        )
        analytic = nn.backprop(cache, params, spec, dlogits)
        if addend is not None:
            analytic = analytic + addend
        if grad_transform is not None:
            analytic = grad_transform(analytic)

        numeric = np.empty_like(analytic)
        for j in range(params.size):
            bumped = params.copy()
            bumped[j] = params[j] + step
            up = objective(bumped)
            bumped[j] = params[j] - step
            down = objective(bumped)
            numeric[j] = (up - down) / (2 * step)

        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        for i, (wsl, bsl, _) in enumerate(spec.layer_slices()):
            per_layer[f"layer{i}.W"] = max(per_layer[f"layer{i}.W"], float(rel[wsl].max()))
            per_layer[f"layer{i}.b"] = max(per_layer[f"layer{i}.b"], float(rel[bsl].max()))
    return FdCheckReport(loss_kind=loss_kind, max_rel_error=max(per_layer.values()), per_layer=per_layer)
