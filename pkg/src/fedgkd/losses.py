"""Loss and regularizer toolkit.

Cross-entropy, the KL distillation term against frozen teacher logits (with an
MSE-on-logits variant), the proximal term, and the per-strategy composite local
objective used during client training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import MlpSpec, softmax

EPS = 1e-12

REGULARIZER_KINDS = ("kl", "mse")

STRATEGIES = ("fedavg", "fedprox", "fedgkd", "fedgkd_vote")


@dataclass(frozen=True)
class DistillConfig:
    """Distillation settings: coefficient, softmax temperature, and regularizer kind."""

    gamma: float = 0.2
    temperature: float = 1.0
    regularizer_kind: str = "kl"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.regularizer_kind not in REGULARIZER_KINDS:
            raise ValueError(f"regularizer_kind must be one of {REGULARIZER_KINDS}, got {self.regularizer_kind!r}")


@dataclass(frozen=True)
class ProxConfig:
    """Proximal-term coefficient for FedProx-style local regularization."""

    mu: float = 0.01

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")


def cross_entropy(probs: np.ndarray, labels: np.ndarray, stats: dict | None = None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the logits.

    `probs` must be softmax outputs (rows summing to 1); the returned gradient is
    (probs - onehot) / n. Probabilities below EPS at the label are clamped before
    the log; clamp events are counted into `stats["ce_clamp_events"]` if given.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D (batch, classes), got shape {probs.shape}")
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probs rows must sum to 1 (pass softmax output)")
    label_probs = probs[np.arange(n), labels]
    clamped = int(np.count_nonzero(label_probs < EPS))
    if clamped and stats is not None:
        stats["ce_clamp_events"] = stats.get("ce_clamp_events", 0) + clamped
    loss = float(-np.mean(np.log(np.maximum(label_probs, EPS))))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def kl_div(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) = sum p * ln(p/q) with 0*ln0 := 0.

    Both arguments are clamped below at EPS inside the log ratio, so the
    divergence is exactly zero when p == q even if entries underflow.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"p and q must be 1-D of equal length, got {p.shape} and {q.shape}")
    if not (np.isclose(p.sum(), 1.0, atol=1e-6) and np.isclose(q.sum(), 1.0, atol=1e-6)):
        raise ValueError("p and q must each sum to 1")
    ratio = np.maximum(p, EPS) / np.maximum(q, EPS)
    terms = np.where(p > 0, p * np.log(ratio), 0.0)
    return float(terms.sum())


def kd_term(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray]:
    """Distillation term (gamma / 2n) * sum_i D(teacher_i, student_i) and its student-logit gradient.

    kind "kl": D = KL(softmax(t/T) || softmax(s/T)), teacher first; kind "mse":
    D = ||t - s||^2 on raw logits. The teacher is a constant: no gradient flows to it.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 2:
        raise ValueError(f"teacher/student logits must be 2-D of equal shape, got {t.shape} and {s.shape}")
    n = t.shape[0]
    if cfg.gamma == 0.0:
        return 0.0, np.zeros_like(s)
    scale = cfg.gamma / (2.0 * n)
    if cfg.regularizer_kind == "mse":
        diff = t - s
        loss = scale * float(np.sum(diff * diff))
        dstudent = scale * (-2.0) * diff
        return loss, dstudent
    tau = cfg.temperature
    p = softmax(t / tau)
    q = softmax(s / tau)
    ratio = np.maximum(p, EPS) / np.maximum(q, EPS)
    total = float(np.sum(np.where(p > 0, p * np.log(ratio), 0.0)))
    loss = scale * total
    dstudent = scale * (q - p) / tau
    return loss, dstudent


def prox_term(w: np.ndarray, w_anchor: np.ndarray, cfg: ProxConfig) -> tuple[float, np.ndarray]:
    """(mu/2) * ||w - anchor||^2 and its parameter-space gradient mu * (w - anchor)."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(w_anchor, dtype=np.float64)
    if w.shape != a.shape:
        raise ValueError(f"w shape {w.shape} does not match anchor shape {a.shape}")
    if cfg.mu == 0.0:
        return 0.0, np.zeros_like(w)
    diff = w - a
    return 0.5 * cfg.mu * float(diff @ diff), cfg.mu * diff


def local_objective(
    strategy: str,
    params: np.ndarray,
    spec: MlpSpec,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    teachers: list[np.ndarray] | None = None,
    teacher_gammas: np.ndarray | None = None,
    anchor: np.ndarray | None = None,
    distill: DistillConfig | None = None,
    prox: ProxConfig | None = None,
    stats: dict | None = None,
) -> tuple[float, np.ndarray, np.ndarray | None, nn.ForwardCache]:
    """Per-strategy composite local loss on one batch.

    Returns (total loss, dloss/dlogits, parameter-space gradient addend or None,
    forward cache). The addend is the prox contribution, which bypasses the
    logits; everything else backpropagates through dloss/dlogits.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    logits, cache = nn.forward(params, spec, batch_x)
    probs = softmax(logits)
    loss, dlogits = cross_entropy(probs, batch_y, stats)

    if strategy == "fedprox":
        if prox is None or anchor is None:
            raise ValueError("fedprox needs a ProxConfig and an anchor parameter vector")
        if prox.mu != 0.0:
            p_loss, p_grad = prox_term(params, anchor, prox)
            return loss + p_loss, dlogits, p_grad, cache
        return loss, dlogits, None, cache

    if strategy == "fedgkd":
        if distill is None or not teachers or len(teachers) != 1:
            raise ValueError("fedgkd needs a DistillConfig and exactly one teacher (the ensemble)")
        if distill.gamma != 0.0:
            t_logits, _ = nn.forward(teachers[0], spec, batch_x)
            kd_loss, kd_grad = kd_term(t_logits, logits, distill)
            return loss + kd_loss, dlogits + kd_grad, None, cache
        return loss, dlogits, None, cache

    if strategy == "fedgkd_vote":
        if distill is None or not teachers:
            raise ValueError("fedgkd_vote needs a DistillConfig and a nonempty teacher list")
        if teacher_gammas is None or len(teacher_gammas) != len(teachers):
            raise ValueError(
                f"fedgkd_vote needs one coefficient per teacher, got {0 if teacher_gammas is None else len(teacher_gammas)} for {len(teachers)} teachers"
            )
        total = loss
        dtotal = dlogits
        for teacher, gamma_m in zip(teachers, teacher_gammas):
            if gamma_m == 0.0:
                continue
            t_logits, _ = nn.forward(teacher, spec, batch_x)
            cfg_m = DistillConfig(
                gamma=float(gamma_m), temperature=distill.temperature, regularizer_kind=distill.regularizer_kind
            )
            kd_loss, kd_grad = kd_term(t_logits, logits, cfg_m)
            total = total + kd_loss
            dtotal = dtotal + kd_grad
        return total, dtotal, None, cache

    return loss, dlogits, None, cache
