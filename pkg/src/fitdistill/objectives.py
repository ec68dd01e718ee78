"""Losses for explanation distillation and fit classification.

Every logarithm is floored: ``log(max(x, 1e-12))``.  Floored terms
contribute zero gradient.  Token-level losses are means over unmasked
positions rather than sums, so values are comparable across lengths.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import (
    EPS,
    LOG_EPS,
    ShapeError,
    Tape,
    Tensor,
    Var,
    log_softmax_np,
    primitive,
    softmax_np,
)


class DivergenceKind(str, enum.Enum):
    FKL = "FKL"
    JS = "JS"
    TVD = "TVD"
    SKL = "SKL"

    @classmethod
    def parse(cls, s: "str | DivergenceKind") -> "DivergenceKind":
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).upper())
        except ValueError:
            raise ValueError(f"unknown divergence {s!r}; expected one of FKL, JS, TVD, SKL") from None


@dataclass(frozen=True)
class LossWeights:
    lambda_sft: float = 0.1
    lambda_kd: float = 0.9

    def __post_init__(self):
        if self.lambda_sft < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_sft + self.lambda_kd <= 0:
            raise ValueError("lambda_sft + lambda_kd must be positive")


@dataclass(frozen=True)
class LossReport:
    sft: float
    kd: float
    combined: float
    token_count: int


def _flog(x: Tensor) -> Tensor:
    return np.log(np.maximum(x, EPS))


def _dflog(x: Tensor) -> Tensor:
    """Derivative of the floored log; zero where the floor is active."""
    return np.where(x > EPS, 1.0 / np.maximum(x, EPS), 0.0)


def _kl(p: Tensor, q: Tensor) -> Tensor:
    return (p * (_flog(p) - _flog(q))).sum(axis=-1)


def _divergence_rows(kind: DivergenceKind, p: Tensor, q: Tensor) -> Tensor:
    """Row-wise divergence over the last axis."""
    if kind is DivergenceKind.FKL:
        return _kl(p, q)
    if kind is DivergenceKind.SKL:
        return _kl(p, q) + _kl(q, p)
    if kind is DivergenceKind.TVD:
        return 0.5 * np.abs(p - q).sum(axis=-1)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _divergence_dq(kind: DivergenceKind, p: Tensor, q: Tensor) -> Tensor:
    """Partial derivative of the row divergence w.r.t. each entry of ``q``."""
    if kind is DivergenceKind.FKL:
        return -p * _dflog(q)
    if kind is DivergenceKind.SKL:
        return -p * _dflog(q) + _flog(q) + q * _dflog(q) - _flog(p)
    if kind is DivergenceKind.TVD:
        # subgradient: exact ties contribute 0
        return 0.5 * np.sign(q - p)
    m = 0.5 * (p + q)
    dm = _dflog(m)
    return 0.5 * (-0.5 * p * dm) + 0.5 * (_flog(q) + q * _dflog(q) - _flog(m) - 0.5 * q * dm)


def _check_distribution(name: str, x: Tensor) -> None:
    if np.any(x < 0):
        raise ValueError(f"{name} has negative mass")
    s = x.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-9):
        raise ValueError(f"{name} does not sum to 1 (deviation {np.max(np.abs(s - 1.0)):.3g})")


def divergence(kind, p, q) -> float:
    """``d(p, q)`` for one pair of probability vectors, natural log."""
    kind = DivergenceKind.parse(kind)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"divergence: shapes must match and be 1-d, got {p.shape} and {q.shape}")
    _check_distribution("p", p)
    _check_distribution("q", q)
    return float(max(0.0, _divergence_rows(kind, p, q)))


# ---------------------------------------------------------------------------
# fused taped primitives
# ---------------------------------------------------------------------------


def _nll_fwd(logits, *, targets, weights):
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"nll: logits {logits.shape} do not align with targets {targets.shape}")
    w = weights
    logp = log_softmax_np(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    live = picked > LOG_EPS
    per_tok = -np.maximum(picked, LOG_EPS)
    return (w * per_tok).sum(), (logp, w, live)


def _nll_bwd(g, vals, out, ctx, *, targets, weights):
    logp, w, live = ctx
    idx = np.asarray(targets)[..., None]
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, -1) - 1.0, -1)
    return (g * (w * live)[..., None] * grad,)


primitive("nll", 1)((_nll_fwd, _nll_bwd))


def _kd_fwd(student_logits, *, teacher_probs, weights, kind):
    if student_logits.shape != teacher_probs.shape:
        raise ShapeError(
            f"kd: student logits {student_logits.shape} and teacher {teacher_probs.shape} differ"
        )
    w = weights
    q = softmax_np(student_logits)
    rows = _divergence_rows(kind, teacher_probs, q)
    return (w * rows).sum(), (q, w)


def _kd_bwd(g, vals, out, ctx, *, teacher_probs, weights, kind):
    q, w = ctx
    dq = _divergence_dq(kind, teacher_probs, q)
    ds = q * (dq - (dq * q).sum(axis=-1, keepdims=True))
    return (g * w[..., None] * ds,)


primitive("kd-divergence", 1)((_kd_fwd, _kd_bwd))


def _pick_nll_fwd(probs, *, labels):
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ShapeError(f"class-nll: probs {probs.shape} do not align with labels {labels.shape}")
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    n = max(1, labels.size)
    return (-_flog(picked)).sum() / n, (picked, n)


def _pick_nll_bwd(g, vals, out, ctx, *, labels):
    picked, n = ctx
    grad = np.zeros_like(vals[0])
    np.put_along_axis(grad, np.asarray(labels)[..., None], (-_dflog(picked) / n)[..., None], -1)
    return (g * grad,)


primitive("class-nll", 1)((_pick_nll_fwd, _pick_nll_bwd))


# ---------------------------------------------------------------------------
# public loss surface
# ---------------------------------------------------------------------------


def mask_weights(mask) -> Tensor:
    """Uniform weights over unmasked positions (mean over all of them)."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("all positions are masked")
    return mask.astype(np.float64) / n


def row_mean_weights(mask) -> Tensor:
    """Per-row mean over unmasked positions, then mean over rows."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("a row has all positions masked")
    return mask / counts / mask.shape[0]


def _weights_for(shape: tuple, mask, weights) -> Tensor:
    w = mask_weights(mask) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ShapeError(f"mask shape {w.shape} does not match positions {shape}")
    return w


def sft_nll(logits: Var, targets, mask=None, weights=None) -> Var:
    """Taped token NLL of ``targets``: mean over unmasked positions, or ``weights``-weighted sum."""
    targets = np.asarray(targets)
    w = _weights_for(targets.shape, mask, weights)
    return logits.tape.apply("nll", logits, targets=targets, weights=w)


def kd_term(kind, teacher_logits: Tensor | None, student_logits: Var, mask=None, weights=None,
            teacher_probs: Tensor | None = None) -> Var:
    """Taped divergence per position, averaged like :func:`sft_nll`; the teacher is a constant."""
    kind = DivergenceKind.parse(kind)
    if teacher_probs is None:
        teacher_probs = softmax_np(np.asarray(teacher_logits, dtype=np.float64))
    w = _weights_for(student_logits.shape[:-1], mask, weights)
    return student_logits.tape.apply(
        "kd-divergence", student_logits, teacher_probs=teacher_probs, weights=w, kind=kind
    )


def class_nll(probs: Var, labels) -> Var:
    return probs.tape.apply("class-nll", probs, labels=np.asarray(labels))


def sft_loss(logits, targets, mask) -> float:
    t = Tape()
    return float(sft_nll(t.const(logits), targets, mask).value)


def kd_loss(kind, teacher_logits, student_logits, mask) -> float:
    t = Tape()
    return float(kd_term(kind, teacher_logits, t.const(student_logits), mask).value)


def explanation_loss(
    teacher_logits, student_logits, targets, mask, weights: LossWeights = LossWeights(), kind="TVD"
) -> LossReport:
    sft = sft_loss(student_logits, targets, mask)
    kd = kd_loss(kind, teacher_logits, student_logits, mask)
    return LossReport(
        sft=sft,
        kd=kd,
        combined=weights.lambda_sft * sft + weights.lambda_kd * kd,
        token_count=int(np.asarray(mask, bool).sum()),
    )


def classification_loss(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,):
        raise ValueError(f"probs must be a probability triple, got shape {probs.shape}")
    _check_distribution("probs", probs)
    if label not in (0, 1, 2):
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    return float(-_flog(probs[label]))
