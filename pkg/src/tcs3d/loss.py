"""Binary cross-entropy and focal BCE for multi-label targets.

Per cell, with ``p`` the predicted probability of the positive label::

    focal(y=1) = -alpha * (1 - p)**gamma * ln(p)
    focal(y=0) = -(1 - alpha) * p**gamma * ln(1 - p)

Both losses average over all (sample, class) cells. Probabilities are clamped
to ``[eps, 1 - eps]`` before any logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor5, node

DEFAULT_EPS = 1e-7
MAX_GAMMA = 10.0


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.5
    gamma: float = 2.0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= MAX_GAMMA:
            raise ValueError(f"gamma must lie in [0, {MAX_GAMMA}], got {self.gamma}")
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")


@dataclass
class LabelBatch:
    """Binary targets ``y`` and predicted probabilities ``y_hat``, both (samples, classes)."""

    y: np.ndarray
    y_hat: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64)
        if self.y.shape != self.y_hat.shape:
            raise ValueError(f"shape mismatch: y {self.y.shape} vs y_hat {self.y_hat.shape}")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("targets must be 0 or 1")
        if self.y.size == 0:
            raise ValueError("empty label batch")

    def clamped(self, eps: float = DEFAULT_EPS) -> np.ndarray:
        return np.clip(self.y_hat, eps, 1.0 - eps)


def bce_cells(y: np.ndarray, y_hat: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    p = np.clip(y_hat, eps, 1.0 - eps)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce(batch: LabelBatch, eps: float = DEFAULT_EPS) -> float:
    return float(bce_cells(batch.y, batch.y_hat, eps).mean())


def fbce_terms(y: np.ndarray, y_hat: np.ndarray, p: FocalParams):
    """Positive and negative per-cell contributions, already alpha-weighted."""
    q = np.clip(y_hat, p.eps, 1.0 - p.eps)
    pos = -p.alpha * (1.0 - q) ** p.gamma * np.log(q) * y
    neg = -(1.0 - p.alpha) * q ** p.gamma * np.log1p(-q) * (1.0 - y)
    return pos, neg


def fbce_cells(y: np.ndarray, y_hat: np.ndarray, p: FocalParams) -> np.ndarray:
    pos, neg = fbce_terms(y, y_hat, p)
    return pos + neg


def fbce(batch: LabelBatch, p: FocalParams) -> float:
    return float(fbce_cells(batch.y, batch.y_hat, p).mean())


def bce_grad(y: np.ndarray, y_hat: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """d(mean bce)/d(y_hat), evaluated at the clamped probability."""
    q = np.clip(y_hat, eps, 1.0 - eps)
    return (-y / q + (1.0 - y) / (1.0 - q)) / y.size


def fbce_grad(y: np.ndarray, y_hat: np.ndarray, p: FocalParams) -> np.ndarray:
    """d(mean fbce)/d(y_hat), evaluated at the clamped probability."""
    q = np.clip(y_hat, p.eps, 1.0 - p.eps)
    g = p.gamma
    one_minus = 1.0 - q
    # gamma * x**(gamma - 1) is written as gamma * x**gamma / x to stay finite at gamma = 0
    d_pos = p.alpha * (g * one_minus ** g / one_minus * np.log(q) - one_minus ** g / q)
    d_neg = -(1.0 - p.alpha) * (g * q ** g / q * np.log1p(-q) - q ** g / one_minus)
    return (d_pos * y + d_neg * (1.0 - y)) / y.size


def fbce_grad_check(batch: LabelBatch, p: FocalParams, step: float = 1e-6) -> dict:
    """Compare :func:`fbce_grad` with central differences, cell by cell.

    Returns a dict with the analytic and numeric gradients, the per-cell
    relative error and ``max_rel_err``.
    """
    y, y_hat = batch.y, batch.y_hat
    analytic = fbce_grad(y, y_hat, p)
    numeric = np.empty_like(analytic)
    flat_hat = y_hat.reshape(-1)
    for i in range(flat_hat.size):
        hi = flat_hat.copy()
        lo = flat_hat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fbce_cells(y, hi.reshape(y_hat.shape), p).mean()
        f_lo = fbce_cells(y, lo.reshape(y_hat.shape), p).mean()
        numeric.reshape(-1)[i] = (f_hi - f_lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    rel = np.abs(analytic - numeric) / denom
    return {"analytic": analytic, "numeric": numeric, "rel_err": rel,
            "max_rel_err": float(rel.max())}


# ---------------------------------------------------------------------------
# graph ops: probabilities arrive as a (samples, classes, 1, 1, 1) tensor


def _as_matrix(prob: Tensor5, y: np.ndarray) -> np.ndarray:
    k, m = prob.shape[:2]
    if prob.shape[2:] != (1, 1, 1):
        raise ValueError(f"probabilities must be shaped (K, M, 1, 1, 1), got {prob.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (k, m):
        raise ValueError(f"targets shaped {y.shape}, probabilities {(k, m)}")
    return y


def bce_loss(prob: Tensor5, y: np.ndarray, eps: float = DEFAULT_EPS) -> Tensor5:
    y = _as_matrix(prob, y)
    q = prob.values.reshape(y.shape)
    value = bce_cells(y, q, eps).mean()
    grad = bce_grad(y, q, eps).reshape(prob.shape)
    return node(np.full((1, 1, 1, 1, 1), value), (prob,), lambda g: (g.reshape(()) * grad,))


def fbce_loss(prob: Tensor5, y: np.ndarray, p: FocalParams) -> Tensor5:
    y = _as_matrix(prob, y)
    q = prob.values.reshape(y.shape)
    value = fbce_cells(y, q, p).mean()
    grad = fbce_grad(y, q, p).reshape(prob.shape)
    return node(np.full((1, 1, 1, 1, 1), value), (prob,), lambda g: (g.reshape(()) * grad,))
