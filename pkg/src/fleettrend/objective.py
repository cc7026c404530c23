"""Composite decomposition loss and its analytic gradient.

``total = RE + lambda1 * MC + lambda2 * SC + lambda3 * SR`` where RE is the
reconstruction error, MC and SC keep fluctuation terms flat (segment means and
least-squares slope) and SR keeps the aging term smooth (spread of its first
differences).

In the default normalized mode every component is averaged over its natural
index set; ``normalized=False`` restores plain sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gae_array import Decomposition, ShapeError

PAPER_LAMBDAS = (5.0, 100.0, 10.0)


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = PAPER_LAMBDAS[0]
    lambda2: float = PAPER_LAMBDAS[1]
    lambda3: float = PAPER_LAMBDAS[2]
    segment_window: tuple[int, ...] = ()
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "segment_window", tuple(int(w) for w in self.segment_window))
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")

    def as_dict(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3,
                "segment_window": list(self.segment_window), "normalized": self.normalized}


@dataclass
class LossBreakdown:
    re: float
    mc: float
    sc: float
    sr: float
    total: float
    weights: dict = field(default_factory=dict)

    def record(self, **extra) -> dict:
        out = dict(extra)
        out.update(re=self.re, mc=self.mc, sc=self.sc, sr=self.sr, total=self.total)
        return out


def _rows(mask, n):
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    return np.flatnonzero(mask) if mask.dtype == bool else mask


def _mean_or_sum(values: np.ndarray, normalized: bool) -> float:
    if values.size == 0:
        return 0.0
    return float(values.mean() if normalized else values.sum())


# -- per-row kernels (value, gradient) ---------------------------------------


def segment_means(series, w: int) -> np.ndarray:
    """Means of the ``floor(T / w)`` consecutive full windows of `series`."""
    series = np.asarray(series, dtype=float)
    T = series.shape[-1]
    if w < 2:
        raise ValueError("segment window must be at least 2")
    if T < 2 * w:
        raise TooShortError(f"series of length {T} gives fewer than two segments of {w}")
    p = T // w
    return series[..., : p * w].reshape(*series.shape[:-1], p, w).mean(axis=-1)


def pair_weights(p: int) -> np.ndarray:
    """Ordered-pair weights growing linearly with segment distance, summing to 1."""
    idx = np.arange(p)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(float)
    return dist / dist.sum()


def mean_constraint_rows(H: np.ndarray, w: int):
    """Per-row weighted segment-mean spread and its gradient."""
    m = segment_means(H, w)
    p = m.shape[-1]
    W = pair_weights(p)
    diff = m[:, :, None] - m[:, None, :]
    values = (diff**2 * W).sum(axis=(1, 2))
    dm = 4.0 * (m * W.sum(axis=1) - m @ W)
    grad = np.zeros_like(H)
    grad[:, : p * w] = np.repeat(dm / w, w, axis=1)
    return values, grad


def _slope_coefficients(T: int) -> np.ndarray:
    t = np.arange(T, dtype=float)
    c = t - t.mean()
    return c / (c @ c)


def least_squares_slope(series) -> float | np.ndarray:
    """Ordinary least-squares slope against abscissa ``0..T-1``."""
    series = np.asarray(series, dtype=float)
    T = series.shape[-1]
    if T < 2:
        raise TooShortError("slope needs at least two samples")
    return series @ _slope_coefficients(T)


def slope_constraint_rows(H: np.ndarray):
    c = _slope_coefficients(H.shape[1])
    s = H @ c
    return np.abs(s), np.sign(s)[:, None] * c[None, :]


def smoothness_rows(H: np.ndarray):
    """Population SD of first differences per row, with gradient."""
    T = H.shape[1]
    if T < 3:
        raise TooShortError("smoothness needs at least three samples")
    d = np.diff(H, axis=1)
    centered = d - d.mean(axis=1, keepdims=True)
    sd = np.sqrt((centered**2).mean(axis=1))
    safe = np.where(sd > 0, sd, 1.0)
    g_d = np.where(sd[:, None] > 0, centered / ((T - 1) * safe[:, None]), 0.0)
    grad = np.zeros_like(H)
    grad[:, 1:] += g_d
    grad[:, :-1] -= g_d
    return sd, grad


# -- components --------------------------------------------------------------


def _check(X, d: Decomposition):
    X = np.asarray(X, dtype=float)
    if X.shape != d.h_a.shape:
        raise ShapeError(f"input shape {X.shape} != decomposition shape {d.h_a.shape}")
    return X


def reconstruction_error(X, d: Decomposition, mask=None, normalized: bool = True) -> float:
    X = _check(X, d)
    rows = _rows(mask, X.shape[0])
    r = (X - d.reconstruction())[rows]
    return _mean_or_sum(r**2, normalized)


def _windows(d: Decomposition, weights: LossWeights):
    if len(weights.segment_window) != d.k:
        raise ValueError(f"need {d.k} segment windows, got {len(weights.segment_window)}")
    return weights.segment_window


def mean_constraint(d: Decomposition, weights: LossWeights, mask=None) -> float:
    rows = _rows(mask, d.h_a.shape[0])
    vals = [mean_constraint_rows(h[rows], w)[0] for h, w in zip(d.h_f, _windows(d, weights))]
    return _mean_or_sum(np.concatenate(vals) if vals else np.zeros(0), weights.normalized)


def slope_constraint(d: Decomposition, mask=None, normalized: bool = True) -> float:
    rows = _rows(mask, d.h_a.shape[0])
    vals = [slope_constraint_rows(h[rows])[0] for h in d.h_f]
    return _mean_or_sum(np.concatenate(vals) if vals else np.zeros(0), normalized)


def smoothness_reg(d: Decomposition, mask=None, normalized: bool = True) -> float:
    rows = _rows(mask, d.h_a.shape[0])
    return _mean_or_sum(smoothness_rows(d.h_a[rows])[0], normalized)


def total_loss(X, d: Decomposition, weights: LossWeights, mask=None) -> LossBreakdown:
    return loss_and_gradients(X, d, weights, mask, need_grad=False)[0]


def loss_and_gradients(X, d: Decomposition, weights: LossWeights, mask=None, need_grad=True):
    """Loss breakdown plus gradients with respect to ``h_a`` and each ``h_f``.

    Only rows selected by `mask` (boolean or index array) contribute; the
    gradient is zero on the other rows.
    """
    X = _check(X, d)
    windows = _windows(d, weights)
    norm = weights.normalized
    n_all, T = X.shape
    rows = _rows(mask, n_all)
    n = rows.size

    resid = (X - d.reconstruction())[rows]
    re = _mean_or_sum(resid**2, norm)
    g_re = -2.0 * resid / (n * T if norm else 1.0)

    n_terms = max(d.k, 1) * n if norm else 1.0
    mc_vals, sc_vals, g_f = [], [], []
    for h, w in zip(d.h_f, windows):
        mv, mg = mean_constraint_rows(h[rows], w)
        sv, sg = slope_constraint_rows(h[rows])
        mc_vals.append(mv)
        sc_vals.append(sv)
        g_f.append(g_re + (weights.lambda1 * mg + weights.lambda2 * sg) / n_terms)
    mc = _mean_or_sum(np.concatenate(mc_vals), norm) if mc_vals else 0.0
    sc = _mean_or_sum(np.concatenate(sc_vals), norm) if sc_vals else 0.0

    sv, sg = smoothness_rows(d.h_a[rows])
    sr = _mean_or_sum(sv, norm)
    g_a = g_re + weights.lambda3 * sg / (n if norm else 1.0)

    total = re + weights.lambda1 * mc + weights.lambda2 * sc + weights.lambda3 * sr
    breakdown = LossBreakdown(re, mc, sc, sr, total, weights.as_dict())
    if not need_grad:
        return breakdown, None, None

    def scatter(g):
        full = np.zeros((n_all, T))
        full[rows] = g
        return full

    return breakdown, scatter(g_a), [scatter(g) for g in g_f]
