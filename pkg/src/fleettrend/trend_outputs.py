"""Degradation pattern, performance-loss rate and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .gae_array import Decomposition


class MetricError(ValueError):
    pass


@dataclass
class PlrReport:
    per_node_plr: np.ndarray
    fleet_mean_plr: float
    edp: np.ndarray

    def to_json(self, node_ids=None) -> str:
        payload = {
            "per_node_plr": [float(v) for v in self.per_node_plr],
            "fleet_mean_plr": float(self.fleet_mean_plr),
        }
        if node_ids is not None:
            payload["node_ids"] = list(node_ids)
        return json.dumps(payload)


def extract_edp(d: Decomposition) -> np.ndarray:
    """The estimated degradation pattern is the aging term itself."""
    return d.h_a


def global_plr(h_a_row, samples_per_year: int) -> float:
    """Mean percent change over every pair of samples one year apart (%/year)."""
    h = np.asarray(h_a_row, dtype=float)
    s = int(samples_per_year)
    T = h.shape[0]
    if s < 1 or T <= s:
        raise MetricError(f"series of length {T} does not span one year of {s} samples")
    base = h[: T - s]
    zero = np.flatnonzero(base == 0)
    if zero.size:
        raise MetricError(f"zero aging value at t={zero[0]} used as a PLR denominator")
    return float(np.mean((h[s:] - base) / base) * 100.0)


def plr_report(d: Decomposition, samples_per_year: int) -> PlrReport:
    edp = extract_edp(d)
    per_node = np.array([global_plr(row, samples_per_year) for row in edp])
    return PlrReport(per_node, float(per_node.mean()), edp)


def _pair(edp, rdp):
    edp = np.asarray(edp, dtype=float)
    rdp = np.asarray(rdp, dtype=float)
    if edp.shape != rdp.shape:
        raise MetricError(f"shape mismatch: {edp.shape} vs {rdp.shape}")
    return np.atleast_2d(edp), np.atleast_2d(rdp)


def mape(edp, rdp) -> float:
    """Mean absolute percent error of the estimated pattern, in percent."""
    edp, rdp = _pair(edp, rdp)
    if np.any(rdp == 0):
        raise MetricError("real degradation pattern contains zeros")
    n, T = rdp.shape
    return float(np.sum(np.abs(edp - rdp) / (n * T * np.abs(rdp))) * 100.0)


def scaled_ed(edp, rdp) -> float:
    """Node-averaged Euclidean distance after dividing each row by its first value."""
    edp, rdp = _pair(edp, rdp)
    for name, mat in (("edp", edp), ("rdp", rdp)):
        zero = np.flatnonzero(mat[:, 0] == 0)
        if zero.size:
            raise MetricError(f"{name} row {zero[0]} starts at zero and cannot be rescaled")
    diff = edp / edp[:, :1] - rdp / rdp[:, :1]
    return float(np.sqrt((diff**2).sum(axis=1)).mean())


def moving_average_oracle(series, window: int) -> np.ndarray:
    """Centered moving average per node with edge-replicated padding."""
    series = np.asarray(series, dtype=float)
    T = series.shape[-1]
    if window < 3 or window % 2 == 0 or window > T:
        raise MetricError(f"window must be odd, at least 3 and at most {T}; got {window}")
    return uniform_filter1d(series, size=window, axis=-1, mode="nearest")
