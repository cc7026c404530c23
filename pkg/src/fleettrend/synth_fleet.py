"""Synthetic PV fleets with a known degradation pattern.

Nodes sit in spatial clusters; all nodes of a cluster share one degradation
severity up to a small per-node jitter.  Each series is the noiseless aging
curve (the real degradation pattern, RDP) modulated by an annual sinusoid
plus additive Gaussian sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .fleet_graph import FleetSeries, regular_timestamps, write_fleet_csv

CASES = ("linear", "piecewise_linear", "exponential")
CASE_ALIASES = {"piecewise": "piecewise_linear", "exp": "exponential"}

# Site region roughly covering Colorado, in degrees.
REGION_LAT = (37.0, 41.0)
REGION_LON = (-109.0, -102.0)


class SpecError(ValueError):
    pass


def canonical_case(case: str) -> str:
    name = CASE_ALIASES.get(case, case)
    if name not in CASES:
        raise SpecError(f"unknown case {case!r}; valid cases: {', '.join(CASES)}")
    return name


@dataclass(frozen=True)
class DegradationSpec:
    """Parameters of a synthetic fleet.

    `annual_rate` is in %/year; for ``piecewise_linear`` it is a pair of rates
    before and after `breakpoint_years`.  `seasonal_amplitude` and `noise_sd`
    are fractions of `baseline`; `geo_jitter` is a fraction of the site
    region extent and `rate_jitter` a fraction of the cluster rate.
    """

    case: str = "linear"
    annual_rate: float | tuple[float, float] = -1.0
    breakpoint_years: float = 2.0
    seasonal_amplitude: float = 0.1
    noise_sd: float = 0.02
    n_clusters: int = 5
    geo_jitter: float = 0.04
    rate_jitter: float = 0.002
    seed: int = 0
    baseline: float = 100.0

    def validate(self) -> "DegradationSpec":
        bad = []
        try:
            case = canonical_case(self.case)
        except SpecError as exc:
            raise SpecError(f"case: {exc}") from None
        rates = self.rates()
        if case == "piecewise_linear" and len(rates) != 2:
            bad.append("annual_rate (piecewise_linear needs two rates)")
        if case != "piecewise_linear" and len(rates) != 1:
            bad.append("annual_rate (a single rate is required)")
        if any(abs(r) > 50 for r in rates):
            bad.append("annual_rate (magnitude above 50 %/year)")
        if case == "exponential" and any(r <= -100 for r in rates):
            bad.append("annual_rate")
        for name in ("seasonal_amplitude", "noise_sd", "geo_jitter", "rate_jitter"):
            if not 0.0 <= getattr(self, name) < 1.0:
                bad.append(name)
        if int(self.n_clusters) < 1:
            bad.append("n_clusters")
        if case == "piecewise_linear" and self.breakpoint_years <= 0:
            bad.append("breakpoint_years")
        if not self.baseline > 0:
            bad.append("baseline")
        if bad:
            raise SpecError("invalid degradation spec field(s): " + ", ".join(bad))
        return replace(self, case=case)

    def rates(self) -> tuple[float, ...]:
        rate = self.annual_rate
        if isinstance(rate, (tuple, list, np.ndarray)):
            return tuple(float(r) for r in rate)
        return (float(rate),)


class FleetShape(NamedTuple):
    n_nodes: int
    years: float
    samples_per_year: int


# 100 inverters, 10 years, one sample every 15 minutes.
PAPER_SHAPE = FleetShape(n_nodes=100, years=10, samples_per_year=35040)
# Laptop-sized stand-in used by tests and demos.
DESK_SHAPE = FleetShape(n_nodes=20, years=3, samples_per_year=365)


def paper_defaults(case: str) -> DegradationSpec:
    case = canonical_case(case)
    rate = {"linear": -1.0, "piecewise_linear": (1.0, -1.0), "exponential": -1.0}[case]
    return DegradationSpec(
        case=case,
        annual_rate=rate,
        breakpoint_years=2.0,
        n_clusters=5,
        geo_jitter=0.04,
        rate_jitter=0.002,
    )


def aging_curve(case: str, rates, years_elapsed: np.ndarray, breakpoint_years: float = 2.0):
    """Relative aging factor (1 at time zero) for rates given in %/year."""
    case = canonical_case(case)
    tau = np.asarray(years_elapsed, dtype=float)
    r = [x / 100.0 for x in rates]
    if case == "linear":
        return 1.0 + r[0] * tau
    if case == "exponential":
        return (1.0 + r[0]) ** tau
    before = 1.0 + r[0] * np.minimum(tau, breakpoint_years)
    return before + r[1] * np.maximum(tau - breakpoint_years, 0.0)


def n_samples_for(years: float, samples_per_year: int) -> int:
    """Grid length covering `years` with both endpoints included."""
    return int(round(years * samples_per_year)) + 1


def generate_fleet(spec: DegradationSpec, n_nodes: int, years: float, samples_per_year: int):
    """Simulate a clustered fleet; returns ``(FleetSeries, rdp)``.

    `rdp` is the N x T noiseless aging component.  Output is a pure function
    of `spec` (including its seed) and the fleet shape.
    """
    spec = spec.validate()
    if n_nodes < spec.n_clusters:
        raise SpecError("n_nodes must be at least n_clusters")
    if samples_per_year < 1:
        raise SpecError("samples_per_year must be positive")
    if years * samples_per_year < 2 * samples_per_year:
        raise SpecError("the fleet must span at least two years")
    n_t = n_samples_for(years, samples_per_year)
    rng = np.random.default_rng(spec.seed)

    lat_span = REGION_LAT[1] - REGION_LAT[0]
    lon_span = REGION_LON[1] - REGION_LON[0]
    centroids = np.column_stack(
        [rng.uniform(*REGION_LAT, spec.n_clusters), rng.uniform(*REGION_LON, spec.n_clusters)]
    )
    cluster = np.arange(n_nodes) % spec.n_clusters
    offsets = rng.uniform(-spec.geo_jitter, spec.geo_jitter, size=(n_nodes, 2))
    locations = centroids[cluster] + offsets * np.array([lat_span, lon_span])

    severity = 1.0 + rng.uniform(-spec.rate_jitter, spec.rate_jitter, size=n_nodes)
    tau = np.arange(n_t) / samples_per_year
    rdp = np.empty((n_nodes, n_t))
    for node in range(n_nodes):
        rates = [r * severity[node] for r in spec.rates()]
        rdp[node] = spec.baseline * aging_curve(spec.case, rates, tau, spec.breakpoint_years)

    seasonal = 1.0 + spec.seasonal_amplitude * np.sin(2 * np.pi * np.arange(n_t) / samples_per_year)
    noise = rng.normal(0.0, spec.noise_sd * spec.baseline, size=(n_nodes, n_t))
    values = rdp * seasonal + noise

    ids = tuple(f"inv{node:03d}" for node in range(n_nodes))
    stamps = regular_timestamps(n_t, samples_per_year)
    return FleetSeries(ids, stamps, values, locations), rdp


def write_fleet(series: FleetSeries, rdp: np.ndarray, path) -> tuple[Path, Path]:
    """Write ``<name>.csv`` and the ground-truth ``<name>.rdp.csv``."""
    path = Path(path)
    write_fleet_csv(series, path)
    rdp_path = path.with_name(path.stem + ".rdp.csv")
    truth = FleetSeries(series.node_ids, series.timestamps, rdp, None)
    write_fleet_csv(truth, rdp_path, value_column="rdp")
    return path, rdp_path
