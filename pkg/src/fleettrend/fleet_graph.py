"""Fleet timeseries container, CSV persistence and fleet-graph construction.

A fleet is N uniformly sampled power series sharing one timestamp grid.  The
fleet graph is static: every snapshot shares a single symmetric adjacency.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

SECONDS_PER_YEAR = 365 * 86400
EARTH_RADIUS_KM = 6371.0088
CSV_COLUMNS = ("system_id", "timestamp", "power", "lat", "lon")


class FleetError(ValueError):
    """Invalid fleet data or graph parameters."""


class DegenerateGeometryError(FleetError):
    """All node locations coincide, so the distance kernel has no bandwidth."""


class FleetLoadError(FleetError):
    """A fleet CSV file could not be parsed."""


@dataclass(frozen=True)
class FleetSeries:
    """Node-indexed, uniformly sampled multiseries.

    Parameters
    ----------
    node_ids : sequence of str
        One identifier per row of `values`.
    timestamps : array of datetime64[s]
        Strictly increasing, constant spacing.
    values : ndarray, shape (N, T)
        Power per node and timestamp.
    locations : ndarray, shape (N, 2), optional
        Latitude and longitude in degrees.
    """

    node_ids: tuple[str, ...]
    timestamps: np.ndarray
    values: np.ndarray
    locations: np.ndarray | None = None
    samples_per_year: int = field(init=False)

    def __post_init__(self):
        node_ids = tuple(str(n) for n in self.node_ids)
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "node_ids", node_ids)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", values)
        if len(set(node_ids)) != len(node_ids):
            raise FleetError("node_ids must be unique")
        if values.ndim != 2 or values.shape != (len(node_ids), len(ts)):
            raise FleetError(
                f"values must have shape ({len(node_ids)}, {len(ts)}), got {values.shape}"
            )
        if len(ts) < 2:
            raise FleetError("a fleet needs at least two timestamps")
        steps = np.diff(ts).astype(np.int64).astype(float)
        interval = steps[0]
        if interval <= 0 or np.any(np.abs(steps - interval) > 1e-6 * interval):
            raise FleetError("timestamps must be strictly increasing with constant spacing")
        if self.locations is not None:
            loc = np.asarray(self.locations, dtype=float)
            if loc.shape != (len(node_ids), 2):
                raise FleetError(f"locations must have shape ({len(node_ids)}, 2)")
            object.__setattr__(self, "locations", loc)
        spy = max(1, int(round(SECONDS_PER_YEAR / interval)))
        object.__setattr__(self, "samples_per_year", spy)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def interval_seconds(self) -> float:
        return float((self.timestamps[1] - self.timestamps[0]).astype(np.int64))

    def with_values(self, values: np.ndarray) -> "FleetSeries":
        """Same nodes, grid and locations carrying different values."""
        return FleetSeries(self.node_ids, self.timestamps, values, self.locations)


@dataclass(frozen=True)
class FleetGraph:
    """Static undirected fleet graph with binary adjacency."""

    n_nodes: int
    adjacency: np.ndarray
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.int8)
        if adj.shape != (self.n_nodes, self.n_nodes):
            raise FleetError("adjacency shape does not match n_nodes")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj) != 0):
            raise FleetError("adjacency must be symmetric with a zero diagonal")
        if not np.all((adj == 0) | (adj == 1)):
            raise FleetError("adjacency entries must be 0 or 1")
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "FleetGraph":
        adj = np.asarray(adjacency, dtype=np.int8)
        i, j = np.nonzero(np.triu(adj, k=1))
        return cls(adj.shape[0], adj, tuple(zip(i.tolist(), j.tolist())))

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "FleetGraph":
        adj = np.zeros((n_nodes, n_nodes), dtype=np.int8)
        for i, j in edges:
            if i == j:
                raise FleetError("self-loops are not allowed in the fleet graph")
            adj[i, j] = adj[j, i] = 1
        return cls.from_adjacency(adj)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def message_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Directed message edges with self-loops, sorted by receiving node.

        Returns ``(dst, src, indptr)`` where ``indptr`` is the CSR row pointer
        over receivers; every receiver owns at least its self-loop.
        """
        adj = self.adjacency.astype(bool) | np.eye(self.n_nodes, dtype=bool)
        dst, src = np.nonzero(adj)
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=self.n_nodes), out=indptr[1:])
        return dst, src, indptr

    def neighborhood_matrix(self, weights: np.ndarray) -> sparse.csr_matrix:
        """Sparse N x N matrix holding per-message weights at (dst, src)."""
        _, src, indptr = self.message_index
        return sparse.csr_matrix((weights, src, indptr), shape=(self.n_nodes, self.n_nodes))

    def subgraph(self, nodes: Sequence[int]) -> "FleetGraph":
        nodes = np.asarray(nodes, dtype=np.int64)
        return FleetGraph.from_adjacency(self.adjacency[np.ix_(nodes, nodes)])

    def ball(self, nodes: Sequence[int], radius: int) -> np.ndarray:
        """Sorted indices of all nodes within `radius` hops of `nodes`."""
        reached = np.zeros(self.n_nodes, dtype=bool)
        reached[np.asarray(nodes, dtype=np.int64)] = True
        adj = self.adjacency.astype(bool)
        for _ in range(radius):
            grown = reached | adj[reached].any(axis=0)
            if np.array_equal(grown, reached):
                break
            reached = grown
        return np.flatnonzero(reached)


def _pairwise_distances(locations: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        diff = locations[:, None, :] - locations[None, :, :]
        return np.sqrt((diff**2).sum(-1))
    if metric == "haversine":
        lat = np.radians(locations[:, 0])
        lon = np.radians(locations[:, 1])
        dlat = lat[:, None] - lat[None, :]
        dlon = lon[:, None] - lon[None, :]
        h = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
        return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    raise FleetError(f"unknown distance metric {metric!r}")


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 <= epsilon <= 1.0:
        raise FleetError(f"epsilon must lie in [0, 1], got {epsilon}")


def build_spatial_adjacency(locations, epsilon: float, metric: str = "euclidean") -> FleetGraph:
    """Threshold a Gaussian distance kernel into a binary fleet graph.

    Nodes i != j are linked when ``exp(-d_ij**2 / sigma**2) >= epsilon``, with
    sigma the population standard deviation of the N(N-1)/2 pairwise
    distances.  Larger `epsilon` gives a sparser graph.
    """
    loc = np.asarray(locations, dtype=float)
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise FleetError("locations must be an (N, 2) array")
    n = loc.shape[0]
    if n < 2:
        raise FleetError("at least two nodes are needed to build a graph")
    _check_epsilon(epsilon)
    dist = _pairwise_distances(loc, metric)
    sigma = dist[np.triu_indices(n, k=1)].std()
    if sigma == 0.0:
        raise DegenerateGeometryError(
            "all pairwise distances are equal (sigma = 0); build the graph explicitly"
        )
    kernel = np.exp(-(dist**2) / sigma**2)
    adj = (kernel >= epsilon).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return FleetGraph.from_adjacency(adj)


def build_correlation_adjacency(series: FleetSeries | np.ndarray, epsilon: float) -> FleetGraph:
    """Link nodes whose series have ``|pearson r| >= epsilon``."""
    _check_epsilon(epsilon)
    if isinstance(series, FleetSeries):
        values, names = series.values, series.node_ids
    else:
        values = np.asarray(series, dtype=float)
        names = tuple(str(i) for i in range(values.shape[0]))
    std = values.std(axis=1)
    flat = np.flatnonzero(std == 0)
    if flat.size:
        raise FleetError(f"node {names[flat[0]]!r} has zero variance; correlation undefined")
    r = np.corrcoef(values)
    adj = (np.abs(r) >= epsilon).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return FleetGraph.from_adjacency(adj)


# -- persistence -------------------------------------------------------------


def _parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is not None:
        stamp = stamp.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(stamp, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s"))


def load_fleet_csv(path, value_column: str = "power") -> FleetSeries:
    """Read a long-format fleet CSV.

    Rows are grouped by ``system_id`` (first-appearance order) and sorted by
    timestamp.  Every system must cover the identical timestamp grid.
    ``lat``/``lon`` are optional but, when present, constant per system.
    """
    path = Path(path)
    rows: dict[str, dict[np.datetime64, float]] = {}
    coords: dict[str, tuple[float, float] | None] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("system_id", "timestamp", value_column) if c not in header]
        if missing:
            raise FleetLoadError(f"{path}: missing column(s) {', '.join(missing)}")
        has_loc = "lat" in header and "lon" in header
        for lineno, rec in enumerate(reader, start=2):
            sid = (rec["system_id"] or "").strip()
            if not sid:
                raise FleetLoadError(f"{path}: row {lineno}: empty system_id")
            try:
                ts = _parse_timestamp(rec["timestamp"])
                val = float(rec[value_column])
            except (TypeError, ValueError) as exc:
                raise FleetLoadError(f"{path}: row {lineno}: {exc}") from None
            loc = None
            if has_loc and (rec["lat"] or "").strip() and (rec["lon"] or "").strip():
                try:
                    loc = (float(rec["lat"]), float(rec["lon"]))
                except ValueError as exc:
                    raise FleetLoadError(f"{path}: row {lineno}: {exc}") from None
            node = rows.setdefault(sid, {})
            if ts in node:
                raise FleetLoadError(f"{path}: row {lineno}: duplicate timestamp for {sid!r}")
            node[ts] = val
            if sid not in coords:
                coords[sid] = loc
            elif coords[sid] != loc:
                raise FleetLoadError(f"{path}: row {lineno}: lat/lon not constant for {sid!r}")
    if not rows:
        raise FleetLoadError(f"{path}: no data rows")
    ids = list(rows)
    grid = sorted(set().union(*(rows[s].keys() for s in ids)))
    for sid in ids:
        if len(rows[sid]) != len(grid):
            raise FleetLoadError(
                f"{path}: ragged grid, node {sid!r} has {len(rows[sid])} of {len(grid)} timestamps"
            )
    values = np.array([[rows[s][t] for t in grid] for s in ids])
    locs = None
    if all(coords[s] is not None for s in ids):
        locs = np.array([coords[s] for s in ids])
    try:
        return FleetSeries(tuple(ids), np.array(grid, dtype="datetime64[s]"), values, locs)
    except FleetError as exc:
        raise FleetLoadError(f"{path}: {exc}") from None


def write_fleet_csv(series: FleetSeries, path, value_column: str = "power") -> Path:
    path = Path(path)
    stamps = [format_timestamp(t) for t in series.timestamps]
    cols = ["system_id", "timestamp", value_column]
    if series.locations is not None:
        cols += ["lat", "lon"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i, sid in enumerate(series.node_ids):
            extra = []
            if series.locations is not None:
                extra = [repr(float(series.locations[i, 0])), repr(float(series.locations[i, 1]))]
            for t, stamp in enumerate(stamps):
                writer.writerow([sid, stamp, repr(float(series.values[i, t])), *extra])
    return path


def write_graph(graph: FleetGraph, path, epsilon: float, mode: str) -> tuple[Path, Path]:
    """Write ``i j`` edge lines plus a ``.json`` sidecar next to `path`."""
    if mode not in ("spatial", "correlation"):
        raise FleetError(f"mode must be 'spatial' or 'correlation', got {mode!r}")
    path = Path(path)
    path.write_text("".join(f"{i} {j}\n" for i, j in graph.edges), encoding="utf-8")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"n_nodes": graph.n_nodes, "epsilon": epsilon, "mode": mode}, indent=2),
        encoding="utf-8",
    )
    return path, sidecar


def read_graph(path) -> tuple[FleetGraph, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    edges = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FleetLoadError(f"{path}: line {lineno}: expected 'i j'")
        edges.append((int(parts[0]), int(parts[1])))
    return FleetGraph.from_edges(int(meta["n_nodes"]), edges), meta


def regular_timestamps(n_samples: int, samples_per_year: int, start="2010-01-01T00:00:00"):
    """Uniform grid of `n_samples` instants at ``365 days / samples_per_year``."""
    step = int(round(SECONDS_PER_YEAR / samples_per_year))
    return np.datetime64(start, "s") + np.arange(n_samples) * np.timedelta64(step, "s")


def calendar_points(years: int, interval_seconds: int, start="2010-01-01") -> int:
    """Number of samples in ``[start, start + years)`` on the civil calendar."""
    begin = np.datetime64(start, "D")
    y = int(str(begin)[:4]) + years
    end = np.datetime64(f"{y}{str(begin)[4:]}", "D")
    span = (end - begin).astype("timedelta64[s]").astype(np.int64)
    return int(math.ceil(span / interval_seconds))
