"""Sensor network topology, time series containers, windows and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class EmptyWindowsError(ValueError):
    """Raised when an index range is too short to hold a single window."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SensorGraph:
    weights: np.ndarray
    edges: frozenset = field(default=None)
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        W = _frozen(self.weights)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError(f"weights must be square, got shape {W.shape}")
        if not np.all(np.isfinite(W)) or np.any(W < 0):
            raise ValueError("weights must be finite and nonnegative")
        if np.any(np.diag(W) != 0):
            raise ValueError("weights must have a zero diagonal")
        derived = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(W)))
        if self.edges is None:
            edges = derived
        else:
            edges = frozenset((int(i), int(j)) for i, j in self.edges)
            if edges != derived:
                raise ValueError("edge set does not match the positive entries of weights")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "edges", edges)
        if self.positions is not None:
            P = _frozen(self.positions)
            if P.shape != (W.shape[0], 2):
                raise ValueError(f"positions must have shape ({W.shape[0]}, 2), got {P.shape}")
            object.__setattr__(self, "positions", P)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def degree(self) -> np.ndarray:
        """Number of outgoing edges per sensor."""
        return (self.weights > 0).sum(axis=1)


@dataclass(frozen=True)
class StateSnapshot:
    t: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class GraphSeries:
    """Per-sensor speeds on a uniform time grid, shape ``(T, n)`` in km/h."""

    graph: SensorGraph
    values: np.ndarray
    interval_minutes: float = 5.0
    start: Optional[datetime] = None

    def __post_init__(self):
        V = _frozen(self.values)
        if V.ndim != 2 or V.shape[1] != self.graph.n:
            raise ValueError(f"values must have shape (T, {self.graph.n}), got {V.shape}")
        if not np.all(np.isfinite(V)):
            raise ValueError("series contains non-finite values")
        if self.interval_minutes <= 0:
            raise ValueError("interval_minutes must be positive")
        object.__setattr__(self, "values", V)

    def __len__(self) -> int:
        return self.values.shape[0]

    def snapshot(self, t: int) -> StateSnapshot:
        return StateSnapshot(t, self.values[t])

    @property
    def snapshots(self) -> list[StateSnapshot]:
        return [self.snapshot(t) for t in range(len(self))]

    def timestamps(self) -> list[datetime]:
        start = self.start or datetime(2020, 1, 1)
        step = timedelta(minutes=self.interval_minutes)
        return [start + k * step for k in range(len(self))]


@dataclass(frozen=True)
class WindowSpec:
    N: int = 12
    M: int = 3

    def __post_init__(self):
        if not (1 <= self.M <= self.N):
            raise ValueError(f"need 1 <= M <= N, got N={self.N}, M={self.M}")

    @property
    def length(self) -> int:
        return self.N + self.M


@dataclass(frozen=True)
class DatasetSplit:
    train: range
    validation: range
    test: range


def _as_range(r, total: int) -> range:
    if r is None:
        return range(0, total)
    if isinstance(r, range):
        return r
    start, stop = r
    return range(int(start), int(stop))


def sliding_windows(series, spec: WindowSpec, index_range=None):
    """Cut ``(input, target)`` pairs from a contiguous index range.

    Window ``k`` reads steps ``[start+k, start+k+N)`` as input and
    ``[start+k+N, start+k+N+M)`` as target. Returns two arrays of shape
    ``(K, N, n)`` and ``(K, M, n)``.
    """
    values = series.values if isinstance(series, GraphSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"series values must be 2-D, got shape {values.shape}")
    r = _as_range(index_range, values.shape[0])
    if r.step != 1 or r.start < 0 or r.stop > values.shape[0] or r.stop < r.start:
        raise ValueError(f"invalid index range {r} for series of length {values.shape[0]}")
    count = len(r) - spec.N - spec.M + 1
    if count <= 0:
        raise EmptyWindowsError(
            f"range of length {len(r)} holds no window of length {spec.N + spec.M}")
    seg = values[r.start:r.stop]
    view = np.lib.stride_tricks.sliding_window_view(seg, spec.N + spec.M, axis=0)
    # view: (count, n, N+M) -> (count, N+M, n)
    view = np.moveaxis(view, -1, 1)[:count]
    return np.ascontiguousarray(view[:, :spec.N]), np.ascontiguousarray(view[:, spec.N:])


def window_count(length: int, spec: WindowSpec) -> int:
    return max(0, length - spec.N - spec.M + 1)


def split(series, fractions: Sequence[float] = (0.7, 0.1, 0.2), spec: Optional[WindowSpec] = None) -> DatasetSplit:
    """Chronological train/validation/test split.

    Sizes are ``floor(fraction * length)`` for train and validation; the
    remainder goes to test. ``series`` may be a GraphSeries or a length.
    """
    length = len(series) if not isinstance(series, (int, np.integer)) else int(series)
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)}")
    if spec is not None and length < 3 * spec.length:
        raise ValueError(f"series of length {length} is shorter than 3*(N+M)={3 * spec.length}")
    n_train = int(math.floor(fr[0] * length + 1e-9))
    n_val = int(math.floor(fr[1] * length + 1e-9))
    return DatasetSplit(
        train=range(0, n_train),
        validation=range(n_train, n_train + n_val),
        test=range(n_train + n_val, length),
    )


def build_adjacency_from_distances(distances: Iterable, n: int, sigma: Optional[float] = None,
                                   kappa: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` over listed pairs.

    Pairs not listed get weight 0. ``sigma`` defaults to the standard
    deviation of the listed distances.
    """
    rows = [(int(i), int(j), float(d)) for i, j, d in distances]
    if not (0.0 <= kappa < 1.0):
        raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
    W = np.zeros((n, n))
    if not rows:
        return W
    idx = np.array([(i, j) for i, j, _ in rows], dtype=np.int64)
    d = np.array([r[2] for r in rows])
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError("sensor index out of range")
    if sigma is None:
        sigma = float(np.std(d))
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w = np.exp(-(d / sigma) ** 2)
    w[w < kappa] = 0.0
    off = idx[:, 0] != idx[:, 1]
    W[idx[off, 0], idx[off, 1]] = w[off]
    return W


# --- CSV interchange ------------------------------------------------------

def write_speeds_csv(path, series: GraphSeries) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["timestamp"] + [f"s{i}" for i in range(series.graph.n)])
        for ts, row in zip(series.timestamps(), series.values):
            wr.writerow([ts.isoformat()] + [repr(float(v)) for v in row])


def read_speeds_csv(path):
    """Return ``(values (T, n), timestamps, interval_minutes)``."""
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if not header or header[0] != "timestamp":
            raise ValueError(f"{path}: first column must be 'timestamp'")
        expected = [f"s{i}" for i in range(len(header) - 1)]
        if header[1:] != expected:
            raise ValueError(f"{path}: sensor columns must be s0..s{len(header) - 2}")
        stamps, rows = [], []
        for rec in rd:
            stamps.append(datetime.fromisoformat(rec[0]))
            rows.append([float(x) for x in rec[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    if len(stamps) >= 2:
        deltas = {(b - a).total_seconds() for a, b in zip(stamps, stamps[1:])}
        if len(deltas) != 1 or min(deltas) <= 0:
            raise ValueError(f"{path}: timestamps must be strictly increasing and uniformly spaced")
        interval = deltas.pop() / 60.0
    else:
        interval = 5.0
    return values, stamps, interval


def write_distances_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["from", "to", "dist_km"])
        for i, j, d in rows:
            wr.writerow([int(i), int(j), repr(float(d))])


def read_distances_csv(path):
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != ["from", "to", "dist_km"]:
            raise ValueError(f"{path}: header must be from,to,dist_km")
        return [(int(r["from"]), int(r["to"]), float(r["dist_km"])) for r in rd]


def write_positions_csv(path, positions) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["sensor", "lon", "lat"])
        for i, (lon, lat) in enumerate(np.asarray(positions)):
            wr.writerow([i, repr(float(lon)), repr(float(lat))])


def read_positions_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != ["sensor", "lon", "lat"]:
            raise ValueError(f"{path}: header must be sensor,lon,lat")
        recs = sorted((int(r["sensor"]), float(r["lon"]), float(r["lat"])) for r in rd)
    if [r[0] for r in recs] != list(range(len(recs))):
        raise ValueError(f"{path}: sensors must be numbered 0..n-1")
    return np.array([[r[1], r[2]] for r in recs]).reshape(len(recs), 2)


def load_dataset(directory, sigma: Optional[float] = None, kappa: float = 0.1) -> GraphSeries:
    """Read ``speeds.csv``, ``distances.csv`` and optional ``positions.csv``."""
    d = Path(directory)
    values, stamps, interval = read_speeds_csv(d / "speeds.csv")
    n = values.shape[1]
    W = build_adjacency_from_distances(read_distances_csv(d / "distances.csv"), n, sigma, kappa)
    pos = read_positions_csv(d / "positions.csv") if (d / "positions.csv").exists() else None
    graph = SensorGraph(W, positions=pos)
    return GraphSeries(graph, values, interval, stamps[0] if stamps else None)
