"""Sensor weakness under the universal perturbation and weakest-vertex search."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import apply_perturbation
from .forecaster import ForecastModel
from .graph import SensorGraph


@dataclass(frozen=True)
class FilterConfig:
    theta: float = 5.0

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError("theta must be nonnegative")


@dataclass(frozen=True)
class DESearchConfig:
    s: int = 10
    g_max: int = 10
    p: float = 0.5
    seed: int = 0
    eval_windows: Optional[int] = 50

    def __post_init__(self):
        if self.s < 4:
            raise ValueError("s must be at least 4 (three distinct partners per candidate)")
        if self.g_max < 1 or not (0 < self.p < 1):
            raise ValueError("need g_max >= 1 and 0 < p < 1")


@dataclass(frozen=True)
class WeaknessScore:
    sensor: int
    counts: np.ndarray
    aggregate: float


def _filtered_count(err, theta):
    # entries below theta are zeroed, then nonzeros are counted
    a = np.abs(err)
    return np.count_nonzero((a >= theta) & (a > 0), axis=-1)


def weakness_at(model: ForecastModel, window, truth, rho_u, j: int, filt: FilterConfig,
                upper: float, reference=None):
    """Number of sensors whose one-step error is at least ``theta`` when only sensor ``j``
    carries the universal perturbation.

    ``window`` may be ``(N, n)`` or a batch ``(B, N, n)`` with ``truth`` of
    matching leading shape. With ``reference`` (clean predictions) the error is
    taken relative to it instead of the truth.
    """
    if truth is None:
        raise ValueError("weakness needs the next-step ground truth of each window")
    X = np.asarray(window, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    truth = np.asarray(truth, dtype=np.float64).reshape(X.shape[0], -1)
    delta = np.zeros(X.shape[1:])
    delta[:, j] = np.asarray(rho_u)[:, j]
    pred = model.predict(apply_perturbation(X, delta, upper))
    base = truth if reference is None else np.asarray(reference).reshape(truth.shape)
    counts = _filtered_count(pred - base, filt.theta)
    return int(counts[0]) if single else counts


def aggregate_weakness(model, windows, truths, rho_u, j, filt, upper, reference=None) -> WeaknessScore:
    X = np.asarray(windows)
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError("need at least one window")
    counts = np.asarray(weakness_at(model, X, truths, rho_u, j, filt, upper, reference))
    return WeaknessScore(j, counts, float(np.sqrt(np.sum(counts.astype(np.float64) ** 2))))


class WeaknessEvaluator:
    """Caches per-sensor aggregate weakness and counts the evaluations made."""

    def __init__(self, model, windows, truths, rho_u, filt: FilterConfig, upper: float,
                 baseline_relative: bool = False):
        self.model = model
        self.windows = np.asarray(windows, dtype=np.float64)
        self.truths = np.asarray(truths, dtype=np.float64)
        if self.windows.ndim != 3 or self.windows.shape[0] == 0:
            raise ValueError("need at least one window")
        self.rho_u = np.asarray(rho_u)
        self.filt = filt
        self.upper = upper
        self.reference = model.predict(self.windows) if baseline_relative else None
        self.cache: dict = {}

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def evaluations(self) -> int:
        """Window-level weakness evaluations performed so far."""
        return len(self.cache) * self.windows.shape[0]

    def score(self, j: int) -> WeaknessScore:
        j = int(j)
        if j not in self.cache:
            self.cache[j] = aggregate_weakness(self.model, self.windows, self.truths, self.rho_u, j,
                                               self.filt, self.upper, self.reference)
        return self.cache[j]

    def value(self, j: int) -> float:
        return self.score(j).aggregate

    def table(self) -> list:
        return [(j, sc.aggregate, sc.counts) for j, sc in sorted(self.cache.items())]


def subsample_windows(windows, truths, size: Optional[int], seed: int):
    """Seeded subset of windows (in chronological order); ``size=None`` keeps all."""
    X = np.asarray(windows)
    if size is None or size >= X.shape[0]:
        return X, np.asarray(truths)
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=size, replace=False))
    return X[idx], np.asarray(truths)[idx]


def _best(ev: WeaknessEvaluator, sensors) -> int:
    return min(sensors, key=lambda j: (-ev.value(j), j))


def locate_ct(ev: WeaknessEvaluator) -> int:
    """Complete traversal: argmax of aggregate weakness over all sensors."""
    return _best(ev, range(ev.n))


def locate_de(ev: WeaknessEvaluator, graph: SensorGraph, config: DESearchConfig, trace: Optional[list] = None) -> int:
    """Differential-evolution search over sensor positions with elitist selection.

    Each new candidate ``c_r1 + p * (c_r2 - c_r3)`` is snapped to the nearest
    sensor outside the current candidate set. The search stops when the set
    no longer changes or after ``g_max`` generations.
    """
    if graph.positions is None:
        raise ValueError("the DE locator needs sensor positions")
    n = graph.n
    if config.s > n:
        raise ValueError(f"population size s={config.s} exceeds the number of sensors ({n})")
    if config.s == n:
        return locate_ct(ev)
    rng = np.random.default_rng(config.seed)
    P = graph.positions
    deg = graph.degree()
    order = sorted(range(n), key=lambda i: (-deg[i], i))
    cand = order[:config.s]
    for j in cand:
        ev.score(j)
    if trace is not None:
        trace.append(list(cand))
    for _ in range(config.g_max):
        inside = np.zeros(n, dtype=bool)
        inside[cand] = True
        outside = np.flatnonzero(~inside)
        new = []
        for i in range(config.s):
            others = [k for k in range(config.s) if k != i]
            r1, r2, r3 = rng.choice(others, size=3, replace=False)
            pos = P[cand[r1]] + config.p * (P[cand[r2]] - P[cand[r3]])
            d2 = np.sum((P[outside] - pos) ** 2, axis=1)
            new.append(int(outside[np.argmin(d2)]))
        pool = sorted(set(cand) | set(new))
        for j in pool:
            ev.score(j)
        nxt = sorted(pool, key=lambda j: (-ev.value(j), j))[:config.s]
        if trace is not None:
            trace.append(list(nxt))
        if set(nxt) == set(cand):
            cand = nxt
            break
        cand = nxt
    return _best(ev, cand)


def locate_deg(graph: SensorGraph) -> int:
    """Sensor with the most edges (lowest index on ties)."""
    return int(np.argmax(graph.degree()))


def locate_cen(graph: SensorGraph) -> int:
    """Sensor with the largest weighted degree, i.e. row sum of the adjacency."""
    return int(np.argmax(graph.weights.sum(axis=1)))
