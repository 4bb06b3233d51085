"""Seeded synthetic road-like graphs and traffic-speed series."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .graph import (GraphSeries, SensorGraph, build_adjacency_from_distances, write_distances_csv,
                    write_positions_csv, write_speeds_csv)

# unit-square coordinates map onto a box of this many km / degrees
EXTENT_KM = 20.0
EXTENT_DEG = 0.18
ORIGIN_LONLAT = (-118.5, 34.0)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 50
    days: float = 30.0
    interval_minutes: float = 5.0
    free_flow: float = 70.0
    daily_dip: float = 20.0
    event_rate: float = 8.0        # events per day, network-wide
    event_depth: float = 35.0      # km/h at the source sensor
    event_duration: int = 24       # steps
    diffusion: float = 0.3
    persistence: float = 0.9
    noise_std: float = 2.0
    radius: Optional[float] = None  # unit-square units; default 1.5*sqrt(1/n)
    kappa: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.days <= 0 or self.interval_minutes <= 0 or self.free_flow <= 0:
            raise ValueError("n >= 2 and days, interval_minutes, free_flow must be positive")
        if self.event_duration < 1 or self.event_depth < 0 or self.event_rate < 0 or self.daily_dip < 0:
            raise ValueError("event parameters must be nonnegative (duration >= 1)")
        if not (0 < self.diffusion < 1) or not (0 < self.persistence < 1):
            raise ValueError("diffusion and persistence must lie in (0, 1)")
        if not (0 <= self.noise_std < self.free_flow):
            raise ValueError("noise_std must lie in [0, free_flow)")
        if self.radius is not None and self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def effective_radius(self) -> float:
        return self.radius if self.radius is not None else 1.5 * np.sqrt(1.0 / self.n)

    @property
    def sigma_km(self) -> float:
        return self.effective_radius * EXTENT_KM


def _geometric(config: SynthConfig):
    rng = np.random.default_rng(config.seed)
    pts = rng.uniform(size=(config.n, 2))
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    r = config.effective_radius
    ii, jj = np.nonzero((dist <= r) & ~np.eye(config.n, dtype=bool))
    if len(ii) == 0:
        raise ValueError(f"degenerate graph: no sensor pair within radius {r:.4f}")
    _, labels = connected_components(dist <= r, directed=False)
    keep = np.flatnonzero(labels == np.bincount(labels).argmax())
    remap = -np.ones(config.n, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    rows = [(int(remap[i]), int(remap[j]), float(dist[i, j] * EXTENT_KM))
            for i, j in zip(ii, jj) if remap[i] >= 0 and remap[j] >= 0]
    W = build_adjacency_from_distances(rows, len(keep), sigma=config.sigma_km, kappa=config.kappa)
    positions = np.array(ORIGIN_LONLAT) + pts[keep] * EXTENT_DEG
    return SensorGraph(W, positions=positions), rows


def synth_graph(config: SynthConfig) -> SensorGraph:
    """Random geometric graph on the unit square, reduced to its largest component.

    The returned graph may have fewer than ``config.n`` sensors; check ``.n``.
    """
    return _geometric(config)[0]


def synth_distances(config: SynthConfig):
    """Pairwise distance rows ``(i, j, km)`` of the graph built by :func:`synth_graph`."""
    return _geometric(config)[1]


def _daily_profile(n: int, steps: int, interval: float, depth: float) -> np.ndarray:
    hours = (np.arange(steps) * interval / 60.0) % 24.0
    morning = np.exp(-0.5 * ((hours - 8.0) / 1.0) ** 2)
    evening = np.exp(-0.5 * ((hours - 17.5) / 1.5) ** 2)
    # sensor-dependent but seed-independent amplitudes
    idx = np.arange(n)
    a_m = 0.75 + 0.25 * np.sin(1.7 * idx)
    a_e = 0.75 + 0.25 * np.cos(2.3 * idx)
    return depth * (morning[:, None] * a_m[None, :] + 0.8 * evening[:, None] * a_e[None, :])


def draw_events(graph: SensorGraph, config: SynthConfig, steps: int, rng) -> list:
    """Random congestion events as ``(sensor, start, duration, depth)`` tuples."""
    days = steps * config.interval_minutes / 1440.0
    count = rng.poisson(config.event_rate * days)
    events = []
    for _ in range(count):
        s = int(rng.integers(graph.n))
        t0 = int(rng.integers(steps))
        dur = max(1, int(round(config.event_duration * rng.uniform(0.5, 1.5))))
        depth = config.event_depth * rng.uniform(0.5, 1.0)
        events.append((s, t0, dur, depth))
    return events


def congestion_field(graph: SensorGraph, config: SynthConfig, steps: int, events: Sequence) -> np.ndarray:
    """Congestion depth per (time, sensor), spread along the row-normalized adjacency."""
    n = graph.n
    W = graph.weights
    rs = W.sum(axis=1, keepdims=True)
    P = np.divide(W, rs, out=np.zeros_like(W), where=rs > 0)
    forced = np.zeros((steps, n))
    for s, t0, dur, depth in events:
        t1 = min(steps, t0 + dur)
        k = np.arange(t0, t1)
        forced[k, s] = np.maximum(forced[k, s], depth * np.sin(np.pi * (k - t0 + 0.5) / dur))
    lam, beta = config.persistence, config.diffusion
    c = np.zeros((steps, n))
    cur = np.zeros(n)
    for t in range(steps):
        cur = lam * ((1.0 - beta) * cur + beta * (P @ cur))
        cur = np.maximum(cur, forced[t])
        c[t] = cur
    return c


def synth_series(graph: SensorGraph, config: SynthConfig, events: Optional[Sequence] = None) -> GraphSeries:
    """Speeds = free flow - daily dip - diffused congestion + noise, clamped to [0, 1.1 free flow]."""
    steps = int(round(config.days * 1440.0 / config.interval_minutes))
    rng = np.random.default_rng([config.seed, 1])
    if events is None:
        events = draw_events(graph, config, steps, rng)
    dip = _daily_profile(graph.n, steps, config.interval_minutes, config.daily_dip)
    cong = congestion_field(graph, config, steps, events)
    noise = rng.normal(0.0, config.noise_std, size=(steps, graph.n)) if config.noise_std > 0 else 0.0
    v = np.clip(config.free_flow - dip - cong + noise, 0.0, 1.1 * config.free_flow)
    return GraphSeries(graph, v, config.interval_minutes)


def write_dataset(directory, series: GraphSeries, distance_rows) -> dict:
    """Write speeds/distances/positions CSVs; returns the file paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"speeds": d / "speeds.csv", "distances": d / "distances.csv"}
    write_speeds_csv(paths["speeds"], series)
    write_distances_csv(paths["distances"], distance_rows)
    if series.graph.positions is not None:
        paths["positions"] = d / "positions.csv"
        write_positions_csv(paths["positions"], series.graph.positions)
    return paths
