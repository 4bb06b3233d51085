"""Surrogates for the unobservable next state: direct and inverse (opposite-state) estimation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetStats:
    v_min: float
    v_mid: float
    v_max: float

    def __post_init__(self):
        if not (self.v_min <= self.v_mid <= self.v_max):
            raise ValueError(f"need v_min <= v_mid <= v_max, got {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def physical_max(self) -> float:
        """Upper clamp for perturbed inputs."""
        return 1.2 * self.v_max


def dataset_stats(values) -> DatasetStats:
    """Global min / mean / max over all sensors and timestamps of ``values``.

    Pass only the training split.
    """
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot compute stats of an empty split")
    return DatasetStats(float(v.min()), float(v.mean()), float(v.max()))


def direct_estimate(snapshot):
    """The most recent state stands in for the next one."""
    return np.array(getattr(snapshot, "values", snapshot), dtype=np.float64, copy=True)


def opposite_value(v: float, stats: DatasetStats) -> float:
    return stats.v_max if v < stats.v_mid else stats.v_min


def inverse_estimate(snapshot, stats: DatasetStats) -> np.ndarray:
    """Elementwise opposite state: ``v_max`` where ``v < v_mid``, else ``v_min``.

    Works on a single snapshot ``(n,)`` or any stacked array of them.
    """
    v = np.asarray(getattr(snapshot, "values", snapshot), dtype=np.float64)
    return np.where(v < stats.v_mid, stats.v_max, stats.v_min)
