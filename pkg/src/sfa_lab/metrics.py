"""Attack-effectiveness metrics and the ``metrics.json`` report."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

METRICS_SCHEMA_VERSION = 1
K_LEVELS = (5, 10, 20, 30, 40)
MAPE_FLOOR = 1.0


def mape(pred, truth, floor: float = MAPE_FLOOR, axis=None):
    """Mean absolute percentage error with the denominator floored at ``floor`` km/h."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.mean(np.abs(pred - truth) / np.maximum(truth, floor), axis=axis) * 100.0


def mapei(clean_mape, attacked_mape):
    return np.asarray(attacked_mape, dtype=np.float64) - np.asarray(clean_mape, dtype=np.float64)


def nmapei(clean_mape, attacked_mape):
    clean = np.asarray(clean_mape, dtype=np.float64)
    if np.any(clean == 0):
        raise ValueError("NMAPEI undefined for a clean MAPE of 0")
    return (np.asarray(attacked_mape, dtype=np.float64) - clean) / clean * 100.0


def k_iv(nmapei_per_sensor, k: float) -> int:
    """Number of sensors whose NMAPEI is strictly greater than ``k`` percent."""
    return int(np.sum(np.asarray(nmapei_per_sensor) > k))


@dataclass
class AttackReport:
    method: str
    clean_mape: np.ndarray
    attacked_mape: np.ndarray
    network_clean_mape: float
    network_attacked_mape: float
    network_nmapei: float
    k_iv: dict
    target_sensor: Optional[int] = None
    config: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def mapei(self) -> np.ndarray:
        return mapei(self.clean_mape, self.attacked_mape)

    @property
    def nmapei(self) -> np.ndarray:
        return nmapei(self.clean_mape, self.attacked_mape)

    @property
    def network_mapei(self) -> float:
        return self.network_attacked_mape - self.network_clean_mape

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "method": self.method,
            "target_sensor": self.target_sensor,
            "network": {
                "clean_mape": self.network_clean_mape,
                "attacked_mape": self.network_attacked_mape,
                "mapei": self.network_mapei,
                "nmapei": self.network_nmapei,
            },
            "k_iv": {str(k): v for k, v in self.k_iv.items()},
            "per_sensor": {
                "clean_mape": self.clean_mape.tolist(),
                "attacked_mape": self.attacked_mape.tolist(),
                "mapei": self.mapei.tolist(),
                "nmapei": self.nmapei.tolist(),
            },
            "config": self.config,
            "timing": self.timing,
        }


def build_report(method: str, clean_pred, attacked_pred, truth, target_sensor=None,
                 network_mode: str = "pooled", config=None, timing=None,
                 k_levels: Sequence[float] = K_LEVELS) -> AttackReport:
    """Summarize clean vs attacked predictions against the truth.

    Arrays are ``(windows, ..., n)``; per-sensor MAPE pools every other axis.
    ``network_mode`` is ``"pooled"`` (NMAPEI of network-level MAPEs) or
    ``"mean"`` (mean of per-sensor NMAPEI).
    """
    clean_pred = np.asarray(clean_pred)
    n = clean_pred.shape[-1]
    cp = clean_pred.reshape(-1, n)
    ap = np.asarray(attacked_pred).reshape(-1, n)
    tr = np.asarray(truth).reshape(-1, n)
    clean = mape(cp, tr, axis=0)
    attacked = mape(ap, tr, axis=0)
    net_clean = float(mape(cp, tr))
    net_attacked = float(mape(ap, tr))
    per = nmapei(clean, attacked)
    if network_mode == "pooled":
        net = float(nmapei(net_clean, net_attacked))
    elif network_mode == "mean":
        net = float(np.mean(per))
    else:
        raise ValueError(f"unknown network_mode {network_mode!r}")
    if not all(np.isfinite(x) for x in (net_clean, net_attacked, net)):
        raise ValueError("non-finite metrics")
    return AttackReport(
        method=method, clean_mape=clean, attacked_mape=attacked,
        network_clean_mape=net_clean, network_attacked_mape=net_attacked, network_nmapei=net,
        k_iv={k: k_iv(per, k) for k in k_levels}, target_sensor=target_sensor,
        config=dict(config or {}), timing=dict(timing or {}),
    )
