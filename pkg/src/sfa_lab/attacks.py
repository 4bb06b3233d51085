"""Perturbation design: full-graph, universal, single-vertex (SFA) and baselines.

All solvers share one routine: gradient steps normalized so the largest entry
moves by ``step_size`` km/h (never more than ``sqrt(xi)``), followed by the
proximal map of the hinge penalty ``alpha * sum(max(0, rho**2 - xi))``. A step
that fails to improve the objective is retried from the best iterate with half
the step. The best iterate is returned and finally clipped to
``[-sqrt(xi), +sqrt(xi)]``. Every solver is batched over windows;
windows never interact except in the universal fit, which averages them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forecaster import ForecastModel, GradientError


class AttackDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    xi: float = 225.0
    alpha: float = 1e4
    iters: int = 100
    step_size: float = 0.5
    seed: int = 0
    chunk: int = 16

    def __post_init__(self):
        if not self.xi > 0 or not self.alpha > 0:
            raise ValueError("xi and alpha must be positive")
        if self.iters < 0 or self.step_size <= 0 or self.chunk < 1:
            raise ValueError("iters must be >= 0, step_size and chunk positive")

    @classmethod
    def from_sqrt_xi(cls, sqrt_xi: float, **kw) -> "AttackConfig":
        return cls(xi=float(sqrt_xi) ** 2, **kw)

    @property
    def bound(self) -> float:
        return math.sqrt(self.xi)


@dataclass(frozen=True)
class MFGSMConfig:
    epsilon: float = 2.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass(frozen=True)
class SpatialMask:
    j: int
    n: int

    def __post_init__(self):
        if not (0 <= self.j < self.n):
            raise ValueError(f"sensor {self.j} out of range for n={self.n}")

    def matrix(self, N: int) -> np.ndarray:
        m = np.zeros((N, self.n))
        m[:, self.j] = 1.0
        return m


# --- building blocks ----------------------------------------------------------

def apply_perturbation(window, delta, upper: float):
    """``clip(window + delta, 0, upper)``; ``upper`` is the physical speed cap."""
    window = np.asarray(window, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if window.shape[-2:] != delta.shape[-2:] or delta.ndim > window.ndim:
        raise ValueError(f"shape mismatch: window {window.shape} vs perturbation {delta.shape}")
    return np.clip(window + delta, 0.0, upper)


def hinge_penalty(delta, xi: float):
    """Sum of ``max(0, rho**2 - xi)`` over the last two axes."""
    d = np.asarray(delta, dtype=np.float64)
    return np.maximum(0.0, d * d - xi).sum(axis=(-2, -1))


def _prox_hinge(y, xi: float, tau):
    """Proximal map of ``tau * max(0, x**2 - xi)`` applied elementwise.

    ``tau`` may be a scalar or broadcast against ``y``.
    """
    out = y.copy()
    bound = math.sqrt(xi)
    over = y * y > xi
    if np.any(over):
        shrunk = y[over] / (1.0 + 2.0 * np.broadcast_to(tau, y.shape)[over])
        out[over] = np.where(shrunk * shrunk > xi, shrunk, np.sign(y[over]) * bound)
    return out


def _norm_loss(target, sense: float):
    """Per-window ``sense * ||pred - target||_2`` and its gradient."""
    def loss(pred):
        r = pred - target
        nrm = np.sqrt(np.sum(r * r, axis=-1))
        safe = np.where(nrm > 0, nrm, 1.0)
        return sense * nrm, sense * r / safe[:, None]
    return loss


def _value_grad(model, X, delta, target, upper, sense, chunk):
    """Objective data term and its gradient w.r.t. delta for a batch of windows."""
    B = X.shape[0]
    vals = np.empty(B)
    grads = np.empty_like(X)
    for s in range(0, B, chunk):
        sl = slice(s, s + chunk)
        raw = X[sl] + delta[sl]
        Xp = np.clip(raw, 0.0, upper)
        v, g = model.value_and_input_grad(Xp, _norm_loss(target[sl], sense))
        # zero gradient where the clamp binds
        g *= (raw > 0.0) & (raw < upper)
        vals[sl] = v
        grads[sl] = g
    return vals, grads


def _check_batch(model, windows, target):
    X = np.asarray(windows, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    T = np.asarray(target, dtype=np.float64).reshape(X.shape[0], -1)
    if X.shape[1:] != (model.spec.N, model.n) or T.shape[1] != model.n:
        raise ValueError(f"windows {X.shape} / target {T.shape} inconsistent with model")
    return np.ascontiguousarray(X), T, single


def _proximal_descent(evaluate, shape, config: AttackConfig, mask=None):
    """Minimize ``data(d) + alpha*hinge(d)`` for a batch of independent perturbations.

    ``evaluate(delta) -> (data_value (B,), gradient (B, ...))``. Returns the
    best iterate per batch row (unclipped) and its objective.
    """
    B = shape[0]
    delta = np.zeros(shape)
    best, best_grad = delta.copy(), np.zeros(shape)
    best_obj = np.full(B, np.inf)
    step = np.full(B, min(config.step_size, config.bound))
    axes = tuple(range(1, len(shape)))
    expand = (slice(None),) + (None,) * (len(shape) - 1)
    for it in range(config.iters + 1):
        try:
            vals, g = evaluate(delta)
        except GradientError as exc:
            raise AttackDivergedError(f"{exc} at iteration {it}") from exc
        obj = vals + config.alpha * hinge_penalty(delta, config.xi)
        if not np.all(np.isfinite(obj)):
            raise AttackDivergedError(f"non-finite objective at iteration {it}")
        improved = obj < best_obj
        best_obj[improved] = obj[improved]
        best[improved] = delta[improved]
        best_grad[improved] = g[improved]
        if it == config.iters:
            break
        step[~improved] *= 0.5
        gm = best_grad if mask is None else best_grad * mask
        scale = np.abs(gm).max(axis=axes)
        scale[scale == 0] = 1.0
        y = best - (step / scale)[expand] * gm
        delta = _prox_hinge(y, config.xi, (step * config.alpha)[expand])
        if mask is not None:
            delta *= mask
    return best, best_obj


def _descend(model: ForecastModel, X, target, config: AttackConfig, upper: float,
             mask=None, sense: float = 1.0, clip: bool = True):
    """Per-window minimization of ``sense*||F(X+d)-target|| + alpha*hinge(d)``."""
    def evaluate(delta):
        return _value_grad(model, X, delta, target, upper, sense, config.chunk)

    best, best_obj = _proximal_descent(evaluate, X.shape, config, mask)
    if clip:
        best = np.clip(best, -config.bound, config.bound)
    return best, best_obj


# --- objectives -----------------------------------------------------------------

def _distance(model, X, D, T, upper):
    pred = model.predict(apply_perturbation(X, D, upper))
    return np.sqrt(np.sum((pred - T) ** 2, axis=-1))


def objective_inverse(model: ForecastModel, window, delta, target, config: AttackConfig, upper: float):
    """``||F(window+delta) - target||_2 + alpha * sum(max(0, delta**2 - xi))``."""
    X, T, single = _check_batch(model, window, target)
    D = np.asarray(delta, dtype=np.float64).reshape(X.shape)
    val = _distance(model, X, D, T, upper) + config.alpha * hinge_penalty(D, config.xi)
    if not np.all(np.isfinite(val)):
        raise AttackDivergedError("non-finite objective")
    return float(val[0]) if single else val


def objective_direct(model: ForecastModel, window, delta, config: AttackConfig, upper: float):
    """Minimization form of the direct-estimation attack: the last observation is the target
    and the distance enters with a negative sign."""
    X = np.asarray(window, dtype=np.float64)
    X, T, single = _check_batch(model, X, X[..., -1, :])
    D = np.asarray(delta, dtype=np.float64).reshape(X.shape)
    val = -_distance(model, X, D, T, upper) + config.alpha * hinge_penalty(D, config.xi)
    if not np.all(np.isfinite(val)):
        raise AttackDivergedError("non-finite objective")
    return float(val[0]) if single else val


# --- solvers ----------------------------------------------------------------------

def solve_full_graph_attack(model: ForecastModel, windows, target, config: AttackConfig, upper: float,
                            maximize: bool = False) -> np.ndarray:
    """Perturb every (lag, sensor) entry.

    Minimizes the distance to ``target`` (inverse estimation), or maximizes it
    when ``maximize`` is set (direct estimation, ``target`` = last observation).
    """
    X, T, single = _check_batch(model, windows, target)
    delta, _ = _descend(model, X, T, config, upper, sense=-1.0 if maximize else 1.0)
    return delta[0] if single else delta


def solve_sfa(model: ForecastModel, windows, target, mask: SpatialMask, config: AttackConfig,
              upper: float) -> np.ndarray:
    """Perturb only column ``mask.j`` of each window."""
    X, T, single = _check_batch(model, windows, target)
    if mask.n != model.n:
        raise ValueError("mask size does not match the model")
    delta, _ = _descend(model, X, T, config, upper, mask=mask.matrix(model.spec.N))
    return delta[0] if single else delta


def fit_universal(model: ForecastModel, windows, targets, config: AttackConfig, upper: float,
                  per_sensor: bool = False) -> np.ndarray:
    """One input-independent perturbation minimizing the window-averaged objective.

    Returns an ``(N, n)`` array; with ``per_sensor`` a single value per sensor
    is broadcast over all lags.
    """
    X, T, _ = _check_batch(model, windows, targets)
    if X.shape[0] == 0:
        raise ValueError("need at least one window to fit a universal perturbation")
    N, n = X.shape[1:]

    def evaluate(delta):
        vals, g = _value_grad(model, X, np.broadcast_to(delta[0], X.shape), T, upper, 1.0, config.chunk)
        g = g.mean(axis=0)
        if per_sensor:
            g = np.broadcast_to(g.sum(axis=0), (N, n))
        return np.array([vals.mean()]), g[None]

    best, _ = _proximal_descent(evaluate, (1, N, n), config)
    best = best[0]
    out = np.clip(best, -config.bound, config.bound)
    out.setflags(write=False)
    return out


def mfgsm(model: ForecastModel, windows, target, config: MFGSMConfig, upper: Optional[float] = None) -> np.ndarray:
    """``epsilon * sign`` of the gradient that moves the forecast toward ``target``."""
    X, T, single = _check_batch(model, windows, target)
    if config.epsilon == 0:
        out = np.zeros_like(X)
    else:
        upper = np.inf if upper is None else upper
        _, g = _value_grad(model, X, np.zeros_like(X), T, upper, 1.0, 256)
        out = -config.epsilon * np.sign(g)
    return out[0] if single else out


def gwn_baseline(mask: SpatialMask, shape, config: AttackConfig, seed: Optional[int] = None) -> np.ndarray:
    """Clipped Gaussian noise with std ``sqrt(xi)`` in column ``mask.j``.

    ``shape`` is ``(N, n)`` or ``(B, N, n)``.
    """
    shape = tuple(shape)
    if shape[-1] != mask.n:
        raise ValueError("mask size does not match the window shape")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    out = np.zeros(shape)
    noise = rng.normal(0.0, config.bound, size=shape[:-1])
    out[..., mask.j] = np.clip(noise, -config.bound, config.bound)
    return out


def save_perturbation_csv(path, delta) -> None:
    """Rows are lags (oldest first), columns sensors."""
    d = np.asarray(delta)
    header = ",".join(f"s{i}" for i in range(d.shape[1]))
    np.savetxt(path, d, delimiter=",", header=header, comments="", fmt="%.17g")


def load_perturbation_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
