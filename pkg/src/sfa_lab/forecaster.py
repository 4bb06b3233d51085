"""Reference spatiotemporal graph forecaster with exact input gradients.

Architecture: gated temporal conv (GLU) -> graph conv over the symmetrically
normalized adjacency with self loops -> gated temporal conv -> linear head
shared across sensors, plus a per-sensor bias and a learned skip weight on
the most recent observation. Inputs and outputs are in km/h; the model
z-scores internally with train-split statistics.
"""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .graph import SensorGraph, WindowSpec

log = logging.getLogger(__name__)

PARAMS_FORMAT = "sfa-lab-params/1"
PARAM_NAMES = ("w1", "b1", "ws", "bs", "w2", "b2", "wo", "bo", "wskip")


class TrainingDivergedError(RuntimeError):
    pass


class GradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    n: int
    N: int
    hidden: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.N - 2 * (self.kernel - 1) < 1:
            raise ValueError(f"input length N={self.N} too short for two temporal convs of kernel {self.kernel}")
        if self.n < 1 or self.hidden < 1 or self.kernel < 1:
            raise ValueError("n, hidden and kernel must be positive")

    @property
    def t_out(self) -> int:
        return self.N - 2 * (self.kernel - 1)

    def shapes(self) -> dict:
        K, H = self.kernel, self.hidden
        return {
            "w1": (K, 1, 2 * H), "b1": (2 * H,),
            "ws": (H, H), "bs": (H,),
            "w2": (K, H, 2 * H), "b2": (2 * H,),
            "wo": (self.t_out, H), "bo": (self.n,),
            "wskip": (1,),
        }


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: ArchConfig
    arrays: dict
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std <= 0:
            raise ValueError(f"invalid normalization stats mean={self.mean} std={self.std}")
        shapes = self.arch.shapes()
        if set(self.arrays) != set(shapes):
            raise ValueError(f"parameter names {sorted(self.arrays)} != {sorted(shapes)}")
        for k, shp in shapes.items():
            a = self.arrays[k]
            if a.shape != shp:
                raise ValueError(f"parameter {k!r} has shape {a.shape}, expected {shp}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {k!r} is not finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()}, self.mean, self.std)

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean


def init_params(arch: ArchConfig, mean: float, std: float, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, skip weight 1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shp in arch.shapes().items():
        if name.startswith("b"):
            arrays[name] = np.zeros(shp)
        elif name == "wskip":
            arrays[name] = np.ones(shp)
        else:
            if len(shp) == 3:
                fan_in, fan_out = shp[0] * shp[1], shp[0] * shp[2] // 2
            else:
                fan_in, fan_out = shp
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-lim, lim, size=shp)
    if "wo" in arrays:
        arrays["wo"] *= 0.1
    return ModelParams(arch, arrays, float(mean), float(std))


def normalized_adjacency(W: np.ndarray) -> np.ndarray:
    """``D^-1/2 (W + I) D^-1/2`` with D the row sums of ``W + I``."""
    A = np.asarray(W, dtype=np.float64) + np.eye(W.shape[0])
    d = A.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return np.ascontiguousarray(A * inv[:, None] * inv[None, :])


@dataclass(frozen=True)
class Forecast:
    values: np.ndarray
    horizons: tuple


class ForecastModel:
    """Forecaster ``F`` bound to a graph and a window spec."""

    def __init__(self, params: ModelParams, graph: SensorGraph, spec: WindowSpec):
        if params.arch.n != graph.n or params.arch.N != spec.N:
            raise ValueError(
                f"architecture (n={params.arch.n}, N={params.arch.N}) inconsistent with "
                f"graph n={graph.n} and spec N={spec.N}")
        self.params = params
        self.graph = graph
        self.spec = spec
        self.A = normalized_adjacency(graph.weights)

    @property
    def n(self) -> int:
        return self.graph.n

    # --- core passes ------------------------------------------------------

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != (self.spec.N, self.n):
            raise ValueError(f"input must have shape (N, n)=({self.spec.N}, {self.n}) "
                             f"or (B, N, n); got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        return np.ascontiguousarray(X), single

    def _forward(self, X):
        """Batched one-step forward in normalized space; returns (yz, cache)."""
        p = self.params.arrays
        Z = (X - self.params.mean) / self.params.std
        x = np.ascontiguousarray(Z[..., None])
        h1, a1, s1 = kernels.glu_conv_forward(x, p["w1"], p["b1"])
        h2, u = kernels.graph_conv_forward(h1, self.A, p["ws"], p["bs"])
        h3, a3, s3 = kernels.glu_conv_forward(h2, p["w2"], p["b2"])
        B, T2, n, H = h3.shape
        feat = h3.transpose(0, 2, 1, 3).reshape(B, n, T2 * H)
        yz = feat @ p["wo"].ravel() + p["bo"] + p["wskip"][0] * Z[:, -1, :]
        return yz, (Z, x, h1, a1, s1, u, h2, a3, s3, feat)

    def _backward(self, cache, dyz, need_params=True):
        p = self.params.arrays
        Z, x, h1, a1, s1, u, h2, a3, s3, feat = cache
        B, n = dyz.shape
        T2, H = p["wo"].shape
        grads = {}
        if need_params:
            grads["wo"] = np.tensordot(dyz, feat, axes=([0, 1], [0, 1])).reshape(T2, H)
            grads["bo"] = dyz.sum(axis=0)
            grads["wskip"] = np.array([np.sum(dyz * Z[:, -1, :])])
        dfeat = dyz[:, :, None] * p["wo"].ravel()[None, None, :]
        dh3 = np.ascontiguousarray(dfeat.reshape(B, n, T2, H).transpose(0, 2, 1, 3))
        dh2, grads["w2"], grads["b2"] = kernels.glu_conv_backward(h2, p["w2"], a3, s3, dh3, need_params)
        dh1, grads["ws"], grads["bs"] = kernels.graph_conv_backward(self.A, p["ws"], u, h2, dh2, need_params)
        dx, grads["w1"], grads["b1"] = kernels.glu_conv_backward(x, p["w1"], a1, s1, dh1, need_params)
        dZ = dx[..., 0]
        dZ[:, -1, :] += p["wskip"][0] * dyz
        return dZ, grads

    # --- public API -------------------------------------------------------

    def predict(self, X) -> np.ndarray:
        """One-step prediction in km/h for a window ``(N, n)`` or batch ``(B, N, n)``."""
        X, single = self._check(X)
        yz, _ = self._forward(X)
        y = yz * self.params.std + self.params.mean
        return y[0] if single else y

    def predict_recursive(self, X, M: Optional[int] = None) -> np.ndarray:
        """Recursive multistep forecast, shape ``(M, n)`` or ``(B, M, n)``."""
        X, single = self._check(X)
        M = self.spec.M if M is None else M
        win = X.copy()
        out = np.empty((X.shape[0], M, self.n))
        for k in range(M):
            y = self.predict(win)
            out[:, k] = y
            if k + 1 < M:
                win = np.concatenate((win[:, 1:], y[:, None, :]), axis=1)
        return out[0] if single else out

    def value_and_input_grad(self, X, loss: Callable, recursive: bool = False):
        """Evaluate ``loss`` on the forecast and return its gradient w.r.t. ``X``.

        ``loss(pred) -> (value, dvalue/dpred)`` receives the one-step
        prediction ``(B, n)``, or the recursive forecast ``(B, M, n)`` when
        ``recursive`` is set. ``value`` may be a scalar or a per-batch vector;
        the gradient is per batch element in either case.
        """
        X, single = self._check(X)
        std = self.params.std
        if not recursive:
            yz, cache = self._forward(X)
            val, dy = loss(yz * std + self.params.mean)
            dZ, _ = self._backward(cache, np.asarray(dy, dtype=np.float64) * std, need_params=False)
            g = dZ / std
        else:
            M = self.spec.M
            caches, wins = [], [X]
            preds = np.empty((X.shape[0], M, self.n))
            win = X
            for k in range(M):
                yz, cache = self._forward(win)
                caches.append(cache)
                preds[:, k] = yz * std + self.params.mean
                if k + 1 < M:
                    win = np.concatenate((win[:, 1:], preds[:, k][:, None, :]), axis=1)
                    wins.append(win)
            val, dpred = loss(preds)
            dpred = np.array(dpred, dtype=np.float64)
            dwin = np.zeros_like(X)
            for k in range(M - 1, -1, -1):
                # dwin holds d/d(window k) contributions from later steps
                dy = dpred[:, k] + dwin[:, -1] if k + 1 < M else dpred[:, k]
                carry = dwin[:, :-1].copy() if k + 1 < M else None
                dZ, _ = self._backward(caches[k], dy * std, need_params=False)
                dwin = dZ / std
                if carry is not None:
                    dwin[:, 1:] += carry
            g = dwin
        if not np.all(np.isfinite(g)):
            raise GradientError("non-finite input gradient")
        if single:
            g = g[0]
        return val, g

    def param_grads(self, X, dyz):
        """Gradients of ``sum(dyz * yz)`` w.r.t. all parameters (normalized space)."""
        X, _ = self._check(X)
        _, cache = self._forward(X)
        _, grads = self._backward(cache, dyz)
        return grads


def forecast_one_step(model: ForecastModel, X) -> np.ndarray:
    return model.predict(X)


def forecast_recursive(model: ForecastModel, X) -> Forecast:
    vals = model.predict_recursive(X)
    return Forecast(vals, tuple(range(1, model.spec.M + 1)))


def input_gradient(model: ForecastModel, X, loss: Callable, recursive: bool = False) -> np.ndarray:
    """Exact gradient of ``loss`` composed with the forecaster w.r.t. the input window."""
    return model.value_and_input_grad(X, loss, recursive=recursive)[1]


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    patience: int = 5
    seed: int = 0
    hidden: int = 32
    kernel: int = 3

    def __post_init__(self):
        for k in ("epochs", "batch_size", "patience", "hidden", "kernel"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if not self.learning_rate > 0 or self.seed < 0:
            raise ValueError("learning_rate must be positive and seed nonnegative")


def _one_step_mape(model, X, y, floor=1.0):
    pred = model.predict(X)
    return float(np.mean(np.abs(pred - y) / np.maximum(y, floor)) * 100.0)


def train(graph: SensorGraph, spec: WindowSpec, train_windows, val_windows, config: TrainConfig,
          mean: Optional[float] = None, std: Optional[float] = None, callback=None) -> ModelParams:
    """Fit parameters by Adam on one-step MSE with early stopping on validation MAPE.

    ``train_windows`` / ``val_windows`` are ``(inputs, targets)`` pairs as
    produced by :func:`sfa_lab.graph.sliding_windows`; only the first target
    step is used. Returns the parameters of the best validation epoch
    (epoch 0 being the initialization).
    """
    Xtr, Ytr = train_windows
    Xva, Yva = val_windows
    Xtr = np.ascontiguousarray(Xtr, dtype=np.float64)
    ytr = np.ascontiguousarray(Ytr[:, 0], dtype=np.float64)
    if Xtr.shape[0] < 1:
        raise ValueError("need at least one training window")
    if mean is None:
        mean = float(Xtr.mean())
    if std is None:
        std = float(Xtr.std()) or 1.0
    arch = ArchConfig(graph.n, spec.N, config.hidden, config.kernel)
    params = init_params(arch, mean, std, seed=config.seed)
    model = ForecastModel(params, graph, spec)
    rng = np.random.default_rng(config.seed)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, config.learning_rate
    m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    step = 0
    has_val = Xva is not None and len(Xva) > 0
    best = _one_step_mape(model, Xva, Yva[:, 0]) if has_val else np.inf
    best_params = params.copy()
    bad = 0
    zt_all = (ytr - mean) / std
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(Xtr.shape[0])
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            Xb = Xtr[idx]
            yz, cache = model._forward(Xb)
            r = yz - zt_all[idx]
            loss = float(np.mean(r * r))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            _, grads = model._backward(cache, 2.0 * r / r.size)
            step += 1
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                params.arrays[k] -= lr * mh / (np.sqrt(vh) + eps)
        train_loss = total / Xtr.shape[0]
        if not np.isfinite(train_loss) or not all(np.all(np.isfinite(a)) for a in params.arrays.values()):
            raise TrainingDivergedError(f"training diverged at epoch {epoch}")
        val = _one_step_mape(model, Xva, Yva[:, 0]) if has_val else train_loss
        log.info("epoch %d train_mse %.5f val_mape %.3f", epoch, train_loss, val)
        if callback is not None:
            callback(epoch, train_loss, val)
        if val < best:
            best, bad = val, 0
            best_params = params.copy()
        else:
            bad += 1
            if bad >= config.patience:
                break
    return best_params


# --- persistence --------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_params(path, params: ModelParams) -> None:
    """Write a deterministic ``.npz``-compatible container."""
    meta = {
        "format": PARAMS_FORMAT,
        "arch": {"n": params.arch.n, "N": params.arch.N, "hidden": params.arch.hidden,
                 "kernel": params.arch.kernel},
        "mean": params.mean.hex(),
        "std": params.std.hex(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE), json.dumps(meta, sort_keys=True))
        for name in PARAM_NAMES:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params.arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_DATE), buf.getvalue())


def load_params(path, n: Optional[int] = None, N: Optional[int] = None) -> ModelParams:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != PARAMS_FORMAT:
            raise ValueError(f"unsupported parameter format {meta.get('format')!r}")
        arch = ArchConfig(**meta["arch"])
        if n is not None and arch.n != n:
            raise ValueError(f"parameter file built for n={arch.n}, requested n={n}")
        if N is not None and arch.N != N:
            raise ValueError(f"parameter file built for N={arch.N}, requested N={N}")
        arrays = {}
        for name in PARAM_NAMES:
            with zf.open(f"{name}.npy") as f:
                arrays[name] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    return ModelParams(arch, arrays, float.fromhex(meta["mean"]), float.fromhex(meta["std"]))
