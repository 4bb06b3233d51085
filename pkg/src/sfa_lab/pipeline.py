"""Run-directory orchestration shared by the CLI and the acceptance suite.

A run directory holds ``manifest.json`` plus every artifact a step produces::

    data/{speeds,distances,positions}.csv
    model.npz
    universal.csv
    weakness_<strategy>.csv
    attacks/<tag>/{metrics.json,perturbations.npz}
    figures/
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._accel import backend_name
from .attacks import (AttackConfig, MFGSMConfig, SpatialMask, apply_perturbation, fit_universal,
                      gwn_baseline, load_perturbation_csv, mfgsm, save_perturbation_csv,
                      solve_full_graph_attack, solve_sfa)
from .estimation import DatasetStats, dataset_stats, inverse_estimate
from .forecaster import ForecastModel, TrainConfig, load_params, save_params, train
from .graph import GraphSeries, WindowSpec, load_dataset, sliding_windows, split
from .metrics import build_report, mape
from .synth import SynthConfig, synth_distances, synth_graph, synth_series, write_dataset
from .weakness import (DESearchConfig, FilterConfig, WeaknessEvaluator, locate_cen, locate_ct, locate_de,
                       locate_deg, subsample_windows)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
ATTACK_METHODS = ("sfa", "gwn", "mfgsm", "full-inverse", "full-direct")
LOCATORS = ("de", "ct", "deg", "cen")

DEFAULT_CONFIG = {
    "synth": {f.name: f.default for f in fields(SynthConfig)},
    "graph": {"sigma": None, "kappa": 0.1},
    "window": {"N": 12, "M": 3},
    "split": [0.7, 0.1, 0.2],
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "attack": {"sqrt_xi": 15.0, "alpha": 1e4, "iters": 100, "step_size": 0.5, "seed": 0, "chunk": 16,
               "epsilon": 2.0},
    "universal": {"per_sensor": False, "max_windows": None, "seed": 0},
    "locate": {"strategy": "de", "s": 10, "g_max": 10, "p": 0.5, "seed": 0, "eval_windows": 50,
               "theta": 5.0, "baseline_relative": False},
    "eval": {"stride": 1, "horizon": "last", "network_mode": "pooled"},
}


class PipelineError(RuntimeError):
    """Failure with a short machine-readable ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def merge_config(base: dict, override: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    """Read a JSON or YAML config; a run manifest yields its stored config."""
    p = Path(path)
    if not p.exists():
        raise PipelineError("missing_input", f"config file {p} not found")
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if "config" in data and "schema_version" in data:
        _check_schema(data, p)
        cfg = dict(data["config"])
        cfg["_attacks"] = data.get("attack_runs", [])
        cfg["_locators"] = sorted(data.get("locate", {}))
        return cfg
    return data


def _check_schema(manifest: dict, where) -> None:
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise PipelineError("schema_mismatch",
                            f"{where}: manifest schema {manifest.get('schema_version')} != {MANIFEST_SCHEMA_VERSION}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


class Run:
    """A run directory and its manifest."""

    def __init__(self, root, config: Optional[dict] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = self.root / "manifest.json"
        if mpath.exists():
            self.manifest = json.loads(mpath.read_text())
            _check_schema(self.manifest, mpath)
        else:
            self.manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, "tool": "sfa-lab",
                             "tool_version": __version__, "config": copy.deepcopy(DEFAULT_CONFIG),
                             "timestamps": {}}
        self.config = merge_config(DEFAULT_CONFIG, self.manifest.get("config"))
        if config:
            self.config = merge_config(self.config, {k: v for k, v in config.items() if not k.startswith("_")})
        self.manifest["config"] = self.config

    # --- bookkeeping ----------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, p) -> str:
        return str(Path(p).relative_to(self.root))

    def save(self, step: Optional[str] = None) -> None:
        if step:
            self.manifest.setdefault("timestamps", {})[step] = _now()
        self.manifest["config"] = self.config
        self.manifest["backend"] = backend_name()
        _dump_json(self.path("manifest.json"), self.manifest)

    def require(self, key: str, what: str):
        if key not in self.manifest:
            raise PipelineError("missing_input", f"{what} not found in {self.root}; run the upstream step first")
        return self.manifest[key]

    # --- shared loaders ---------------------------------------------------------

    def spec(self) -> WindowSpec:
        return WindowSpec(**self.config["window"])

    def series(self) -> GraphSeries:
        d = self.path("data")
        if not (d / "speeds.csv").exists():
            raise PipelineError("missing_input", f"no dataset under {d}; run 'synth' or copy CSVs there")
        ds = self.manifest.get("dataset", {}).get("files", {})
        for name, digest in ds.items():
            if sha256_file(d / name) != digest:
                raise PipelineError("hash_mismatch", f"{d / name} differs from the manifest hash")
        g = self.config["graph"]
        return load_dataset(d, sigma=g["sigma"], kappa=g["kappa"])

    def split_windows(self, series: GraphSeries):
        spec = self.spec()
        sp = split(series, self.config["split"], spec)
        return sp, {name: sliding_windows(series, spec, getattr(sp, name))
                    for name in ("train", "validation", "test")}

    def stats(self) -> DatasetStats:
        return DatasetStats(**self.require("stats", "dataset stats"))

    def model(self, series: GraphSeries) -> ForecastModel:
        info = self.require("model", "trained model")
        p = self.path(info["path"])
        if sha256_file(p) != info["sha256"]:
            raise PipelineError("hash_mismatch", f"{p} differs from the manifest hash")
        params = load_params(p, n=series.graph.n, N=self.spec().N)
        return ForecastModel(params, series.graph, self.spec())

    def attack_config(self, sqrt_xi: Optional[float] = None) -> AttackConfig:
        a = self.config["attack"]
        return AttackConfig.from_sqrt_xi(a["sqrt_xi"] if sqrt_xi is None else sqrt_xi, alpha=a["alpha"],
                                         iters=a["iters"], step_size=a["step_size"], seed=a["seed"],
                                         chunk=a["chunk"])


# --- steps -----------------------------------------------------------------------

def step_synth(run: Run) -> dict:
    cfg = SynthConfig(**run.config["synth"])
    graph = synth_graph(cfg)
    series = synth_series(graph, cfg)
    paths = write_dataset(run.path("data"), series, synth_distances(cfg))
    run.config["graph"] = {"sigma": cfg.sigma_km, "kappa": cfg.kappa}
    run.manifest["dataset"] = {
        "source": "synth", "n": graph.n, "steps": len(series),
        "files": {p.name: sha256_file(p) for p in paths.values()},
    }
    run.save("synth")
    return {"n": graph.n, "steps": len(series), "requested_n": cfg.n}


def step_train(run: Run, callback=None) -> dict:
    series = run.series()
    if "dataset" not in run.manifest:
        files = [p for p in sorted(run.path("data").glob("*.csv"))]
        run.manifest["dataset"] = {"source": "external", "n": series.graph.n, "steps": len(series),
                                   "files": {p.name: sha256_file(p) for p in files}}
    sp, win = run.split_windows(series)
    train_vals = series.values[sp.train.start:sp.train.stop]
    stats = dataset_stats(train_vals)
    tc = TrainConfig(**run.config["train"])
    t0 = time.perf_counter()
    params = train(series.graph, run.spec(), win["train"], win["validation"], tc,
                   mean=float(train_vals.mean()), std=float(train_vals.std()), callback=callback)
    elapsed = time.perf_counter() - t0
    save_params(run.path("model.npz"), params)
    model = ForecastModel(params, series.graph, run.spec())
    Xv, Yv = win["validation"]
    val_mape = float(mape(model.predict(Xv), Yv[:, 0]))
    direct_mape = float(mape(Xv[:, -1], Yv[:, 0]))
    opp = inverse_estimate(Xv[:, -1], stats)
    opp_truth = inverse_estimate(Yv[:, 0], stats)
    run.manifest["stats"] = stats.to_dict()
    run.manifest["split"] = {k: [getattr(sp, k).start, getattr(sp, k).stop] for k in ("train", "validation", "test")}
    run.manifest["model"] = {
        "path": "model.npz", "sha256": sha256_file(run.path("model.npz")),
        "validation_mape": val_mape,
        "direct_estimate_mape": direct_mape,
        "inverse_estimate_mismatch_rate": float(np.mean(opp != opp_truth)),
        "train_seconds": elapsed,
    }
    run.save("train")
    return {"validation_mape": val_mape, "direct_estimate_mape": direct_mape}


def _validation_attack_windows(run: Run, win, size, seed):
    Xv, Yv = win["validation"]
    return subsample_windows(Xv, Yv[:, 0], size, seed)


def step_universal(run: Run) -> dict:
    series = run.series()
    _, win = run.split_windows(series)
    model = run.model(series)
    stats = run.stats()
    u = run.config["universal"]
    X, _ = _validation_attack_windows(run, win, u["max_windows"], u["seed"])
    cfg = run.attack_config()
    t0 = time.perf_counter()
    rho = fit_universal(model, X, inverse_estimate(X[:, -1], stats), cfg, stats.physical_max,
                        per_sensor=u["per_sensor"])
    save_perturbation_csv(run.path("universal.csv"), rho)
    run.manifest["universal"] = {"path": "universal.csv", "sha256": sha256_file(run.path("universal.csv")),
                                 "windows": int(X.shape[0]), "seconds": time.perf_counter() - t0,
                                 "max_abs": float(np.abs(rho).max())}
    run.save("universal")
    return {"max_abs": float(np.abs(rho).max()), "windows": int(X.shape[0])}


def _universal(run: Run) -> np.ndarray:
    info = run.require("universal", "universal perturbation")
    p = run.path(info["path"])
    if sha256_file(p) != info["sha256"]:
        raise PipelineError("hash_mismatch", f"{p} differs from the manifest hash")
    return load_perturbation_csv(p)


def weakness_evaluator(run: Run, series=None, win=None, model=None) -> WeaknessEvaluator:
    series = series or run.series()
    if win is None:
        _, win = run.split_windows(series)
    model = model or run.model(series)
    loc = run.config["locate"]
    X, Y = _validation_attack_windows(run, win, loc["eval_windows"], loc["seed"])
    return WeaknessEvaluator(model, X, Y, _universal(run), FilterConfig(loc["theta"]),
                             run.stats().physical_max, baseline_relative=loc["baseline_relative"])


def step_locate(run: Run, strategy: Optional[str] = None) -> dict:
    loc = run.config["locate"]
    strategy = strategy or loc["strategy"]
    if strategy not in LOCATORS:
        raise PipelineError("bad_argument", f"unknown locator {strategy!r}")
    series = run.series()
    t0 = time.perf_counter()
    info = {}
    if strategy in ("deg", "cen"):
        J = locate_deg(series.graph) if strategy == "deg" else locate_cen(series.graph)
    else:
        ev = weakness_evaluator(run, series)
        if strategy == "ct":
            J = locate_ct(ev)
        else:
            trace = []
            J = locate_de(ev, series.graph, DESearchConfig(loc["s"], loc["g_max"], loc["p"], loc["seed"],
                                                           loc["eval_windows"]), trace=trace)
            info["generations"] = len(trace) - 1
        path = run.path(f"weakness_{strategy}.csv")
        with open(path, "w") as f:
            f.write("sensor,aggregate,mean_count,max_count\n")
            for j, agg, counts in ev.table():
                f.write(f"{j},{agg!r},{float(np.mean(counts))!r},{int(np.max(counts))}\n")
        info.update({"evaluations": ev.evaluations, "sensors_evaluated": len(ev.cache),
                     "windows": int(ev.windows.shape[0]), "weakness_csv": run.rel(path),
                     "weakness_of_J": ev.value(J)})
    info["J"] = int(J)
    info["seconds"] = time.perf_counter() - t0
    run.manifest.setdefault("locate", {})[strategy] = info
    if strategy == loc["strategy"]:
        run.manifest["J"] = int(J)
    run.save(f"locate_{strategy}")
    return info


def attack_tag(method: str, sqrt_xi: float, epsilon: float, locator: Optional[str], sensor: Optional[int]) -> str:
    if method == "mfgsm":
        return f"mfgsm_eps{epsilon:g}"
    if method in ("sfa", "gwn"):
        where = f"J{sensor}" if sensor is not None else locator
        return f"{method}_{where}_sx{sqrt_xi:g}"
    return f"{method}_sx{sqrt_xi:g}"


def target_sensor(run: Run, series, locator: Optional[str], sensor: Optional[int]) -> int:
    if sensor is not None:
        if not 0 <= sensor < series.graph.n:
            raise PipelineError("bad_argument", f"sensor {sensor} out of range")
        return int(sensor)
    locator = locator or run.config["locate"]["strategy"]
    if locator == "deg":
        return locate_deg(series.graph)
    if locator == "cen":
        return locate_cen(series.graph)
    found = run.manifest.get("locate", {}).get(locator)
    if found is None:
        raise PipelineError("missing_input", f"no '{locator}' location in the manifest; run 'locate' first")
    return int(found["J"])


def test_windows(run: Run, win):
    stride = int(run.config["eval"]["stride"])
    X, Y = win["test"]
    idx = np.arange(0, X.shape[0], stride)
    return idx, np.ascontiguousarray(X[idx]), np.ascontiguousarray(Y[idx])


def generate_perturbations(method: str, model: ForecastModel, X, stats: DatasetStats, cfg: AttackConfig,
                           epsilon: float = 2.0, J: Optional[int] = None) -> np.ndarray:
    """Perturbations for a batch of input windows; reads nothing but ``X``."""
    upper = stats.physical_max
    if method in ("sfa", "gwn") and J is None:
        raise PipelineError("bad_argument", f"method {method} needs a target sensor")
    if method == "sfa":
        return solve_sfa(model, X, inverse_estimate(X[:, -1], stats), SpatialMask(J, model.n), cfg, upper)
    if method == "gwn":
        return gwn_baseline(SpatialMask(J, model.n), X.shape, cfg)
    if method == "full-inverse":
        return solve_full_graph_attack(model, X, inverse_estimate(X[:, -1], stats), cfg, upper)
    if method == "full-direct":
        return solve_full_graph_attack(model, X, X[:, -1], cfg, upper, maximize=True)
    if method == "mfgsm":
        return mfgsm(model, X, inverse_estimate(X[:, -1], stats), MFGSMConfig(epsilon), upper)
    raise PipelineError("bad_argument", f"unknown attack method {method!r}")


def _horizon_index(run: Run) -> Optional[int]:
    h = run.config["eval"]["horizon"]
    M = run.spec().M
    if h == "last":
        return M - 1
    if h == "all":
        return None
    h = int(h)
    if not 1 <= h <= M:
        raise PipelineError("bad_argument", f"horizon {h} outside 1..{M}")
    return h - 1


def step_attack(run: Run, method: str, sqrt_xi: Optional[float] = None, epsilon: Optional[float] = None,
                locator: Optional[str] = None, sensor: Optional[int] = None) -> dict:
    if method not in ATTACK_METHODS:
        raise PipelineError("bad_argument", f"unknown attack method {method!r}")
    a = run.config["attack"]
    sqrt_xi = float(a["sqrt_xi"] if sqrt_xi is None else sqrt_xi)
    epsilon = float(a["epsilon"] if epsilon is None else epsilon)
    series = run.series()
    _, win = run.split_windows(series)
    model = run.model(series)
    stats = run.stats()
    J = target_sensor(run, series, locator, sensor) if method in ("sfa", "gwn") else None
    if method in ("sfa", "gwn") and sensor is None:
        locator = locator or run.config["locate"]["strategy"]
    else:
        locator = None
    cfg = run.attack_config(sqrt_xi)
    idx, X, Y = test_windows(run, win)
    t0 = time.perf_counter()
    D = generate_perturbations(method, model, X, stats, cfg, epsilon, J)
    t1 = time.perf_counter()
    bound = epsilon if method == "mfgsm" else cfg.bound
    if np.abs(D).max(initial=0.0) > bound:
        raise PipelineError("scale_violation", f"perturbation exceeds its bound {bound}")
    clean = model.predict_recursive(X)
    attacked = model.predict_recursive(apply_perturbation(X, D, stats.physical_max))
    h = _horizon_index(run)
    sel = (lambda A: A[:, h]) if h is not None else (lambda A: A)
    tag = attack_tag(method, sqrt_xi, epsilon, locator, sensor)
    echo = {"method": method, "sqrt_xi": sqrt_xi, "epsilon": epsilon if method == "mfgsm" else None,
            "locator": locator, "sensor": J, "alpha": cfg.alpha, "iters": cfg.iters,
            "step_size": cfg.step_size, "seed": cfg.seed, "eval": run.config["eval"],
            "test_windows": int(X.shape[0]), "stats": stats.to_dict()}
    try:
        report = build_report(method, sel(clean), sel(attacked), sel(Y), target_sensor=J,
                              network_mode=run.config["eval"]["network_mode"], config=echo,
                              timing={"generate_seconds": t1 - t0, "evaluate_seconds": time.perf_counter() - t1})
    except ValueError as exc:
        raise PipelineError("non_finite_metrics", str(exc)) from exc
    out = run.path("attacks", tag)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "metrics.json", report.to_dict())
    np.savez_compressed(out / "perturbations.npz", delta=D, window_index=idx, clean=clean,
                        attacked=attacked, truth=Y)
    record = {"method": method, "sqrt_xi": sqrt_xi, "epsilon": epsilon, "locator": locator, "sensor": sensor}
    runs = run.manifest.setdefault("attack_runs", [])
    if record not in runs:
        runs.append(record)
    run.manifest.setdefault("attacks", {})[tag] = {
        "metrics": run.rel(out / "metrics.json"), "perturbations": run.rel(out / "perturbations.npz"),
        "perturbations_sha256": sha256_file(out / "perturbations.npz"), "J": J,
        "network_nmapei": report.network_nmapei,
    }
    run.save(f"attack_{tag}")
    return {"tag": tag, "network_nmapei": report.network_nmapei, "k_iv": report.k_iv, "J": J}


def strip_volatile(metrics: dict) -> dict:
    """Drop wall-clock fields before comparing two metrics files."""
    m = copy.deepcopy(metrics)
    m.pop("timing", None)
    return m


DEFAULT_ATTACKS = (
    {"method": "sfa", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": "de", "sensor": None},
    {"method": "sfa", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": "deg", "sensor": None},
    {"method": "gwn", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": "de", "sensor": None},
    {"method": "mfgsm", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": None, "sensor": None},
    {"method": "mfgsm", "sqrt_xi": 15.0, "epsilon": 3.0, "locator": None, "sensor": None},
    {"method": "full-inverse", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": None, "sensor": None},
    {"method": "full-direct", "sqrt_xi": 15.0, "epsilon": 2.0, "locator": None, "sensor": None},
)


def run_pipeline(root, config: Optional[dict] = None, attacks=None, locators=None, report: bool = True) -> Run:
    """synth -> train -> universal -> locate -> attacks -> report, in one run directory."""
    config = dict(config or {})
    attacks = list(attacks if attacks is not None else (config.pop("_attacks", None) or DEFAULT_ATTACKS))
    locators = list(locators if locators is not None else (config.pop("_locators", None) or ["de", "ct", "deg", "cen"]))
    run = Run(root, config)
    step_synth(run)
    step_train(run)
    step_universal(run)
    for strategy in locators:
        step_locate(run, strategy)
    for spec in attacks:
        step_attack(run, spec["method"], spec.get("sqrt_xi"), spec.get("epsilon"), spec.get("locator"),
                    spec.get("sensor"))
    if report:
        from .report import step_report
        step_report(run)
    return run
