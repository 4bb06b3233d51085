"""Acceptance criteria; each test prints one ``CRITERION k: PASS|FAIL`` line.

Run just this file with ``pytest tests/test_acceptance.py -v -s``.
"""
import json
import shutil
import time

import numpy as np
import pytest

from sfa_lab import pipeline as pl
from sfa_lab.attacks import (AttackConfig, MFGSMConfig, SpatialMask, fit_universal, gwn_baseline, mfgsm,
                             solve_full_graph_attack, solve_sfa)
from sfa_lab.forecaster import input_gradient
from sfa_lab.metrics import k_iv, mape, mapei, nmapei
from conftest import CRITERION_LINES, small_model

SMALL = {"synth": {"n": 15, "days": 6, "seed": 0}, "train": {"epochs": 2, "hidden": 8},
         "attack": {"iters": 8}, "universal": {"max_windows": 30},
         "locate": {"eval_windows": 20, "s": 5, "g_max": 3}, "eval": {"stride": 8}}


def report(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} ({detail})"
    CRITERION_LINES.append(line)
    print("\n" + line)
    assert ok, detail


def nmapei_of(run, tag):
    return json.loads(run.path(run.manifest["attacks"][tag]["metrics"]).read_text())["network"]["nmapei"]


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    model = small_model(n=6, N=8, M=3, hidden=6, seed=11)
    rng = np.random.default_rng(0)
    X = rng.uniform(30, 70, size=(4, 8, 6))
    c = rng.normal(size=(4, 6))

    def one_step(pred):
        return np.sum(c * pred, axis=-1), c

    def last_horizon(pred):
        grad = np.zeros_like(pred)
        grad[:, -1] = c
        return np.sum(c * pred[:, -1], axis=-1), grad

    worst, probes = 0.0, 0
    for recursive in (False, True):
        if recursive:
            g = input_gradient(model, X, last_horizon, recursive=True)
            f = lambda Z: np.sum(c * model.predict_recursive(Z)[:, -1])  # noqa: E731
        else:
            g = input_gradient(model, X, one_step)
            f = lambda Z: np.sum(c * model.predict(Z))  # noqa: E731
        for _ in range(60):
            idx = tuple(int(rng.integers(s)) for s in X.shape)
            Xp, Xm = X.copy(), X.copy()
            Xp[idx] += 1e-3
            Xm[idx] -= 1e-3
            fd = (f(Xp) - f(Xm)) / 2e-3
            denom = max(abs(fd), abs(g[idx]))
            err = 0.0 if denom == 0 else abs(fd - g[idx]) / denom
            worst = max(worst, err)
            probes += 1
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-3 and probes >= 100 and elapsed < 60,
           f"{probes} probes, worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_locator_oracle(tmp_path):
    lines, ok = [], True
    for seed in range(5):
        run = pl.Run(tmp_path / f"s{seed}", {"synth": {"n": 20, "days": 14, "seed": seed},
                                              "train": {"epochs": 8, "seed": seed},
                                              "universal": {"max_windows": 64}, "locate": {"seed": seed}})
        info = pl.step_synth(run)
        pl.step_train(run)
        pl.step_universal(run)
        de = pl.step_locate(run, "de")
        ct = pl.step_locate(run, "ct")
        good = de["J"] == ct["J"] and de["evaluations"] < ct["evaluations"]
        ok &= good
        lines.append(f"seed {seed} n={info['n']}: DE {de['J']}/{de['evaluations']} CT {ct['J']}/{ct['evaluations']}")
    report(2, ok, "; ".join(lines))


METHODS = ("sfa", "gwn", "mfgsm", "full-inverse", "full-direct", "universal")


def _seeded_runs(count=1000):
    """Yield (method, bound, delta, j) over seeded small-model attack runs."""
    models = [small_model(n=5, N=6, hidden=4, seed=s) for s in range(4)]
    for r in range(count):
        rng = np.random.default_rng(r)
        m = models[r % 4]
        method = METHODS[r % len(METHODS)]
        X = rng.uniform(0, 80, size=(2, 6, 5))
        T = rng.uniform(0, 80, size=(2, 5))
        sx = float(rng.uniform(0.5, 20.0))
        cfg = AttackConfig.from_sqrt_xi(sx, alpha=float(10 ** rng.uniform(-2, 4)), iters=int(rng.integers(0, 6)),
                                        step_size=float(rng.uniform(0.1, 30.0)), seed=r)
        j = int(rng.integers(5))
        if method == "sfa":
            d = solve_sfa(m, X, T, SpatialMask(j, 5), cfg, 90.0)
        elif method == "gwn":
            d = gwn_baseline(SpatialMask(j, 5), X.shape, cfg)
        elif method == "mfgsm":
            sx = float(rng.uniform(0.0, 5.0))
            d = mfgsm(m, X, T, MFGSMConfig(sx), 90.0)
        elif method == "full-inverse":
            d = solve_full_graph_attack(m, X, T, cfg, 90.0)
        elif method == "full-direct":
            d = solve_full_graph_attack(m, X, X[:, -1], cfg, 90.0, maximize=True)
        else:
            d = fit_universal(m, X, T, cfg, 90.0, per_sensor=bool(r % 2))
        yield method, sx, d, j, cfg.iters


def test_criterion_03_scale_guarantee():
    violations, runs = 0, 0
    for method, bound, d, _, _ in _seeded_runs():
        runs += 1
        violations += int(np.abs(d).max() > bound)
    report(3, violations == 0 and runs >= 1000, f"{runs} runs, {violations} violations")


def test_criterion_04_mask_discipline(benchmark_run):
    bad, runs, untouched = 0, 0, 0
    for method, _, d, j, iters in _seeded_runs():
        if method not in ("sfa", "gwn"):
            continue
        cols = np.flatnonzero(np.abs(d).sum(axis=(0, 1))).tolist()
        if method == "sfa" and iters == 0:
            # no descent step was taken, so the perturbation is identically zero
            untouched += 1
            bad += int(cols != [])
            continue
        runs += 1
        bad += int(cols != [j])
    run, _ = benchmark_run
    for tag, info in run.manifest["attacks"].items():
        if tag.startswith(("sfa_", "gwn_")):
            runs += 1
            d = np.load(run.path(info["perturbations"]))["delta"]
            bad += int(np.flatnonzero(np.abs(d).sum(axis=(0, 1))).tolist() != [info["J"]])
    report(4, bad == 0, f"{runs} SFA/GWN perturbations with exactly one nonzero column required, "
                        f"{untouched} zero-iteration runs required all-zero, {bad} violations")


def test_criterion_05_causality_audit(tmp_path, monkeypatch):
    base = tmp_path / "base"
    pl.run_pipeline(base, dict(SMALL), report=False)
    audit = tmp_path / "audit"
    shutil.copytree(base, audit)
    original = pl.test_windows

    def corrupted(run, win):
        idx, X, Y = original(run, win)
        return idx, X, np.random.default_rng(123).uniform(0, 80, size=Y.shape)

    monkeypatch.setattr(pl, "test_windows", corrupted)
    run = pl.Run(audit)
    changed, tags = [], []
    for spec in run.manifest["attack_runs"]:
        r = pl.step_attack(run, spec["method"], spec["sqrt_xi"], spec["epsilon"], spec["locator"], spec["sensor"])
        tags.append(r["tag"])
        a = np.load(base / "attacks" / r["tag"] / "perturbations.npz")
        b = np.load(audit / "attacks" / r["tag"] / "perturbations.npz")
        if a["delta"].tobytes() != b["delta"].tobytes():
            changed.append(r["tag"])
        assert not np.array_equal(a["truth"], b["truth"])
    report(5, not changed, f"{len(tags)} attacks regenerated with corrupted test targets, changed: {changed or 'none'}")


def test_criterion_06_attack_ordering(benchmark_run):
    run, elapsed = benchmark_run
    sfa = nmapei_of(run, "sfa_de_sx15")
    deg = nmapei_of(run, "sfa_deg_sx15")
    gwn = nmapei_of(run, "gwn_de_sx15")
    ok = sfa > deg > gwn >= 0 and sfa >= 5.0 and elapsed < 1800
    report(6, ok, f"SFA {sfa:.2f}% > DEG {deg:.2f}% > GWN {gwn:.2f}% >= 0, J={run.manifest['J']}, "
                  f"DEG vertex={run.manifest['attacks']['sfa_deg_sx15']['J']}, {elapsed:.0f}s end to end")


def test_criterion_07_inverse_vs_direct(benchmark_run):
    run, _ = benchmark_run
    ie = nmapei_of(run, "full-inverse_sx15")
    de = nmapei_of(run, "full-direct_sx15")
    report(7, ie >= 1.2 * de, f"inverse {ie:.1f}% vs direct {de:.1f}%, ratio {ie / de:.2f}")


def test_criterion_08_monotonicity(benchmark_run):
    run, _ = benchmark_run
    kiv_ok = True
    for tag, info in run.manifest["attacks"].items():
        m = json.loads(run.path(info["metrics"]).read_text())
        levels = sorted(m["k_iv"], key=float)
        counts = [m["k_iv"][k] for k in levels]
        kiv_ok &= all(a >= b for a, b in zip(counts, counts[1:]))
    curve = [nmapei_of(run, f"sfa_de_sx{x:g}") for x in (5, 10, 15, 20)]
    mono = all(a <= b for a, b in zip(curve, curve[1:]))
    report(8, kiv_ok and mono, f"k%-IV non-increasing in every report: {kiv_ok}; "
                               f"NMAPEI over sqrt_xi 5/10/15/20: {', '.join(f'{v:.2f}' for v in curve)}")


def test_criterion_09_metric_units():
    checks = []
    t = np.array([50.0, 60.0, 70.0])
    checks.append(mape(t, t) == 0.0)
    checks.append(mape(1.1 * t, t) == pytest.approx(10.0, abs=1e-12))
    checks.append(mapei(4.0, 4.0) == 0.0)
    checks.append(mapei(4.0, 6.0) == 2.0)
    checks.append(nmapei(10.0, 10.0) == 0.0)
    checks.append(nmapei(10.0, 11.52) == pytest.approx(15.2, abs=1e-12))
    checks.append(k_iv([40, 20, 5], 30) == 1)
    checks.append(k_iv([1.0, 2.0, 3.0], 0) == 3)
    rng = np.random.default_rng(0)
    clean = rng.uniform(1, 20, 1000)
    attacked = clean + rng.uniform(-1, 30, 1000)
    consistency = np.max(np.abs(nmapei(clean, attacked) - mapei(clean, attacked) / clean * 100.0))
    checks.append(consistency <= 1e-9)
    with pytest.raises(ValueError):
        nmapei(0.0, 1.0)
    report(9, all(checks), f"{sum(checks)}/{len(checks)} examples exact, NMAPEI/MAPEI gap {consistency:.1e}")


def test_criterion_10_reproducibility(tmp_path):
    first = pl.run_pipeline(tmp_path / "a", dict(SMALL))
    again = pl.run_pipeline(tmp_path / "b", pl.load_config_file(first.path("manifest.json")))
    diffs = []
    for tag, info in first.manifest["attacks"].items():
        a = pl.strip_volatile(json.loads(first.path(info["metrics"]).read_text()))
        other = again.manifest["attacks"].get(tag)
        b = pl.strip_volatile(json.loads(again.path(other["metrics"]).read_text())) if other else None
        if a != b:
            diffs.append(tag)
    same_model = first.manifest["model"]["sha256"] == again.manifest["model"]["sha256"]
    report(10, not diffs and same_model, f"{len(first.manifest['attacks'])} metrics.json compared, "
                                         f"differing: {diffs or 'none'}, model identical: {same_model}")
