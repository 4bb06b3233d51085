"""Figures and summary tables for a finished run directory."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .metrics import K_LEVELS, METRICS_SCHEMA_VERSION


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def load_metrics(run, tag: str) -> dict:
    info = run.manifest.get("attacks", {}).get(tag)
    if info is None:
        from .pipeline import PipelineError
        raise PipelineError("missing_input", f"attack '{tag}' not found in the manifest")
    m = json.loads(run.path(info["metrics"]).read_text())
    if m.get("schema_version") != METRICS_SCHEMA_VERSION:
        from .pipeline import PipelineError
        raise PipelineError("schema_mismatch", f"{tag}: metrics schema {m.get('schema_version')}")
    return m


def summary_rows(run) -> list:
    rows = []
    for tag in sorted(run.manifest.get("attacks", {})):
        m = load_metrics(run, tag)
        cfg = m["config"]
        rows.append({"tag": tag, "method": m["method"], "sensor": m["target_sensor"],
                     "sqrt_xi": cfg.get("sqrt_xi"), "epsilon": cfg.get("epsilon"),
                     "clean_mape": m["network"]["clean_mape"], "attacked_mape": m["network"]["attacked_mape"],
                     "nmapei": m["network"]["nmapei"], **{f"k{k}": m["k_iv"][str(k)] for k in K_LEVELS}})
    return rows


def _write_table(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]))
                              for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _pick_sfa(run):
    sfa = [t for t, i in run.manifest.get("attacks", {}).items() if t.startswith("sfa_")]
    if not sfa:
        return None
    preferred = run.config["locate"]["strategy"]
    return max(sfa, key=lambda t: (load_metrics(run, t)["config"].get("locator") == preferred,
                                   load_metrics(run, t)["config"]["sqrt_xi"], t))


def step_report(run) -> dict:
    """Write ``figures/`` and ``summary.csv``; returns the produced paths."""
    from .pipeline import Run  # noqa: F401  (type only)
    out = run.path("figures")
    out.mkdir(parents=True, exist_ok=True)
    produced = {}
    rows = summary_rows(run)
    _write_table(run.path("summary.csv"), rows)
    produced["summary"] = "summary.csv"

    kiv = sorted((r for r in rows if r["method"] == "sfa"), key=lambda r: (r["sensor"], r["sqrt_xi"]))
    _write_table(out / "kiv_vs_sqrt_xi.csv", kiv)
    produced["kiv_table"] = run.rel(out / "kiv_vs_sqrt_xi.csv")

    plt = _plt()
    series = run.series()
    tag = _pick_sfa(run)
    if tag is not None:
        m = load_metrics(run, tag)
        J = m["target_sensor"]
        per = np.asarray(m["per_sensor"]["nmapei"])
        pos = series.graph.positions
        fig, ax = plt.subplots(figsize=(6, 5))
        if pos is not None:
            sc = ax.scatter(pos[:, 0], pos[:, 1], c=per, cmap="magma_r", s=40)
            ax.scatter(pos[J, 0], pos[J, 1], marker="o", s=160, facecolors="none", edgecolors="tab:cyan",
                       linewidths=2, label=f"J={J}")
            ax.tick_params(axis="x", labelrotation=30)
            ax.set_xlabel("longitude")
            ax.set_ylabel("latitude")
        else:
            sc = ax.scatter(np.arange(per.size), per, c=per, cmap="magma_r")
            ax.set_xlabel("sensor")
        fig.colorbar(sc, ax=ax, label="NMAPEI (%)")
        ax.legend(loc="best")
        ax.set_title(f"{tag}: per-sensor NMAPEI")
        fig.tight_layout()
        fig.savefig(out / "nmapei_map.png", dpi=110)
        plt.close(fig)
        produced["nmapei_map"] = run.rel(out / "nmapei_map.png")

        z = np.load(run.path(run.manifest["attacks"][tag]["perturbations"]))
        delta, clean, attacked, truth = z["delta"], z["clean"], z["attacked"], z["truth"]
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(delta[:, -1, J], lw=0.8, label="last input step")
        ax.plot(delta[:, :, J].mean(axis=1), lw=0.8, label="window mean")
        ax.axhline(0.0, c="k", lw=0.5)
        ax.set_xlabel("test window")
        ax.set_ylabel("km/h")
        ax.set_title(f"perturbation at sensor {J}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "perturbation_J.png", dpi=110)
        plt.close(fig)
        produced["perturbation"] = run.rel(out / "perturbation_J.png")

        others = np.argsort(per)[::-1]
        pick = [J] + [int(k) for k in others if k != J][:1] + [int(others[-1])]
        fig, axes = plt.subplots(len(pick), 1, figsize=(8, 2.2 * len(pick)), sharex=True)
        for ax, k in zip(np.atleast_1d(axes), pick):
            ax.plot(truth[:, -1, k], c="k", lw=0.8, label="truth")
            ax.plot(clean[:, -1, k], lw=0.8, label="clean")
            ax.plot(attacked[:, -1, k], lw=0.8, label="attacked")
            ax.set_ylabel(f"sensor {k}")
        np.atleast_1d(axes)[0].legend(loc="lower left", fontsize=7)
        np.atleast_1d(axes)[-1].set_xlabel("test window")
        fig.tight_layout()
        fig.savefig(out / "predictions.png", dpi=110)
        plt.close(fig)
        produced["predictions"] = run.rel(out / "predictions.png")

    full = [r for r in rows if r["method"] in ("full-inverse", "full-direct")]
    if full:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([f"{r['method']}\n√ξ={r['sqrt_xi']:g}" for r in full], [r["nmapei"] for r in full],
               color=["tab:red" if r["method"] == "full-inverse" else "tab:blue" for r in full])
        ax.set_ylabel("network NMAPEI (%)")
        fig.tight_layout()
        fig.savefig(out / "inverse_vs_direct.png", dpi=110)
        plt.close(fig)
        produced["inverse_vs_direct"] = run.rel(out / "inverse_vs_direct.png")

    run.manifest["report"] = produced
    run.save("report")
    return produced
