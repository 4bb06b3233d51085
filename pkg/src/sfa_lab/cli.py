"""Command-line entry point: ``sfa-lab <command> --run-dir DIR [options]``.

Every command prints one JSON line on success. Failures print one JSON line
``{"error": code, "message": ...}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("bad_argument", message, 2)


def _fail(code: str, message: str, status: int = 1):
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    sys.exit(status)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


# flag dest -> dotted config key
_FLAG_KEYS = {
    "n": "synth.n", "days": "synth.days", "synth_seed": "synth.seed",
    "epochs": "train.epochs", "train_seed": "train.seed", "hidden": "train.hidden",
    "max_windows": "universal.max_windows", "per_sensor": "universal.per_sensor",
    "strategy": "locate.strategy", "s": "locate.s", "g_max": "locate.g_max", "p": "locate.p",
    "locate_seed": "locate.seed", "eval_windows": "locate.eval_windows", "theta": "locate.theta",
    "iters": "attack.iters", "alpha": "attack.alpha", "attack_seed": "attack.seed",
    "stride": "eval.stride", "horizon": "eval.horizon", "network_mode": "eval.network_mode",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, type=Path, help="run directory (created if missing)")
    common.add_argument("--config", type=Path, help="JSON/YAML config, or a manifest.json to reuse")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. attack.iters=50 (repeatable)")
    common.add_argument("--no-numba", action="store_true", help="use the pure-numpy kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _JsonArgumentParser(prog="sfa-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_JsonArgumentParser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--days", type=float)
    s.add_argument("--seed", dest="synth_seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train the forecaster")
    t.add_argument("--data-dir", type=Path, help="copy speeds/distances/positions CSVs from here")
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--seed", dest="train_seed", type=int)

    u = sub.add_parser("universal", parents=[common], help="fit the universal perturbation")
    u.add_argument("--sqrt-xi", type=float)
    u.add_argument("--max-windows", type=int)
    u.add_argument("--per-sensor", action="store_true", default=None)

    lo = sub.add_parser("locate", parents=[common], help="select the target sensor")
    lo.add_argument("--strategy", choices=["de", "ct", "deg", "cen"])
    lo.add_argument("--s", type=int)
    lo.add_argument("--g-max", type=int)
    lo.add_argument("--p", type=float)
    lo.add_argument("--seed", dest="locate_seed", type=int)
    lo.add_argument("--eval-windows", type=int)
    lo.add_argument("--theta", type=float)

    a = sub.add_parser("attack", parents=[common], help="run one attack on the test split")
    a.add_argument("--method", required=True, choices=["sfa", "gwn", "mfgsm", "full-inverse", "full-direct"])
    a.add_argument("--sqrt-xi", type=float)
    a.add_argument("--epsilon", type=float)
    g = a.add_mutually_exclusive_group()
    g.add_argument("--locator", choices=["de", "ct", "deg", "cen"])
    g.add_argument("--sensor", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--alpha", type=float)
    a.add_argument("--seed", dest="attack_seed", type=int)
    a.add_argument("--stride", type=int)
    a.add_argument("--horizon")
    a.add_argument("--network-mode", choices=["pooled", "mean"])

    sub.add_parser("report", parents=[common], help="write figures and summary tables")

    pl = sub.add_parser("pipeline", parents=[common], help="synth, train, universal, locate, attacks, report")
    pl.add_argument("--no-report", action="store_true")
    return p


def _overrides(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        from .pipeline import load_config_file
        cfg = load_config_file(args.config)
    flags: dict = {}
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            _set_path(flags, key, v)
    if getattr(args, "command", None) == "universal" and args.sqrt_xi is not None:
        _set_path(flags, "attack.sqrt_xi", args.sqrt_xi)
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(flags, k.strip(), _parse_value(v))
    from .pipeline import merge_config
    return merge_config(cfg, flags)


def _dispatch(args) -> dict:
    from . import pipeline as pl
    cfg = _overrides(args)
    if args.command == "pipeline":
        run = pl.run_pipeline(args.run_dir, cfg, report=not args.no_report)
        return {"run_dir": str(run.root), "J": run.manifest.get("J"),
                "attacks": {t: i["network_nmapei"] for t, i in run.manifest.get("attacks", {}).items()}}
    run = pl.Run(args.run_dir, cfg)
    if args.command == "synth":
        return pl.step_synth(run)
    if args.command == "train":
        if args.data_dir is not None:
            dst = run.path("data")
            dst.mkdir(exist_ok=True)
            for name in ("speeds.csv", "distances.csv", "positions.csv"):
                src = args.data_dir / name
                if src.exists():
                    shutil.copyfile(src, dst / name)
                elif name != "positions.csv":
                    raise pl.PipelineError("missing_input", f"{src} not found")
            run.manifest.pop("dataset", None)
        return pl.step_train(run)
    if args.command == "universal":
        return pl.step_universal(run)
    if args.command == "locate":
        return pl.step_locate(run, args.strategy)
    if args.command == "attack":
        return pl.step_attack(run, args.method, args.sqrt_xi, args.epsilon, args.locator, args.sensor)
    if args.command == "report":
        from .report import step_report
        return step_report(run)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.no_numba:
        os.environ["SFA_LAB_DISABLE_NUMBA"] = "1"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .graph import EmptyWindowsError
    from .pipeline import PipelineError
    try:
        result = _dispatch(args)
    except PipelineError as exc:
        _fail(exc.code, str(exc))
    except EmptyWindowsError as exc:
        _fail("too_short", str(exc))
    except (ValueError, KeyError, TypeError) as exc:
        _fail("bad_input", f"{type(exc).__name__}: {exc}")
    except (OSError, RuntimeError) as exc:
        _fail("runtime_error", f"{type(exc).__name__}: {exc}")
    sys.stdout.write(json.dumps(result, default=float, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
