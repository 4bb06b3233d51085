"""Time the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from ``SFA_LAB_DISABLE_NUMBA``.

    python3 benchmarks/bench_kernels.py [--batch 16] [--n 50] [--repeat 20]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from sfa_lab import kernels
from sfa_lab._accel import backend_name
from sfa_lab.forecaster import ArchConfig, ForecastModel, init_params
from sfa_lab.graph import SensorGraph, WindowSpec

B, n, N, H, repeat = (int(a) for a in sys.argv[1:6])
rng = np.random.default_rng(0)
W = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.1)
W = np.triu(W, 1); W = W + W.T
model = ForecastModel(init_params(ArchConfig(n, N, H, 3), 50.0, 10.0, 0), SensorGraph(W), WindowSpec(N, 3))
x = rng.normal(size=(B, N, n, 1))
h = rng.normal(size=(B, N - 2, n, H))
w1 = rng.normal(size=(3, 1, 2 * H)); b1 = np.zeros(2 * H)
w2 = rng.normal(size=(3, H, 2 * H)) * 0.1; b2 = np.zeros(2 * H)
ws = rng.normal(size=(H, H)) * 0.1; bs = np.zeros(H)
Ahat = rng.uniform(size=(n, n)) / n
X = rng.uniform(30, 70, size=(B, N, n))
T = rng.uniform(30, 70, size=(B, n))

def loss(pred):
    r = pred - T
    return 0.5 * np.sum(r * r, axis=-1), r

def timeit(fn):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter(); fn(); best = min(best, time.perf_counter() - t)
    return best * 1e3

out, a, s = kernels.glu_conv_forward(h, w2, b2)
g_out, u = kernels.graph_conv_forward(h, Ahat, ws, bs)
res = {
    "backend": backend_name(),
    "glu_forward_ms": timeit(lambda: kernels.glu_conv_forward(h, w2, b2)),
    "glu_backward_ms": timeit(lambda: kernels.glu_conv_backward(h, w2, a, s, out)),
    "graph_forward_ms": timeit(lambda: kernels.graph_conv_forward(h, Ahat, ws, bs)),
    "graph_backward_ms": timeit(lambda: kernels.graph_conv_backward(Ahat, ws, u, g_out, g_out)),
    "model_predict_ms": timeit(lambda: model.predict(X)),
    "model_input_grad_ms": timeit(lambda: model.value_and_input_grad(X, loss)),
}
print(json.dumps(res))
"""


def run_backend(disable: bool, args) -> dict:
    env = dict(os.environ)
    env["SFA_LAB_DISABLE_NUMBA"] = "1" if disable else "0"
    cmd = [sys.executable, "-c", WORKER, str(args.batch), str(args.n), str(args.window), str(args.hidden),
           str(args.repeat)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--window", type=int, default=12)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json", action="store_true", help="print raw JSON instead of a table")
    args = p.parse_args(argv)
    rows = [run_backend(False, args), run_backend(True, args)]
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    keys = [k for k in rows[0] if k != "backend"]
    names = [r["backend"] for r in rows]
    print(f"batch={args.batch} n={args.n} window={args.window} hidden={args.hidden} (best of {args.repeat}, ms)")
    print(f"{'kernel':<22}" + "".join(f"{nm:>10}" for nm in names) + f"{'ratio':>8}")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k[:-3]:<22}{a:>10.3f}{b:>10.3f}{b / a:>8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
