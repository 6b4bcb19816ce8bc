"""Time the compiled and pure-Python tape kernels on the same workloads.

    python benchmarks/bench_kernels.py [--repeats 5] [--rows 64] [--hidden 16]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pmfl import model as M
from pmfl.autodiff import Tape, available_backends


def _loss_and_grad(kernels, spec, theta, X, y):
    t = Tape(capacity=1 << 14, kernel_module=kernels)
    ids = t.add_leaves(theta)
    root = M.emit_loss(t, spec, ids, X, y)
    return t.backward(root, ids)


def _meta_gradient(kernels, spec, theta, X, y, steps=3):
    t = Tape(capacity=1 << 16, kernel_module=kernels)
    leaves = ids = t.add_leaves(theta)
    chunks = np.array_split(np.arange(X.shape[0]), steps + 1)
    for rows in chunks[:-1]:
        ids = t.inner_step(M.emit_loss(t, spec, ids, X[rows], y[rows]), ids, 0.1)
    root = M.emit_loss(t, spec, ids, X[chunks[-1]], y[chunks[-1]])
    return t.backward(root, leaves)


def _time(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--hidden", type=int, default=16)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    spec = M.ModelSpec(args.dim, (args.hidden,), "tanh")
    theta = M.init_params(spec, 0)
    X = rng.normal(size=(args.rows, args.dim))
    y = (rng.random(args.rows) < 0.5).astype(int)

    backends = available_backends()
    workloads = {
        "loss+grad": lambda k: _loss_and_grad(k, spec, theta, X, y),
        "meta-grad (3 inner steps)": lambda k: _meta_gradient(k, spec, theta, X, y),
    }
    print(f"model {spec.n_params} params, batch {args.rows} rows; best of {args.repeats}")
    for name, work in workloads.items():
        results = {b: work(k) for b, k in backends.items()}
        times = {b: _time(lambda k=k: work(k), args.repeats) for b, k in backends.items()}
        line = f"{name:28s}" + "".join(f"  {b}: {t * 1e3:9.2f} ms" for b, t in times.items())
        if "cython" in times:
            same = np.array_equal(results["python"], results["cython"])
            line += f"  speed-up x{times['python'] / times['cython']:.1f}  identical={same}"
        print(line)


if __name__ == "__main__":
    main()
