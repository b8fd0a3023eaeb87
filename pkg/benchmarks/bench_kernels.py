"""Compare the compiled and numpy kernels on the default network sizes.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Prints one line per (kernel, backend) with the median wall time per call and
the speedup of the compiled backend over the numpy fallback.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from xcae import kernels
from xcae.fastshapc import explainer_layout, sample_coalitions
from xcae.numerics import SeededRng
from xcae.sscae import init_model, paper_layout


def _median_time(fn, repeat: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_cae(backend: str, batch: int, repeat: int) -> float:
    rng = SeededRng(1)
    lay = paper_layout(20)
    model = init_model(lay, rng)
    X = rng.random((batch, 20))
    y = (rng.random(batch) > 0.7).astype(np.float64)
    alpha = np.where(np.arange(batch) < batch // 4, 1.0, 0.0)
    k = kernels.get(backend)

    def call():
        k.cae_loss_grad(model.params, lay.dims_array, lay.act_codes, lay.offsets, lay.n_enc,
                        X, y, alpha, 1e-4, True)
    return _median_time(call, repeat)


def bench_explainer(backend: str, steps: int, repeat: int) -> float:
    rng = SeededRng(2)
    d = 20
    lay = explainer_layout(d)
    params0 = init_model(lay, rng).params
    X = rng.random((steps, d))
    S = sample_coalitions(d, steps, "shapley-kernel", rng).astype(np.float64)
    ds, dfull = rng.normal(steps), rng.normal(steps)
    k = kernels.get(backend)

    def call():
        p = params0.copy()
        m, v = np.zeros_like(p), np.zeros_like(p)
        k.explainer_train(p, lay.dims_array, lay.act_codes, lay.offsets, X, S, ds, dfull,
                          1e-3, True, 1, False, m, v, 0)
    return _median_time(call, repeat)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--explainer-steps", type=int, default=500)
    args = ap.parse_args(argv)

    backends = list(kernels.BACKENDS)
    print(f"backends: {', '.join(backends)} (active: {kernels.BACKEND})")
    for name, fn, unit in (("cae_loss_grad", lambda b: bench_cae(b, args.batch, args.repeat),
                            f"per batch of {args.batch}"),
                           ("explainer_train", lambda b: bench_explainer(b, args.explainer_steps,
                                                                        max(3, args.repeat // 4)),
                            f"per {args.explainer_steps} steps")):
        t = {b: fn(b) for b in backends}
        for b in backends:
            print(f"{name:16s} {b:7s} {t[b] * 1e3:10.3f} ms {unit}")
        if "cython" in t:
            print(f"{name:16s} speedup {t['python'] / t['cython']:9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
