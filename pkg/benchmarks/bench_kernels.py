"""Compiled vs pure-Python kernels on representative workloads.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``. Prints one row
per workload with the best-of-N wall time for each backend and the speedup.
"""
import argparse
import time

import numpy as np

from dgflow import _pykernels, kernels
from dgflow.catalog import builtin_catalog, catalog_penalty
from dgflow.flow import IntegrationOptions, dgf_problem, integrate_problem, penalized_problem
from dgflow.graph import named_graph
from dgflow.schedule import PowerLaw, make_schedule


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def flow_workloads():
    s = make_schedule(1.0, 0.6, 1.0, 0.1)
    rng = np.random.default_rng(0)
    tight = dict(rtol=1e-8, atol=1e-12, order=4)
    loose = dict(rtol=1e-4, atol=1e-10, max_step=50.0)  # kinks chatter at tight tolerances
    yield "quartic_wells ring N=8, t_end=1e3", tight, dgf_problem(
        builtin_catalog("quartic_wells", 8), named_graph("ring", 8), s, rng.uniform(-2, 2, 8), 0.0, 1e3)
    yield "abs_median path N=4, t_end=1e2", loose, dgf_problem(
        builtin_catalog("abs_median", 4, 1, c=[0.0, 1.0, 2.0, 3.0]), named_graph("path", 4), s,
        rng.uniform(-3, 3, 4), 0.0, 1e2)
    # x1 = x2 = 0 is invariant, so this run settles at the saddle instead of escaping
    yield "saddle3d gamma=1000(1+t), [1, 9]", dict(tight, rtol=1e-11), penalized_problem(
        builtin_catalog("saddle3d"), catalog_penalty("saddle3d"), PowerLaw(1000.0, 1.0, 1.0),
        [0.0, 0.0, 0.3], 1.0, 9.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not kernels.HAVE_COMPILED:
        print("compiled extension not built; nothing to compare")
        return
    print(f"{'workload':45s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s}")
    for label, kw, p in flow_workloads():
        opts = {b: IntegrationOptions(backend=b, diagnostics=False, **kw) for b in ("compiled", "python")}
        tc = best_of(lambda: integrate_problem(p, opts["compiled"]), args.repeat)
        tp = best_of(lambda: integrate_problem(p, opts["python"]), args.repeat)
        print(f"{label:45s} {tc:11.4f} {tp:10.4f} {tp / tc:8.1f}", flush=True)
    rng = np.random.default_rng(1)
    decay, src, init = rng.uniform(0, 1, (20000, 3)), rng.normal(size=(20000, 3)), rng.normal(size=3)
    tc = best_of(lambda: kernels.forward_recurrence(decay, src, init), args.repeat)
    tp = best_of(lambda: _pykernels.forward_recurrence(decay, src, init), args.repeat)
    print(f"{'forward recurrence 20000 x 3':45s} {tc:11.4f} {tp:10.4f} {tp / tc:8.1f}")


if __name__ == "__main__":
    main()
