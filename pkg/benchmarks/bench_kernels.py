"""Time the compiled kernels against the numpy fallback on identical inputs.

    python benchmarks/bench_kernels.py --n 20000 --repeat 3 [--json out.json]

Each kernel is timed with both backends (best of ``--repeat``); outputs are
checked for agreement before timings are reported.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np
from scipy.spatial import cKDTree

from gsfuse.gafeat import fibonacci_layout
from gsfuse.kernels import backend_module
from gsfuse.model import GaussianModel
from gsfuse.spatial import radius_graph


def make_inputs(n: int, seed: int):
    rng = np.random.default_rng(seed)
    # points on a few noisy planes, roughly the density of a scanned room
    side = int(np.sqrt(n / 4)) + 1
    u = rng.uniform(-2, 2, size=(n, 2))
    plane = rng.integers(0, 4, n)
    means = np.zeros((n, 3))
    means[:, 0], means[:, 1] = u[:, 0], u[:, 1]
    means[:, 2] = plane * 0.5 + rng.normal(scale=0.01, size=n)
    q = rng.normal(size=(n, 4))
    model = GaussianModel(means, rng.uniform(-4.0, -2.5, size=(n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                          np.zeros(n), np.zeros((n, 3)), np.zeros((n, 0, 3)))
    inv = np.ascontiguousarray(model.inverse_covariances)
    tree = cKDTree(means)
    spacing = 4.0 / side
    indptr, indices = radius_graph(tree, means, 4 * spacing)
    nodes = means[rng.choice(n, size=max(8, n // 200), replace=False)]
    cand_ptr, cand_idx = radius_graph(cKDTree(nodes), means, 0.5)
    return {
        "knn": (indptr, indices, np.arange(n, dtype=np.int64), means, inv, 16, 9.0),
        "assign": (cand_ptr, cand_idx, means, inv, np.ascontiguousarray(nodes)),
        "dbscan": (indptr, indices, 8),
        "_aggregate_base": (means, inv, spacing, rng),
    }


def best_of(fn, args, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=1e-10, atol=1e-12, equal_nan=True)
    return np.array_equal(a, b)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="number of Gaussians")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    inputs = make_inputs(args.n, args.seed)
    py, cy = backend_module("python"), backend_module("cython")

    # aggregation consumes the kNN result, so build its inputs from it
    nbr, _ = cy.mahalanobis_knn(*inputs["knn"])
    means, inv, spacing, rng = inputs.pop("_aggregate_base")
    layout = fibonacci_layout(15, spacing)
    kernel_pts = np.ascontiguousarray(np.broadcast_to(layout.points, (len(means), 15, 3)))
    inputs["aggregate"] = (nbr, means, inv, kernel_pts, np.ascontiguousarray(rng.normal(size=(len(means), 16))))

    names = {"knn": "mahalanobis_knn", "aggregate": "kernel_aggregate", "assign": "assign_nearest",
             "dbscan": "dbscan_labels"}
    rows = []
    print(f"{'kernel':<18}{'python s':>11}{'cython s':>11}{'speed-up':>10}  match")
    for key, fname in names.items():
        t_py, out_py = best_of(getattr(py, fname), inputs[key], args.repeat)
        t_cy, out_cy = best_of(getattr(cy, fname), inputs[key], args.repeat)
        ok = agree(out_py, out_cy)
        rows.append({"kernel": fname, "python_s": t_py, "cython_s": t_cy, "speedup": t_py / t_cy, "match": ok})
        print(f"{fname:<18}{t_py:>11.4f}{t_cy:>11.4f}{t_py / t_cy:>9.1f}x  {'yes' if ok else 'NO'}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"n": args.n, "repeat": args.repeat, "results": rows}, fh, indent=1)
    return 0 if all(r["match"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
