"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on realistic inputs with ``timeit``; the best of
``--repeat`` runs is reported per call, along with the speed-up of the
compiled version. Outputs of both implementations are checked for agreement
first so a fast but wrong kernel cannot pass unnoticed.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from edgepose import kernels


def _cases(rng):
    P = rng.normal(size=(4, 3, 4))
    uv_one = rng.uniform(0, 640, size=(1, 4, 2))
    uv_sigma = rng.uniform(0, 640, size=(17, 4, 2))  # sigma-point batch of a 4-view joint
    w = rng.uniform(0.2, 1.0, 4)
    grid = rng.uniform(0, 1, size=(64, 64)) ** 4
    det = rng.uniform(0, 1, 17 * 64 * 64)
    fb = rng.uniform(0, 1, 17 * 64 * 64)
    out = np.empty_like(det)

    def render():
        g = np.zeros((64, 64))
        kernels.render_gaussian(g, 0.0, 0.0, 4.0, 130.0, 120.0, 36.0, 5.0, 30.0, 1.0)
        return g

    return {
        "weighted_dlt (1 point, 4 views)": lambda: kernels.weighted_dlt(P, uv_one, w),
        "weighted_dlt (17 sigma points)": lambda: kernels.weighted_dlt(P, uv_sigma, w),
        "render_gaussian (64x64, sigma 6 px)": render,
        "peak_covariance (64x64)": lambda: kernels.peak_covariance(grid, 30, 31, 0.1 * grid[30, 31]),
        "fuse (17x64x64)": lambda: kernels.fuse(det, fb, 0.15, 0.75, out, True).copy(),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.ndim == 2 and a.shape[1] == 4:  # null vectors are defined up to sign
        return bool(np.allclose(np.abs(a), np.abs(b), rtol=1e-9, atol=1e-12))
    return bool(np.allclose(a, b, rtol=1e-9, atol=1e-12))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write the timings to this file")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    original = kernels.BACKEND
    results: dict[str, dict[str, float]] = {}
    outputs: dict[str, dict] = {}
    for name in backends:
        kernels.use_backend(name)
        cases = _cases(np.random.default_rng(0))
        for label, fn in cases.items():
            outputs.setdefault(label, {})[name] = fn()
            timer = timeit.Timer(fn)
            n, _ = timer.autorange()
            best = min(timer.repeat(args.repeat, n)) / n
            results.setdefault(label, {})[name] = best * 1e6
    kernels.use_backend(original)

    print(f"{'kernel':40s}" + "".join(f"{b + ' (us)':>16s}" for b in backends) + f"{'speed-up':>10s}  agree")
    for label, t in results.items():
        row = f"{label:40s}" + "".join(f"{t[b]:16.2f}" for b in backends)
        if "cython" in t:
            agree = _agree(outputs[label]["cython"], outputs[label]["python"])
            row += f"{t['python'] / t['cython']:9.1f}x  {'yes' if agree else 'NO'}"
        print(row)
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback was timed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
