"""Time the masked GRU scan and a full training step on each kernel backend.

    python benchmarks/bench_kernels.py [--repeats 5]

The numba kernels are compiled (or loaded from cache) before timing. Each
row reports the best of ``--repeats`` runs and the max absolute difference
between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fairfl import kernels
from fairfl.diffcore import Adam
from fairfl.model import DipoleModel, ModelConfig, PatientBatch

SCAN_SHAPES = ((32, 8, 16), (128, 8, 16), (256, 20, 32))


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def scan_case(B, T, h, rng):
    xp = rng.normal(size=(B, T, 3 * h))
    lengths = rng.integers(1, T + 1, size=B)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    Wh = rng.normal(scale=0.3, size=(h, 3 * h))
    dh = rng.normal(size=(B, T, h))
    return xp, mask, Wh, dh


def run_scan(name, xp, mask, Wh, dh):
    fwd, bwd = kernels.BACKENDS[name]
    out, cache = fwd(xp, mask, Wh, True)
    return out, bwd(dh, mask, Wh, cache, True)


def random_batch(B, T, E, n_groups, rng):
    visits = (rng.random((B, T, E)) < 0.02).astype(np.float64)
    lengths = rng.integers(1, T + 1, size=B)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    visits *= mask[:, :, None]
    return PatientBatch(visits, mask, rng.integers(0, 2, size=B).astype(np.float64),
                        rng.integers(0, n_groups, size=B))


def bench_step(B, T, E, h, repeats, rng):
    batch = random_batch(B, T, E, 3, rng)
    cfg = ModelConfig(code_vocab_size=E, n_sens_classes=3, hidden_size=h, max_visits=T)
    rows = {}
    for name in ("numpy", "numba"):
        kernels.BACKEND = name
        model = DipoleModel(cfg, np.random.default_rng(0))
        opt = Adam(1e-3)
        model.train_step(batch, 0.3, opt)  # warm-up
        rows[name] = best_of(lambda: model.train_step(batch, 0.3, opt), repeats)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    saved = kernels.BACKEND
    print(f"{'case':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max |diff|':>14}")
    try:
        for B, T, h in SCAN_SHAPES:
            xp, mask, Wh, dh = scan_case(B, T, h, rng)
            ref = run_scan("numpy", xp, mask, Wh, dh)
            got = run_scan("numba", xp, mask, Wh, dh)
            diff = max(np.abs(ref[0] - got[0]).max(), np.abs(ref[1][0] - got[1][0]).max(),
                       np.abs(ref[1][1] - got[1][1]).max())
            t_np = best_of(lambda: run_scan("numpy", xp, mask, Wh, dh), args.repeats)
            t_nb = best_of(lambda: run_scan("numba", xp, mask, Wh, dh), args.repeats)
            print(f"{f'scan B={B} T={T} h={h}':<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}"
                  f"{t_np / t_nb:>9.1f}x{diff:>14.2e}")
        for B, T, E, h in ((32, 8, 200, 16), (128, 8, 200, 16)):
            t = bench_step(B, T, E, h, args.repeats, rng)
            print(f"{f'train_step B={B} E={E}':<28}{t['numpy'] * 1e3:>12.3f}"
                  f"{t['numba'] * 1e3:>12.3f}{t['numpy'] / t['numba']:>9.1f}x{'':>14}")
    finally:
        kernels.BACKEND = saved


if __name__ == "__main__":
    main()
