#!/usr/bin/env python3
"""Compare the numba kernel set against the pure-numpy fallback.

Times the individual hot kernels and a full adapter training step under
both implementations, and checks the two paths agree numerically. The
active package backend is whatever MALK_BACKEND selected at import; this
script imports both kernel modules directly, so it works either way.

Run:  python3 benchmarks/backend_bench.py [--reps 30]
"""

import argparse
import time

import numpy as np

from malora import _kernels_numba as knb, _kernels_numpy as knp
from malora import autodiff as ad, harness
from malora.linalg import Rng


def _median_ms(fn, reps, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def kernel_rows(reps):
    rng = Rng(0)
    x = rng.normal((64, 1024))
    w = rng.normal((1024, 1024))
    s_a = rng.normal((32, 1024))
    dh = rng.normal((64, 32))
    g = rng.normal((1024, 6))
    p = np.zeros(139264)
    grad = rng.normal((139264,)).ravel()
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    cases = [
        ("mm_nn 64x1024x1024", lambda k: k.mm_nn(x, w)),
        ("mm_nt 64x1024 @ (32,1024)^T", lambda k: k.mm_nt(x, s_a)),
        ("mm_tn (64,32)^T @ 64x1024", lambda k: k.mm_tn(dh, x)),
        ("jacobi svd 1024x6", lambda k: k.jacobi_orthogonalize(g.copy(), np.eye(6), 1e-14, 60)),
        ("adamw 139k params", lambda k: k.adamw_update(
            p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)),
    ]
    rows = []
    for name, fn in cases:
        rows.append((name,
                     _median_ms(lambda: fn(knb), reps),
                     _median_ms(lambda: fn(knp), reps)))
    return rows


def step_row(reps):
    """One full adapter training step, forced through each kernel set."""
    from malora import backend

    cfg = harness.TrainConfig(method="malora", n_experts=8, r=8, lam=0.5,
                              top_k=2, seed=0)
    rng = Rng(0)
    base_w = rng.normal((1024, 1024), scale=1.0 / 32.0)
    x = rng.normal((64, 1024))
    y = rng.normal((64, 1024))
    model = harness.build_model(cfg, base_w, rng.child(1))
    opt = harness.AdamW(model.trainable_params())

    def one_step():
        tape = ad.Tape()
        total, *_ = model.loss(tape, x, y)
        opt.step(tape.backward(total), 1e-3)

    saved = {n: getattr(backend, n) for n in
             ("mm_nn", "mm_nt", "mm_tn", "adamw_update")}
    out = []
    try:
        for impl in (knb, knp):
            for n in saved:
                setattr(backend, n, getattr(impl, n))
            out.append(_median_ms(one_step, reps))
    finally:
        for n, fn in saved.items():
            setattr(backend, n, fn)
    return ("malora train step 1024x1024 b64", out[0], out[1])


def check_agreement():
    rng = Rng(3)
    a = rng.normal((17, 41))
    b = rng.normal((41, 9))
    worst = float(np.abs(knb.mm_nn(a, b) - knp.mm_nn(a, b)).max())
    scale = float(np.abs(knp.mm_nn(a, b)).max())
    return worst / scale


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args()

    rel = check_agreement()
    print(f"backend agreement (mm_nn, relative): {rel:.2e}")
    print(f"{'kernel':<34} {'numba':>10} {'numpy':>10} {'numba speedup':>14}")
    rows = kernel_rows(args.reps) + [step_row(max(10, args.reps // 2))]
    for name, t_nb, t_np in rows:
        print(f"{name:<34} {t_nb:>8.3f}ms {t_np:>8.3f}ms {t_np / t_nb:>13.2f}x")


if __name__ == "__main__":
    main()
