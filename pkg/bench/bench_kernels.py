#!/usr/bin/env python3
"""Side-by-side benchmark: numba-jitted kernels vs the pure-numpy path.

Times the hot kernels (row scatter-add, segment mean, per-edge messages)
at molecule-batch-like sizes and checks both paths agree. Run after any
kernel change:

    python3 bench/bench_kernels.py
"""

import time

import numpy as np

from molfuse import kernels

if not kernels.USE_NUMBA:
    raise SystemExit(
        "numba path inactive (MOLFUSE_NO_NUMBA set or numba missing); "
        "nothing to compare"
    )


def timeit(fn, repeats=30):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print("Warming up jit compilation...")
    kernels.warmup()

    print(f"\n{'kernel':<24} {'size':<22} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    print("-" * 80)

    for n_nodes, n_edges, width in [(500, 1000, 64), (2000, 4200, 64),
                                    (800, 1700, 128)]:
        h = rng.normal(size=(n_nodes, width))
        a_flat = rng.normal(size=(n_edges, width * width))
        src = rng.integers(0, n_nodes, size=n_edges)
        dst = rng.integers(0, n_nodes, size=n_edges)
        grad = rng.normal(size=(n_nodes, width))
        vals = rng.normal(size=(n_edges, width))
        offsets = np.unique(
            np.concatenate([[0], rng.integers(1, n_nodes, 30), [n_nodes]])
        )
        size = f"n={n_nodes} e={n_edges} d={width}"

        cases = [
            ("scatter-add-rows",
             lambda: kernels.scatter_add_rows_np(vals, dst, n_nodes),
             lambda: kernels.scatter_add_rows(vals, dst, n_nodes)),
            ("segment-mean",
             lambda: kernels.segment_mean_np(h, offsets),
             lambda: kernels.segment_mean(h, offsets)),
            ("edge-message",
             lambda: kernels.edge_message_np(a_flat, h, src, dst, n_nodes),
             lambda: kernels.edge_message(a_flat, h, src, dst, n_nodes)),
            ("edge-message-grad",
             lambda: kernels.edge_message_grad_np(grad, a_flat, h, src, dst),
             lambda: kernels.edge_message_grad(grad, a_flat, h, src, dst)),
        ]
        for name, np_fn, nb_fn in cases:
            ref = np_fn()
            got = nb_fn()
            if isinstance(ref, tuple):
                for r, g in zip(ref, got):
                    np.testing.assert_allclose(r, g, atol=1e-10)
            else:
                np.testing.assert_allclose(ref, got, atol=1e-10)
            t_np = timeit(np_fn)
            t_nb = timeit(nb_fn)
            print(f"{name:<24} {size:<22} {t_np:>10.5f} {t_nb:>10.5f} "
                  f"{t_np / t_nb:>7.1f}x")

    print("\nagreement checks passed (atol 1e-10)")


if __name__ == "__main__":
    main()
