#!/usr/bin/env python3
"""Timing comparison of the jitted kernels against their numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py --target-ms 50

Inputs mirror the shapes the training and search paths actually see.  Each
kernel is checked for agreement between backends before timing, and the
numba variants are called once beforehand so compilation is not measured.
"""

import argparse
import timeit

import numpy as np

from knnt.kernels import NUMBA_KERNELS, PY_KERNELS


def build_cases(rng):
    T, B, I, H = 40, 16, 48, 64
    x = rng.standard_normal((T, B, I))
    h0 = rng.standard_normal((B, H))
    c0 = rng.standard_normal((B, H))
    wx = rng.standard_normal((I, 4 * H)) * 0.1
    wh = rng.standard_normal((H, 4 * H)) * 0.1
    b = rng.standard_normal(4 * H) * 0.1
    h_all, c_all, acts = PY_KERNELS["lstm_seq_forward"](x, h0, c0, wx, wh, b)
    d_hall = rng.standard_normal(h_all.shape)

    N, U, V1 = 40, 12, 201
    logp = rng.standard_normal((N, U + 1, V1))
    logp -= logp.max(axis=2, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=2, keepdims=True))
    labels = rng.integers(1, V1, size=U).astype(np.int64)
    alpha, loss = PY_KERNELS["rnnt_forward"](logp, labels)

    keys = rng.standard_normal((4000, 64)).astype(np.float32)
    query = rng.standard_normal(64)

    sub = rng.standard_normal((4000, 16))
    cents = rng.standard_normal((256, 16))
    codes, _ = PY_KERNELS["pq_assign"](sub, cents)
    adc_codes = rng.integers(0, 256, size=(50000, 4)).astype(np.uint8)
    table = rng.random((4, 256))

    return [
        ("lstm_seq_forward", (x, h0, c0, wx, wh, b)),
        ("lstm_seq_backward", (x, h0, c0, wx, wh, h_all, c_all, acts,
                               d_hall)),
        ("lstm_step", (x[0], h0, c0, wx, wh, b)),
        ("rnnt_forward", (logp, labels)),
        ("rnnt_backward", (logp, labels, alpha, loss)),
        ("l2_topk", (keys, query, 16)),
        ("pq_assign", (sub, cents)),
        ("pq_accumulate", (sub, codes, 256)),
        ("pq_adc", (adc_codes, table)),
    ]


def check_parity(name, args):
    ref = PY_KERNELS[name](*args)
    jit = NUMBA_KERNELS[name](*args)
    ref = ref if isinstance(ref, tuple) else (ref,)
    jit = jit if isinstance(jit, tuple) else (jit,)
    for a, b in zip(ref, jit):
        np.testing.assert_allclose(np.asarray(a, dtype=np.float64),
                                   np.asarray(b, dtype=np.float64),
                                   rtol=1e-10, atol=1e-10)


def time_call(fn, args, target_s):
    fn(*args)
    per = timeit.timeit(lambda: fn(*args), number=3) / 3
    number = max(3, int(target_s / max(per, 1e-9)))
    best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=3))
    return best / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target-ms", type=float, default=50.0,
                    help="measurement budget per kernel and backend")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if NUMBA_KERNELS is None:
        print("numba is not importable; nothing to compare")
        return
    cases = build_cases(np.random.default_rng(args.seed))
    rows = []
    for name, call_args in cases:
        check_parity(name, call_args)
        t_py = time_call(PY_KERNELS[name], call_args, args.target_ms / 1e3)
        t_nb = time_call(NUMBA_KERNELS[name], call_args,
                         args.target_ms / 1e3)
        rows.append((name, t_py * 1e6, t_nb * 1e6, t_py / t_nb))
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy us':>10}  {'numba us':>10}"
          f"  {'speedup':>7}")
    for name, py_us, nb_us, speed in rows:
        print(f"{name:<{width}}  {py_us:>10.1f}  {nb_us:>10.1f}"
              f"  {speed:>6.1f}x")


if __name__ == "__main__":
    main()
