"""Hot numeric kernels, each available as a numba-compiled and a pure-numpy path.

Everything here operates on plain ndarrays (float64 math, float32 allowed for
stored search keys) and is deterministic: no threading, no hidden state.  The
active backend is chosen once at import time:

  * numba path (default when numba imports cleanly), or
  * pure-numpy path, forced with ``KNNT_NUMBA=0`` in the environment.

Both implementation tables stay importable (``PY_KERNELS`` /
``NUMBA_KERNELS``) so the test suite can check parity and the benchmark can
time one against the other.

Array layout conventions:
  * recurrent sequences are time-major: ``x[t]`` is the (batch, feat) slab
    for step ``t``, contiguous so the jitted np.dot hits BLAS,
  * LSTM gate blocks are packed ``[input | forget | cell | output]`` along
    the last axis; sigmoids use the overflow-free tanh form,
  * transducer lattices are ``(frames, targets+1, vocab+1)`` log-probs with
    blank at output index 0 and emit labels pre-shifted to output indices.
"""

from __future__ import annotations

import os

import numpy as np


def _truthy(value: str) -> bool:
    return value.strip().lower() not in ("", "0", "false", "off", "no")


_want_numba = _truthy(os.environ.get("KNNT_NUMBA", "1"))

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via KNNT_NUMBA=0 instead
    numba = None
    NUMBA_AVAILABLE = False

NUMBA_ENABLED = NUMBA_AVAILABLE and _want_numba


# ---------------------------------------------------------------------------
# LSTM sequence kernels
# ---------------------------------------------------------------------------

def _lstm_seq_forward(x, h0, c0, wx, wh, b):
    """Run one LSTM layer over a whole sequence.

    x: (T, B, I), h0/c0: (B, H), wx: (I, 4H), wh: (H, 4H), b: (4H,).
    Returns (h_all, c_all, acts) where acts holds the post-nonlinearity
    gates needed by the backward pass.
    """
    T = x.shape[0]
    B = x.shape[1]
    H = h0.shape[1]
    h_all = np.empty((T, B, H))
    c_all = np.empty((T, B, H))
    acts = np.empty((T, B, 4 * H))
    h = h0.copy()
    c = c0.copy()
    for t in range(T):
        g = np.dot(x[t], wx) + np.dot(h, wh) + b
        gi = 0.5 * (np.tanh(0.5 * g[:, :H]) + 1.0)
        gf = 0.5 * (np.tanh(0.5 * g[:, H:2 * H]) + 1.0)
        gc = np.tanh(g[:, 2 * H:3 * H])
        go = 0.5 * (np.tanh(0.5 * g[:, 3 * H:]) + 1.0)
        c = gf * c + gi * gc
        h = go * np.tanh(c)
        acts[t, :, :H] = gi
        acts[t, :, H:2 * H] = gf
        acts[t, :, 2 * H:3 * H] = gc
        acts[t, :, 3 * H:] = go
        h_all[t] = h
        c_all[t] = c
    return h_all, c_all, acts


def _lstm_seq_backward(x, h0, c0, wx, wh, h_all, c_all, acts, d_hall):
    """Reverse-mode sweep matching _lstm_seq_forward.

    d_hall is the incoming gradient on every emitted hidden state; the op
    exposes only h_all, so there is no incoming cell-state gradient.
    Returns (dx, dh0, dc0, dwx, dwh, db).
    """
    T = x.shape[0]
    B = x.shape[1]
    I = x.shape[2]
    H = h0.shape[1]
    wxT = wx.T.copy()
    whT = wh.T.copy()
    dx = np.empty((T, B, I))
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * H)
    dh_carry = np.zeros((B, H))
    dc_carry = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        gi = acts[t, :, :H]
        gf = acts[t, :, H:2 * H]
        gc = acts[t, :, 2 * H:3 * H]
        go = acts[t, :, 3 * H:]
        tc = np.tanh(c_all[t])
        dh = d_hall[t] + dh_carry
        dc = dh * go * (1.0 - tc * tc) + dc_carry
        if t > 0:
            c_prev = c_all[t - 1]
            h_prev = h_all[t - 1]
        else:
            c_prev = c0
            h_prev = h0
        d_gates = np.empty((B, 4 * H))
        d_gates[:, :H] = dc * gc * gi * (1.0 - gi)
        d_gates[:, H:2 * H] = dc * c_prev * gf * (1.0 - gf)
        d_gates[:, 2 * H:3 * H] = dc * gi * (1.0 - gc * gc)
        d_gates[:, 3 * H:] = dh * tc * go * (1.0 - go)
        dx[t] = np.dot(d_gates, wxT)
        dwx += np.dot(x[t].T.copy(), d_gates)
        dwh += np.dot(h_prev.T.copy(), d_gates)
        db += d_gates.sum(axis=0)
        dh_carry = np.dot(d_gates, whT)
        dc_carry = dc * gf
    return dx, dh_carry, dc_carry, dwx, dwh, db


def _lstm_step(x, h, c, wx, wh, b):
    """Single inference step; x: (B, I), h/c: (B, H)."""
    H = h.shape[1]
    g = np.dot(x, wx) + np.dot(h, wh) + b
    gi = 0.5 * (np.tanh(0.5 * g[:, :H]) + 1.0)
    gf = 0.5 * (np.tanh(0.5 * g[:, H:2 * H]) + 1.0)
    gc = np.tanh(g[:, 2 * H:3 * H])
    go = 0.5 * (np.tanh(0.5 * g[:, 3 * H:]) + 1.0)
    c_new = gf * c + gi * gc
    h_new = go * np.tanh(c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# Transducer lattice DP (forward-backward over monotonic alignments)
# ---------------------------------------------------------------------------

def _lae(a, b):
    """Scalar log(exp(a) + exp(b)) tolerating -inf arguments."""
    if a < b:
        a, b = b, a
    if b == -np.inf:
        return a
    return a + np.log1p(np.exp(b - a))


if NUMBA_AVAILABLE:
    # njit callees must themselves be njit; the dispatcher stays callable
    # from plain Python, so the numpy path can share it.
    _lae = numba.njit(cache=True)(_lae)


def _rnnt_forward(logp, labels):
    """Alignment-marginal negative log-likelihood for one utterance.

    logp: (N, U+1, V+1) log-probs, blank at index 0.
    labels: (U,) emit labels already shifted to output indices.
    Returns (alpha, loss).
    """
    N = logp.shape[0]
    U1 = logp.shape[1]
    alpha = np.full((N, U1), -np.inf)
    alpha[0, 0] = 0.0
    for n in range(N):
        for u in range(U1):
            if n == 0 and u == 0:
                continue
            a = -np.inf
            if n > 0:
                a = alpha[n - 1, u] + logp[n - 1, u, 0]
            e = -np.inf
            if u > 0:
                e = alpha[n, u - 1] + logp[n, u - 1, labels[u - 1]]
            alpha[n, u] = _lae(a, e)
    ll = alpha[N - 1, U1 - 1] + logp[N - 1, U1 - 1, 0]
    return alpha, -ll


def _rnnt_backward(logp, labels, alpha, loss):
    """Gradient of the negative log-likelihood w.r.t. the log-prob lattice."""
    N = logp.shape[0]
    U1 = logp.shape[1]
    U = U1 - 1
    ll = -loss
    beta = np.full((N, U1), -np.inf)
    beta[N - 1, U] = logp[N - 1, U, 0]
    for n in range(N - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if n == N - 1 and u == U:
                continue
            blank_term = -np.inf
            if n + 1 < N:
                blank_term = logp[n, u, 0] + beta[n + 1, u]
            emit_term = -np.inf
            if u < U:
                emit_term = logp[n, u, labels[u]] + beta[n, u + 1]
            beta[n, u] = _lae(blank_term, emit_term)
    grad = np.zeros_like(logp)
    for n in range(N):
        for u in range(U1):
            # transition occupancy = alpha + transition logp + suffix - ll
            if n + 1 < N:
                down = beta[n + 1, u]
            elif u == U:
                down = 0.0
            else:
                down = -np.inf
            grad[n, u, 0] = -np.exp(alpha[n, u] + logp[n, u, 0] + down - ll)
            if u < U:
                grad[n, u, labels[u]] = -np.exp(
                    alpha[n, u] + logp[n, u, labels[u]] + beta[n, u + 1] - ll)
    return grad


# ---------------------------------------------------------------------------
# Nearest-neighbor scans
# ---------------------------------------------------------------------------

def _l2_topk(keys, query, k):
    """Exact top-k smallest squared Euclidean distances.

    keys: (N, D) float32 storage, query: (D,) float64; distances accumulate
    in float64.  Ties resolve to the lower row index.  Returns
    (idx, d2) sorted ascending, each of length min(k, N).
    """
    N = keys.shape[0]
    D = keys.shape[1]
    m = min(k, N)
    best_d2 = np.full(m, np.inf)
    best_idx = np.full(m, -1, dtype=np.int64)
    for i in range(N):
        d2 = 0.0
        for j in range(D):
            diff = float(keys[i, j]) - query[j]
            d2 += diff * diff
        if d2 < best_d2[m - 1]:
            pos = m - 1
            while pos > 0 and best_d2[pos - 1] > d2:
                best_d2[pos] = best_d2[pos - 1]
                best_idx[pos] = best_idx[pos - 1]
                pos -= 1
            best_d2[pos] = d2
            best_idx[pos] = i
    return best_idx, best_d2


def _l2_topk_numpy(keys, query, k):
    """Vectorized variant of _l2_topk with identical tie-break semantics."""
    N = keys.shape[0]
    m = min(k, N)
    diff = keys.astype(np.float64) - query
    d2 = np.einsum("nd,nd->n", diff, diff)
    kth = np.partition(d2, m - 1)[m - 1]
    cand = np.flatnonzero(d2 <= kth)
    order = np.lexsort((cand, d2[cand]))[:m]
    sel = cand[order]
    return sel.astype(np.int64), d2[sel]


def _pq_assign(sub, cents):
    """Assign each row of sub (N, d) to its nearest centroid (C, d).

    Returns (codes, total squared error).  First minimum wins on ties.
    """
    N = sub.shape[0]
    d = sub.shape[1]
    C = cents.shape[0]
    codes = np.empty(N, dtype=np.int64)
    total = 0.0
    for i in range(N):
        best = np.inf
        best_c = 0
        for c in range(C):
            acc = 0.0
            for j in range(d):
                diff = sub[i, j] - cents[c, j]
                acc += diff * diff
            if acc < best:
                best = acc
                best_c = c
        codes[i] = best_c
        total += best
    return codes, total


def _pq_assign_numpy(sub, cents):
    d2 = (
        (sub * sub).sum(axis=1)[:, None]
        - 2.0 * sub @ cents.T
        + (cents * cents).sum(axis=1)[None, :]
    )
    codes = np.argmin(d2, axis=1).astype(np.int64)
    total = float(np.maximum(d2[np.arange(sub.shape[0]), codes], 0.0).sum())
    return codes, total


def _pq_accumulate(sub, codes, num_cents):
    """Per-centroid sums and counts for the k-means update step."""
    d = sub.shape[1]
    sums = np.zeros((num_cents, d))
    counts = np.zeros(num_cents, dtype=np.int64)
    for i in range(sub.shape[0]):
        c = codes[i]
        counts[c] += 1
        for j in range(d):
            sums[c, j] += sub[i, j]
    return sums, counts


def _pq_accumulate_numpy(sub, codes, num_cents):
    d = sub.shape[1]
    sums = np.zeros((num_cents, d))
    np.add.at(sums, codes, sub)
    counts = np.bincount(codes, minlength=num_cents).astype(np.int64)
    return sums, counts


def _pq_adc(codes, table):
    """Asymmetric distance scan: sum per-subspace table entries per row.

    codes: (N, M) uint8, table: (M, 256) float64 of squared sub-distances.
    """
    N = codes.shape[0]
    M = codes.shape[1]
    out = np.empty(N)
    for i in range(N):
        acc = 0.0
        for m in range(M):
            acc += table[m, codes[i, m]]
        out[i] = acc
    return out


def _pq_adc_numpy(codes, table):
    N, M = codes.shape
    out = np.zeros(N)
    for m in range(M):
        out += table[m][codes[:, m]]
    return out


# ---------------------------------------------------------------------------
# Backend tables
# ---------------------------------------------------------------------------

PY_KERNELS = {
    "lstm_seq_forward": _lstm_seq_forward,
    "lstm_seq_backward": _lstm_seq_backward,
    "lstm_step": _lstm_step,
    "rnnt_forward": _rnnt_forward,
    "rnnt_backward": _rnnt_backward,
    "l2_topk": _l2_topk_numpy,
    "pq_assign": _pq_assign_numpy,
    "pq_accumulate": _pq_accumulate_numpy,
    "pq_adc": _pq_adc_numpy,
}

NUMBA_KERNELS = None
if NUMBA_AVAILABLE:
    _jit = numba.njit(cache=True, fastmath=False)
    NUMBA_KERNELS = {
        "lstm_seq_forward": _jit(_lstm_seq_forward),
        "lstm_seq_backward": _jit(_lstm_seq_backward),
        "lstm_step": _jit(_lstm_step),
        "rnnt_forward": _jit(_rnnt_forward),
        "rnnt_backward": _jit(_rnnt_backward),
        "l2_topk": _jit(_l2_topk),
        "pq_assign": _jit(_pq_assign),
        "pq_accumulate": _jit(_pq_accumulate),
        "pq_adc": _jit(_pq_adc),
    }

_ACTIVE = NUMBA_KERNELS if NUMBA_ENABLED else PY_KERNELS
ACTIVE_BACKEND = "numba" if NUMBA_ENABLED else "numpy"

lstm_seq_forward = _ACTIVE["lstm_seq_forward"]
lstm_seq_backward = _ACTIVE["lstm_seq_backward"]
lstm_step = _ACTIVE["lstm_step"]
rnnt_forward = _ACTIVE["rnnt_forward"]
rnnt_backward = _ACTIVE["rnnt_backward"]
l2_topk = _ACTIVE["l2_topk"]
pq_assign = _ACTIVE["pq_assign"]
pq_accumulate = _ACTIVE["pq_accumulate"]
pq_adc = _ACTIVE["pq_adc"]
