"""Continuation datastore: prefix embeddings mapped to the next t tokens.

Keys are language-model hidden states (one per in-sentence prefix), values
the t tokens that followed.  Search is exact brute-force L2 by default;
an optional product-quantization index gives an approximate pre-selection
that is re-ranked with exact distances.  Keys are stored as float32 and
all distance math upcasts to float64.

Entry convention: a sentence of length L contributes one entry per prefix
that ends in a real token and has at least t tokens left, i.e. positions
1..L-t, so L-t entries in total; the empty prefix is never a key.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .lm import LmConfig, embed_prefixes
from .params import FormatError, ParameterStore

MAGIC = b"RTDS"
VERSION = 1

# Exact-match keys (query equals a stored key) would give log(0), so squared
# distances are clamped before the log.  The clamped value is a legitimate
# input the adapter sees in training whenever an utterance's own transcript
# is in the datastore, which is how it learns that near-zero distance means
# "copy this continuation".
DISTANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class RetrievalCandidate:
    continuation: tuple
    log_distance: float
    rank: int


@dataclass
class Datastore:
    keys: np.ndarray
    values: np.ndarray
    t: int
    source_tag: str

    def __post_init__(self):
        if self.keys.shape[0] != self.values.shape[0]:
            raise ValueError("keys and values disagree on entry count")
        if self.values.shape[1] != self.t:
            raise ValueError(f"values must have exactly t={self.t} tokens each")

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass
class PqIndex:
    codebook: np.ndarray
    codes: np.ndarray

    @property
    def num_subspaces(self) -> int:
        return self.codebook.shape[0]


def build_datastore(corpus: list, lm_store: ParameterStore, lm_config: LmConfig,
                    t: int = 2, source_tag: str = "") -> Datastore:
    """One entry per (prefix ending at position i, tokens i..i+t-1), i >= 1."""
    if t < 1:
        raise ValueError("continuation length t must be >= 1")
    key_rows = []
    value_rows = []
    for tokens in corpus:
        arr = np.asarray(tokens, dtype=np.int64)
        L = len(arr)
        if L < t + 1:
            continue
        emb = embed_prefixes(lm_store, lm_config, arr)
        for i in range(1, L - t + 1):
            key_rows.append(emb[i])
            value_rows.append(arr[i:i + t])
    if key_rows:
        keys = np.asarray(key_rows, dtype=np.float32)
        values = np.asarray(value_rows, dtype=np.uint32)
    else:
        keys = np.zeros((0, lm_config.hidden_dim), dtype=np.float32)
        values = np.zeros((0, t), dtype=np.uint32)
    return Datastore(keys=keys, values=values, t=t, source_tag=source_tag)


def _candidates(store: Datastore, rows: np.ndarray, d2: np.ndarray) -> list:
    out = []
    for rank, (row, sq) in enumerate(zip(rows, d2)):
        dist = max(math.sqrt(max(float(sq), 0.0)), DISTANCE_FLOOR)
        out.append(RetrievalCandidate(
            continuation=tuple(int(v) for v in store.values[row]),
            log_distance=math.log(dist), rank=rank))
    return out


def knn_exact(store: Datastore, query: np.ndarray, k: int) -> list:
    """The min(k, N) nearest entries by L2 distance; ties go to lower row."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (store.dim,):
        raise ValueError(f"query dim {query.shape} vs store dim {store.dim}")
    if len(store) == 0:
        return []
    rows, d2 = kernels.l2_topk(store.keys, query, min(k, len(store)))
    return _candidates(store, rows, d2)


def train_pq(store: Datastore, num_subspaces: int = 4, iters: int = 10,
             seed: int = 0) -> PqIndex:
    """Per-subspace 256-centroid k-means over the stored keys.

    Centroids are seeded from distinct key subvectors, so keys that take
    at most 256 distinct values per subspace quantize exactly.  Empty
    clusters keep their previous centroid.
    """
    D = store.dim
    if D % num_subspaces != 0:
        raise ValueError(f"dim {D} not divisible by {num_subspaces} subspaces")
    if len(store) == 0:
        raise ValueError("cannot train quantizer on an empty datastore")
    dsub = D // num_subspaces
    rng = np.random.default_rng(seed)
    keys = store.keys.astype(np.float64)
    codebook = np.zeros((num_subspaces, 256, dsub))
    codes = np.zeros((len(store), num_subspaces), dtype=np.uint8)
    for m in range(num_subspaces):
        sub = np.ascontiguousarray(keys[:, m * dsub:(m + 1) * dsub])
        distinct = np.unique(sub, axis=0)
        if distinct.shape[0] <= 256:
            cents = np.zeros((256, dsub))
            cents[:distinct.shape[0]] = distinct
        else:
            pick = rng.choice(distinct.shape[0], size=256, replace=False)
            cents = distinct[np.sort(pick)]
        for _ in range(iters):
            assign, _ = kernels.pq_assign(sub, cents)
            sums, counts = kernels.pq_accumulate(sub, assign, 256)
            occupied = counts > 0
            cents[occupied] = sums[occupied] / counts[occupied, None]
        assign, _ = kernels.pq_assign(sub, cents)
        codebook[m] = cents
        codes[:, m] = assign.astype(np.uint8)
    return PqIndex(codebook=codebook, codes=codes)


def knn_pq(store: Datastore, index: PqIndex, query: np.ndarray, k: int,
           rerank_r: int | None = None) -> list:
    """Approximate search: quantized pre-selection, exact re-ranking.

    Squared distances to the reconstructed codes pick the top rerank_r
    rows (default 16*k); exact distances on those rows produce the final
    top k, so reported log-distances are always exact.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.codes.shape[0] != len(store):
        raise ValueError("index entry count does not match datastore")
    query = np.asarray(query, dtype=np.float64)
    if rerank_r is None:
        rerank_r = 16 * k
    rerank_r = min(max(rerank_r, k), len(store))
    if len(store) == 0:
        return []
    M, _, dsub = index.codebook.shape
    qsub = query.reshape(M, dsub)
    table = ((index.codebook - qsub[:, None, :]) ** 2).sum(axis=2)
    approx = kernels.pq_adc(index.codes, table)
    kth = np.partition(approx, rerank_r - 1)[rerank_r - 1]
    cand = np.flatnonzero(approx <= kth)
    cand = np.sort(cand[np.lexsort((cand, approx[cand]))[:rerank_r]])
    sub_rows, d2 = kernels.l2_topk(np.ascontiguousarray(store.keys[cand]),
                                   query, min(k, len(cand)))
    return _candidates(store, cand[sub_rows], d2)


def concat_stores(stores: list) -> Datastore:
    """Row-wise concatenation of same-shape stores; tagged "All"."""
    if not stores:
        raise ValueError("need at least one datastore")
    dims = {s.dim for s in stores}
    ts = {s.t for s in stores}
    if len(dims) != 1 or len(ts) != 1:
        raise ValueError(f"mismatched stores: dims {dims}, t {ts}")
    return Datastore(keys=np.concatenate([s.keys for s in stores]),
                     values=np.concatenate([s.values for s in stores]),
                     t=stores[0].t, source_tag="All")


def random_candidates(store: Datastore, query: np.ndarray, k: int,
                      rng: np.random.Generator) -> list:
    """k uniform entries (with replacement) with their true query distances."""
    if len(store) == 0:
        raise ValueError("cannot sample candidates from an empty datastore")
    query = np.asarray(query, dtype=np.float64)
    rows = rng.integers(0, len(store), size=k)
    diffs = store.keys[rows].astype(np.float64) - query
    d2 = (diffs * diffs).sum(axis=1)
    order = np.lexsort((rows, d2))
    return _candidates(store, rows[order], d2[order])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_datastore(path, store: Datastore):
    tag = store.source_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIQI", VERSION, store.dim, store.t, len(store),
                            len(tag)))
        f.write(tag)
        f.write(np.ascontiguousarray(store.keys, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(store.values, dtype="<u4").tobytes())


def load_datastore(path) -> Datastore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected RTDS")
    version, D, t, N, tag_len = struct.unpack("<IIIQI", blob[4:28])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported datastore version {version}")
    off = 28
    tag = blob[off:off + tag_len].decode("utf-8")
    off += tag_len
    keys = np.frombuffer(blob[off:off + 4 * N * D], dtype="<f4").reshape(N, D)
    off += 4 * N * D
    values = np.frombuffer(blob[off:off + 4 * N * t], dtype="<u4").reshape(N, t)
    off += 4 * N * t
    if off != len(blob):
        raise FormatError(f"{path}: trailing bytes in datastore file")
    return Datastore(keys=keys.copy(), values=values.copy(), t=t, source_tag=tag)
