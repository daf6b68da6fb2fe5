"""Retrieval biasing adapter for a frozen transducer.

Retrieved continuations are encoded into fixed-length vectors, a
multihead scaled dot-product attention mixes them (plus a trainable
no-bias row at index 0) into a bias vector, and the joiner adds that bias
to the encoder state (encoder-side) or the prediction output
(prediction-side) before its projection.

Three candidate encoders are supported:

* ``trained``: token embedding -> LSTM -> final state, learned with the
  adapter;
* ``pretrained``: the frozen retrieval LM's final hidden state encodes
  the continuation, only the feedforward and attention layers train;
* ``fixed``: a single learned pseudo-candidate replaces retrieval
  entirely, isolating the effect of the extra trained parameters.

Every encoder appends the candidate's log-distance, then applies a two
layer feedforward net.  Attention queries are the encoder state h_n
(recomputed per frame) or the prediction output g_u (once per prefix);
candidate encodings depend on the prefix only and are cached per prefix
during decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import modelio
from .autodiff import Tensor
from .datastore import Datastore, knn_exact, random_candidates
from .layers import add_lstm_stack, run_lstm_stack
from .lm import LmConfig, advance_state, initial_state
from .params import ParameterStore, add_embedding, add_linear, xavier_uniform

SIDES = ("encoder", "prediction")
CAND_ENCODERS = ("trained", "pretrained", "fixed")


@dataclass(frozen=True)
class AdapterConfig:
    vocab_size: int
    query_dim: int
    lm_hidden_dim: int
    side: str = "encoder"
    cand_encoder: str = "trained"
    embed_dim: int = 32
    lstm_hidden: int = 32
    lstm_layers: int = 2
    ff_hidden: int = 32
    cand_dim: int = 32
    heads: int = 2
    attn_dim: int = 32

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.cand_encoder not in CAND_ENCODERS:
            raise ValueError(f"unknown candidate encoder {self.cand_encoder!r}")
        if self.attn_dim % self.heads != 0:
            raise ValueError("attn_dim must divide evenly across heads")

    def header(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "query_dim", "lm_hidden_dim", "side", "cand_encoder",
            "embed_dim", "lstm_hidden", "lstm_layers", "ff_hidden", "cand_dim",
            "heads", "attn_dim")}

    @classmethod
    def from_header(cls, h: dict) -> "AdapterConfig":
        return cls(**h)


def init_adapter(config: AdapterConfig, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    if config.cand_encoder == "trained":
        add_embedding(store, "cand.embed", config.vocab_size, config.embed_dim, rng)
        add_lstm_stack(store, "cand", config.embed_dim, config.lstm_hidden,
                       config.lstm_layers, rng)
        ff_in = config.lstm_hidden + 1
    elif config.cand_encoder == "fixed":
        store.add("fixed.embed",
                  xavier_uniform(rng, (config.embed_dim,), config.embed_dim, 1))
        add_lstm_stack(store, "cand", config.embed_dim, config.lstm_hidden,
                       config.lstm_layers, rng)
        ff_in = config.lstm_hidden + 1
    else:
        ff_in = config.lm_hidden_dim + 1
    add_linear(store, "ff0", config.ff_hidden, ff_in, rng)
    add_linear(store, "ff1", config.cand_dim, config.ff_hidden, rng)
    store.add("nobias", xavier_uniform(rng, (config.cand_dim,), config.cand_dim, 1))
    A, Q, C = config.attn_dim, config.query_dim, config.cand_dim
    store.add("attn.q.w", xavier_uniform(rng, (A, Q), Q, A))
    store.add("attn.k.w", xavier_uniform(rng, (A, C), C, A))
    store.add("attn.v.w", xavier_uniform(rng, (A, C), C, A))
    add_linear(store, "attn.out", Q, A, rng)
    return store


def save_adapter(path, config: AdapterConfig, store: ParameterStore):
    modelio.save_model(path, modelio.ADAPTER_MAGIC, config.header(), store)


def load_adapter(path) -> tuple[AdapterConfig, ParameterStore]:
    header, store = modelio.load_model(path, modelio.ADAPTER_MAGIC)
    return AdapterConfig.from_header(header), store


# ---------------------------------------------------------------------------
# Candidate encoding
# ---------------------------------------------------------------------------

def _feedforward(store: ParameterStore, h: Tensor, log_d: np.ndarray) -> Tensor:
    """Append log-distance, run the two tanh feedforward layers."""
    rows = ad.concat([h, Tensor(np.asarray(log_d, dtype=np.float64)[:, None])],
                     axis=1)
    z = ad.tanh(ad.affine(rows, store["ff0.w"], store["ff0.b"]))
    return ad.tanh(ad.affine(z, store["ff1.w"], store["ff1.b"]))


def candidate_final_states(store: ParameterStore, config: AdapterConfig,
                           tokens: np.ndarray,
                           lm_store: ParameterStore | None = None,
                           lm_config: LmConfig | None = None) -> Tensor:
    """Recurrent half of the candidate encoder: (R, t) -> (R, hidden).

    Depends only on the continuation tokens, not the retrieval distance,
    so callers can run it once per distinct continuation.  For the
    ``pretrained`` encoder the recurrence is the frozen LM and the result
    is off the tape.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    R, t = tokens.shape
    if config.cand_encoder == "trained":
        if R and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
            raise ValueError("continuation token out of vocabulary")
        emb = ad.take_rows(store["cand.embed"], tokens.T.reshape(-1))
        x = emb.reshape(t, R, config.embed_dim)
        h = run_lstm_stack(store, "cand", x, config.lstm_layers)
        return h[t - 1]
    if config.cand_encoder == "pretrained":
        rows = np.zeros((t + 1, R), dtype=np.int64)
        rows[1:] = tokens.T + 1
        x = lm_store["embed"].data[rows.reshape(-1)].reshape(t + 1, R, -1)
        with ad.no_grad():
            h = run_lstm_stack(lm_store, "lstm", Tensor(x), lm_config.num_layers)
        return Tensor(h.data[t])
    raise ValueError("fixed encoder has no per-candidate encoding; "
                     "use fixed_candidate()")


def encode_candidates(store: ParameterStore, config: AdapterConfig,
                      tokens: np.ndarray, log_d: np.ndarray,
                      lm_store: ParameterStore | None = None,
                      lm_config: LmConfig | None = None) -> Tensor:
    """(R, t) continuations + (R,) log-distances -> (R, cand_dim) vectors.

    Rows are independent of each other and of ordering.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] == 0:
        return Tensor(np.zeros((0, config.cand_dim)))
    final = candidate_final_states(store, config, tokens, lm_store, lm_config)
    return _feedforward(store, final, log_d)


def fixed_candidate(store: ParameterStore, config: AdapterConfig) -> Tensor:
    """The single learned pseudo-candidate of the fixed-embedding variant."""
    x = store["fixed.embed"].reshape(1, 1, config.embed_dim)
    h = run_lstm_stack(store, "cand", x, config.lstm_layers)
    return _feedforward(store, h[0], np.zeros(1))


def candidate_rows(store: ParameterStore, config: AdapterConfig,
                   encoded: Tensor) -> Tensor:
    """Prepend the no-bias embedding: (K, cand_dim) -> (K+1, cand_dim)."""
    return ad.concat([store["nobias"].reshape(1, config.cand_dim), encoded], axis=0)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def attend_bias(store: ParameterStore, config: AdapterConfig,
                query: np.ndarray, rows: np.ndarray) -> tuple:
    """Single-query multihead attention over K+1 rows (inference path).

    Returns (bias vector (query_dim,), weights (heads, K+1)).
    """
    H = config.heads
    dk = config.attn_dim // H
    q = (store["attn.q.w"].data @ query).reshape(H, dk)
    k = (rows @ store["attn.k.w"].data.T).reshape(-1, H, dk)
    v = (rows @ store["attn.v.w"].data.T).reshape(-1, H, dk)
    logits = np.einsum("hd,rhd->hr", q, k) / np.sqrt(dk)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    mixed = np.einsum("hr,rhd->hd", w, v).reshape(config.attn_dim)
    bias = store["attn.out.w"].data @ mixed + store["attn.out.b"].data
    return bias, w


def _project_rows(store: ParameterStore, config: AdapterConfig, rows: Tensor,
                  name: str) -> Tensor:
    """(B, U1, K1, cand_dim) -> (B, heads, U1, K1, dk)."""
    B, U1, K1 = rows.shape[0], rows.shape[1], rows.shape[2]
    H = config.heads
    dk = config.attn_dim // H
    p = ad.matmul(rows, ad.transpose(store[name], (1, 0)))
    return ad.transpose(p.reshape(B, U1, K1, H, dk), (0, 3, 1, 2, 4))


def encoder_side_bias(store: ParameterStore, config: AdapterConfig,
                      h: np.ndarray, rows: Tensor) -> Tensor:
    """Lattice bias for training: queries h (T, B, E), candidate rows
    (B, U1, K+1, cand_dim) -> bias (T, U1, B, E)."""
    T, B, E = h.shape
    U1 = rows.shape[1]
    H = config.heads
    dk = config.attn_dim // H
    q = ad.matmul(Tensor(h), ad.transpose(store["attn.q.w"], (1, 0)))
    q = ad.transpose(q.reshape(T, B, H, dk), (1, 2, 0, 3))
    q = q.reshape(B, H, 1, T, dk)
    k = ad.transpose(_project_rows(store, config, rows, "attn.k.w"),
                     (0, 1, 2, 4, 3))
    v = _project_rows(store, config, rows, "attn.v.w")
    logits = ad.matmul(q, k) / np.sqrt(dk)
    w = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(w, v)
    mixed = ad.transpose(mixed, (3, 2, 0, 1, 4)).reshape(T, U1, B, config.attn_dim)
    return ad.affine(mixed, store["attn.out.w"], store["attn.out.b"])


def prediction_side_bias(store: ParameterStore, config: AdapterConfig,
                         g: np.ndarray, rows: Tensor) -> Tensor:
    """Lattice bias for training: queries g (U1, B, G), candidate rows
    (B, U1, K+1, cand_dim) -> bias (U1, B, G); no frame index anywhere."""
    U1, B, G = g.shape
    H = config.heads
    dk = config.attn_dim // H
    q = ad.matmul(Tensor(g), ad.transpose(store["attn.q.w"], (1, 0)))
    q = ad.transpose(q.reshape(U1, B, H, dk), (1, 2, 0, 3))
    q = q.reshape(B, H, U1, 1, dk)
    k = ad.transpose(_project_rows(store, config, rows, "attn.k.w"),
                     (0, 1, 2, 4, 3))
    v = _project_rows(store, config, rows, "attn.v.w")
    logits = ad.matmul(q, k) / np.sqrt(dk)
    w = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(w, v)
    mixed = ad.transpose(mixed, (2, 0, 1, 3, 4)).reshape(U1, B, config.attn_dim)
    return ad.affine(mixed, store["attn.out.w"], store["attn.out.b"])


# ---------------------------------------------------------------------------
# Decode-time bias providers
# ---------------------------------------------------------------------------

@dataclass
class _PrefixCtx:
    rows: np.ndarray
    lm_state: object
    cands: list
    bias: np.ndarray | None = None


@dataclass
class ProviderStats:
    retrieval_calls: int = 0
    encode_calls: int = 0
    attention_calls: int = 0


class RetrievalBiasProvider:
    """Per-hypothesis bias during decoding, with per-prefix caching.

    Candidate retrieval and encoding happen once per distinct prefix;
    encoder-side attention runs per (frame, prefix) query, prediction-side
    attention once per prefix.  ``retrieve_every`` > 1 reuses the parent
    prefix's candidates except on every m-th emission.

    Adapter parameters are assumed frozen for the provider's lifetime: the
    recurrent half of the candidate encoder is memoized per continuation
    across prefixes and utterances (``reset`` keeps the memo).
    """

    def __init__(self, store: ParameterStore, config: AdapterConfig,
                 lm_store: ParameterStore | None, lm_config: LmConfig | None,
                 datastore: Datastore | None, k: int = 16,
                 retrieve_every: int = 1):
        if config.cand_encoder != "fixed":
            if lm_store is None or datastore is None:
                raise ValueError("retrieval adapter needs an LM and a datastore")
        self.store = store
        self.config = config
        self.lm_store = lm_store
        self.lm_config = lm_config
        self.datastore = datastore
        self.k = k
        self.retrieve_every = retrieve_every
        self.side = config.side
        self.stats = ProviderStats()
        self._cache: dict = {}
        self._final_memo: dict = {}

    def reset(self):
        self._cache.clear()

    def _final_rows(self, cands: list) -> np.ndarray:
        """(K, hidden) recurrent final states, memoized per continuation."""
        missing = list(dict.fromkeys(c.continuation for c in cands
                                     if c.continuation not in self._final_memo))
        if missing:
            finals = candidate_final_states(
                self.store, self.config, np.array(missing, dtype=np.int64),
                self.lm_store, self.lm_config).data
            for cont, row in zip(missing, finals):
                self._final_memo[cont] = row
        return np.stack([self._final_memo[c.continuation] for c in cands])

    def _encode(self, cands: list) -> np.ndarray:
        self.stats.encode_calls += 1
        with ad.no_grad():
            if self.config.cand_encoder == "fixed":
                enc = fixed_candidate(self.store, self.config)
            elif len(cands) == 0:
                enc = Tensor(np.zeros((0, self.config.cand_dim)))
            else:
                log_d = np.array([c.log_distance for c in cands])
                enc = _feedforward(self.store, Tensor(self._final_rows(cands)),
                                   log_d)
            return candidate_rows(self.store, self.config, enc).data

    def prefix_context(self, tokens: tuple, g: np.ndarray | None = None) -> _PrefixCtx:
        tokens = tuple(tokens)
        ctx = self._cache.get(tokens)
        if ctx is not None:
            return ctx
        if self.config.cand_encoder == "fixed":
            ctx = _PrefixCtx(rows=self._fixed_rows(), lm_state=None, cands=[])
        else:
            if tokens:
                parent = self.prefix_context(tokens[:-1])
                lm_state = advance_state(self.lm_store, parent.lm_state,
                                         tokens[-1] + 1)
            else:
                parent = None
                lm_state = initial_state(self.lm_store, self.lm_config)
            if parent is not None and len(tokens) % self.retrieve_every != 0:
                cands = parent.cands
            else:
                self.stats.retrieval_calls += 1
                cands = knn_exact(self.datastore, lm_state.top, self.k)
            ctx = _PrefixCtx(rows=None, lm_state=lm_state, cands=cands)
            ctx.rows = self._encode(cands)
        if self.side == "prediction":
            if g is None:
                raise ValueError("prediction-side context needs the prediction "
                                 "output vector g")
            self.stats.attention_calls += 1
            ctx.bias, _ = attend_bias(self.store, self.config, g, ctx.rows)
        self._cache[tokens] = ctx
        return ctx

    def _fixed_rows(self) -> np.ndarray:
        cached = self._cache.get(())
        if cached is not None:
            return cached.rows
        return self._encode([])

    def frame_bias(self, ctx: _PrefixCtx, h_n: np.ndarray) -> np.ndarray:
        self.stats.attention_calls += 1
        bias, _ = attend_bias(self.store, self.config, h_n, ctx.rows)
        return bias

    def prefix_bias(self, ctx: _PrefixCtx) -> np.ndarray:
        return ctx.bias


@dataclass
class NoisyRetrieval:
    """Training-time candidate source: true kNN, random with noise_prob."""
    datastore: Datastore
    k: int
    noise_prob: float
    rng: np.random.Generator

    def fetch(self, query: np.ndarray, cached_knn: list | None = None) -> list:
        if self.noise_prob > 0 and self.rng.random() < self.noise_prob:
            return random_candidates(self.datastore, query, self.k, self.rng)
        if cached_knn is not None:
            return cached_knn[:self.k]
        return knn_exact(self.datastore, query, self.k)
