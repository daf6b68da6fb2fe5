"""RNN transducer: encoder, prediction network, joiner, lattice loss, decoding.

Index conventions, used consistently by every caller:

* text tokens are vocab ids 0..V-1 (shared with the LM and datastore);
* the joiner emits V+1 log-probs with blank at index 0, token v at v+1;
* the prediction network advances only on non-blank tokens and sees each
  token as embedding row v+1, with row 0 reserved for the start symbol.

The loss marginalizes over all monotonic alignments with a log-space
forward recursion over the (frames x emitted-tokens) lattice; its
gradient is the matching backward recursion, both running as fused
kernels.  Decoding offers a greedy path and a prefix-merging beam search
with hooks for a retrieval bias provider and shallow LM fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels, modelio
from .autodiff import Tensor
from .layers import (add_lstm_stack, init_stack_state, run_lstm_stack,
                     step_lstm_stack)
from .lm import LmConfig, LmState, advance_state, initial_state, state_logprobs
from .params import ParameterStore, add_embedding, add_linear, xavier_uniform


@dataclass(frozen=True)
class TransducerConfig:
    vocab_size: int
    feature_dim: int = 16
    enc_hidden: int = 64
    enc_layers: int = 2
    enc_out: int = 48
    pred_embed: int = 32
    pred_hidden: int = 64
    pred_layers: int = 1
    pred_out: int = 48
    joint_dim: int = 64

    def header(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "feature_dim", "enc_hidden", "enc_layers", "enc_out",
            "pred_embed", "pred_hidden", "pred_layers", "pred_out", "joint_dim")}

    @classmethod
    def from_header(cls, h: dict) -> "TransducerConfig":
        return cls(**h)


def init_transducer(config: TransducerConfig, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    add_lstm_stack(store, "enc", config.feature_dim, config.enc_hidden,
                   config.enc_layers, rng)
    add_linear(store, "enc.proj", config.enc_out, config.enc_hidden, rng)
    add_embedding(store, "pred.embed", config.vocab_size + 1, config.pred_embed, rng)
    add_lstm_stack(store, "pred", config.pred_embed, config.pred_hidden,
                   config.pred_layers, rng)
    add_linear(store, "pred.proj", config.pred_out, config.pred_hidden, rng)
    J = config.joint_dim
    store.add("joint.u", xavier_uniform(rng, (J, config.enc_out), config.enc_out, J))
    store.add("joint.v", xavier_uniform(rng, (J, config.pred_out), config.pred_out, J))
    store.add("joint.b1", np.zeros(J))
    add_linear(store, "joint.out", config.vocab_size + 1, J, rng)
    return store


def save_transducer(path, config: TransducerConfig, store: ParameterStore):
    modelio.save_model(path, modelio.TRANSDUCER_MAGIC, config.header(), store)


def load_transducer(path) -> tuple[TransducerConfig, ParameterStore]:
    header, store = modelio.load_model(path, modelio.TRANSDUCER_MAGIC)
    return TransducerConfig.from_header(header), store


# ---------------------------------------------------------------------------
# Batched (taped) forward passes
# ---------------------------------------------------------------------------

def encode_batch(store: ParameterStore, config: TransducerConfig,
                 feats: Tensor) -> Tensor:
    """(T, B, F) frames -> (T, B, E) encoder states."""
    if feats.shape[-1] != config.feature_dim:
        raise ValueError(
            f"feature dim {feats.shape[-1]} != model dim {config.feature_dim}")
    h = run_lstm_stack(store, "enc", feats, config.enc_layers)
    return ad.affine(h, store["enc.proj.w"], store["enc.proj.b"])


def predict_batch(store: ParameterStore, config: TransducerConfig,
                  labels: np.ndarray) -> Tensor:
    """Padded labels (B, U) -> prediction outputs (U+1, B, G).

    Row u is the prediction-network output after consuming u labels, so
    row 0 is the empty-prefix output.  Padding positions produce garbage
    rows that the caller masks out.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, U = labels.shape
    rows = np.zeros((U + 1, B), dtype=np.int64)
    rows[1:] = labels.T + 1
    emb = ad.take_rows(store["pred.embed"], rows.reshape(-1))
    x = emb.reshape(U + 1, B, config.pred_embed)
    h = run_lstm_stack(store, "pred", x, config.pred_layers)
    return ad.affine(h, store["pred.proj.w"], store["pred.proj.b"])


def lattice_log_probs(store: ParameterStore, config: TransducerConfig,
                      h: Tensor, g: Tensor, bias_h: Tensor | None = None,
                      bias_g: Tensor | None = None) -> Tensor:
    """Joiner over the full (T, U+1) grid -> log-probs (T, U+1, B, V+1).

    bias_h is added to the encoder state before its joiner projection
    (shape broadcastable to (T, U+1, B, E)); bias_g likewise on the
    prediction side.  Zero or absent bias reproduces the plain joiner.
    """
    T, B = h.shape[0], h.shape[1]
    U1 = g.shape[0]
    hx = h.reshape(T, 1, B, config.enc_out)
    if bias_h is not None:
        hx = hx + bias_h
    hu = ad.affine(hx, store["joint.u"], store["joint.b1"])
    gx = g.reshape(1, U1, B, config.pred_out)
    if bias_g is not None:
        gx = gx + bias_g
    gv = ad.matmul(gx, ad.transpose(store["joint.v"], (1, 0)))
    z = ad.tanh(hu + gv)
    logits = ad.affine(z, store["joint.out.w"], store["joint.out.b"])
    return ad.log_softmax(logits, axis=-1)


def lattice_loss(logp: Tensor, labels) -> Tensor:
    """-log P(labels | frames) from one utterance's lattice (N, U+1, V+1)."""
    labels = np.asarray(labels, dtype=np.int64)
    N, U1, _ = logp.shape
    if N < 1:
        raise ValueError("transducer loss needs at least one frame")
    if U1 != len(labels) + 1:
        raise ValueError(f"lattice has {U1} label rows for {len(labels)} labels")
    shifted = labels + 1
    la = np.ascontiguousarray(logp.data)
    alpha, loss = kernels.rnnt_forward(la, shifted)

    def backward(g):
        grad = kernels.rnnt_backward(la, shifted, alpha, loss)
        ad._receive(logp, g * grad)

    return ad.make_op(np.float64(loss), (logp,), backward)


def batch_loss(store: ParameterStore, config: TransducerConfig,
               feats_list: list, labels_list: list,
               bias_h: Tensor | None = None, bias_g: Tensor | None = None,
               enc: Tensor | None = None, pred: Tensor | None = None) -> Tensor:
    """Mean lattice loss over a batch of (frames, labels) pairs.

    Frames and labels are padded to the longest item; each item's loss is
    computed on its own (N_b, U_b+1) slice.  Pass precomputed enc/pred
    tensors to skip those passes (used when the transducer is frozen and
    only a bias is being trained).
    """
    B = len(feats_list)
    frame_counts = [f.shape[0] for f in feats_list]
    label_counts = [len(y) for y in labels_list]
    if min(frame_counts) < 1:
        raise ValueError("utterance with zero frames")
    if enc is None:
        T = max(frame_counts)
        x = np.zeros((T, B, config.feature_dim))
        for b, f in enumerate(feats_list):
            x[:f.shape[0], b, :] = f
        enc = encode_batch(store, config, Tensor(x))
    if pred is None:
        U = max(label_counts)
        lab = np.zeros((B, U), dtype=np.int64)
        for b, y in enumerate(labels_list):
            lab[b, :len(y)] = y
        pred = predict_batch(store, config, lab)
    logp = lattice_log_probs(store, config, enc, pred, bias_h, bias_g)
    total = None
    for b in range(B):
        item = logp[:frame_counts[b], :label_counts[b] + 1, b, :]
        piece = lattice_loss(item, labels_list[b])
        total = piece if total is None else total + piece
    return total / B


def transducer_loss(store: ParameterStore, config: TransducerConfig,
                    feats: np.ndarray, labels) -> Tensor:
    """Single-utterance convenience wrapper around batch_loss."""
    return batch_loss(store, config, [np.asarray(feats)],
                      [np.asarray(labels, dtype=np.int64)])


# ---------------------------------------------------------------------------
# Incremental (untaped) inference
# ---------------------------------------------------------------------------

@dataclass
class PredState:
    """Prediction-network recurrent state plus its current output vector."""
    layers: list
    g: np.ndarray


def encode_utterance(store: ParameterStore, config: TransducerConfig,
                     feats: np.ndarray) -> np.ndarray:
    """(N, F) frames -> (N, E) encoder states, no tape."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != config.feature_dim:
        raise ValueError(f"expected (N, {config.feature_dim}) frames, got {feats.shape}")
    out = np.ascontiguousarray(feats[:, None, :])
    for i in range(config.enc_layers):
        hidden = store[f"enc.l{i}.wh"].data.shape[0]
        h0 = np.zeros((1, hidden))
        out, _, _ = kernels.lstm_seq_forward(
            out, h0, h0.copy(), store[f"enc.l{i}.wx"].data,
            store[f"enc.l{i}.wh"].data, store[f"enc.l{i}.b"].data)
    return out[:, 0, :] @ store["enc.proj.w"].data.T + store["enc.proj.b"].data


def _pred_output(store: ParameterStore, top: np.ndarray) -> np.ndarray:
    return store["pred.proj.w"].data @ top + store["pred.proj.b"].data


def pred_init(store: ParameterStore, config: TransducerConfig) -> PredState:
    """State for the empty prefix (start symbol consumed)."""
    state = init_stack_state(config.pred_layers, 1, config.pred_hidden)
    x = store["pred.embed"].data[0][None, :]
    top, layers = step_lstm_stack(store, "pred", x, state)
    return PredState(layers=layers, g=_pred_output(store, top[0]))


def pred_advance(store: ParameterStore, config: TransducerConfig,
                 state: PredState, token: int) -> PredState:
    """Consume one non-blank token (vocab id)."""
    if not 0 <= token < config.vocab_size:
        raise ValueError(f"token {token} out of range for vocab {config.vocab_size}")
    x = store["pred.embed"].data[token + 1][None, :]
    top, layers = step_lstm_stack(store, "pred", x, state.layers)
    return PredState(layers=layers, g=_pred_output(store, top[0]))


def joint_logp(store: ParameterStore, h: np.ndarray, g: np.ndarray,
               bias_h: np.ndarray | None = None,
               bias_g: np.ndarray | None = None) -> np.ndarray:
    """Log-probs over blank + vocab for one (frame, prefix) point."""
    if bias_h is not None:
        h = h + bias_h
    if bias_g is not None:
        g = g + bias_g
    z = np.tanh(store["joint.u"].data @ h + store["joint.v"].data @ g
                + store["joint.b1"].data)
    logits = store["joint.out.w"].data @ z + store["joint.out.b"].data
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def _bias_pair(provider, ctx, h_n):
    if provider is None:
        return None, None
    if provider.side == "encoder":
        return provider.frame_bias(ctx, h_n), None
    return None, provider.prefix_bias(ctx)


def decode_greedy(store: ParameterStore, config: TransducerConfig,
                  feats: np.ndarray, bias_provider=None,
                  max_symbols_per_frame: int = 5) -> list:
    """Frame-synchronous argmax decoding; returns non-blank vocab ids."""
    if feats.shape[0] == 0:
        return []
    h_all = encode_utterance(store, config, feats)
    state = pred_init(store, config)
    tokens: list = []
    ctx = None if bias_provider is None else bias_provider.prefix_context((), state.g)
    for n in range(h_all.shape[0]):
        emitted = 0
        while True:
            bias_h, bias_g = _bias_pair(bias_provider, ctx, h_all[n])
            lp = joint_logp(store, h_all[n], state.g, bias_h, bias_g)
            best = int(np.argmax(lp))
            if best == 0 or emitted >= max_symbols_per_frame:
                break
            tokens.append(best - 1)
            state = pred_advance(store, config, state, best - 1)
            emitted += 1
            if bias_provider is not None:
                ctx = bias_provider.prefix_context(tuple(tokens), state.g)
    return tokens


@dataclass(frozen=True)
class FusionLm:
    """Shallow-fusion scorer: adds weight * LM log-prob on non-blank steps."""
    store: ParameterStore
    config: LmConfig
    weight: float


@dataclass
class _Hyp:
    tokens: tuple
    score: float
    parent: "_Hyp | None" = None
    last_token: int = -1
    emitted_in_frame: int = 0
    pred: PredState | None = None
    lm: LmState | None = None
    lm_next: np.ndarray | None = None
    ctx: object = None
    materialized: bool = False


def _materialize(hyp: _Hyp, store, config, fusion, provider):
    """Fill in recurrent states lazily: extensions are created by score
    only and pay for state updates just when they are expanded or kept."""
    if hyp.materialized:
        return
    parent = hyp.parent
    _materialize(parent, store, config, fusion, provider)
    hyp.pred = pred_advance(store, config, parent.pred, hyp.last_token)
    if fusion is not None:
        hyp.lm = advance_state(fusion.store, parent.lm, hyp.last_token + 1)
        hyp.lm_next = state_logprobs(fusion.store, hyp.lm)
    if provider is not None:
        hyp.ctx = provider.prefix_context(hyp.tokens, hyp.pred.g)
    hyp.materialized = True


def decode_beam(store: ParameterStore, config: TransducerConfig,
                feats: np.ndarray, beam: int = 4, bias_provider=None,
                fusion: FusionLm | None = None,
                max_symbols_per_frame: int = 5) -> list:
    """Prefix-merging beam search; returns [(tokens, log_score)] best first.

    Hypotheses reaching the same prefix are merged by log-sum-exp, so a
    score sums the retained alignment paths.  Fusion adds
    weight * LM log-prob on each non-blank extension and nothing on blank;
    no length normalization is applied.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if feats.shape[0] == 0:
        return [((), 0.0)]
    h_all = encode_utterance(store, config, feats)

    root = _Hyp(tokens=(), score=0.0, materialized=True,
                pred=pred_init(store, config))
    if fusion is not None:
        root.lm = initial_state(fusion.store, fusion.config)
        root.lm_next = state_logprobs(fusion.store, root.lm)
    if bias_provider is not None:
        root.ctx = bias_provider.prefix_context((), root.pred.g)
    frontier = {(): root}

    for n in range(h_all.shape[0]):
        h_n = h_all[n]
        live = {}
        for hyp in frontier.values():
            hyp.emitted_in_frame = 0
            live[hyp.tokens] = hyp
        done: dict = {}
        while live:
            key = max(live, key=lambda k: live[k].score)
            hyp = live.pop(key)
            above = sum(1 for d in done.values() if d.score > hyp.score)
            if above >= beam:
                break
            _materialize(hyp, store, config, fusion, bias_provider)
            bias_h, bias_g = _bias_pair(bias_provider, hyp.ctx, h_n)
            lp = joint_logp(store, h_n, hyp.pred.g, bias_h, bias_g)
            blank_score = hyp.score + lp[0]
            kept = done.get(hyp.tokens)
            if kept is None:
                done[hyp.tokens] = _Hyp(
                    tokens=hyp.tokens, score=blank_score, parent=hyp.parent,
                    last_token=hyp.last_token, pred=hyp.pred, lm=hyp.lm,
                    lm_next=hyp.lm_next, ctx=hyp.ctx, materialized=True)
            else:
                kept.score = np.logaddexp(kept.score, blank_score)
            if hyp.emitted_in_frame >= max_symbols_per_frame:
                continue
            for v in range(config.vocab_size):
                ext_score = hyp.score + lp[v + 1]
                if fusion is not None:
                    ext_score += fusion.weight * hyp.lm_next[v]
                ext_key = hyp.tokens + (v,)
                seen = live.get(ext_key)
                if seen is None:
                    live[ext_key] = _Hyp(
                        tokens=ext_key, score=ext_score, parent=hyp,
                        last_token=v, emitted_in_frame=hyp.emitted_in_frame + 1)
                else:
                    seen.score = np.logaddexp(seen.score, ext_score)
        ranked = sorted(done.values(), key=lambda h: -h.score)[:beam]
        frontier = {h.tokens: h for h in ranked}

    ranked = sorted(frontier.values(), key=lambda h: -h.score)
    return [(h.tokens, float(h.score)) for h in ranked]
