"""Recurrent language model over the non-blank vocabulary.

The same trained model plays three roles: its top-layer hidden state is
the embedding that keys and queries the continuation datastore, its
next-token distribution is the shallow-fusion score during beam search,
and (optionally) it encodes retrieved continuations for the adapter.

Every sequence implicitly starts with a sentence-start symbol (embedding
row 0) so the empty prefix has a well-defined embedding; real tokens use
rows 1..vocab_size.  The model is frozen once trained and shared by every
datastore built from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import modelio
from .autodiff import Tensor
from .layers import add_lstm_stack, init_stack_state, run_lstm_stack, step_lstm_stack
from .params import ParameterStore, add_embedding, add_linear


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_layers: int = 2

    def header(self) -> dict:
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim, "num_layers": self.num_layers}

    @classmethod
    def from_header(cls, h: dict) -> "LmConfig":
        return cls(vocab_size=h["vocab_size"], embed_dim=h["embed_dim"],
                   hidden_dim=h["hidden_dim"], num_layers=h["num_layers"])


@dataclass
class LmState:
    """Per-layer (h, c) pairs plus the top-layer output after the last token."""
    layers: list
    top: np.ndarray


def init_lm(config: LmConfig, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    add_embedding(store, "embed", config.vocab_size + 1, config.embed_dim, rng)
    add_lstm_stack(store, "lstm", config.embed_dim, config.hidden_dim,
                   config.num_layers, rng)
    add_linear(store, "out", config.vocab_size, config.hidden_dim, rng)
    return store


def save_lm(path, config: LmConfig, store: ParameterStore):
    modelio.save_model(path, modelio.LM_MAGIC, config.header(), store)


def load_lm(path) -> tuple[LmConfig, ParameterStore]:
    header, store = modelio.load_model(path, modelio.LM_MAGIC)
    return LmConfig.from_header(header), store


# ---------------------------------------------------------------------------
# Incremental interface (decoding, queries)
# ---------------------------------------------------------------------------

def initial_state(store: ParameterStore, config: LmConfig) -> LmState:
    """State after consuming the sentence-start symbol."""
    state = LmState(layers=init_stack_state(config.num_layers, 1, config.hidden_dim),
                    top=np.zeros(config.hidden_dim))
    return advance_state(store, state, 0)


def advance_state(store: ParameterStore, state: LmState, row: int) -> LmState:
    x = store["embed"].data[row][None, :]
    top, layers = step_lstm_stack(store, "lstm", x, state.layers)
    return LmState(layers=layers, top=top[0])


def lm_step(store: ParameterStore, config: LmConfig, state: LmState,
            token: int) -> tuple[LmState, np.ndarray, np.ndarray]:
    """Consume one token; returns (state', next-token logits, embedding).

    The embedding is the top-layer hidden state after the token, i.e. the
    datastore key/query vector for the prefix ending here.
    """
    if not 0 <= token < config.vocab_size:
        raise ValueError(f"token {token} out of range for vocab {config.vocab_size}")
    new = advance_state(store, state, token + 1)
    logits = store["out.w"].data @ new.top + store["out.b"].data
    return new, logits, new.top


def state_logprobs(store: ParameterStore, state: LmState) -> np.ndarray:
    """Log distribution over the next token given the current state."""
    logits = store["out.w"].data @ state.top + store["out.b"].data
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def lm_logprob(store: ParameterStore, config: LmConfig, state: LmState,
               token: int) -> float:
    if not 0 <= token < config.vocab_size:
        raise ValueError(f"token {token} out of range for vocab {config.vocab_size}")
    return float(state_logprobs(store, state)[token])


def embed_sequence(store: ParameterStore, config: LmConfig,
                   tokens) -> np.ndarray:
    """Embedding of a whole prefix: fold lm_step from the initial state."""
    state = initial_state(store, config)
    for tok in tokens:
        state = advance_state(store, state, int(tok) + 1)
    return state.top


def embed_prefixes(store: ParameterStore, config: LmConfig,
                   tokens) -> np.ndarray:
    """Embeddings of every prefix of one sequence in a single batched pass.

    Row i is the embedding after consuming tokens[:i] (row 0 = empty
    prefix), so the result has len(tokens)+1 rows.  Matches fold-by-fold
    stepping bit for bit.
    """
    rows = np.concatenate(([0], np.asarray(tokens, dtype=np.int64) + 1))
    x = store["embed"].data[rows][:, None, :]
    with ad.no_grad():
        h = run_lstm_stack(store, "lstm", Tensor(x), config.num_layers)
    return h.data[:, 0, :]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def batch_loss(store: ParameterStore, config: LmConfig, batch: list) -> Tensor:
    """Mean per-token cross-entropy of next-token prediction on a batch.

    batch is a list of token id sequences; sequences are padded to the
    longest and padding positions are masked out of the loss.
    """
    lengths = [len(s) for s in batch]
    if min(lengths) < 1:
        raise ValueError("empty sequence in LM batch")
    T = max(lengths)
    B = len(batch)
    inputs = np.zeros((T, B), dtype=np.int64)
    targets = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    for b, seq in enumerate(batch):
        arr = np.asarray(seq, dtype=np.int64)
        inputs[1:len(seq), b] = arr[:-1] + 1
        targets[:len(seq), b] = arr
        mask[:len(seq), b] = 1.0

    emb = ad.take_rows(store["embed"], inputs.reshape(-1))
    x = emb.reshape(T, B, config.embed_dim)
    h = run_lstm_stack(store, "lstm", x, config.num_layers)
    logits = ad.affine(h, store["out.w"], store["out.b"])
    logp = ad.log_softmax(logits, axis=-1)
    flat = logp.reshape(T * B, config.vocab_size)
    picked = flat[np.arange(T * B), targets.reshape(-1)]
    masked = picked * Tensor(mask.reshape(-1))
    return -masked.sum() / mask.sum()


def train_lm(corpus: list, config: LmConfig, steps: int = 800,
             batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
             log_every: int = 100, log=None):
    """Train from scratch on a list of token sequences; fixed-seed deterministic."""
    from .training import Adam, clip_gradients

    if not corpus:
        raise ValueError("empty LM training corpus")
    rng = np.random.default_rng(seed)
    store = init_lm(config, rng)
    opt = Adam(store, lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=batch_size)
        loss = batch_loss(store, config, [corpus[i] for i in idx])
        store.zero_grad()
        loss.backward()
        gnorm = clip_gradients(store, 5.0)
        opt.step()
        losses.append(loss.item())
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log(f"lm step={step} loss={loss.item():.4f} grad_norm={gnorm:.3f}")
    return store, losses
