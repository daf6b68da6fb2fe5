"""Optimization: Adam with global-norm clipping, plus the training loops.

All loops are single-threaded and draw every random choice from one
seeded generator, so a fixed seed reproduces parameters bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transducer as td
from .adapter import (AdapterConfig, NoisyRetrieval, _feedforward,
                      candidate_final_states, encoder_side_bias,
                      fixed_candidate, init_adapter, prediction_side_bias)
from .autodiff import Tensor, concat
from .datastore import Datastore, knn_exact
from .lm import LmConfig, embed_prefixes
from .params import ParameterStore

K_CHOICES = (1, 2, 4, 8, 16)


class Adam:
    """Adam over a store's trainable parameters; standard defaults."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.trainable_items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.trainable_items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, t in self.store.trainable_items():
            if t.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad * t.grad
            t.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all trainable grads so the global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in store.trainable_items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, t in store.trainable_items():
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass(frozen=True)
class TrainConfig:
    """Knobs shared by the training loops; k/noise/ood apply to adapters."""
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip_norm: float = 5.0
    k_train: int = 16
    sample_k: bool = False
    noise_prob: float = 0.1
    ood_prob: float = 0.5
    log_every: int = 200


def draw_k(train: TrainConfig, rng: np.random.Generator) -> int:
    """Candidate count for one batch: fixed, or uniform over K_CHOICES."""
    return int(rng.choice(K_CHOICES)) if train.sample_k else train.k_train


def train_transducer(utterances: list, config: td.TransducerConfig,
                     train: TrainConfig, log=None):
    """Train a transducer from scratch on (feats, tokens) utterances."""
    rng = np.random.default_rng(train.seed)
    store = td.init_transducer(config, rng)
    opt = Adam(store, lr=train.lr)
    losses = []
    for step in range(train.steps):
        idx = rng.integers(0, len(utterances), size=train.batch_size)
        feats = [utterances[i].feats for i in idx]
        labels = [utterances[i].tokens for i in idx]
        store.zero_grad()
        loss = td.batch_loss(store, config, feats, labels)
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"training diverged at step {step}: "
                               f"loss {loss.item()}")
        loss.backward()
        clip_gradients(store, train.grad_clip_norm)
        opt.step()
        losses.append(loss.item())
        if log and (step + 1) % train.log_every == 0:
            recent = float(np.mean(losses[-train.log_every:]))
            log(f"transducer step {step + 1}/{train.steps} loss {recent:.4f}")
    return store, losses


# ---------------------------------------------------------------------------
# Adapter training: the transducer and LM stay frozen, only the adapter's
# parameters enter the optimizer.  Their per-utterance activations never
# change, so they are cached once up front.
# ---------------------------------------------------------------------------

@dataclass
class PrefixCache:
    """Frozen per-utterance activations plus pre-fetched true kNN lists."""
    feats: np.ndarray
    labels: np.ndarray
    enc: np.ndarray          # (T, E)
    pred: np.ndarray         # (U+1, G)
    queries: np.ndarray | None    # (U+1, lm_hidden)
    knn: list | None              # per prefix, k_max candidates


def build_prefix_cache(utterances: list, td_store: ParameterStore,
                       td_config: td.TransducerConfig,
                       lm_store: ParameterStore | None,
                       lm_config: LmConfig | None,
                       datastore: Datastore | None,
                       k_max: int = max(K_CHOICES)) -> list:
    caches = []
    for utt in utterances:
        enc = td.encode_utterance(td_store, td_config, utt.feats)
        state = td.pred_init(td_store, td_config)
        g = [state.g]
        for tok in utt.tokens:
            state = td.pred_advance(td_store, td_config, state, int(tok))
            g.append(state.g)
        queries = knn = None
        if datastore is not None:
            queries = embed_prefixes(lm_store, lm_config, utt.tokens)
            knn = [knn_exact(datastore, q, k_max) for q in queries]
        caches.append(PrefixCache(feats=utt.feats, labels=utt.tokens, enc=enc,
                                  pred=np.stack(g), queries=queries, knn=knn))
    return caches


def _batch_rows(store: ParameterStore, config: AdapterConfig, batch: list,
                k: int, noisy: NoisyRetrieval | None,
                lm_store: ParameterStore | None,
                lm_config: LmConfig | None) -> Tensor:
    """Candidate rows (B, U1, K+1, cand_dim) for one padded batch."""
    B = len(batch)
    U1 = max(len(c.labels) for c in batch) + 1
    nobias = store["nobias"].reshape(1, 1, 1, config.cand_dim)
    ones = Tensor(np.ones((B, U1, 1, 1)))
    if config.cand_encoder == "fixed":
        return concat([nobias * ones, fixed_candidate(store, config).reshape(
            1, 1, 1, config.cand_dim) * ones], axis=2)
    t = noisy.datastore.t
    tok = np.zeros((B, U1, k, t), dtype=np.int64)
    logd = np.zeros((B, U1, k))
    for b, c in enumerate(batch):
        for u in range(U1):
            if u <= len(c.labels):
                cands = noisy.fetch(c.queries[u], c.knn[u])
                tok[b, u] = [cand.continuation for cand in cands]
                logd[b, u] = [cand.log_distance for cand in cands]
            else:
                tok[b, u] = tok[b, u - 1]
                logd[b, u] = logd[b, u - 1]
    # Candidate sets overlap heavily across prefixes, so the recurrent
    # encoder (which ignores distance) runs once per distinct continuation;
    # the distance-aware feedforward still runs per row.
    uniq, inverse = np.unique(tok.reshape(-1, t), axis=0, return_inverse=True)
    final = candidate_final_states(store, config, uniq, lm_store, lm_config)
    encoded = _feedforward(store, ad.take_rows(final, inverse.reshape(-1)),
                           logd.reshape(-1))
    return concat([nobias * ones,
                   encoded.reshape(B, U1, k, config.cand_dim)], axis=2)


def adapter_batch_loss(store: ParameterStore, config: AdapterConfig,
                       td_store: ParameterStore, td_config: td.TransducerConfig,
                       batch: list, k: int, noisy: NoisyRetrieval | None,
                       lm_store: ParameterStore | None = None,
                       lm_config: LmConfig | None = None) -> Tensor:
    """Mean transducer loss of one batch with the adapter bias applied."""
    B = len(batch)
    T = max(c.enc.shape[0] for c in batch)
    U1 = max(len(c.labels) for c in batch) + 1
    enc = np.zeros((T, B, td_config.enc_out))
    pred = np.zeros((U1, B, td_config.pred_out))
    for b, c in enumerate(batch):
        enc[:c.enc.shape[0], b] = c.enc
        pred[:c.pred.shape[0], b] = c.pred
    rows = _batch_rows(store, config, batch, k, noisy, lm_store, lm_config)
    bias_h = bias_g = None
    if config.side == "encoder":
        bias_h = encoder_side_bias(store, config, enc, rows)
    else:
        bias_g = prediction_side_bias(store, config, pred, rows)
    return td.batch_loss(td_store, td_config,
                         [c.feats for c in batch], [c.labels for c in batch],
                         bias_h=bias_h, bias_g=bias_g,
                         enc=Tensor(enc), pred=Tensor(pred))


def train_adapter(config: AdapterConfig, train: TrainConfig,
                  td_store: ParameterStore, td_config: td.TransducerConfig,
                  lm_store: ParameterStore | None, lm_config: LmConfig | None,
                  utterances: list, datastore: Datastore | None,
                  ood_utterances: list | None = None, log=None,
                  caches: list | None = None, ood_caches: list | None = None):
    """Train a retrieval-bias adapter against a frozen transducer.

    Robustness comes from two noise sources: with noise_prob a prefix's
    candidate set is replaced by random datastore rows, and with ood_prob
    a whole batch is drawn from out-of-domain utterances (retrieval still
    runs against the in-domain datastore, so those candidates are far).

    Prefix caches depend only on the frozen models and the datastore, so
    callers training several adapters may build them once and pass them in.
    """
    uses_retrieval = config.cand_encoder != "fixed"
    if uses_retrieval and datastore is None:
        raise ValueError("retrieval adapter needs a datastore")
    rng = np.random.default_rng(train.seed)
    store = init_adapter(config, rng)
    opt = Adam(store, lr=train.lr)
    ds = datastore if uses_retrieval else None
    if caches is None:
        caches = build_prefix_cache(utterances, td_store, td_config,
                                    lm_store, lm_config, ds)
    if ood_caches is None and ood_utterances:
        ood_caches = build_prefix_cache(ood_utterances, td_store, td_config,
                                        lm_store, lm_config, ds)
    noisy = NoisyRetrieval(datastore, max(K_CHOICES), train.noise_prob,
                           rng) if uses_retrieval else None
    losses = []
    for step in range(train.steps):
        pool = caches
        if ood_caches is not None and rng.random() < train.ood_prob:
            pool = ood_caches
        idx = rng.integers(0, len(pool), size=train.batch_size)
        k = draw_k(train, rng)
        if noisy is not None:
            noisy.k = k
        store.zero_grad()
        td_store.zero_grad()
        loss = adapter_batch_loss(store, config, td_store, td_config,
                                  [pool[i] for i in idx], k, noisy,
                                  lm_store, lm_config)
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"training diverged at step {step}: "
                               f"loss {loss.item()}")
        loss.backward()
        clip_gradients(store, train.grad_clip_norm)
        opt.step()
        losses.append(loss.item())
        if log and (step + 1) % train.log_every == 0:
            recent = float(np.mean(losses[-train.log_every:]))
            log(f"adapter step {step + 1}/{train.steps} loss {recent:.4f}")
    return store, losses
