"""Recurrent LM: stepping semantics, embeddings, training, persistence."""

import numpy as np
import pytest

from knnt.lm import (LmConfig, batch_loss, embed_prefixes, embed_sequence,
                     init_lm, initial_state, lm_logprob, lm_step, load_lm,
                     save_lm, state_logprobs, train_lm)

CFG = LmConfig(vocab_size=7, embed_dim=6, hidden_dim=10, num_layers=2)


@pytest.fixture
def store(rng):
    return init_lm(CFG, rng)


def test_step_deterministic(store):
    state = initial_state(store, CFG)
    s1, logits1, emb1 = lm_step(store, CFG, state, 3)
    s2, logits2, emb2 = lm_step(store, CFG, state, 3)
    np.testing.assert_array_equal(logits1, logits2)
    np.testing.assert_array_equal(emb1, emb2)
    assert emb1.shape == (CFG.hidden_dim,)


def test_step_fold_equals_embed_sequence(store):
    tokens = [2, 0, 5, 1]
    state = initial_state(store, CFG)
    for tok in tokens:
        state, _, emb = lm_step(store, CFG, state, tok)
    np.testing.assert_array_equal(emb, embed_sequence(store, CFG, tokens))


def test_embed_prefixes_matches_incremental(store):
    tokens = np.array([1, 4, 4, 0, 6])
    rows = embed_prefixes(store, CFG, tokens)
    assert rows.shape == (len(tokens) + 1, CFG.hidden_dim)
    for i in range(len(tokens) + 1):
        np.testing.assert_array_equal(rows[i],
                                      embed_sequence(store, CFG, tokens[:i]))


def test_empty_and_single_prefix_differ(store):
    e0 = embed_sequence(store, CFG, [])
    e1 = embed_sequence(store, CFG, [3])
    assert np.linalg.norm(e0 - e1) > 1e-9


def test_identical_sentences_identical_embeddings(store):
    a = embed_sequence(store, CFG, [1, 2, 3])
    b = embed_sequence(store, CFG, [1, 2, 3])
    np.testing.assert_array_equal(a, b)


def test_token_out_of_range(store):
    state = initial_state(store, CFG)
    with pytest.raises(ValueError):
        lm_step(store, CFG, state, CFG.vocab_size)
    with pytest.raises(ValueError):
        lm_logprob(store, CFG, state, -1)


def test_logprobs_normalized(store):
    state = embed_state = initial_state(store, CFG)
    state, _, _ = lm_step(store, CFG, state, 2)
    lp = state_logprobs(store, state)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-9
    # matches an independent softmax recomputation
    logits = store["out.w"].data @ state.top + store["out.b"].data
    ref = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(np.exp(lp), ref, rtol=1e-9)
    assert lm_logprob(store, CFG, state, 4) == lp[4]


def test_untrained_logprobs_near_uniform(store):
    # biases start at zero and weights are small, so the spread around
    # -ln(vocab) stays modest at initialization
    lp = state_logprobs(store, initial_state(store, CFG))
    assert np.all(np.abs(lp - (-np.log(CFG.vocab_size))) < 1.0)


def test_batch_loss_is_length_weighted_mean(store):
    a = [1, 2, 3, 4, 5]
    b = [6, 0]
    la = batch_loss(store, CFG, [a]).item()
    lb = batch_loss(store, CFG, [b]).item()
    lab = batch_loss(store, CFG, [a, b]).item()
    assert abs(lab - (5 * la + 2 * lb) / 7) < 1e-12


def test_batch_loss_rejects_empty_sequence(store):
    with pytest.raises(ValueError):
        batch_loss(store, CFG, [[1, 2], []])


def test_train_memorizes_single_sentence():
    cfg = LmConfig(vocab_size=5, embed_dim=8, hidden_dim=16, num_layers=1)
    sentence = [0, 3, 1, 4, 2]
    store, losses = train_lm([sentence], cfg, steps=500, batch_size=4, seed=0)
    assert losses[-1] < 0.1  # per-token perplexity close to 1
    assert losses[-1] < losses[0]


def test_train_improves_and_is_deterministic(rng):
    cfg = LmConfig(vocab_size=6, embed_dim=8, hidden_dim=12, num_layers=1)
    corpus = [rng.integers(0, 6, size=rng.integers(3, 8)).tolist()
              for _ in range(30)]
    s1, l1 = train_lm(corpus, cfg, steps=60, seed=3)
    s2, l2 = train_lm(corpus, cfg, steps=60, seed=3)
    assert np.mean(l1[-10:]) < l1[0]
    assert s1.checksum() == s2.checksum()
    assert l1 == l2


def test_train_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_lm([], CFG)


def test_save_load_round_trip(store, tmp_path):
    path = tmp_path / "lm.bin"
    save_lm(path, CFG, store)
    cfg2, store2 = load_lm(path)
    assert cfg2 == CFG
    assert store2.checksum() == store.checksum()
