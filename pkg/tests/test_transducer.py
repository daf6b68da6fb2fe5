"""Transducer: lattice loss vs path enumeration, decoding, persistence."""

import numpy as np
import pytest

from knnt.autodiff import Tensor
from knnt.gradcheck import grad_check
from knnt.lm import LmConfig, init_lm
from knnt.pipeline import enumerate_alignments_loss
from knnt.transducer import (FusionLm, TransducerConfig, batch_loss,
                             decode_beam, decode_greedy, encode_batch,
                             encode_utterance, init_transducer, joint_logp,
                             lattice_log_probs, lattice_loss, load_transducer,
                             pred_advance, pred_init, predict_batch,
                             save_transducer, transducer_loss)

CFG = TransducerConfig(vocab_size=5, feature_dim=4, enc_hidden=8, enc_layers=2,
                       enc_out=6, pred_embed=5, pred_hidden=8, pred_layers=1,
                       pred_out=6, joint_dim=7)


@pytest.fixture
def store(rng):
    return init_transducer(CFG, rng)


def _lattice_data(store, cfg, feats, labels):
    """Untiled (N, U+1, V+1) lattice log-probs for one utterance."""
    enc = encode_batch(store, cfg, Tensor(feats[:, None, :]))
    lab = np.asarray(labels, dtype=np.int64).reshape(1, len(labels))
    pred = predict_batch(store, cfg, lab)
    return lattice_log_probs(store, cfg, enc, pred).data[:, :, 0, :]


def _random_instance(rng, cfg, max_frames=4, max_labels=3):
    n = int(rng.integers(1, max_frames + 1))
    u = int(rng.integers(0, max_labels + 1))
    feats = rng.normal(size=(n, cfg.feature_dim))
    labels = rng.integers(0, cfg.vocab_size, size=u)
    return feats, labels


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_loss_matches_exhaustive_enumeration(store, rng):
    for _ in range(20):
        feats, labels = _random_instance(rng, CFG)
        loss = transducer_loss(store, CFG, feats, labels).data
        oracle = enumerate_alignments_loss(
            _lattice_data(store, CFG, feats, labels), labels)
        assert abs(loss - oracle) <= 1e-9


def test_loss_single_frame_no_labels_is_one_blank(store, rng):
    # The only alignment is a single blank emission at (0, 0).
    feats = rng.normal(size=(1, CFG.feature_dim))
    h = encode_utterance(store, CFG, feats)
    lp = joint_logp(store, h[0], pred_init(store, CFG).g)
    loss = transducer_loss(store, CFG, feats, []).data
    assert abs(loss + lp[0]) <= 1e-12


def test_loss_no_labels_is_blank_path(store, rng):
    # With U=0 every frame must emit blank; the loss is their -sum.
    feats = rng.normal(size=(4, CFG.feature_dim))
    lattice = _lattice_data(store, CFG, feats, [])
    loss = transducer_loss(store, CFG, feats, []).data
    assert abs(loss + lattice[:, 0, 0].sum()) <= 1e-12


def test_loss_grad_matches_finite_differences(rng):
    cfg = TransducerConfig(vocab_size=3, feature_dim=3, enc_hidden=5,
                           enc_layers=1, enc_out=4, pred_embed=4,
                           pred_hidden=5, pred_layers=1, pred_out=4,
                           joint_dim=5)
    store = init_transducer(cfg, rng)
    feats = rng.normal(size=(3, cfg.feature_dim))
    labels = np.array([1, 0], dtype=np.int64)
    report = grad_check(lambda: transducer_loss(store, cfg, feats, labels),
                        store, step=1e-5, max_coords_per_param=4, rng=rng)
    assert report.ok(1e-4), f"{report.worst_param}: {report.max_rel_err}"


def test_batch_loss_is_mean_of_single_losses(store, rng):
    # Padding must not leak into any item's loss slice.
    items = [_random_instance(rng, CFG) for _ in range(3)]
    batched = batch_loss(store, CFG, [f for f, _ in items],
                         [y for _, y in items]).data
    singles = [transducer_loss(store, CFG, f, y).data for f, y in items]
    assert abs(batched - np.mean(singles)) <= 1e-10


def test_zero_bias_reproduces_plain_lattice(store, rng):
    feats, labels = _random_instance(rng, CFG, max_labels=2)
    enc = encode_batch(store, CFG, Tensor(feats[:, None, :]))
    lab = np.asarray(labels, dtype=np.int64).reshape(1, len(labels))
    pred = predict_batch(store, CFG, lab)
    plain = lattice_log_probs(store, CFG, enc, pred).data
    zh = Tensor(np.zeros((feats.shape[0], 1, 1, CFG.enc_out)))
    zg = Tensor(np.zeros((1, len(labels) + 1, 1, CFG.pred_out)))
    biased = lattice_log_probs(store, CFG, enc, pred, zh, zg).data
    np.testing.assert_array_equal(plain, biased)


def test_lattice_loss_rejects_row_mismatch(rng):
    logp = Tensor(np.log(np.full((2, 3, 4), 0.25)))
    with pytest.raises(ValueError, match="label rows"):
        lattice_loss(logp, [1])


def test_batch_loss_rejects_zero_frames(store):
    feats = np.zeros((0, CFG.feature_dim))
    with pytest.raises(ValueError, match="zero frames"):
        batch_loss(store, CFG, [feats], [np.array([], dtype=np.int64)])


def test_encode_rejects_wrong_feature_dim(store, rng):
    bad = rng.normal(size=(3, CFG.feature_dim + 1))
    with pytest.raises(ValueError, match="feature dim"):
        encode_batch(store, CFG, Tensor(bad[:, None, :]))
    with pytest.raises(ValueError, match="expected"):
        encode_utterance(store, CFG, bad)


# ---------------------------------------------------------------------------
# Batched vs incremental forward passes
# ---------------------------------------------------------------------------

def test_encode_utterance_matches_encode_batch(store, rng):
    feats = rng.normal(size=(6, CFG.feature_dim))
    batched = encode_batch(store, CFG, Tensor(feats[:, None, :])).data[:, 0, :]
    np.testing.assert_allclose(encode_utterance(store, CFG, feats), batched,
                               rtol=1e-12, atol=1e-14)


def test_encoder_is_causal(store, rng):
    # Unidirectional recurrence: a prefix of frames fixes a prefix of states.
    feats = rng.normal(size=(7, CFG.feature_dim))
    full = encode_utterance(store, CFG, feats)
    for n in (1, 3, 7):
        np.testing.assert_allclose(encode_utterance(store, CFG, feats[:n]),
                                   full[:n], rtol=1e-12, atol=1e-14)


def test_predict_batch_matches_incremental(store, rng):
    labels = np.array([[2, 4, 0]], dtype=np.int64)
    rows = predict_batch(store, CFG, labels).data[:, 0, :]
    state = pred_init(store, CFG)
    np.testing.assert_allclose(state.g, rows[0], rtol=1e-12, atol=1e-14)
    for u, tok in enumerate(labels[0]):
        state = pred_advance(store, CFG, state, int(tok))
        np.testing.assert_allclose(state.g, rows[u + 1],
                                   rtol=1e-12, atol=1e-14)


def test_joint_logp_matches_lattice_and_normalizes(store, rng):
    feats, labels = _random_instance(rng, CFG, max_frames=3, max_labels=2)
    lattice = _lattice_data(store, CFG, feats, labels)
    h = encode_utterance(store, CFG, feats)
    state = pred_init(store, CFG)
    for u in range(len(labels) + 1):
        for n in range(feats.shape[0]):
            lp = joint_logp(store, h[n], state.g)
            np.testing.assert_allclose(lp, lattice[n, u], rtol=1e-9, atol=1e-12)
            assert abs(np.logaddexp.reduce(lp)) <= 1e-9
        if u < len(labels):
            state = pred_advance(store, CFG, state, int(labels[u]))


def test_pred_advance_rejects_out_of_range(store):
    state = pred_init(store, CFG)
    with pytest.raises(ValueError, match="out of range"):
        pred_advance(store, CFG, state, CFG.vocab_size)
    with pytest.raises(ValueError, match="out of range"):
        pred_advance(store, CFG, state, -1)


# ---------------------------------------------------------------------------
# Greedy decoding
# ---------------------------------------------------------------------------

def test_greedy_empty_input(store):
    assert decode_greedy(store, CFG, np.zeros((0, CFG.feature_dim))) == []


def test_greedy_tokens_in_vocab_and_deterministic(store, rng):
    feats = rng.normal(size=(5, CFG.feature_dim))
    out = decode_greedy(store, CFG, feats)
    assert out == decode_greedy(store, CFG, feats)
    assert all(0 <= t < CFG.vocab_size for t in out)


def test_greedy_respects_symbol_cap(rng):
    # A joiner biased hard toward one token would emit forever without
    # the per-frame cap; with it, each frame yields exactly cap symbols.
    store = init_transducer(CFG, rng)
    b = store["joint.out.b"].data
    b[:] = 0.0
    b[1] = 50.0
    feats = rng.normal(size=(4, CFG.feature_dim))
    out = decode_greedy(store, CFG, feats, max_symbols_per_frame=3)
    assert out == [0] * 12


# ---------------------------------------------------------------------------
# Beam decoding
# ---------------------------------------------------------------------------

BEAM_CFG = TransducerConfig(vocab_size=3, feature_dim=3, enc_hidden=6,
                            enc_layers=1, enc_out=5, pred_embed=4,
                            pred_hidden=6, pred_layers=1, pred_out=5,
                            joint_dim=6)


@pytest.fixture
def beam_store(rng):
    return init_transducer(BEAM_CFG, rng)


def test_beam_empty_input(beam_store):
    assert decode_beam(beam_store, BEAM_CFG,
                       np.zeros((0, BEAM_CFG.feature_dim))) == [((), 0.0)]


def test_beam_rejects_bad_width(beam_store, rng):
    feats = rng.normal(size=(2, BEAM_CFG.feature_dim))
    with pytest.raises(ValueError, match="beam"):
        decode_beam(beam_store, BEAM_CFG, feats, beam=0)


def test_beam_output_sorted_and_bounded(beam_store, rng):
    feats = rng.normal(size=(4, BEAM_CFG.feature_dim))
    hyps = decode_beam(beam_store, BEAM_CFG, feats, beam=4)
    assert 1 <= len(hyps) <= 4
    scores = [s for _, s in hyps]
    assert scores == sorted(scores, reverse=True)


def test_wider_beam_never_hurts_best_score(beam_store, rng):
    for _ in range(3):
        feats = rng.normal(size=(3, BEAM_CFG.feature_dim))
        prev = -np.inf
        for width in (1, 2, 4, 8):
            best = decode_beam(beam_store, BEAM_CFG, feats, beam=width)[0][1]
            assert best >= prev - 1e-9
            prev = best


def test_exhaustive_beam_scores_are_log_marginals(beam_store, rng):
    # With a beam wider than the whole hypothesis space, each returned
    # score must equal the summed probability of every alignment of that
    # token sequence, i.e. the negated lattice loss.
    feats = rng.normal(size=(2, BEAM_CFG.feature_dim))
    hyps = decode_beam(beam_store, BEAM_CFG, feats, beam=10_000,
                       max_symbols_per_frame=3)
    checked = 0
    for tokens, score in hyps:
        if len(tokens) > 3:
            continue
        oracle = enumerate_alignments_loss(
            _lattice_data(beam_store, BEAM_CFG, feats, list(tokens)),
            list(tokens))
        assert abs(score + oracle) <= 1e-9
        checked += 1
        if checked == 8:
            break
    assert checked == 8


def test_uniform_fusion_shifts_scores_by_length(beam_store, rng):
    # A flat LM adds weight * log(1/V) per emitted token to every path of
    # a hypothesis, so each complete score shifts by that times its length.
    lm_cfg = LmConfig(vocab_size=BEAM_CFG.vocab_size, embed_dim=4,
                      hidden_dim=6, num_layers=1)
    lm_store = init_lm(lm_cfg, rng)
    lm_store["out.w"].data[:] = 0.0
    lm_store["out.b"].data[:] = 0.0
    feats = rng.normal(size=(2, BEAM_CFG.feature_dim))
    plain = dict(decode_beam(beam_store, BEAM_CFG, feats, beam=10_000,
                             max_symbols_per_frame=2))
    fused = dict(decode_beam(beam_store, BEAM_CFG, feats, beam=10_000,
                             max_symbols_per_frame=2,
                             fusion=FusionLm(lm_store, lm_cfg, 0.7)))
    assert set(plain) == set(fused)
    shift = 0.7 * np.log(1.0 / BEAM_CFG.vocab_size)
    for tokens, score in plain.items():
        assert abs(fused[tokens] - score - shift * len(tokens)) <= 1e-9


def test_beam_terminates_under_symbol_pressure(rng):
    store = init_transducer(BEAM_CFG, rng)
    b = store["joint.out.b"].data
    b[:] = 0.0
    b[1] = 50.0
    feats = rng.normal(size=(2, BEAM_CFG.feature_dim))
    hyps = decode_beam(store, BEAM_CFG, feats, beam=4,
                       max_symbols_per_frame=2)
    assert all(len(tokens) <= 4 for tokens, _ in hyps)
    assert all(set(tokens) <= {0} for tokens, _ in hyps)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_save_load_round_trip(store, rng, tmp_path):
    path = tmp_path / "model.bin"
    save_transducer(path, CFG, store)
    cfg2, store2 = load_transducer(path)
    assert cfg2 == CFG
    assert store2.checksum() == store.checksum()
    feats, labels = _random_instance(rng, CFG)
    a = transducer_loss(store, CFG, feats, labels).data
    b = transducer_loss(store2, cfg2, feats, labels).data
    assert a == b
