"""Datastore construction, exact/quantized kNN, and persistence."""

import math

import numpy as np
import pytest

from knnt.datastore import (DISTANCE_FLOOR, Datastore, FormatError,
                            build_datastore, concat_stores, knn_exact, knn_pq,
                            load_datastore, random_candidates, save_datastore,
                            train_pq)
from knnt.lm import LmConfig, embed_prefixes, init_lm

CFG = LmConfig(vocab_size=9, embed_dim=6, hidden_dim=8, num_layers=1)


@pytest.fixture
def lm(rng):
    return init_lm(CFG, rng)


def _random_store(rng, n=200, d=16, t=2):
    return Datastore(keys=rng.normal(size=(n, d)).astype(np.float32),
                     values=rng.integers(0, 9, size=(n, t)).astype(np.uint32),
                     t=t, source_tag="random")


def _brute(store, query, k):
    diff = store.keys.astype(np.float64) - np.asarray(query, dtype=np.float64)
    d2 = (diff * diff).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))[:min(k, len(d2))]
    return order, d2[order]


def test_entry_count_oracle(lm):
    # a length-L sentence with t=2 contributes L-2 entries: prefixes ending
    # at positions 1..L-2 each have two following tokens
    for L, expect in ((5, 3), (3, 1), (2, 0), (1, 0)):
        ds = build_datastore([list(range(L))], lm, CFG, t=2)
        assert len(ds) == expect, (L, expect)


def test_entries_are_prefix_embeddings(lm):
    tokens = [4, 7, 1, 8, 2]
    ds = build_datastore([tokens], lm, CFG, t=2)
    emb = embed_prefixes(lm, CFG, np.asarray(tokens))
    for j, i in enumerate(range(1, 4)):
        np.testing.assert_array_equal(ds.keys[j], emb[i].astype(np.float32))
        assert tuple(ds.values[j]) == tuple(tokens[i:i + 2])


def test_duplicate_sentences_duplicate_entries(lm):
    ds = build_datastore([[1, 2, 3], [1, 2, 3]], lm, CFG, t=2)
    assert len(ds) == 2
    np.testing.assert_array_equal(ds.keys[0], ds.keys[1])


def test_t1_and_bad_t(lm):
    ds = build_datastore([[1, 2, 3]], lm, CFG, t=1)
    assert len(ds) == 2 and ds.values.shape == (2, 1)
    with pytest.raises(ValueError):
        build_datastore([[1, 2, 3]], lm, CFG, t=0)


def test_empty_corpus_empty_store(lm):
    ds = build_datastore([], lm, CFG, t=2)
    assert len(ds) == 0
    assert knn_exact(ds, np.zeros(CFG.hidden_dim), 4) == []


def test_knn_exact_matches_brute_force(rng):
    store = _random_store(rng)
    for _ in range(50):
        q = rng.normal(size=16)
        got = knn_exact(store, q, 10)
        rows, d2 = _brute(store, q, 10)
        assert [c.continuation for c in got] == \
            [tuple(store.values[r]) for r in rows]
        np.testing.assert_allclose([c.log_distance for c in got],
                                   np.log(np.sqrt(d2)), rtol=1e-9)
        assert [c.rank for c in got] == list(range(10))


def test_query_equal_to_key_is_rank_zero(rng):
    store = _random_store(rng)
    got = knn_exact(store, store.keys[17].astype(np.float64), 3)
    assert got[0].rank == 0
    assert got[0].continuation == tuple(store.values[17])
    assert got[0].log_distance == math.log(DISTANCE_FLOOR)


def test_k_larger_than_store(rng):
    store = _random_store(rng, n=5)
    assert len(knn_exact(store, rng.normal(size=16), 50)) == 5


def test_tie_break_lower_row(rng):
    keys = rng.normal(size=(10, 4)).astype(np.float32)
    keys[6] = keys[2]
    store = Datastore(keys=keys,
                      values=np.arange(20, dtype=np.uint32).reshape(10, 2),
                      t=2, source_tag="ties")
    got = knn_exact(store, keys[2].astype(np.float64), 2)
    assert got[0].continuation == (4, 5)   # row 2
    assert got[1].continuation == (12, 13)  # row 6


def test_distances_sorted_ascending(rng):
    store = _random_store(rng)
    got = knn_exact(store, rng.normal(size=16), 20)
    d = [c.log_distance for c in got]
    assert d == sorted(d)


def test_query_dim_mismatch(rng):
    store = _random_store(rng)
    with pytest.raises(ValueError):
        knn_exact(store, np.zeros(4), 1)
    with pytest.raises(ValueError):
        knn_exact(store, np.zeros(16), 0)


def test_pq_exactly_representable_keys(rng):
    # keys drawn from <=256 distinct vectors per subspace quantize losslessly
    basis = rng.normal(size=(40, 16)).astype(np.float32)
    keys = basis[rng.integers(0, 40, size=500)]
    store = Datastore(keys=keys,
                      values=np.zeros((500, 2), dtype=np.uint32), t=2,
                      source_tag="grid")
    index = train_pq(store, num_subspaces=4, iters=3, seed=0)
    dsub = 4
    for m in range(4):
        rebuilt = index.codebook[m][index.codes[:, m]]
        np.testing.assert_array_equal(
            rebuilt, keys[:, m * dsub:(m + 1) * dsub].astype(np.float64))


def test_pq_mse_non_increasing_in_iters(rng):
    store = _random_store(rng, n=3000)

    def mse(iters):
        index = train_pq(store, num_subspaces=4, iters=iters, seed=0)
        err = 0.0
        for m in range(4):
            rebuilt = index.codebook[m][index.codes[:, m]]
            err += ((rebuilt - store.keys[:, m * 4:(m + 1) * 4]) ** 2).sum()
        return err

    errs = [mse(i) for i in (1, 2, 4, 8)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pq_single_subspace_is_plain_vq(rng):
    store = _random_store(rng, n=600)
    index = train_pq(store, num_subspaces=1, iters=2, seed=0)
    assert index.codebook.shape == (1, 256, 16)
    assert index.codes.shape == (600, 1)


def test_pq_dim_not_divisible(rng):
    store = _random_store(rng, d=10)
    with pytest.raises(ValueError):
        train_pq(store, num_subspaces=4)


def test_knn_pq_full_rerank_equals_exact(rng):
    store = _random_store(rng, n=400)
    index = train_pq(store, num_subspaces=4, iters=4, seed=1)
    for _ in range(25):
        q = rng.normal(size=16)
        exact = knn_exact(store, q, 8)
        approx = knn_pq(store, index, q, 8, rerank_r=len(store))
        assert [(c.continuation, c.log_distance, c.rank) for c in exact] == \
            [(c.continuation, c.log_distance, c.rank) for c in approx]


def test_knn_pq_reports_exact_distances(rng):
    store = _random_store(rng, n=400)
    index = train_pq(store, num_subspaces=4, iters=4, seed=1)
    q = rng.normal(size=16)
    diff = store.keys.astype(np.float64) - q
    d2 = (diff * diff).sum(axis=1)
    for c in knn_pq(store, index, q, 8, rerank_r=32):
        assert np.min(np.abs(np.log(np.sqrt(d2)) - c.log_distance)) < 1e-9


def test_knn_pq_index_store_mismatch(rng):
    store = _random_store(rng, n=400)
    index = train_pq(store, num_subspaces=4, iters=1, seed=0)
    smaller = Datastore(keys=store.keys[:100], values=store.values[:100],
                        t=2, source_tag="x")
    with pytest.raises(ValueError):
        knn_pq(smaller, index, np.zeros(16), 4)


def test_concat_stores(rng):
    a = _random_store(rng, n=30)
    b = _random_store(rng, n=20)
    both = concat_stores([a, b])
    assert len(both) == 50 and both.source_tag == "All"
    np.testing.assert_array_equal(both.keys[30:], b.keys)
    # a key unique to b is found at rank 0 through the concatenation
    got = concat_result = knn_exact(both, b.keys[7].astype(np.float64), 1)
    assert got[0].continuation == tuple(b.values[7])
    with pytest.raises(ValueError):
        concat_stores([a, _random_store(rng, n=5, d=8)])
    with pytest.raises(ValueError):
        concat_stores([])


def test_random_candidates(rng):
    store = _random_store(rng, n=12)
    q = rng.normal(size=16)
    got = random_candidates(store, q, 6, np.random.default_rng(5))
    again = random_candidates(store, q, 6, np.random.default_rng(5))
    assert [c.continuation for c in got] == [c.continuation for c in again]
    d = [c.log_distance for c in got]
    assert d == sorted(d)
    # distances are true distances to the sampled rows
    diff = store.keys.astype(np.float64) - q
    true = np.sort(np.log(np.sqrt((diff * diff).sum(axis=1))))
    for c in got:
        assert np.min(np.abs(true - c.log_distance)) < 1e-9
    # over many draws every row appears
    seen = set()
    gen = np.random.default_rng(0)
    for _ in range(60):
        seen.update(c.continuation for c in random_candidates(store, q, 6, gen))
    assert len(seen) == 12


def test_save_load_round_trip(rng, tmp_path):
    store = _random_store(rng)
    path = tmp_path / "store.bin"
    save_datastore(path, store)
    loaded = load_datastore(path)
    np.testing.assert_array_equal(loaded.keys, store.keys)
    np.testing.assert_array_equal(loaded.values, store.values)
    assert loaded.t == store.t and loaded.source_tag == store.source_tag
    # bitwise-stable: saving the loaded store reproduces the file
    path2 = tmp_path / "again.bin"
    save_datastore(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatError, match="bad.bin"):
        load_datastore(path)


def test_load_rejects_trailing_bytes(rng, tmp_path):
    store = _random_store(rng, n=4)
    path = tmp_path / "store.bin"
    save_datastore(path, store)
    path.write_bytes(path.read_bytes() + b"\x01")
    with pytest.raises(FormatError, match="trailing"):
        load_datastore(path)


def test_store_invariants():
    with pytest.raises(ValueError):
        Datastore(keys=np.zeros((3, 4), dtype=np.float32),
                  values=np.zeros((2, 2), dtype=np.uint32), t=2, source_tag="")
    with pytest.raises(ValueError):
        Datastore(keys=np.zeros((3, 4), dtype=np.float32),
                  values=np.zeros((3, 3), dtype=np.uint32), t=2, source_tag="")
