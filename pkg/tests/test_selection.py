import itertools

import numpy as np
import pytest

from emmpd import autodiff as ad
from emmpd.bagio import PatchBag
from emmpd.selection import (DEFAULT_K, DEFAULT_WINDOW, FULL_SCALE_K, SelectorParams, compress_window,
                             gated_attention_logits, gated_attention_scores, normalize_embeddings,
                             one_dim_compress, pretrain_selector, select_patches, selector_logits,
                             top_k_select, two_dim_compress, window_partition)


def brute_force_keep(vectors, tie_tol=0.0):
    """Reference pair scan written from the rule, not from the implementation."""
    m = len(vectors)
    unit = [v / np.linalg.norm(v) for v in vectors]
    sim = {(i, j): float(np.dot(unit[i], unit[j])) for i, j in itertools.combinations(range(m), 2)}
    theta = sum(sim.values()) / len(sim) if sim else 0.0
    live = set(range(m))
    for i, j in itertools.combinations(range(m), 2):
        if i in live and j in live and sim[(i, j)] > theta + tie_tol:
            live.discard(j)
    return sorted(live), theta


def random_window(rng):
    m = int(rng.integers(1, 13))
    d = int(rng.integers(2, 9))
    v = rng.standard_normal((m, d))
    # plant some near-copies so removals actually happen
    for i in range(1, m):
        if rng.random() < 0.4:
            v[i] = v[rng.integers(i)] + 0.05 * rng.standard_normal(d)
    return v


def test_hand_window_example():
    gram = np.array([[1.0, 0.99, 0.10], [0.99, 1.0, 0.12], [0.10, 0.12, 1.0]])
    vecs = np.linalg.cholesky(gram)
    kept, theta = compress_window(np.arange(3), vecs)
    assert theta == pytest.approx((0.99 + 0.10 + 0.12) / 3, abs=1e-12)
    assert round(theta, 4) == 0.4033
    assert kept.tolist() == [0, 2]


def test_random_windows_match_brute_force_exactly():
    rng = np.random.default_rng(20)
    for _ in range(500):
        v = random_window(rng)
        normed, _ = normalize_embeddings(v)
        kept, theta = compress_window(np.arange(len(v)), normed, tie_tol=0.0)
        ref, ref_theta = brute_force_keep(v)
        assert kept.tolist() == ref
        assert theta == pytest.approx(ref_theta, abs=1e-12)


def test_default_tolerance_only_matters_at_ties():
    rng = np.random.default_rng(21)
    for _ in range(200):
        v = rng.standard_normal((int(rng.integers(2, 13)), 5))
        normed, _ = normalize_embeddings(v)
        a, _ = compress_window(np.arange(len(v)), normed)
        b, _ = compress_window(np.arange(len(v)), normed, tie_tol=0.0)
        assert a.tolist() == b.tolist()


def test_uniform_similarity_windows_untouched():
    same = np.tile([[1.0, 2.0, 3.0]], (5, 1))
    assert compress_window(np.arange(5), normalize_embeddings(same)[0])[0].tolist() == list(range(5))
    ortho = np.eye(6)
    assert compress_window(np.arange(6), ortho)[0].tolist() == list(range(6))
    single, theta = compress_window(np.array([4]), np.eye(5))
    assert single.tolist() == [4] and theta == 0.0


def test_window_never_emptied_and_scale_invariant():
    rng = np.random.default_rng(22)
    for _ in range(100):
        v = random_window(rng)
        idx = np.arange(len(v))
        kept, _ = compress_window(idx, normalize_embeddings(v)[0])
        scaled, _ = compress_window(idx, normalize_embeddings(v * 7.3)[0])
        assert kept.size >= 1 and kept.tolist() == scaled.tolist()


def test_normalize_embeddings():
    rng = np.random.default_rng(23)
    v = rng.standard_normal((50, 7))
    out, deg = normalize_embeddings(v)
    assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-9 and not deg.any()
    np.testing.assert_allclose(normalize_embeddings(v * 7)[0], out, atol=1e-15)
    np.testing.assert_allclose(normalize_embeddings(out)[0], out, atol=1e-15)
    z, deg = normalize_embeddings(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert deg.tolist() == [True, False] and not z[0].any()


def grid_bag(side=16, d=4, seed=0, slides=1):
    rng = np.random.default_rng(seed)
    gy, gx = np.divmod(np.arange(side * side), side)
    n = side * side
    return PatchBag("g", rng.standard_normal((n * slides, d)), np.repeat(np.arange(slides), n),
                    np.tile(gx, slides), np.tile(gy, slides))


def test_window_partition_counts():
    wins = window_partition(grid_bag(16), 8)
    assert len(wins) == 4 and all(w.members.size == 64 for w in wins)
    assert DEFAULT_WINDOW == 8
    two = window_partition(grid_bag(8, slides=2), 8)
    assert len(two) == 2 and {w.slide for w in two} == {0, 1}
    bag = PatchBag("s", np.ones((1, 3)), np.array([0]), np.array([5]), np.array([9]))
    only = window_partition(bag, 8)
    assert len(only) == 1 and only[0].members.tolist() == [0] and (only[0].row, only[0].col) == (1, 0)
    members = np.concatenate([w.members for w in window_partition(grid_bag(10), 3)])
    assert sorted(members.tolist()) == list(range(100))


def test_two_dim_compress_report_and_w1():
    bag = grid_bag(16)
    bag.embeddings[1] = bag.embeddings[0] * 2
    kept, rep = two_dim_compress(bag, 8)
    assert np.all(np.diff(kept) > 0) and rep.n_compressed == kept.size <= bag.n
    assert len(rep.thetas) == 4 and sum(rep.window_removed) == bag.n - kept.size
    s = rep.summary()
    assert s["N"] == 256 and sum(s["theta_hist"]["counts"]) == 4
    kept1, _ = two_dim_compress(bag, 1)
    assert kept1.tolist() == list(range(bag.n))


def test_one_dim_compress_uses_stored_order():
    bag = grid_bag(4)
    bag.embeddings = np.eye(16)
    bag.embeddings[2] = bag.embeddings[1]
    kept = one_dim_compress(bag, 2)     # runs of 4 stored patches
    assert 2 not in kept.tolist() and kept.size == 15


def test_top_k_select():
    assert top_k_select([0.5, 0.9, 0.5], 2).tolist() == [0, 1]
    assert top_k_select([3.0, 1.0], 5).tolist() == [0, 1]
    assert top_k_select([1.0, 2.0, 3.0, 0.0], 2).tolist() == [1, 2]
    assert top_k_select(np.zeros(6), 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        top_k_select([1.0], 0)
    assert (DEFAULT_K, FULL_SCALE_K) == (64, 4000)


def test_gated_attention_hand_case():
    V = np.array([[1.0], [0.0]])
    U = np.array([[0.0], [2.0]])
    w = np.array([[1.5]])
    p = SelectorParams(ad.Param(V, "V"), ad.Param(U, "U"), ad.Param(w, "w"), ad.Param(np.zeros((2, 2)), "h"))
    f = np.array([[0.3, -0.4], [1.0, 0.5]])
    raw = [1.5 * np.tanh(r[0]) / (1 + np.exp(-2 * r[1])) for r in f]
    np.testing.assert_allclose(gated_attention_logits(f, p).value.ravel(), raw, rtol=1e-14)
    e = np.exp(raw)
    np.testing.assert_allclose(gated_attention_scores(f, p).value.ravel(), e / e.sum(), rtol=1e-14)


def test_gated_attention_distribution():
    p = SelectorParams.init(6, 2, hidden=4, seed=1)
    same = np.tile(np.random.default_rng(0).standard_normal((1, 6)), (5, 1))
    np.testing.assert_allclose(gated_attention_scores(same, p).value, 0.2)
    w = gated_attention_scores(np.random.default_rng(1).standard_normal((9, 6)), p).value
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-6
    with pytest.raises(ad.ShapeError):
        gated_attention_logits(np.ones((2, 5)), p)


def test_pretrain_selector_zero_epochs_and_descent():
    rng = np.random.default_rng(2)
    bag = rng.standard_normal((10, 6))
    init = SelectorParams.init(6, 2, hidden=4, seed=3)
    same = pretrain_selector([bag], [np.array([1.0, 0.0])], 0, init=init)
    for a, b in zip(same.params(), init.params()):
        np.testing.assert_array_equal(a.value, b.value)
    hist = []
    pretrain_selector([bag], [np.array([1.0, 0.0])], 6, lr=0.01, init=init, history=hist)
    assert all(b < a for a, b in zip(hist[:5], hist[1:6]))
    with pytest.raises(ValueError):
        pretrain_selector([], [], 1)


def test_pretrain_selector_learns_separable_bags():
    rng = np.random.default_rng(4)
    d = 16
    sig = np.eye(d)[:2]
    bags, labels = [], []
    for i in range(60):
        y = np.array([i % 2, (i // 2) % 2], dtype=float)
        x = rng.standard_normal((20, d)) * 0.3
        for c in range(2):
            if y[c]:
                x[rng.integers(20)] += 3 * sig[c]
        bags.append(x)
        labels.append(y)
    p = pretrain_selector(bags[:40], labels[:40], 30, lr=3e-3, seed=0)
    pred = np.vstack([selector_logits(b, p).value > 0 for b in bags[40:]])
    truth = np.vstack(labels[40:]) > 0.5
    f1 = [2 * (pred[:, c] & truth[:, c]).sum() / (pred[:, c].sum() + truth[:, c].sum()) for c in range(2)]
    assert np.mean(f1) >= 0.8


def test_select_patches_stage_ordering():
    bag = grid_bag(16, seed=5)
    bag.embeddings = np.random.default_rng(5).standard_normal((256, 300))
    bag.embeddings[3] = bag.embeddings[2]
    p = SelectorParams.init(300, 2, hidden=4)
    chosen, rep = select_patches(bag, p, k=20)
    assert chosen.size == 20 <= rep.n_compressed <= bag.n
    assert np.all(np.diff(chosen) > 0) and set(chosen) <= set(rep.kept_compress)
    again, _ = select_patches(bag, p, k=20)
    assert chosen.tolist() == again.tolist()
    rnd, _ = select_patches(bag, None, k=20, attend=False, rng=np.random.default_rng(0))
    assert rnd.size == 20
    every, _ = select_patches(bag, p, k=10_000)
    assert every.tolist() == rep.kept_compress.tolist()
