"""Memory-pool semantics: k-means vs the exhaustive-partition oracle,
hyperclass derivation, gated alignment gradients, record immutability,
and bit-exact checkpointing."""

import itertools

import numpy as np
import pytest

from memseg import membank as mb, numkit as nk


def exhaustive_best_sse(points: np.ndarray, k: int) -> float:
    """Optimal within-cluster SSE over all partitions into k nonempty parts."""
    n = points.shape[0]
    best = np.inf
    if k == 1:
        c = points.mean(axis=0)
        return float(((points - c) ** 2).sum())
    assert k == 2
    for bits in itertools.product([0, 1], repeat=n):
        if 0 < sum(bits) < n:
            sse = 0.0
            for side in (0, 1):
                grp = points[np.array(bits) == side]
                sse += float(((grp - grp.mean(axis=0)) ** 2).sum())
            best = min(best, sse)
    return best


def embeddings_1d(values):
    return [mb.Embedding(np.array([v])) for v in values]


class TestKmeans:
    def test_three_point_line(self):
        assign, centroids = mb.kmeans(embeddings_1d([0.0, 1.0, 10.0]), k=2, restarts=50, seed=0)
        assert assign[0] == assign[1] != assign[2]
        got = sorted(float(c[0]) for c in centroids)
        np.testing.assert_allclose(got, [0.5, 10.0], atol=1e-12)
        pts = np.array([[0.0], [1.0], [10.0]])
        sse = float(((pts - centroids[assign]) ** 2).sum())
        assert abs(sse - 0.5) < 1e-12

    def test_k1_is_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(6, 3))
        _, centroids = mb.kmeans(pts, k=1, restarts=5, seed=0)
        np.testing.assert_allclose(centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_k_equals_n(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(5, 2))
        assign, centroids = mb.kmeans(pts, k=5, restarts=20, seed=0)
        assert len(set(assign.tolist())) == 5
        sse = float(((pts - centroids[assign]) ** 2).sum())
        assert sse < 1e-18

    def test_invalid_k(self):
        pts = np.zeros((3, 2))
        with pytest.raises(mb.PoolError):
            mb.kmeans(pts, k=4)
        with pytest.raises(mb.PoolError):
            mb.kmeans(pts, k=0)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(40):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, 3))
            k = int(rng.integers(1, min(2, n) + 1))
            pts = rng.normal(size=(n, d))
            assign, centroids = mb.kmeans(pts, k=k, restarts=50, seed=trial)
            sse = float(((pts - centroids[assign]) ** 2).sum())
            assert sse <= exhaustive_best_sse(pts, k) + 1e-9, (trial, n, d, k)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(7, 2))
        _, c1 = mb.kmeans(pts, k=3, restarts=10, seed=5)
        perm = rng.permutation(7)
        _, c2 = mb.kmeans(pts[perm], k=3, restarts=10, seed=5)
        np.testing.assert_allclose(np.sort(c1, axis=0), np.sort(c2, axis=0), atol=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(10, 4))
        a1 = mb.kmeans(pts, k=3, restarts=7, seed=9)
        a2 = mb.kmeans(pts, k=3, restarts=7, seed=9)
        assert np.array_equal(a1[0], a2[0]) and np.array_equal(a1[1], a2[1])


def build_pool(vectors, session_id=0, start_id=0):
    pool = mb.MemoryPool()
    for i, v in enumerate(vectors):
        e = mb.Embedding(np.asarray(v, dtype=float), "category", "aligned")
        h = mb.Embedding(np.asarray(v, dtype=float), "hyperclass", "aligned")
        mb.insert_class(pool, start_id + i, e, h, session_id)
    return pool


class TestRawHyperclass:
    def test_single_class_pool(self):
        pool = build_pool([[1.0, 2.0]])
        e = mb.Embedding(np.array([5.0, 5.0]))
        h = mb.raw_hyperclass(e, pool, k=1)
        np.testing.assert_array_equal(h.values, [1.0, 2.0])
        assert h.kind == "hyperclass" and h.stage == "raw"

    def test_two_groups_nearest(self):
        group_a = [[0.0, 0.1], [0.1, 0.0], [-0.1, -0.1]]
        group_b = [[10.0, 10.1], [10.1, 9.9], [9.9, 10.0]]
        pool = build_pool(group_a + group_b)
        e = mb.Embedding(np.array([0.2, 0.2]))
        h = mb.raw_hyperclass(e, pool, k=2, restarts=50, seed=0)
        np.testing.assert_allclose(h.values, np.array(group_a).mean(axis=0), atol=1e-9)

    def test_k_too_large(self):
        pool = build_pool([[0.0], [1.0]])
        with pytest.raises(mb.PoolError):
            mb.raw_hyperclass(mb.Embedding(np.array([0.0])), pool, k=3)

    def test_empty_pool(self):
        with pytest.raises(mb.PoolError):
            mb.raw_hyperclass(mb.Embedding(np.array([0.0])), mb.MemoryPool(), k=1)

    def test_pool_order_invariance(self):
        rng = np.random.default_rng(11)
        vecs = rng.normal(size=(6, 3))
        e = mb.Embedding(rng.normal(size=3))
        h1 = mb.raw_hyperclass(e, build_pool(vecs), k=2, seed=1)
        h2 = mb.raw_hyperclass(e, build_pool(vecs[::-1], start_id=50), k=2, seed=1)
        np.testing.assert_allclose(h1.values, h2.values, atol=1e-9)


class TestAlignment:
    def test_zero_params_quarter_gate(self):
        dim = 5
        zero = lambda: nk.AffineParams(np.zeros((dim, dim)), np.zeros(dim))
        p = mb.AlignerParams(zero(), zero(), zero(), zero())
        rng = np.random.default_rng(0)
        eh = mb.Embedding(rng.normal(size=dim), "hyperclass", "raw")
        ec = mb.Embedding(rng.normal(size=dim), "category", "raw")
        out_h, out_c = mb.align_embeddings(eh, ec, p)
        np.testing.assert_allclose(out_h.values, 0.25 * eh.values, atol=1e-15)
        np.testing.assert_allclose(out_c.values, 0.25 * ec.values, atol=1e-15)

    def test_shape_contract_and_kinds(self):
        rng = np.random.default_rng(1)
        p = mb.make_aligner(rng, 8)
        eh = mb.Embedding(rng.normal(size=8), "hyperclass", "raw")
        ec = mb.Embedding(rng.normal(size=8), "category", "raw")
        out_h, out_c = mb.align_embeddings(eh, ec, p)
        assert out_h.dim == out_c.dim == 8
        assert out_h.stage == out_c.stage == "aligned"
        assert out_h.kind == "hyperclass" and out_c.kind == "category"

    def test_dimension_mismatch(self):
        p = mb.make_aligner(np.random.default_rng(0), 4)
        with pytest.raises(nk.DimensionError):
            mb.align_embeddings(
                mb.Embedding(np.zeros(4), "hyperclass"), mb.Embedding(np.zeros(3)), p
            )

    def test_attenuation_per_channel(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = mb.make_aligner(rng, 6)
            eh = mb.Embedding(rng.normal(size=6), "hyperclass", "raw")
            ec = mb.Embedding(rng.normal(size=6), "category", "raw")
            out_h, out_c = mb.align_embeddings(eh, ec, p)
            assert np.all(np.abs(out_h.values) <= np.abs(eh.values))
            assert np.all(np.abs(out_c.values) <= np.abs(ec.values))

    def test_gradient_matches_fd(self):
        # margin-checked instance (relu between the FC layers)
        dim = 8
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = mb.make_aligner(rng, dim)
            eh = rng.normal(size=(1, dim))
            ec = rng.normal(size=(1, dim))
            _, _, cache = mb.align_batch(eh, ec, p)
            margin = min(np.abs(cache["h"]["z1"]).min(), np.abs(cache["c"]["z1"]).min())
            if margin > 5e-3:
                break
        v_h = rng.normal(size=(1, dim))
        v_c = rng.normal(size=(1, dim))

        def loss():
            oh, oc, cache = mb.align_batch(eh, ec, p)
            return float((oh * v_h).sum() + (oc * v_c).sum()), cache

        _, cache = loss()
        g_eh, g_ec, grads = mb.align_batch_backward(cache, v_h, v_c)

        def fd_on(arr):
            def f(x):
                saved = arr.copy()
                arr[...] = x
                try:
                    return loss()[0]
                finally:
                    arr[...] = saved

            return nk.fd_grad(f, arr)

        for name in ("hyper_fc1", "hyper_fc2", "cat_fc1", "cat_fc2"):
            fc = getattr(p, name)
            assert nk.rel_error(grads[name][0], fd_on(fc.weight)) < 1e-4, name
            assert nk.rel_error(grads[name][1], fd_on(fc.bias)) < 1e-4, name
        assert nk.rel_error(g_eh, fd_on(eh)) < 1e-4
        assert nk.rel_error(g_ec, fd_on(ec)) < 1e-4


class TestPool:
    def test_duplicate_insert_rejected(self):
        pool = build_pool([[0.0, 1.0]])
        with pytest.raises(mb.PoolError):
            mb.insert_class(
                pool, 0, mb.Embedding(np.zeros(2)), mb.Embedding(np.zeros(2), "hyperclass"), 0
            )

    def test_size_increments(self):
        pool = build_pool([[0.0], [1.0]])
        assert len(pool) == 2
        mb.insert_class(pool, 7, mb.Embedding(np.array([2.0])), mb.Embedding(np.array([2.0]), "hyperclass"), 1)
        assert len(pool) == 3

    def test_hyper_write_protected(self):
        pool = build_pool([[0.0, 1.0]])
        rec = pool.get(0)
        with pytest.raises(ValueError):
            rec.hyper.values[0] = 5.0

    def test_set_category_validates(self):
        pool = build_pool([[0.0, 1.0]])
        with pytest.raises(nk.DimensionError):
            pool.set_category(0, np.zeros(3))
        with pytest.raises(mb.PoolError):
            pool.set_category(99, np.zeros(2))

    def test_clone_is_independent(self):
        pool = build_pool([[0.0, 1.0], [2.0, 3.0]])
        snap = pool.clone()
        pool.set_category(0, np.array([9.0, 9.0]))
        np.testing.assert_array_equal(snap.get(0).category.values, [0.0, 1.0])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        pool = mb.MemoryPool()
        for cid, sid in ((3, 0), (11, 0), (5, 2)):
            vals = rng.normal(size=16) * rng.uniform(1e-8, 1e8)
            hyp = rng.normal(size=16)
            mb.insert_class(
                pool, cid,
                mb.Embedding(vals, "category", "aligned"),
                mb.Embedding(hyp, "hyperclass", "aligned"),
                sid,
            )
        path = tmp_path / "pool.txt"
        mb.save_pool(pool, path)
        loaded = mb.load_pool(path)
        assert loaded.ids() == pool.ids()
        for cid in pool.ids():
            a, b = pool.get(cid), loaded.get(cid)
            assert a.session_id == b.session_id
            assert np.array_equal(a.category.values, b.category.values)
            assert np.array_equal(a.hyper.values, b.hyper.values)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(mb.PoolError):
            mb.load_pool(path)
