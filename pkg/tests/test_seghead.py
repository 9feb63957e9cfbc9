"""Segmentation head: dense comparison residual semantics, iterative
refinement unrolling, NMS fusion vs a per-pixel brute-force oracle,
class-agnosticism, and training-step behavior."""

import numpy as np
import pytest

from memseg import adapt, featext as fx, membank as mb, numkit as nk, seghead as sh


def make_head(seed=0, c_feat=4, embed_dim=3, c_aspp=4, iterations=2):
    return sh.make_seghead(
        np.random.default_rng(seed), c_feat, embed_dim, c_aspp=c_aspp, iterations=iterations
    )


def make_record(rng, dim, class_id=0, session_id=0):
    return mb.ClassRecord(
        class_id,
        mb.Embedding(rng.normal(size=dim), "category", "aligned"),
        mb.Embedding(rng.normal(size=dim), "hyperclass", "aligned"),
        session_id,
    )


class TestDenseCompare:
    def test_channel_contract(self):
        rng = np.random.default_rng(0)
        p = make_head(c_feat=4, embed_dim=3)
        qmap = rng.normal(size=(4, 6, 6))
        f = sh.dense_compare(qmap, make_record(rng, 3), p)
        assert f.shape == (4 + 2 * 3, 6, 6)

    def test_zero_block_is_identity_on_concat(self):
        rng = np.random.default_rng(1)
        p = make_head(c_feat=4, embed_dim=3)
        p.compare_conv.kernels[:] = 0.0
        p.compare_conv.bias[:] = 0.0
        qmap = rng.normal(size=(4, 5, 5))
        rec = make_record(rng, 3)
        f = sh.dense_compare(qmap, rec, p)
        np.testing.assert_array_equal(f[:4], qmap)
        for c in range(3):
            np.testing.assert_array_equal(f[4 + c], np.full((5, 5), rec.category.values[c]))
            np.testing.assert_array_equal(f[7 + c], np.full((5, 5), rec.hyper.values[c]))

    def test_embedding_channels_constant_everywhere(self):
        rng = np.random.default_rng(2)
        p = make_head()
        qmap = rng.normal(size=(4, 8, 8))
        rec = make_record(rng, 3)
        tiles_c = np.broadcast_to(rec.category.values[:, None, None], (3, 8, 8))
        x = np.concatenate([qmap, tiles_c,
                            np.broadcast_to(rec.hyper.values[:, None, None], (3, 8, 8))])
        for c in range(3):
            vals = x[4 + c]
            for i in range(8):
                for j in range(8):
                    assert vals[i, j] == rec.category.values[c]

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        p = make_head(c_feat=4, embed_dim=3)
        with pytest.raises(nk.DimensionError):
            sh.dense_compare(rng.normal(size=(5, 4, 4)), make_record(rng, 3), p)


class TestRefineStep:
    def test_zero_params_constant_sigmoid_bias(self):
        p = make_head()
        for arr_path, arr in nk.param_arrays(p):
            arr[:] = 0.0
        p.proj.bias[:] = 0.7
        f = np.random.default_rng(4).normal(size=(10, 4, 4))
        m = sh.refine_step(f, np.zeros((4, 4)), p)
        np.testing.assert_allclose(m, nk.sigmoid(np.array([0.7]))[0], atol=1e-15)

    def test_shape_preserved(self):
        rng = np.random.default_rng(5)
        p = make_head()
        f = rng.normal(size=(10, 6, 7))
        m = sh.refine_step(f, rng.random((6, 7)), p)
        assert m.shape == (6, 7)

    def test_extent_mismatch(self):
        p = make_head()
        with pytest.raises(nk.DimensionError):
            sh.refine_step(np.zeros((10, 4, 4)), np.zeros((5, 5)), p)

    def test_unrolled_composition_matches_segment(self):
        rng = np.random.default_rng(6)
        p = make_head()
        f = rng.normal(size=(10, 5, 5))
        m = np.zeros((5, 5))
        for _ in range(4):
            m = sh.refine_step(f, m, p)
        np.testing.assert_array_equal(m, sh.segment_class(f, 3, p))


class TestSegmentClass:
    def test_outputs_in_unit_interval(self):
        rng = np.random.default_rng(7)
        p = make_head()
        for t in range(4):
            m = sh.segment_class(rng.normal(size=(10, 4, 4)), t, p)
            assert np.all(m >= 0.0) and np.all(m <= 1.0)

    def test_zero_params_any_iterations(self):
        p = make_head()
        for _, arr in nk.param_arrays(p):
            arr[:] = 0.0
        p.proj.bias[:] = -0.3
        want = nk.sigmoid(np.array([-0.3]))[0]
        f = np.random.default_rng(8).normal(size=(10, 4, 4))
        for t in (0, 1, 3):
            np.testing.assert_allclose(sh.segment_class(f, t, p), want, atol=1e-15)

    def test_iterations_zero_is_single_pass(self):
        rng = np.random.default_rng(9)
        p = make_head()
        f = rng.normal(size=(10, 4, 4))
        single = sh.refine_step(f, np.zeros((4, 4)), p)
        np.testing.assert_array_equal(sh.segment_class(f, 0, p), single)

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        p = make_head()
        f = rng.normal(size=(10, 4, 4))
        assert np.array_equal(sh.segment_class(f, 2, p), sh.segment_class(f, 2, p))

    def test_class_agnostic_swap(self):
        # identical embeddings under swapped ids must swap outputs exactly
        rng = np.random.default_rng(11)
        p = make_head(c_feat=4, embed_dim=3)
        qmap = rng.normal(size=(4, 6, 6))
        rec_a = make_record(rng, 3, class_id=1)
        rec_b = make_record(rng, 3, class_id=2)
        out_a = sh.segment_class(sh.dense_compare(qmap, rec_a, p), 2, p)
        out_b = sh.segment_class(sh.dense_compare(qmap, rec_b, p), 2, p)
        swapped_a = mb.ClassRecord(2, rec_a.category, rec_a.hyper, 0)
        swapped_b = mb.ClassRecord(1, rec_b.category, rec_b.hyper, 0)
        assert np.array_equal(
            sh.segment_class(sh.dense_compare(qmap, swapped_a, p), 2, p), out_a
        )
        assert np.array_equal(
            sh.segment_class(sh.dense_compare(qmap, swapped_b, p), 2, p), out_b
        )


def brute_force_fuse(conf, tau):
    ids = sorted(conf.keys())
    h, w = conf[ids[0]].shape
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            best_id, best_v = sh.BACKGROUND, -np.inf
            for cid in ids:
                v = conf[cid][i, j]
                if v > best_v:
                    best_id, best_v = cid, v
            out[i, j] = best_id if best_v >= tau else sh.BACKGROUND
    return out


class TestNmsFuse:
    def test_single_confident_class(self):
        labels = sh.nms_fuse({7: np.full((4, 4), 0.9)}, tau=0.5)
        np.testing.assert_array_equal(labels, np.full((4, 4), 7))

    def test_all_below_threshold(self):
        conf = {1: np.full((3, 3), 0.2), 2: np.full((3, 3), 0.4)}
        np.testing.assert_array_equal(sh.nms_fuse(conf, 0.5), np.full((3, 3), sh.BACKGROUND))

    def test_ties_to_smallest_id(self):
        conf = {5: np.full((2, 2), 0.8), 3: np.full((2, 2), 0.8)}
        np.testing.assert_array_equal(sh.nms_fuse(conf, 0.5), np.full((2, 2), 3))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n_cls = int(rng.integers(1, 6))
            ids = rng.choice(50, size=n_cls, replace=False)
            conf = {int(c): rng.random((16, 16)) for c in ids}
            tau = float(rng.uniform(0.2, 0.8))
            np.testing.assert_array_equal(sh.nms_fuse(conf, tau), brute_force_fuse(conf, tau))

    def test_property_random_sizes(self):
        rng = np.random.default_rng(13)
        for _ in range(15):
            n_cls = int(rng.integers(1, 9))
            h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
            conf = {c: rng.random((h, w)) for c in range(n_cls)}
            # quantized values force frequent exact ties
            conf = {c: np.round(m * 4) / 4 for c, m in conf.items()}
            tau = 0.5
            np.testing.assert_array_equal(sh.nms_fuse(conf, tau), brute_force_fuse(conf, tau))

    def test_extent_mismatch(self):
        with pytest.raises(nk.DimensionError):
            sh.nms_fuse({1: np.zeros((2, 2)), 2: np.zeros((3, 3))})

    def test_empty_rejected(self):
        with pytest.raises(nk.DimensionError):
            sh.nms_fuse({})


def tiny_world(seed=0, dim=4, c_feat=3):
    """A minimal trainable setup: params, pool with two classes, one sample."""
    rng = np.random.default_rng(seed)
    extractor = fx.make_extractor(rng, c_img=3, c_hidden=3, c_feat=c_feat, embed_dim=dim)
    params = sh.TrainableParams(
        extractor=extractor,
        aligner=mb.make_aligner(rng, dim),
        maps=adapt.make_update_maps(rng, dim, scale=0.3),
        lt_map=nk.AffineParams(np.eye(dim), None),
        head=sh.make_seghead(rng, c_feat, dim, c_aspp=3, iterations=1),
    )
    pool = mb.MemoryPool()
    for cid in (0, 1):
        v = rng.normal(size=dim)
        mb.insert_class(pool, cid, mb.Embedding(v, "category", "aligned"),
                        mb.Embedding(rng.normal(size=dim), "hyperclass", "aligned"), 0)
    img = rng.random((3, 16, 16))
    mask = np.kron((rng.random((4, 4)) > 0.5).astype(float), np.ones((4, 4)))
    mask[4:12, 4:12] = 1.0
    hyper_raw = rng.normal(size=dim)
    return params, pool, img, mask, hyper_raw


class TestTrainStep:
    def test_loss_decreases_over_50_steps(self):
        params, pool, img, mask, hyper_raw = tiny_world(seed=3)
        sample = (img, mask, 0)
        first = sh.train_step(sample, pool, params, lr=0.1, hyper_raw=hyper_raw)
        last = first
        for _ in range(49):
            last = sh.train_step(sample, pool, params, lr=0.1, hyper_raw=hyper_raw)
        assert last < first

    def test_perfect_prediction_tiny_loss(self):
        target = np.zeros((4, 4))
        target[1:3, 1:3] = 1.0
        logits = np.where(target > 0.5, 30.0, -30.0)
        loss, _ = sh.bce_with_logits(logits, target)
        assert loss < 1e-5

    def test_unknown_class_rejected(self):
        params, pool, img, mask, hyper_raw = tiny_world()
        with pytest.raises(nk.DimensionError):
            sh.train_step((img, mask, 99), pool, params, lr=0.1, hyper_raw=hyper_raw)

    def test_nonfinite_loss_raises(self):
        params, pool, img, mask, hyper_raw = tiny_world()
        params.head.proj.bias[:] = np.inf
        with pytest.raises(sh.TrainingError):
            sh.train_step((img, mask, 0), pool, params, lr=0.1, hyper_raw=hyper_raw)

    def test_negative_branch_runs(self):
        params, pool, img, mask, hyper_raw = tiny_world(seed=5)
        rng = np.random.default_rng(5)
        img2 = rng.random((3, 16, 16))
        mask2 = np.kron((rng.random((4, 4)) > 0.4).astype(float), np.ones((4, 4)))
        mask2[0:8, 0:8] = 1.0
        loss = sh.train_step_batch(
            np.stack([img, img2]),
            np.stack([mask, mask2]),
            np.array([0, 1]),
            pool,
            np.stack([hyper_raw, hyper_raw]),
            params,
            lr=0.1,
            negative_src=np.array([1, 0]),
        )
        assert np.isfinite(loss)

    def test_strategy_variants_run(self):
        for kind in ("attention", "linear-transform", "non-update"):
            params, pool, img, mask, hyper_raw = tiny_world(seed=7)
            loss = sh.train_step(
                (img, mask, 0), pool, params, lr=0.1, hyper_raw=hyper_raw, strategy_kind=kind
            )
            assert np.isfinite(loss)

    def test_frozen_extractor_stays_frozen(self):
        params, pool, img, mask, hyper_raw = tiny_world(seed=9)
        before = params.extractor.stages[0].conv.kernels.copy()
        proj_before = params.extractor.projection.weight.copy()
        sh.train_step((img, mask, 0), pool, params, lr=0.5, hyper_raw=hyper_raw,
                      train_featext=False)
        assert np.array_equal(params.extractor.stages[0].conv.kernels, before)
        assert np.array_equal(params.extractor.projection.weight, proj_before)
