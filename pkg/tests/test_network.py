"""Unit tests for the dual-branch network: sign constraints, forward
pipeline parity with the scalar oracles, masking, the importance metric,
and the checkpoint format."""

import numpy as np
import pytest

import oracles
import shapes
from d2csg import network as net
from d2csg.geometry import NormalizationTransform, OccupancySet


def _tiny_model(seed=0, p=8, c=3, phase=0):
    hp = net.HyperParams(p=p, c=c, code_size=6, hidden=5, seed=seed)
    return net.init_model(hp, np.random.default_rng(seed))


class TestHyperParams:
    def test_defaults_validate(self):
        net.HyperParams().validate()

    @pytest.mark.parametrize(
        "kwargs, msg",
        [
            ({"p": 7}, "even"),
            ({"p": 0}, "even"),
            ({"c": 0}, "c must"),
            ({"code_size": 0}, "code_size"),
            ({"alpha": 0.0}, "alpha"),
            ({"theta": 0.1}, "theta"),
            ({"batch": 0}, "batch"),
            ({"delta_mode": "weird"}, "delta_mode"),
        ],
    )
    def test_rejects_bad_values(self, kwargs, msg):
        with pytest.raises(ValueError, match=msg):
            net.HyperParams(**kwargs).validate()


class TestSignConstraints:
    def test_masks_shape_and_values(self):
        mq, mp = net.quad_sign_masks(6)
        assert mq.shape == (7, 6) and mp.shape == (7, 6)
        assert (mq[0:3, :3] == 1.0).all() and (mq[0:3, 3:] == -1.0).all()
        assert (mq[3:7] == 0.0).all()
        assert (mp[3:7] == 1.0).all() and (mp[0:3] == 0.0).all()

    def test_predicted_primitives_obey_signs(self):
        model = _tiny_model(seed=1, p=10)
        pc, pr = net.model_primitives(model)
        half = model.hp.p // 2
        for P in (pc, pr):
            assert P.shape == (10, 7)
            assert (P[:half, 0:3] >= 0.0).all()
            assert (P[half:, 0:3] <= 0.0).all()

    def test_shared_primitives_reuse_cover_head(self):
        model = _tiny_model(seed=2)
        model.hp.shared_primitives = True
        pc, pr = net.model_primitives(model)
        np.testing.assert_array_equal(pc, pr)
        pr[0, 0] = 123.0  # the copy must be independent
        assert pc[0, 0] != 123.0

    def test_mlp_matches_scalar_oracle(self):
        model = _tiny_model(seed=3)
        pc, pr = net.model_primitives(model)
        m = model.net
        oc = oracles.scalar_mlp_primitives(
            model.z, m.W1, m.b1, m.W2c, m.b2c, m.slope, model.hp.p
        )
        orr = oracles.scalar_mlp_primitives(
            model.z, m.W1, m.b1, m.W2r, m.b2r, m.slope, model.hp.p
        )
        np.testing.assert_allclose(pc, np.asarray(oc), atol=1e-12)
        np.testing.assert_allclose(pr, np.asarray(orr), atol=1e-12)

    def test_fresh_inverse_cover_rows_are_inert(self, rng):
        # complement rows of the cover head start as the empty set: their
        # rectified field must be exactly zero over the whole box
        model = _tiny_model(seed=4, p=16)
        pc, _ = net.model_primitives(model)
        pts = rng.uniform(-0.5, 0.5, size=(2000, 3))
        d = net.asd(net.query_features(pts), pc)
        assert d[:, model.hp.p // 2 :].max() < 0.0

    def test_attention_init_asymmetric(self):
        model = _tiny_model(seed=5, c=4)
        assert np.abs(model.W_C - 1.0 / 4).max() < 0.1
        assert np.abs(model.W_R).max() < 0.1


class TestForwardPipeline:
    def test_query_features(self):
        pts = np.array([[1.0, 2.0, -3.0]])
        q = net.query_features(pts)
        np.testing.assert_array_equal(q[0], [1.0, 4.0, 9.0, 1.0, 2.0, -3.0, 1.0])

    def test_asd_sign_convention(self):
        # unit ball: x^2+y^2+z^2-1 <= 0 inside
        P = np.array([[1.0, 1, 1, 0, 0, 0, -1.0]])
        q = net.query_features(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        d = net.asd(q, P)
        assert d[0, 0] < 0 < d[1, 0]

    def test_asd_rejects_bad_shapes(self):
        with pytest.raises(ValueError, match="asd"):
            net.asd(np.ones((2, 6)), np.ones((1, 7)))
        with pytest.raises(ValueError, match="intersect"):
            net.intersect(np.ones((2, 3)), np.ones((4, 2)))

    def test_pipeline_matches_scalar_oracles(self, rng):
        n, p, c = 17, 6, 3
        pts = rng.uniform(-0.5, 0.5, size=(n, 3))
        Q = net.query_features(pts)
        P = rng.standard_normal((p, 7))
        T = rng.random((p, c))
        W = rng.random((1, c))
        theta = 50.0
        D = net.asd(Q, P)
        Con = net.intersect(D, T)
        np.testing.assert_allclose(D, oracles.scalar_asd(pts, P), atol=1e-12)
        np.testing.assert_allclose(Con, oracles.scalar_intersect(D, T), atol=1e-12)
        np.testing.assert_allclose(
            net.union_min(Con, W, theta),
            oracles.scalar_union_min(Con, W.ravel(), theta), atol=1e-12
        )
        np.testing.assert_allclose(
            net.union_soft(Con, W), oracles.scalar_union_soft(Con, W.ravel()),
            atol=1e-12
        )
        a_c = net.union_min(Con, W, theta)
        a_r = net.union_soft(Con, W)
        np.testing.assert_allclose(
            net.difference_field(a_c, a_r, 0.2),
            oracles.scalar_difference(a_c, a_r, 0.2),
            atol=1e-12,
        )

    def test_union_min_all_ones_is_plain_min(self, rng):
        Con = rng.random((20, 4)) * 5
        out = net.union_min(Con, np.ones((1, 4)), theta=100.0)
        np.testing.assert_array_equal(out, Con.min(axis=1))

    def test_union_min_masked_shape_never_wins(self, rng):
        Con = rng.random((50, 3))  # everything < 1 << theta
        W = np.array([[1.0, 0.0, 1.0]])
        out = net.union_min(Con, W, theta=100.0)
        np.testing.assert_array_equal(out, Con[:, [0, 2]].min(axis=1))

    def test_inside_count(self):
        s = np.array([0.0, 0.09, 0.11, 0.2])
        assert net.inside_count(s, alpha=0.2) == 2

    def test_field_values_chunking_invariant(self):
        model = shapes.random_stage2_model(np.random.default_rng(0))
        pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(333, 3))
        full = net.field_values(model, pts)
        small = net.field_values(model, pts, chunk=7)
        for key in ("a_C", "a_R", "s_star"):
            np.testing.assert_array_equal(full[key], small[key])

    def test_field_values_masks_only_in_phase2(self):
        model = shapes.random_stage2_model(np.random.default_rng(2))
        pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(100, 3))
        masked = net.field_values(model, pts)["a_C"]
        model2 = model.copy()
        model2.phase = 1
        unmasked = net.field_values(model2, pts)["a_C"]
        if (model.W_C == 0).any():
            # dropping the mask can only lower the minimum
            assert (unmasked <= masked + 1e-12).all()

    def test_inside_predicate_matches_field(self):
        model = shapes.random_stage2_model(np.random.default_rng(4))
        pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(200, 3))
        s = net.field_values(model, pts)["s_star"]
        np.testing.assert_array_equal(
            net.inside_predicate(model, pts), s < model.hp.alpha / 2
        )


class TestImportance:
    def _occ(self, n=400, seed=6):
        pts = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n, 3))
        return OccupancySet(
            points=pts.astype(np.float32),
            inside=np.zeros(n, dtype=bool),
            origin=np.zeros(n, dtype=np.uint8),
        )

    def test_requires_stage2(self):
        model = _tiny_model()
        with pytest.raises(ValueError, match="stage-2"):
            net.importance_delta(model, self._occ(), net.Removal("shape", "C", 0))

    def test_rejects_inactive_targets(self):
        model = shapes.random_stage2_model(np.random.default_rng(7))
        model.W_C[0, 0] = 0.0
        with pytest.raises(ValueError, match="already inactive"):
            net.importance_delta(model, self._occ(), net.Removal("shape", "C", 0))
        model.T_R[1, :] = 0.0
        with pytest.raises(ValueError, match="already inactive"):
            net.importance_delta(model, self._occ(), net.Removal("primitive", "R", 1))

    def test_rejects_unknown_kind_and_branch(self):
        model = shapes.random_stage2_model(np.random.default_rng(8))
        with pytest.raises(ValueError, match="branch"):
            net.importance_delta(model, self._occ(), net.Removal("shape", "X", 0))
        with pytest.raises(ValueError, match="kind"):
            net.importance_delta(model, self._occ(), net.Removal("thing", "C", 0))

    def test_duplicate_shape_removal_is_free(self):
        # two identical active cover columns: dropping one never changes s*
        model = shapes.random_stage2_model(np.random.default_rng(9))
        model.T_C[:, 1] = model.T_C[:, 0]
        model.W_C[0, 0] = model.W_C[0, 1] = 1.0
        occ = self._occ()
        assert net.importance_delta(model, occ, net.Removal("shape", "C", 1)) == 0

    def test_delta_matches_brute_force(self):
        model = shapes.random_stage2_model(np.random.default_rng(10))
        occ = self._occ(seed=11)
        base = net.inside_predicate(model, occ.points.astype(np.float64))
        active_cols = np.nonzero(model.W_C[0] == 1.0)[0]
        target = int(active_cols[0])
        mod = model.copy()
        mod.W_C[0, target] = 0.0
        after = net.inside_predicate(mod, occ.points.astype(np.float64))
        expect = int((base != after).sum())
        got = net.importance_delta(model, occ, net.Removal("shape", "C", target))
        assert got == expect

    def test_count_mode_vs_flip_mode(self):
        base = np.array([True, True, False, False])
        mod = np.array([False, True, True, False])
        # one point leaves, one enters: two flips, net count change zero
        assert net.delta_s(base, mod, "flips") == 2
        assert net.delta_s(base, mod, "count") == 0
        with pytest.raises(ValueError, match="delta_mode"):
            net.delta_s(base, mod, "bad")

    def test_field_cache_matches_model_and_commit(self):
        model = shapes.random_stage2_model(np.random.default_rng(12))
        pts = np.random.default_rng(13).uniform(-0.5, 0.5, size=(250, 3))
        cache = net.FieldCache(model, pts)
        ref = net.field_values(model, pts)
        a_c = cache.a_branch("C")
        a_r = cache.a_branch("R")
        np.testing.assert_allclose(a_c, ref["a_C"], atol=1e-12)
        np.testing.assert_allclose(a_r, ref["a_R"], atol=1e-12)
        np.testing.assert_allclose(cache.s_star(a_c, a_r), ref["s_star"], atol=1e-12)
        # committing a removal must equal recomputing on an edited model
        active = np.nonzero(model.W_R[0] == 1.0)[0]
        if len(active):
            removal = net.Removal("shape", "R", int(active[0]))
            cache.commit(removal)
            edited = model.copy()
            edited.W_R[0, int(active[0])] = 0.0
            np.testing.assert_allclose(
                cache.a_branch("R"), net.field_values(edited, pts)["a_R"], atol=1e-12
            )

    def test_field_cache_requires_stage2(self):
        with pytest.raises(ValueError, match="stage-2"):
            net.FieldCache(_tiny_model(), np.zeros((1, 3)))


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        model = shapes.random_stage2_model(np.random.default_rng(14))
        model.transform = NormalizationTransform(scale=0.5, translate=np.array([0.1, 0.2, 0.3]))
        path = tmp_path / "m.d2cm"
        net.save_model(str(path), model)
        loaded = net.load_model(str(path))
        # integer/flag fields roundtrip exactly; float fields via f32
        for name in ("p", "c", "code_size", "hidden", "iters_per_stage",
                     "dropout_interval", "batch", "seed",
                     "shared_primitives", "dropout_enabled", "delta_mode"):
            assert getattr(loaded.hp, name) == getattr(model.hp, name)
        for name in ("alpha", "eta", "sigma", "theta", "lr"):
            assert getattr(loaded.hp, name) == float(np.float32(getattr(model.hp, name)))
        assert loaded.phase == model.phase
        for name in ("z", "T_C", "T_R", "W_C", "W_R"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))
        for name in ("W1", "b1", "W2c", "b2c", "W2r", "b2r"):
            np.testing.assert_array_equal(getattr(loaded.net, name), getattr(model.net, name))
        assert loaded.transform.scale == 0.5
        np.testing.assert_array_equal(loaded.transform.translate, [0.1, 0.2, 0.3])

    def test_roundtrip_without_transform(self, tmp_path):
        model = _tiny_model(seed=15)
        path = tmp_path / "m.d2cm"
        net.save_model(str(path), model)
        assert net.load_model(str(path)).transform is None

    def test_save_is_deterministic(self, tmp_path):
        model = _tiny_model(seed=16)
        a, b = tmp_path / "a.d2cm", tmp_path / "b.d2cm"
        net.save_model(str(a), model)
        net.save_model(str(b), model)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.d2cm"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            net.load_model(str(path))

    def test_truncated_rejected(self, tmp_path):
        model = _tiny_model(seed=17)
        path = tmp_path / "m.d2cm"
        net.save_model(str(path), model)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError, match="truncated"):
            net.load_model(str(path))
