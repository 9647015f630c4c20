"""Rotary encoding: cached angles, rotations, and the relative-position law."""

import numpy as np
import pytest

from glowmatch import numcore as nc
from glowmatch.errors import ContractViolation
from glowmatch.features import FeatureSet, NormalizedPoints, normalize_points
from glowmatch.rope import RotationCache, apply_rotation, build_cache, init_basis


def cache_for(coords, basis):
    return build_cache(NormalizedPoints(np.asarray(coords, dtype=np.float64), (2, 2)), basis)


class TestBuildCache:
    def test_origin_gives_zero_angles(self, rng):
        basis = init_basis(rng, 4, dtype=np.float64)
        cache = cache_for([[0.0, 0.0]], basis)
        np.testing.assert_allclose(cache.cos, np.ones((1, 4)), atol=0)
        np.testing.assert_allclose(cache.sin, np.zeros((1, 4)), atol=0)

    def test_quarter_turn_angle(self):
        # One subspace with frequency (1, 0): a point at x = pi/2 in the
        # normalized frame lands exactly on a quarter turn.
        basis = np.array([[1.0, 0.0]])
        cache = cache_for([[np.pi / 2, 0.0]], basis)
        np.testing.assert_allclose(cache.cos, [[0.0]], atol=1e-12)
        np.testing.assert_allclose(cache.sin, [[1.0]], atol=1e-12)

    def test_translation_shifts_angles_uniformly(self, rng):
        basis = init_basis(rng, 3, dtype=np.float64)
        pts = rng.uniform(-0.5, 0.5, size=(7, 2))
        t = np.array([0.11, -0.23])
        base = cache_for(pts, basis).theta.data
        shifted = cache_for(pts + t, basis).theta.data
        offset = basis @ t  # (K,)
        np.testing.assert_allclose(shifted - base, np.broadcast_to(offset, (7, 3)), atol=1e-9)

    def test_unit_circle_invariant(self, rng):
        basis = init_basis(rng, 5, dtype=np.float64)
        cache = cache_for(rng.uniform(-1, 1, size=(20, 2)), basis)
        np.testing.assert_allclose(cache.cos ** 2 + cache.sin ** 2, 1.0, atol=1e-6)

    def test_cache_reused_across_layers_is_same_object(self, rng):
        from glowmatch.backbone import init_model, init_states
        params = init_model(rng, 2, 8, 2, 4, dtype=np.float64)
        pts = rng.uniform([0, 0], [32, 32], size=(5, 2)).astype(np.float32)
        fs = FeatureSet((32, 32), pts, rng.normal(size=(5, 4)).astype(np.float32))
        state = init_states(fs, fs, params)
        assert isinstance(state.cache_a, RotationCache)


class TestApplyRotation:
    def test_zero_angle_identity(self, rng):
        v = rng.normal(size=(6,))
        out = apply_rotation(v, np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out, v)

    def test_quarter_turn(self):
        out = apply_rotation(np.array([1.0, 0.0]), np.array([0.0]), np.array([1.0]))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_norm_preserved(self, rng):
        for _ in range(50):
            v = rng.normal(size=(8,))
            theta = rng.normal(size=(4,))
            out = apply_rotation(v, np.cos(theta), np.sin(theta))
            assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-10 * max(1, np.linalg.norm(v))

    def test_odd_width_rejected(self, rng):
        with pytest.raises(ContractViolation):
            apply_rotation(rng.normal(size=(5,)), np.zeros(2), np.zeros(2))

    def test_rotate_pairs_matches_per_point_helper(self, rng):
        basis = init_basis(rng, 4, dtype=np.float64)
        coords = rng.uniform(-1, 1, size=(6, 2))
        cache = cache_for(coords, basis)
        x = rng.normal(size=(2, 6, 8))
        out = cache.rotate(nc.Tensor(x)).data
        for i in range(6):
            for head in range(2):
                ref = apply_rotation(x[head, i], cache.cos[i], cache.sin[i])
                np.testing.assert_allclose(out[head, i], ref, atol=1e-12)


class TestRelativePositionLaw:
    def test_orthogonality(self, rng):
        basis = init_basis(rng, 4, dtype=np.float64)
        cache = cache_for(rng.uniform(-1, 1, size=(10, 2)), basis)
        v = rng.normal(size=(10, 8))
        out = cache.rotate(nc.Tensor(v[None])).data[0]
        rel = np.abs(np.linalg.norm(out, axis=1) - np.linalg.norm(v, axis=1))
        assert rel.max() < 1e-10 * np.linalg.norm(v, axis=1).max()

    def test_score_depends_only_on_relative_position(self, rng):
        """<R(b.p_i) q, R(b.p_j) k> == <q, R(b.(p_j - p_i)) k> within 1e-9."""
        basis = init_basis(rng, 4, dtype=np.float64)
        for _ in range(25):
            pi, pj = rng.uniform(-1, 1, size=(2, 2))
            q, k = rng.normal(size=(2, 8))
            ci = cache_for([pi], basis)
            cj = cache_for([pj], basis)
            crel = cache_for([pj - pi], basis)
            lhs = float(np.dot(apply_rotation(q, ci.cos[0], ci.sin[0]),
                               apply_rotation(k, cj.cos[0], cj.sin[0])))
            rhs = float(np.dot(q, apply_rotation(k, crel.cos[0], crel.sin[0])))
            assert abs(lhs - rhs) < 1e-9

    def test_normalized_points_enter_the_cache(self, rng):
        basis = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float64)
        pts = np.array([[480.0, 360.0]], dtype=np.float32)
        fs = FeatureSet((640, 480), pts, np.zeros((1, 3), dtype=np.float32))
        cache = build_cache(normalize_points(fs), basis)
        # normalized position is (0.5, 0.375)
        np.testing.assert_allclose(cache.theta.data, [[0.5, 0.375]], atol=1e-6)
