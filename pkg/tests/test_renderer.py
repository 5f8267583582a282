import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import small_model, x_rays
from hybridmap.core import RayBatch
from hybridmap.octree import SparseVoxelOctree
from hybridmap.renderer import (
    first_surface_mask,
    render,
    render_values,
    sample_rays,
    sdf_weights,
)

finite = st.floats(-10, 10, allow_nan=False)


def one_ray_batch(origin, direction, depth_scale=1.0):
    return RayBatch(np.array([origin], float), np.array([direction], float), np.array([depth_scale]),
                    np.zeros((1, 3)), np.zeros(1), np.zeros((1, 2), dtype=np.int64), np.zeros(1, dtype=np.int64))


class TestWeights:
    def test_peak_is_quarter(self):
        assert sdf_weights(0.0, 0.05) == 0.25

    def test_golden_at_one_truncation(self):
        # sigmoid(1) * sigmoid(-1) = e / (1 + e)^2
        e = np.e
        assert sdf_weights(0.05, 0.05) == pytest.approx(e / (1 + e) ** 2, abs=1e-15)

    @given(finite, st.floats(1e-3, 1.0))
    def test_symmetric(self, s, tr):
        assert abs(sdf_weights(s, tr) - sdf_weights(-s, tr)) <= 1e-12

    @given(finite, st.floats(1e-3, 1.0), st.floats(1e-2, 1e2))
    def test_scale_invariant(self, s, tr, a):
        assert abs(sdf_weights(a * s, a * tr) - sdf_weights(s, tr)) <= 1e-12

    @given(finite, st.floats(1e-3, 1.0))
    def test_bounded_and_maximal_at_zero(self, s, tr):
        w = sdf_weights(s, tr)
        assert 0 <= w <= 0.25 + 1e-15  # product of two roundings near s = 0


class TestComposite:
    @given(finite, st.floats(0, 1), st.floats(0.01, 10))
    def test_single_sample_returns_itself(self, s, cval, d):
        c = np.full((1, 3), cval)
        color, depth, valid = render_values(np.array([s]), c, np.array([d]), np.zeros(1, int), 1, 0.05)
        if valid[0]:
            np.testing.assert_allclose(color[0], c[0], rtol=1e-12)
            assert depth[0] == pytest.approx(d, rel=1e-12)

    def test_degenerate_ray_excluded(self):
        _, _, valid = render_values(np.array([50.0, 60.0]), np.zeros((2, 3)), np.array([1.0, 1.1]),
                                    np.zeros(2, int), 1, 0.05)
        assert not valid[0]

    @settings(max_examples=40)
    @given(st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=12), st.integers(0, 2**31))
    def test_matches_loop_oracle(self, s, seed):
        rng = np.random.default_rng(seed)
        n = len(s)
        s = np.array(s)
        d = np.sort(rng.uniform(0.1, 3.0, size=n))
        c = rng.uniform(size=(n, 3))
        color, depth, valid = render_values(s, c, d, np.zeros(n, int), 1, 0.05)
        oc, od, total = oracles.render_ray(list(s), c.tolist(), list(d), 0.05)
        assert valid[0] == (total >= 1e-12)
        if valid[0]:
            np.testing.assert_allclose(color[0], oc, atol=1e-12, rtol=0)
            assert abs(depth[0] - od) <= 1e-12

    def test_taped_matches_untaped(self):
        model = small_model()
        batch = x_rays()
        samples = sample_rays(batch, model.octree, 0.02)
        tape = model.new_tape()
        s, _ = model.predict_sdf(samples.points, tape)
        c, _ = model.predict_color(samples.points, tape)
        out = render(tape, samples, s, c, 0.05)
        color, depth, valid = render_values(s.value, c.value, samples.depth, samples.ray_index, len(batch), 0.05)
        np.testing.assert_allclose(out.color.value, color, atol=1e-14)
        np.testing.assert_allclose(out.depth.value, depth, atol=1e-14)
        np.testing.assert_array_equal(out.valid, valid)


class TestFirstSurface:
    def test_hidden_surface_is_masked(self):
        # front surface at 1.0, second at 2.0; samples every 1 cm
        d = np.arange(0.505, 2.5, 0.01)
        s = np.where(d < 1.5, 1.0 - d, d - 2.0)
        mask = first_surface_mask(s, d, np.zeros(len(d), int), 1, 0.05)
        assert mask[d < 1.0].all()
        assert not mask[d > 1.06].any()
        _, depth, _ = render_values(s, np.zeros((len(d), 3)), d, np.zeros(len(d), int), 1, 0.05)
        assert abs(depth[0] - 1.0) < 0.05

    def test_no_crossing_keeps_everything(self):
        s = np.array([0.3, 0.2, 0.1, 0.05])
        assert first_surface_mask(s, np.arange(4.0), np.zeros(4, int), 1, 0.05).all()

    def test_rays_are_independent(self):
        s = np.array([0.1, -0.1, 0.2, 0.1])
        d = np.array([1.0, 1.1, 0.5, 0.6])
        ri = np.array([0, 0, 1, 1])
        # no crossing is detected across the ray boundary (s[1] < 0 < s[2])
        np.testing.assert_array_equal(first_surface_mask(s, d, ri, 2, 0.05), [True, False, True, True])

    def test_mask_off_blends_all(self):
        d = np.array([1.0, 1.01, 2.0, 2.01])
        s = np.array([0.005, -0.005, 0.005, -0.005])
        _, d_on, _ = render_values(s, np.zeros((4, 3)), d, np.zeros(4, int), 1, 0.05)
        _, d_off, _ = render_values(s, np.zeros((4, 3)), d, np.zeros(4, int), 1, 0.05, first_surface=False)
        assert d_on[0] == pytest.approx(1.005)
        assert d_off[0] == pytest.approx(1.505)


class TestSampling:
    def test_midpoint_count(self):
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves([(0, 0, 0)])
        samples = sample_rays(one_ray_batch([-0.5, 0.05, 0.05], [1, 0, 0]), tree, 0.01)
        assert len(samples) == 10
        np.testing.assert_allclose(samples.t, 0.5 + 0.005 + 0.01 * np.arange(10), atol=1e-12)

    def test_depth_uses_depth_scale(self):
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves([(0, 0, 0)])
        samples = sample_rays(one_ray_batch([-0.5, 0.05, 0.05], [1, 0, 0], 0.5), tree, 0.01)
        np.testing.assert_allclose(samples.depth, 0.5 * samples.t)

    def test_miss(self):
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves([(0, 0, 0)])
        assert len(sample_rays(one_ray_batch([-0.5, 0.5, 0.05], [1, 0, 0]), tree, 0.01)) == 0

    def test_skips_gaps_between_leaves(self):
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves([(0, 0, 0), (3, 0, 0)])
        samples = sample_rays(one_ray_batch([-0.5, 0.05, 0.05], [1, 0, 0]), tree, 0.01)
        assert len(samples) == 20
        x = samples.points[:, 0]
        assert np.all(((x > 0) & (x < 0.1)) | ((x > 0.3) & (x < 0.4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_samples_inside_leaves_and_ascending(self, seed):
        rng = np.random.default_rng(seed)
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves(rng.integers(-3, 3, size=(15, 3)))
        n = 20
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        batch = RayBatch(np.tile([0.01, 0.02, 0.03], (n, 1)) + rng.normal(0, 0.05, (n, 3)), dirs, np.ones(n),
                         np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2), dtype=np.int64), np.zeros(n, dtype=np.int64))
        samples = sample_rays(batch, tree, 0.01)
        cells = np.floor(samples.points / 0.1).astype(int)
        leaves = {tuple(c) for c in tree.leaf_coords.tolist()}
        assert all(tuple(c) in leaves for c in cells.tolist())
        same = samples.ray_index[1:] == samples.ray_index[:-1]
        assert np.all(samples.t[1:][same] > samples.t[:-1][same])
        assert np.all(np.diff(samples.ray_index) >= 0)

    def test_cap_truncates_far_samples(self):
        tree = SparseVoxelOctree(0.1)
        tree.add_leaves([(i, 0, 0) for i in range(5)])
        samples = sample_rays(one_ray_batch([-0.5, 0.05, 0.05], [1, 0, 0]), tree, 0.01, max_samples=23)
        assert len(samples) == 23 and samples.truncated == 1
        assert samples.t.max() < 0.5 + 0.23
