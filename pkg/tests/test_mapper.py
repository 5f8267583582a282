import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

import oracles
from helpers import fixture_config, small_model, x_rays
from hybridmap.datasets import render_synthetic_frame, wall_scene
from hybridmap.errors import InputError
from hybridmap.mapper import (
    Keyframe,
    KeyframeSet,
    Mapper,
    TrainConfig,
    forward_losses,
    greedy_max_coverage,
    insertion_ratio,
    sample_batch,
    select_keyframes,
    select_random,
    should_stop,
)
from hybridmap.network import HybridModel, ModelConfig
from hybridmap.renderer import sample_rays


class FakeFrame:
    def __init__(self, frame_id):
        self.frame_id = frame_id


def keyframe_set(sets):
    return KeyframeSet([Keyframe(FakeFrame(i), frozenset(s)) for i, s in enumerate(sets)])


def brute_force(sets, k):
    best = 0
    for combo in itertools.combinations(range(len(sets)), min(k, len(sets))):
        best = max(best, len(set().union(*(sets[i] for i in combo))))
    return best


set_lists = st.lists(st.frozensets(st.integers(0, 59), max_size=25), min_size=1, max_size=12)


class TestGreedy:
    def test_picks_largest_then_marginal(self):
        sets = [frozenset({1, 2}), frozenset({1, 2, 3, 4}), frozenset({5}), frozenset({3, 4, 5})]
        assert greedy_max_coverage(sets, 2) == [1, 2]

    def test_tie_goes_to_lowest_index(self):
        assert greedy_max_coverage([frozenset({1}), frozenset({2})], 1) == [0]

    def test_exclude_counts_as_covered(self):
        sets = [frozenset({1, 2, 3}), frozenset({4})]
        assert greedy_max_coverage(sets, 1, exclude={1, 2, 3}) == [1]

    def test_k_larger_than_sets(self):
        assert sorted(greedy_max_coverage([frozenset({1}), frozenset()], 5)) == [0, 1]

    def test_empty(self):
        assert greedy_max_coverage([], 3) == []

    @settings(max_examples=60)
    @given(set_lists, st.integers(1, 3))
    def test_approximation_bound(self, sets, k):
        picks = greedy_max_coverage(sets, k)
        assert len(picks) == len(set(picks)) == min(k, len(sets))
        got = len(set().union(*(sets[i] for i in picks)))
        assert got >= (1 - 1 / math.e) * brute_force(sets, k) - 1e-12


class TestSelection:
    def test_marks_observed(self):
        kfs = keyframe_set([{1, 2}, {3}, {2, 3, 4}])
        sel = select_keyframes(kfs, 1)
        assert [kf.frame_id for kf in sel] == [2]
        assert kfs.observed == {2, 3, 4}
        sel = select_keyframes(kfs, 1)
        assert [kf.frame_id for kf in sel] == [0]  # only voxel 1 is still new

    def test_reset_when_everything_observed(self):
        kfs = keyframe_set([{1}, {2}])
        select_keyframes(kfs, 2)
        assert kfs.observed == {1, 2} and kfs.resets == 0
        select_keyframes(kfs, 1)
        assert kfs.resets == 1 and kfs.observed == {1}

    def test_empty_keyframe_set(self):
        assert select_keyframes(KeyframeSet(), 3) == []

    def test_random_strategy_distinct(self):
        kfs = keyframe_set([{i} for i in range(8)])
        sel = select_random(kfs, 3, np.random.default_rng(0))
        ids = [kf.frame_id for kf in sel]
        assert len(set(ids)) == 3 and ids == sorted(ids)

    def test_insertion_ratio(self):
        assert insertion_ratio(frozenset({1, 2}), frozenset({2, 3})) == 0.25
        assert insertion_ratio(frozenset(), frozenset()) == 0.0


class KeyframeMachine(RuleBasedStateMachine):
    """Observed labels only grow between resets, and a reset happens exactly when nothing is left."""

    def __init__(self):
        super().__init__()
        self.kfs = KeyframeSet()
        self.next_id = 0

    @rule(voxels=st.frozensets(st.integers(0, 30), max_size=10))
    def add_keyframe(self, voxels):
        self.kfs.keyframes.append(Keyframe(FakeFrame(self.next_id), voxels))
        self.next_id += 1

    @rule(k=st.integers(1, 4))
    def select(self, k):
        before = set(self.kfs.observed)
        resets = self.kfs.resets
        exhausted = not (self.kfs.universe() - before)
        sel = select_keyframes(self.kfs, k)
        if not self.kfs.keyframes:
            assert sel == []
            return
        assert len(sel) == min(k, len(self.kfs))
        if exhausted:
            assert self.kfs.resets == resets + 1
        else:
            assert self.kfs.resets == resets
            assert before <= self.kfs.observed
            # the first pick adds at least one new voxel
            assert sel[0].covered - before

    @invariant()
    def observed_within_universe(self):
        assert self.kfs.observed <= self.kfs.universe()


TestKeyframeMachine = KeyframeMachine.TestCase
TestKeyframeMachine.settings = settings(max_examples=40, stateful_step_count=25)


class TestShouldStop:
    def test_off(self):
        assert not should_stop([1.0, 1.0, 1.0, 1.0], "off")

    def test_relative_needs_patience(self):
        assert not should_stop([1.0, 0.999], "relative")
        assert should_stop([1.0, 0.999, 0.998], "relative")
        assert not should_stop([1.0, 0.5, 0.499], "relative")

    def test_relative_increase_counts_as_stalled(self):
        assert should_stop([1.0, 1.1, 1.2], "relative")

    def test_paper_literal(self):
        assert should_stop([1.0, 1.0, 5.0], "paper-literal")
        assert not should_stop([1.0, 0.9, 0.8], "paper-literal")

    def test_unknown(self):
        with pytest.raises(InputError):
            should_stop([1.0, 2.0, 3.0], "bogus")


class TestLosses:
    def oracle_rays(self, model, batch, tr):
        samples = sample_rays(batch, model.octree, 0.02)
        s = model.sdf(samples.points)
        c = model.color(samples.points)
        rays = []
        for r in range(len(batch)):
            m = samples.ray_index == r
            rays.append({"s": s[m].tolist(), "c": c[m].tolist(), "d": samples.depth[m].tolist(),
                         "gt_depth": float(batch.gt_depth[r]), "gt_color": batch.gt_color[r].tolist()})
        return rays

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_match_loop_oracle(self, seed):
        model = small_model(seed=seed)
        batch = x_rays(seed=seed)
        cfg = fixture_config()
        got = forward_losses(model, batch, cfg)[0].values()
        want = oracles.losses(self.oracle_rays(model, batch, 0.05), 0.05, (1.0, 1.0, 0.1, 5.0))
        for key in want:
            assert abs(got[key] - want[key]) < 1e-12, key

    def test_all_depth_missing(self):
        model = small_model()
        batch = x_rays()
        batch.gt_depth[:] = 0
        got = forward_losses(model, batch, fixture_config())[0].values()
        assert got["fs"] == got["sdf"] == got["depth"] == 0.0
        assert got["rgb"] > 0

    def test_batch_missing_all_voxels(self):
        model = small_model()
        batch = x_rays()
        batch.origins[:, 1] = 5.0
        with pytest.raises(InputError):
            forward_losses(model, batch, fixture_config())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"keyframes_per_iter": 0}, {"rays_per_iter": 0}, {"early_stop": "x"},
                                    {"keyframe_strategy": "x"}, {"truncation": -1.0}])
    def test_rejects(self, kw):
        with pytest.raises(InputError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def wall_frames():
    scene = wall_scene(num_frames=4, width=96, height=72)
    return scene, [render_synthetic_frame(scene, p, frame_id=i) for i, p in enumerate(scene.trajectory)]


class TestMapper:
    def run(self, scene, frames, **kw):
        model = HybridModel(ModelConfig(log2_table_size=12), bounds=scene.encoding_bounds())
        cfg = TrainConfig(rays_per_iter=256, max_iters=3, **kw)
        mapper = Mapper(model, cfg, seed=3)
        for f in frames:
            mapper.process_frame(f)
        return mapper

    def test_reports(self, wall_frames):
        scene, frames = wall_frames
        mapper = self.run(scene, frames)
        first = mapper.reports[0]
        assert first.new_voxels > 0 and first.keyframe_inserted and first.num_selected == 1
        assert all(1 <= r.iterations <= 3 for r in mapper.reports)
        assert all(math.isfinite(r.losses["total"]) for r in mapper.reports)
        assert mapper.reports[-1].num_leaves == mapper.model.octree.num_leaves

    def test_deterministic(self, wall_frames):
        scene, frames = wall_frames
        a = self.run(scene, frames)
        b = self.run(scene, frames)
        strip = lambda r: {k: v for k, v in r.record().items() if k != "timings"}
        assert [strip(r) for r in a.reports] == [strip(r) for r in b.reports]
        for name, p in a.model.parameters().items():
            np.testing.assert_array_equal(p, b.model.parameters()[name])

    def test_frame_ids_must_increase(self, wall_frames):
        scene, frames = wall_frames
        mapper = self.run(scene, frames[:2])
        with pytest.raises(InputError, match="frame 0"):
            mapper.process_frame(frames[0])

    def test_ablation_flags(self, wall_frames):
        scene, frames = wall_frames
        mapper = self.run(scene, frames[:2], use_priors=False, use_expansion=False)
        assert all(r.priors_initialized == 0 and r.expanded_voxels == 0 for r in mapper.reports)

    def test_sample_batch_sizes(self, wall_frames):
        _, frames = wall_frames
        batch = sample_batch(frames[:3], 100, np.random.default_rng(0))
        assert len(batch) == 100
        assert np.bincount(batch.frame_index).tolist() == [33, 33, 34]
