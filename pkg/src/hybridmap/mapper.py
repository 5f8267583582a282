"""Online training loop: keyframes, coverage-maximizing selection, losses, early ending."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import RGBDFrame, RayBatch, back_project, lookup_depth, project, ray_batch
from .errors import HybridMapError, InputError, NumericalError
from .network import Adam, AdamConfig, HybridModel
from .renderer import render, sample_rays
from .tape import GradientTape, Node, weighted_sum

log = logging.getLogger(__name__)

EARLY_STOP_POLICIES = ("relative", "paper-literal", "off")
KEYFRAME_STRATEGIES = ("coverage", "random")


@dataclass
class TrainConfig:
    rays_per_iter: int = 4096
    keyframes_per_iter: int = 10  # K
    max_iters: int = 10
    truncation: float = 0.05
    step: float = 0.01
    max_samples: int = 512
    alpha_sdf: float = 1.0
    alpha_fs: float = 1.0
    alpha_depth: float = 0.1
    alpha_rgb: float = 5.0
    insert_threshold: float = 0.2
    early_stop: str = "relative"
    stop_tolerance: float = 0.01
    stop_patience: int = 2
    keyframe_strategy: str = "coverage"
    use_priors: bool = True
    use_expansion: bool = True
    first_surface: bool = True

    def __post_init__(self):
        if self.keyframes_per_iter < 1:
            raise InputError("K must be >= 1")
        for name in ("rays_per_iter", "max_iters", "truncation", "step", "max_samples"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.early_stop not in EARLY_STOP_POLICIES:
            raise InputError(f"unknown early-stop policy {self.early_stop!r}")
        if self.keyframe_strategy not in KEYFRAME_STRATEGIES:
            raise InputError(f"unknown keyframe strategy {self.keyframe_strategy!r}")


# ------------------------------------------------------------------ keyframes
@dataclass
class Keyframe:
    frame: RGBDFrame
    covered: frozenset

    @property
    def frame_id(self) -> int:
        return self.frame.frame_id


@dataclass
class KeyframeSet:
    keyframes: list = field(default_factory=list)
    observed: set = field(default_factory=set)  # voxel ids labeled observed; the rest are unobserved
    resets: int = 0

    def __len__(self):
        return len(self.keyframes)

    @property
    def last(self) -> Keyframe | None:
        return self.keyframes[-1] if self.keyframes else None

    def universe(self) -> set:
        out = set()
        for kf in self.keyframes:
            out |= kf.covered
        return out


def covered_voxels(frame: RGBDFrame, octree, truncation: float) -> frozenset:
    """Leaves whose center projects into the image with 0 < z <= D(u) + truncation."""
    if octree.num_leaves == 0:
        return frozenset()
    uv, z, in_view = project(octree.leaf_centers(), frame)
    measured = lookup_depth(frame, uv, in_view)
    ok = in_view & (measured > 0) & (z <= measured + truncation)
    return frozenset(np.flatnonzero(ok).tolist())


def insertion_ratio(current: frozenset, last: frozenset) -> float:
    n_c, n_l = len(current), len(last)
    if n_c + n_l == 0:
        return 0.0
    return len(current & last) / (n_c + n_l)


def maybe_insert_keyframe(frame: RGBDFrame, keyframes: KeyframeSet, octree, threshold: float = 0.2,
                          truncation: float = 0.05, covered: frozenset | None = None) -> bool:
    if covered is None:
        covered = covered_voxels(frame, octree, truncation)
    last = keyframes.last
    if last is not None and insertion_ratio(covered, last.covered) >= threshold:
        return False
    keyframes.keyframes.append(Keyframe(frame, covered))
    return True


def greedy_max_coverage(sets, k: int, exclude=frozenset()) -> list[int]:
    """Indices of up to ``k`` sets chosen greedily by marginal gain over ``exclude``.

    Ties (including zero gain) go to the lowest index.
    """
    covered = set(exclude)
    chosen: list[int] = []
    remaining = list(range(len(sets)))
    for _ in range(min(k, len(sets))):
        best, best_gain = None, -1
        for i in remaining:
            gain = len(sets[i] - covered)
            if gain > best_gain:
                best, best_gain = i, gain
        chosen.append(best)
        remaining.remove(best)
        covered |= sets[best]
    return chosen


def select_keyframes(keyframes: KeyframeSet, k: int) -> list[Keyframe]:
    """Greedy selection over still-unobserved voxels, marking the picks' voxels observed.

    When every voxel covered by the keyframe set is already observed, labels are
    reset first.
    """
    if not keyframes.keyframes:
        return []
    kfs = sorted(keyframes.keyframes, key=lambda kf: kf.frame_id)
    if not (keyframes.universe() - keyframes.observed):
        keyframes.observed.clear()
        keyframes.resets += 1
    picks = greedy_max_coverage([kf.covered for kf in kfs], k, keyframes.observed)
    selected = [kfs[i] for i in picks]
    for kf in selected:
        keyframes.observed |= kf.covered
    return selected


def select_random(keyframes: KeyframeSet, k: int, rng: np.random.Generator) -> list[Keyframe]:
    n = len(keyframes.keyframes)
    idx = rng.choice(n, size=min(k, n), replace=False)
    return [keyframes.keyframes[i] for i in sorted(idx)]


def sample_batch(frames, rays_per_iter: int, rng: np.random.Generator) -> RayBatch:
    """Uniform pixels from every frame; the last frame (current) takes the remainder."""
    n = len(frames)
    share = rays_per_iter // n
    parts = []
    for i, frame in enumerate(frames):
        m = share + (rays_per_iter - share * n if i == n - 1 else 0)
        total = frame.height * frame.width
        flat = rng.choice(total, size=min(m, total), replace=False)
        pix = np.stack([flat // frame.width, flat % frame.width], axis=1)
        parts.append(ray_batch(frame, pix, frame_index=i))
    return RayBatch.concatenate(parts)


# --------------------------------------------------------------------- losses
@dataclass
class Losses:
    free_space: Node
    sdf: Node
    depth: Node
    rgb: Node
    total: Node

    def values(self) -> dict[str, float]:
        return {
            "fs": float(self.free_space.value),
            "sdf": float(self.sdf.value),
            "depth": float(self.depth.value),
            "rgb": float(self.rgb.value),
            "total": float(self.total.value),
        }


def _per_ray_mean_sq(tape, s: Node, target: np.ndarray, mask: np.ndarray, ray_index, num_rays, n_rays):
    """(1/n_rays) * sum_r mean_{p in P_r} (s_p - target_p)^2, P_r given by ``mask``."""
    count = np.bincount(ray_index[mask], minlength=num_rays)
    per_sample = np.zeros(len(s.value))
    idx = np.flatnonzero(mask)
    per_sample[idx] = 1.0 / (count[ray_index[idx]] * n_rays) if n_rays else 0.0
    diff = s.value - target
    value = np.asarray(np.sum(per_sample * diff * diff), dtype=s.value.dtype)
    return tape.record(value, (s,), lambda g: ((2.0 * g * per_sample * diff).astype(s.value.dtype),))


def _l1(tape, pred: Node, target: np.ndarray, rays: np.ndarray, reduce_channels: bool):
    n = int(rays.sum())
    diff = pred.value - target
    sign = np.sign(diff)
    scale_mask = rays.astype(pred.value.dtype)
    if reduce_channels:
        scale_mask = scale_mask[:, None] / pred.value.shape[1]
    denom = max(n, 1)
    value = np.asarray(np.sum(np.abs(diff) * scale_mask) / denom, dtype=pred.value.dtype)
    return tape.record(value, (pred,), lambda g: ((g * sign * scale_mask / denom).astype(pred.value.dtype),))


def compute_losses(tape: GradientTape, batch: RayBatch, samples, s: Node, rendered, config: TrainConfig) -> Losses:
    """Free-space, SDF, depth and color losses and their weighted sum.

    Rays with degenerate rendering weights are excluded; depth-dependent terms
    additionally skip rays without a valid measured depth. A ray with an empty
    free-space (or truncation) set contributes zero to that term.
    """
    if len(batch) == 0 or len(samples) == 0:
        raise InputError("empty ray batch")
    tr = config.truncation
    ri = samples.ray_index
    rays_ok = rendered.valid & (samples.counts() > 0)
    depth_ok = rays_ok & (batch.gt_depth > 0)
    gt = batch.gt_depth[ri]
    d = samples.depth
    sample_ok = depth_ok[ri]
    fs_mask = sample_ok & (d < gt - tr)
    tr_mask = sample_ok & (np.abs(gt - d) <= tr)
    n_depth = int(depth_ok.sum())

    l_fs = _per_ray_mean_sq(tape, s, np.full(len(d), tr), fs_mask, ri, samples.num_rays, n_depth)
    l_sdf = _per_ray_mean_sq(tape, s, gt - d, tr_mask, ri, samples.num_rays, n_depth)
    l_d = _l1(tape, rendered.depth, batch.gt_depth, depth_ok, reduce_channels=False)
    l_rgb = _l1(tape, rendered.color, batch.gt_color, rays_ok, reduce_channels=True)
    total = weighted_sum(
        tape, (l_sdf, l_fs, l_d, l_rgb),
        (config.alpha_sdf, config.alpha_fs, config.alpha_depth, config.alpha_rgb),
    )
    return Losses(l_fs, l_sdf, l_d, l_rgb, total)


def forward_losses(model: HybridModel, batch: RayBatch, config: TrainConfig, tape: GradientTape | None = None):
    """Sample, predict, render and evaluate losses on one batch. Returns (losses, tape, samples)."""
    tape = model.new_tape() if tape is None else tape
    samples = sample_rays(batch, model.octree, config.step, config.max_samples)
    if len(samples) == 0:
        raise InputError("no ray in the batch intersects an allocated voxel")
    s, _ = model.predict_sdf(samples.points, tape)
    c, _ = model.predict_color(samples.points, tape)
    rendered = render(tape, samples, s, c, config.truncation, config.first_surface)
    return compute_losses(tape, batch, samples, s, rendered, config), tape, samples


# ----------------------------------------------------------------- early stop
def should_stop(history, policy: str = "relative", tolerance: float = 0.01, patience: int = 2) -> bool:
    """Early-ending test on the total losses of the current round.

    relative: relative improvement below ``tolerance`` for ``patience`` consecutive iterations.
    paper-literal: latest loss exceeds twice the mean of the round so far.
    off: never.
    """
    h = list(history)
    if policy == "off" or len(h) < 2:
        return False
    if policy == "paper-literal":
        return h[-1] > 2.0 * (sum(h) / len(h))
    if policy != "relative":
        raise InputError(f"unknown early-stop policy {policy!r}")
    if len(h) < patience + 1:
        return False
    for prev, cur in zip(h[-patience - 1 : -1], h[-patience:]):
        if prev == 0 or (prev - cur) / prev >= tolerance:
            return False
    return True


# --------------------------------------------------------------------- mapper
@dataclass
class FrameReport:
    frame_id: int
    iterations: int
    losses: dict
    new_voxels: int
    expanded_voxels: int
    priors_initialized: int
    keyframe_inserted: bool
    num_keyframes: int
    num_selected: int
    num_leaves: int
    loss_history: list
    timings: dict

    def record(self) -> dict:
        return asdict(self)


class Mapper:
    def __init__(self, model: HybridModel, config: TrainConfig | None = None,
                 adam: AdamConfig | None = None, seed: int = 0):
        self.model = model
        self.config = config or TrainConfig()
        self.optimizer = Adam(adam)
        self.keyframes = KeyframeSet()
        self.rng = np.random.default_rng(seed)
        self.reports: list[FrameReport] = []
        self._last_frame_id = None

    def process_frame(self, frame: RGBDFrame) -> FrameReport:
        try:
            return self._process(frame)
        except HybridMapError as err:
            raise type(err)(f"frame {frame.frame_id}: {err}") from err

    def _process(self, frame: RGBDFrame) -> FrameReport:
        cfg = self.config
        if self._last_frame_id is not None and frame.frame_id <= self._last_frame_id:
            raise InputError(f"frame ids must increase (got {frame.frame_id} after {self._last_frame_id})")
        self._last_frame_id = frame.frame_id
        tree = self.model.octree
        t_start = time.perf_counter()

        points = back_project(frame)
        new, _ = tree.allocate_from_frame(frame, points)
        expanded = np.empty(0, dtype=np.int64)
        if cfg.use_expansion:
            expanded = tree.expand_voxels(frame, points=points)
        fresh = np.concatenate([new, expanded])
        n_priors = 0
        if cfg.use_priors and len(fresh):
            n_priors = tree.initialize_priors(frame, tree.leaf_vertices[fresh].ravel())
        inserted = maybe_insert_keyframe(frame, self.keyframes, tree, cfg.insert_threshold, cfg.truncation)
        t_alloc = time.perf_counter()

        if cfg.keyframe_strategy == "coverage":
            selected = select_keyframes(self.keyframes, cfg.keyframes_per_iter)
        else:
            selected = select_random(self.keyframes, cfg.keyframes_per_iter, self.rng)
        frames = [kf.frame for kf in selected] + [frame]

        history: list[float] = []
        losses = {}
        iterations = 0
        for _ in range(cfg.max_iters):
            batch = sample_batch(frames, cfg.rays_per_iter, self.rng)
            try:
                result, tape, _ = forward_losses(self.model, batch, cfg)
            except InputError:
                if tree.num_leaves == 0:
                    break
                raise
            losses = result.values()
            if not math.isfinite(losses["total"]):
                raise NumericalError(f"non-finite loss {losses}")
            grads = tape.backward(result.total)
            self.optimizer.step(self.model.parameters(), grads)
            iterations += 1
            history.append(losses["total"])
            if should_stop(history, cfg.early_stop, cfg.stop_tolerance, cfg.stop_patience):
                break
        t_end = time.perf_counter()

        report = FrameReport(
            frame_id=frame.frame_id,
            iterations=iterations,
            losses=losses,
            new_voxels=int(len(new)),
            expanded_voxels=int(len(expanded)),
            priors_initialized=n_priors,
            keyframe_inserted=inserted,
            num_keyframes=len(self.keyframes),
            num_selected=len(selected),
            num_leaves=tree.num_leaves,
            loss_history=history,
            timings={"allocate": t_alloc - t_start, "optimize": t_end - t_alloc, "total": t_end - t_start},
        )
        self.reports.append(report)
        log.debug("frame %d: %d iters, loss %.5f, %d leaves", frame.frame_id, iterations,
                  losses.get("total", float("nan")), tree.num_leaves)
        return report


def append_run_log(path, record: dict):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
