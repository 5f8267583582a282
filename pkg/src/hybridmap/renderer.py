"""Sampling rays inside allocated voxels and compositing SDF-derived weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import CameraIntrinsics, Pose, RayBatch, full_pixel_grid, pixel_directions
from .octree import SparseVoxelOctree
from .tape import GradientTape, Node

DEGENERATE_WEIGHT = 1e-12


@dataclass
class RaySamples:
    """Flat per-sample arrays for a batch of rays, grouped by ray and ascending in t."""

    ray_index: np.ndarray  # (S,) index into the originating batch
    t: np.ndarray  # (S,) distance along the unit ray
    depth: np.ndarray  # (S,) camera-z depth d_j
    points: np.ndarray  # (S, 3)
    num_rays: int
    truncated: int = 0  # rays that hit the per-ray sample cap

    def __len__(self):
        return len(self.t)

    def counts(self) -> np.ndarray:
        return np.bincount(self.ray_index, minlength=self.num_rays)


def sample_rays(batch: RayBatch, octree: SparseVoxelOctree, step: float = 0.01,
                max_samples: int = 512) -> RaySamples:
    """Midpoint samples t_near + step/2 + k*step inside each voxel interval of every ray."""
    r, tn, tf = octree.intersect_rays(batch.origins, batch.directions)
    length = tf - tn
    count = np.where(length > step / 2, np.ceil((length - step / 2) / step), 0).astype(np.int64)
    # guard the strict "before t_far" condition against rounding
    over = (count > 0) & (tn + step / 2 + (count - 1) * step >= tf)
    count[over] -= 1

    # cap per ray, dropping the farthest samples first
    per_ray = np.bincount(r, weights=count, minlength=len(batch)).astype(np.int64)
    truncated = int(np.count_nonzero(per_ray > max_samples))
    if truncated:
        before = np.cumsum(count) - count
        ray_start = np.r_[0, np.cumsum(np.bincount(r, weights=count, minlength=len(batch)))[:-1]].astype(np.int64)
        used_before = before - ray_start[r]
        count = np.clip(np.minimum(count, max_samples - used_before), 0, None)

    total = int(count.sum())
    interval = np.repeat(np.arange(len(count)), count)
    k = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    t = tn[interval] + step / 2 + k * step
    ray = r[interval]
    points = batch.origins[ray] + t[:, None] * batch.directions[ray]
    depth = t * batch.depth_scale[ray]
    return RaySamples(ray, t, depth, points, len(batch), truncated)


def sample_ray(ray, octree: SparseVoxelOctree, step: float = 0.01, max_samples: int = 512) -> RaySamples:
    batch = RayBatch(
        ray.origin[None], ray.direction[None], np.array([ray.depth_scale]),
        np.asarray(ray.gt_color, float)[None], np.array([ray.gt_depth]),
        np.array([ray.pixel]), np.zeros(1, dtype=np.int64),
    )
    return sample_rays(batch, octree, step, max_samples)


def sdf_weights(s, tr: float) -> np.ndarray:
    """w = sigmoid(s/tr) * sigmoid(-s/tr)."""
    x = np.asarray(s) / tr
    return expit(x) * expit(-x)


def segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)
    return np.stack([np.bincount(index, weights=values[:, c], minlength=n) for c in range(values.shape[1])], axis=1)


def first_surface_mask(s, depth, ray_index, num_rays: int, tr: float) -> np.ndarray:
    """Samples up to the first sign change of s along each ray plus ``tr``.

    The sign change is located at the sample just before it; rays without a
    sign change keep every sample. Samples must be grouped by ray in ascending
    depth.
    """
    s = np.asarray(s)
    if len(s) < 2:
        return np.ones(len(s), dtype=bool)
    change = (ray_index[1:] == ray_index[:-1]) & (np.sign(s[1:]) * np.sign(s[:-1]) < 0)
    idx = np.flatnonzero(change)
    first = np.full(num_rays, np.inf)
    np.minimum.at(first, ray_index[idx], depth[idx])
    return depth <= first[ray_index] + tr


def normalized_weights(tape: GradientTape, s: Node, ray_index: np.ndarray, num_rays: int, tr: float,
                       mask: np.ndarray | None = None):
    """Per-sample weights divided by the per-ray weight sum.

    Samples outside ``mask`` get zero weight. Returns ``(node, weight_sum)``;
    rays with weight sum below 1e-12 get zeros.
    """
    x = s.value / tr
    sp, sn = expit(x), expit(-x)
    w = sp * sn
    if mask is not None:
        w = np.where(mask, w, 0.0)
    total = segment_sum(w, ray_index, num_rays)
    good = total >= DEGENERATE_WEIGHT
    denom = np.where(good, total, 1.0)[ray_index]
    wn = np.where(good[ray_index], w / denom, 0.0).astype(s.value.dtype)
    dw_ds = w * (sn - sp) / tr

    def vjp(g):
        inner = segment_sum(g * wn, ray_index, num_rays)
        gw = np.where(good[ray_index], (g - inner[ray_index]) / denom, 0.0)
        return ((gw * dw_ds).astype(s.value.dtype),)

    return tape.record(wn, (s,), vjp), total


def composite(tape: GradientTape, wn: Node, values: Node | np.ndarray, ray_index: np.ndarray,
              num_rays: int) -> Node:
    """Per-ray sum of normalized weight times value (color (S,3) or depth (S,))."""
    v = values.value if isinstance(values, Node) else np.asarray(values)
    wv = wn.value[:, None] * v if v.ndim == 2 else wn.value * v
    out = segment_sum(wv, ray_index, num_rays).astype(wn.value.dtype)

    if isinstance(values, Node):
        def vjp(g):
            gr = g[ray_index]
            if v.ndim == 2:
                return (np.einsum("sc,sc->s", gr, v), wn.value[:, None] * gr)
            return (gr * v, wn.value * gr)

        return tape.record(out, (wn, values), vjp)

    def vjp_const(g):
        gr = g[ray_index]
        return ((np.einsum("sc,sc->s", gr, v) if v.ndim == 2 else gr * v).astype(wn.value.dtype),)

    return tape.record(out, (wn,), vjp_const)


@dataclass
class RenderOutput:
    color: Node
    depth: Node
    weights: Node
    weight_sum: np.ndarray
    valid: np.ndarray  # (R,) rays with non-degenerate weights


def render(tape: GradientTape, samples: RaySamples, s: Node, c: Node, tr: float,
           first_surface: bool = True) -> RenderOutput:
    """C = sum w c / sum w, D = sum w d / sum w over each ray's samples.

    With ``first_surface`` only samples up to the first zero crossing plus tr
    take part, so surfaces hidden behind the first one do not blend in.
    """
    mask = None
    if first_surface:
        mask = first_surface_mask(s.value, samples.depth, samples.ray_index, samples.num_rays, tr)
    wn, total = normalized_weights(tape, s, samples.ray_index, samples.num_rays, tr, mask)
    color = composite(tape, wn, c, samples.ray_index, samples.num_rays)
    depth = composite(tape, wn, samples.depth.astype(wn.value.dtype), samples.ray_index, samples.num_rays)
    return RenderOutput(color, depth, wn, total, total >= DEGENERATE_WEIGHT)


def render_values(s: np.ndarray, c: np.ndarray, depth: np.ndarray, ray_index: np.ndarray,
                  num_rays: int, tr: float, first_surface: bool = True):
    """Untaped compositing; returns (color, depth, valid)."""
    w = sdf_weights(s, tr)
    if first_surface:
        w = np.where(first_surface_mask(s, depth, ray_index, num_rays, tr), w, 0.0)
    total = segment_sum(w, ray_index, num_rays)
    valid = total >= DEGENERATE_WEIGHT
    wn = np.where(valid[ray_index], w / np.where(valid, total, 1.0)[ray_index], 0.0)
    color = segment_sum(wn[:, None] * c, ray_index, num_rays)
    d = segment_sum(wn * depth, ray_index, num_rays)
    return color, d, valid


def render_rays(model, batch: RayBatch, step: float, max_samples: int = 512, first_surface: bool = True):
    samples = sample_rays(batch, model.octree, step, max_samples)
    n = len(batch)
    if len(samples) == 0:
        return np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=bool)
    s = model.sdf(samples.points)
    c = model.color(samples.points)
    color, depth, valid = render_values(s, c, samples.depth, samples.ray_index, n, model.truncation,
                                        first_surface)
    has = samples.counts() > 0
    valid &= has
    color[~valid] = 0
    depth[~valid] = 0
    return color, depth, valid


def render_image(model, pose: Pose, intrinsics: CameraIntrinsics, step: float = 0.01,
                 max_samples: int = 512, chunk: int = 4096, first_surface: bool = True):
    """Render (color (H,W,3), depth (H,W)) from ``pose``; pixels whose rays miss all voxels are 0."""
    pixels = full_pixel_grid(intrinsics)
    d_cam = pixel_directions(intrinsics, pixels[:, 0], pixels[:, 1])
    norm = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / norm[:, None]) @ pose.rotation.T
    n = len(pixels)
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    for i in range(0, n, chunk):
        sl = slice(i, min(i + chunk, n))
        m = sl.stop - sl.start
        batch = RayBatch(
            np.broadcast_to(pose.translation, (m, 3)).copy(), dirs[sl], 1.0 / norm[sl],
            np.zeros((m, 3)), np.zeros(m), pixels[sl], np.zeros(m, dtype=np.int64),
        )
        c, d, _ = render_rays(model, batch, step, max_samples, first_surface)
        color[sl], depth[sl] = c, d
    h, w = intrinsics.height, intrinsics.width
    return np.clip(color.reshape(h, w, 3), 0, 1), depth.reshape(h, w)
