"""Image metrics (Depth L1, PSNR, SSIM) and mesh metrics (accuracy, completion)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .errors import InputError

PSNR_CAP = 99.0
GRAY = np.array([0.299, 0.587, 0.114])
COMPLETION_THRESHOLD = 0.05


def _check_same(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def depth_l1(rendered, gt, valid=None) -> float:
    """Mean |D - D_gt| in centimeters over pixels with positive depth in both images."""
    d, g = _check_same(rendered, gt)
    mask = (d > 0) & (g > 0)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.abs(d[mask] - g[mask]).mean() * 100.0)


def psnr(rendered, gt, valid=None) -> float:
    """10 log10(1 / MSE) over the masked pixels; 99 dB when the images agree exactly."""
    c, g = _check_same(rendered, gt)
    if valid is None:
        valid = np.ones(c.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return float("nan")
    mse = np.mean((c[valid] - g[valid]) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img @ GRAY if img.ndim == 3 else img


def ssim(rendered, gt, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM of the grayscale images over all full windows."""
    x, y = _check_same(to_gray(rendered), to_gray(gt))
    if min(x.shape) < size:
        raise InputError(f"images must be at least {size}x{size} for SSIM")
    win = gaussian_window(size, sigma)
    half = size // 2

    def blur(img):
        out = correlate1d(img, win, axis=0, mode="constant")
        out = correlate1d(out, win, axis=1, mode="constant")
        return out[half : img.shape[0] - half, half : img.shape[1] - half]

    c1, c2 = k1**2, k2**2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------------------- meshes
def sample_surface(mesh, count: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``count`` points drawn uniformly by area from the mesh surface."""
    rng = np.random.default_rng(0) if rng is None else rng
    if mesh.num_faces == 0:
        return np.zeros((0, 3))
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u, v = rng.random(count), rng.random(count)
    su = np.sqrt(u)
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


def in_voxel_union(octree, points, tol: float = 1e-6) -> np.ndarray:
    """True for points inside (or within ``tol`` of) an allocated leaf."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for combo in range(8):
        shift = np.array([tol if (combo >> a) & 1 else -tol for a in range(3)])
        inside |= octree.contains(pts + shift)
    return inside


def accuracy_completion(reconstructed, gt, samples: int = 100_000, region=None, seed: int = 0,
                        threshold: float = COMPLETION_THRESHOLD) -> dict[str, float]:
    """Accuracy, completion (cm) and completion ratio (%) from point samples of both meshes.

    If ``region`` (an octree) is given, samples outside its allocated leaves
    are discarded from both sets before matching.
    """
    rng = np.random.default_rng(seed)
    rec_pts = sample_surface(reconstructed, samples, rng)
    gt_pts = sample_surface(gt, samples, rng)
    if region is not None:
        rec_pts = rec_pts[in_voxel_union(region, rec_pts)]
        gt_pts = gt_pts[in_voxel_union(region, gt_pts)]
    if len(gt_pts) == 0:
        raise InputError("ground-truth mesh has no samples in the evaluation region")
    if len(rec_pts) == 0:
        return {"accuracy_cm": float("inf"), "completion_cm": float("inf"), "completion_ratio": 0.0}
    acc, _ = cKDTree(gt_pts).query(rec_pts)
    comp, _ = cKDTree(rec_pts).query(gt_pts)
    return {
        "accuracy_cm": float(acc.mean() * 100),
        "completion_cm": float(comp.mean() * 100),
        "completion_ratio": float(np.mean(comp < threshold) * 100),
    }


def image_metrics(model, frames, step: float = 0.01, max_samples: int = 512, mesh=None) -> dict[str, float]:
    """Average Depth L1, PSNR and SSIM over the frames' poses.

    Color and depth come from volume rendering the model. When ``mesh`` is
    given, ``mesh_depth_l1_cm`` is added: Depth L1 of the rasterized mesh,
    the geometry form of the metric. Pixels without measured depth (or
    without a mesh hit) are not measured.
    """
    from .renderer import render_image

    rows = []
    for frame in frames:
        color, depth = render_image(model, frame.pose, frame.intrinsics, step, max_samples)
        valid = frame.depth > 0
        rows.append((depth_l1(depth, frame.depth, valid), psnr(color, frame.color, valid), ssim(color, frame.color)))
    d, p, s = np.nanmean(np.array(rows, dtype=np.float64), axis=0)
    out = {"depth_l1_cm": float(d), "psnr_db": float(p), "ssim": float(s)}
    if mesh is not None:
        out["mesh_depth_l1_cm"] = mesh_depth_l1(mesh, frames)
    return out


def mesh_depth_l1(mesh, frames) -> float:
    """Mean over frames of the Depth L1 between the rasterized mesh and the measured depth."""
    from .meshing import rasterize

    vals = [depth_l1(rasterize(mesh, f.pose, f.intrinsics)[1], f.depth) for f in frames]
    return float(np.nanmean(vals)) if vals else float("nan")
