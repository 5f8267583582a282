"""Synthetic analytic scenes and the on-disk RGB-D sequence layout.

Sequence directory layout::

    intrinsics.txt      fx fy cx cy width height
    poses.txt           one row-major 3x4 world-from-camera matrix per line
    color/000000.png    8-bit RGB
    depth/000000.png    16-bit depth in millimeters, 0 = invalid
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, Pose, RGBDFrame, full_pixel_grid, pixel_directions
from .errors import FormatError, LoadError

LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])
AMBIENT = 0.35


@dataclass
class Material:
    color: tuple = (0.7, 0.7, 0.7)
    checker_color: tuple | None = None
    period: float = 0.5

    def albedo(self, points: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.color, float), points.shape).copy()
        if self.checker_color is None:
            return base
        parity = np.floor(points / self.period).astype(np.int64).sum(axis=1) % 2 == 1
        base[parity] = self.checker_color
        return base


def box_sdf(points: np.ndarray, center, half) -> np.ndarray:
    q = np.abs(points - np.asarray(center, float)) - np.asarray(half, float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


@dataclass
class Sphere:
    center: tuple
    radius: float
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center, float), axis=1) - self.radius


@dataclass
class Box:
    center: tuple
    half: tuple
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        return box_sdf(p, self.center, self.half)


@dataclass
class Room:
    """Interior of an axis-aligned box; ``carves`` are boxes unioned into the free space
    (openings, alcoves). A carve that pokes past ``Scene.bounds`` lets rays escape."""

    center: tuple
    half: tuple
    material: Material = field(default_factory=Material)
    carves: list = field(default_factory=list)  # list[Box]; each carve's material colors its walls

    def sdf(self, p):
        free = box_sdf(p, self.center, self.half)
        for c in self.carves:
            free = np.minimum(free, c.sdf(p))
        return -free


@dataclass
class SceneDescription:
    primitives: list
    trajectory: list  # list[Pose]
    intrinsics: CameraIntrinsics
    bounds: tuple  # (lo, hi) region that contains all geometry; rays leaving it miss
    depth_noise: float = 0.0  # sigma = depth_noise * depth^2
    name: str = "scene"

    def encoding_bounds(self, margin: float = 0.5):
        lo, hi = self.bounds
        return np.asarray(lo, float) - margin, np.asarray(hi, float) + margin


def analytic_sdf(scene: SceneDescription, points) -> np.ndarray:
    """Union (minimum) of the primitive SDFs; positive in free space."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    out = np.full(len(p), np.inf)
    for prim in scene.primitives:
        out = np.minimum(out, prim.sdf(p))
    return float(out[0]) if single else out


def nearest_primitive(scene: SceneDescription, p: np.ndarray) -> np.ndarray:
    return np.argmin(np.stack([prim.sdf(p) for prim in scene.primitives]), axis=0)


def sdf_normals(scene: SceneDescription, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = np.zeros_like(p)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        n[:, a] = analytic_sdf(scene, p + e) - analytic_sdf(scene, p - e)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def surface_albedo(scene: SceneDescription, p: np.ndarray) -> np.ndarray:
    owner = nearest_primitive(scene, p)
    out = np.zeros((len(p), 3))
    for i, prim in enumerate(scene.primitives):
        m = owner == i
        if not m.any():
            continue
        out[m] = prim.material.albedo(p[m])
        if isinstance(prim, Room):
            for carve in prim.carves:
                inside = m & (carve.sdf(p) <= 1e-4) & (box_sdf(p, prim.center, prim.half) >= -1e-4)
                if inside.any():
                    out[inside] = carve.material.albedo(p[inside])
    return out


def in_carve_region(scene: SceneDescription, p: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Points on the walls of any carve (outside the main room box)."""
    mask = np.zeros(len(p), dtype=bool)
    for prim in scene.primitives:
        if isinstance(prim, Room):
            for carve in prim.carves:
                mask |= (carve.sdf(p) <= eps) & (box_sdf(p, prim.center, prim.half) >= -eps)
    return mask


def sphere_trace(scene: SceneDescription, origins, dirs, tol: float = 1e-5, max_steps: int = 256):
    """Distances to the first surface hit; ``inf`` for misses."""
    o = np.asarray(origins, float)
    d = np.asarray(dirs, float)
    lo, hi = (np.asarray(b, float) for b in scene.bounds)
    t = np.zeros(len(d))
    active = np.ones(len(d), dtype=bool)
    hit = np.zeros(len(d), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        p = o[idx] + t[idx, None] * d[idx]
        s = analytic_sdf(scene, p)
        done = np.abs(s) < tol
        hit[idx[done]] = True
        gone = np.any((p < lo - 1e-6) | (p > hi + 1e-6), axis=1) & ~done
        active[idx[done | gone]] = False
        step = idx[~done & ~gone]
        t[step] += s[~done & ~gone]
    # Newton refinement along the ray reduces the residual left by the tolerance
    idx = np.flatnonzero(hit)
    if len(idx):
        p = o[idx] + t[idx, None] * d[idx]
        s = analytic_sdf(scene, p)
        cos = -np.einsum("ij,ij->i", sdf_normals(scene, p), d[idx])
        t[idx] += np.where(cos > 0.05, s / np.maximum(cos, 0.05), 0.0)
    t[~hit] = np.inf
    return t


def render_synthetic_frame(scene: SceneDescription, pose: Pose, frame_id: int = 0,
                           rng: np.random.Generator | None = None, return_hits: bool = False):
    intr = scene.intrinsics
    pix = full_pixel_grid(intr)
    d_cam = pixel_directions(intr, pix[:, 0], pix[:, 1])
    norm = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / norm[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t = sphere_trace(scene, origins, dirs)
    hit = np.isfinite(t)
    depth = np.zeros(len(t))
    depth[hit] = t[hit] / norm[hit]
    color = np.zeros((len(t), 3))
    points = origins[hit] + t[hit, None] * dirs[hit]
    if hit.any():
        n = sdf_normals(scene, points)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(n @ LIGHT_DIR, 0, None)
        color[hit] = np.clip(surface_albedo(scene, points) * shade[:, None], 0, 1)
    if scene.depth_noise > 0:
        rng = rng or np.random.default_rng(frame_id)
        noisy = depth + rng.normal(size=depth.shape) * scene.depth_noise * depth**2
        depth = np.where(hit, np.clip(noisy, 1e-4, None), 0.0)
    h, w = intr.height, intr.width
    frame = RGBDFrame(color.reshape(h, w, 3), depth.reshape(h, w), intr, pose, frame_id)
    if return_hits:
        hit_points = np.full((len(t), 3), np.nan)
        hit_points[hit] = points
        return frame, hit_points.reshape(h, w, 3)
    return frame


def synthetic_frames(scene: SceneDescription) -> Iterator[RGBDFrame]:
    for i, pose in enumerate(scene.trajectory):
        yield render_synthetic_frame(scene, pose, frame_id=i)


# ------------------------------------------------------------------- presets
def _checker(a, b, period=0.5):
    return Material(a, b, period)


def default_scene(num_frames: int = 50, width: int = 160, height: int = 120) -> SceneDescription:
    """4 x 4 x 3 m room with two spheres and a box, orbited by the camera."""
    room = Room((0.0, 0.0, 1.5), (2.0, 2.0, 1.5), _checker((0.85, 0.8, 0.7), (0.45, 0.55, 0.75)))
    prims = [
        room,
        Sphere((0.55, 0.35, 0.35), 0.35, Material((0.85, 0.3, 0.25))),
        Sphere((-0.55, -0.45, 0.65), 0.25, _checker((0.3, 0.75, 0.35), (0.95, 0.9, 0.4), 0.2)),
        Box((-0.35, 0.6, 0.3), (0.3, 0.2, 0.3), _checker((0.25, 0.35, 0.85), (0.9, 0.9, 0.9), 0.25)),
    ]
    intr = _intrinsics(width, height)
    poses = []
    for i in range(num_frames):
        a = 2 * math.pi * i / num_frames
        eye = (1.2 * math.cos(a), 1.2 * math.sin(a), 1.4 + 0.1 * math.sin(3 * a))
        target = (-0.4 * math.cos(a), -0.4 * math.sin(a), 0.6)
        poses.append(Pose.look_at(eye, target))
    return SceneDescription(prims, poses, intr, ((-2.0, -2.0, 0.0), (2.0, 2.0, 3.0)), name="default")


WALL_OFFSET = 0.001


def wall_scene(num_frames: int = 12, width: int = 120, height: int = 90) -> SceneDescription:
    """Small room whose walls hug 10 cm voxel faces; camera faces the +x wall.

    The -x, -y and floor walls lie exactly on faces. The +x, +y and ceiling walls
    sit 1 mm past a face, so their measured points land unambiguously in the
    voxel behind the wall (exactly-on-face points would split between the two
    cells by rounding) and the free-side voxel is only reached by expansion.
    """
    room = Room((WALL_OFFSET / 2, WALL_OFFSET / 2, 1.0 + WALL_OFFSET / 2),
                (1.5 + WALL_OFFSET / 2, 1.5 + WALL_OFFSET / 2, 1.0 + WALL_OFFSET / 2),
                _checker((0.8, 0.75, 0.6), (0.35, 0.5, 0.7), 0.4))
    intr = _intrinsics(width, height)
    poses = []
    for i in range(num_frames):
        f = i / max(num_frames - 1, 1)
        eye = (0.2 + 0.2 * math.sin(2 * math.pi * f), -0.5 + 1.0 * f, 1.0 + 0.15 * math.cos(2 * math.pi * f))
        target = (1.5, eye[1] * 0.6, 0.9)
        poses.append(Pose.look_at(eye, target))
    hi = 1.5 + WALL_OFFSET
    return SceneDescription([room], poses, intr, ((-1.5, -1.5, 0.0), (hi, hi, 2.0 + WALL_OFFSET)), name="wall")


def alcove_scene(num_frames: int = 30, alcove_frames: int = 3, width: int = 120,
                 height: int = 90) -> SceneDescription:
    """Room with a colorful alcove in the +x wall that only the first frames look at."""
    alcove = Box((1.8, 0.0, 1.0), (0.32, 0.3, 0.35), _checker((0.9, 0.2, 0.6), (0.2, 0.9, 0.8), 0.15))
    room = Room((0.0, 0.0, 1.2), (1.5, 1.5, 1.2), _checker((0.8, 0.75, 0.6), (0.4, 0.45, 0.7), 0.5),
                carves=[alcove])
    prims = [room, Sphere((-0.5, 0.4, 0.3), 0.3, Material((0.85, 0.5, 0.2)))]
    intr = _intrinsics(width, height)
    poses = []
    for i in range(num_frames):
        if i < alcove_frames:
            eye = (0.3, -0.15 + 0.15 * i, 1.0)
            poses.append(Pose.look_at(eye, (1.8, 0.0, 1.0)))
            continue
        f = (i - alcove_frames) / max(num_frames - alcove_frames - 1, 1)
        yaw = math.radians(75 + 210 * f)
        eye = (0.1 * math.cos(3 * yaw), 0.1 * math.sin(3 * yaw), 1.1)
        poses.append(Pose.look_at(eye, (eye[0] + math.cos(yaw), eye[1] + math.sin(yaw), 0.8)))
    return SceneDescription(prims, poses, intr, ((-1.5, -1.5, 0.0), (2.3, 1.5, 2.4)), name="alcove")


def _intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 110.0 * width / 160.0
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


PRESETS = {"default": default_scene, "wall": wall_scene, "alcove": alcove_scene}


def scene_from_config(path_or_name) -> SceneDescription:
    """A preset name, or a JSON file ``{"preset": name, ...keyword overrides}``."""
    if str(path_or_name) in PRESETS:
        return PRESETS[str(path_or_name)]()
    path = Path(path_or_name)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise LoadError(f"{path}: scene config not found") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from err
    preset = cfg.pop("preset", "default")
    noise = cfg.pop("depth_noise", 0.0)
    if preset not in PRESETS:
        raise FormatError(f"{path}: unknown preset {preset!r}")
    try:
        scene = PRESETS[preset](**cfg)
    except TypeError as err:
        raise FormatError(f"{path}: {err}") from err
    scene.depth_noise = float(noise)
    return scene


def ground_truth_mesh(scene: SceneDescription, cell: float = 0.01, margin: float = 0.1):
    """Marching cubes on the analytic SDF over the scene bounds."""
    from .meshing import mesh_from_sdf

    lo, hi = scene.bounds
    return mesh_from_sdf(lambda p: analytic_sdf(scene, p), np.asarray(lo) - margin, np.asarray(hi) + margin, cell)


# ------------------------------------------------------------------ disk I/O
def write_intrinsics(path: Path, intr: CameraIntrinsics):
    path.write_text(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height}\n")


def read_intrinsics(path: Path) -> CameraIntrinsics:
    try:
        vals = path.read_text().split()
    except FileNotFoundError as err:
        raise LoadError(f"{path}: missing intrinsics file") from err
    if len(vals) != 6:
        raise FormatError(f"{path}: expected 6 values (fx fy cx cy width height), got {len(vals)}")
    try:
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        w, h = int(vals[4]), int(vals[5])
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from err
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def write_poses(path: Path, poses):
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(" ".join(repr(float(v)) for v in pose.matrix()[:3].ravel()) + "\n")


def read_poses(path: Path) -> list[Pose]:
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except FileNotFoundError as err:
        raise LoadError(f"{path}: missing pose file") from err
    poses = []
    for i, ln in enumerate(lines):
        vals = ln.split()
        if len(vals) != 12:
            raise FormatError(f"{path}: line {i + 1} has {len(vals)} values, expected 12")
        try:
            m = np.array([float(v) for v in vals]).reshape(3, 4)
        except ValueError as err:
            raise FormatError(f"{path}: line {i + 1}: {err}") from err
        poses.append(Pose.from_matrix(m))
    return poses


def write_color(path: Path, color: np.ndarray):
    Image.fromarray(np.round(np.clip(color, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def write_depth(path: Path, depth: np.ndarray):
    mm = np.round(np.asarray(depth) * 1000.0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_color(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as err:
        raise LoadError(f"{path}: missing color image") from err
    except OSError as err:
        raise LoadError(f"{path}: cannot decode image ({err})") from err
    return arr / 255.0


def read_depth(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError as err:
        raise LoadError(f"{path}: missing depth image") from err
    except OSError as err:
        raise LoadError(f"{path}: cannot decode image ({err})") from err
    if arr.ndim != 2:
        raise FormatError(f"{path}: depth image must be single channel")
    return arr.astype(np.float64) / 1000.0


def write_sequence(scene: SceneDescription, directory) -> int:
    root = Path(directory)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", scene.intrinsics)
    write_poses(root / "poses.txt", scene.trajectory)
    count = 0
    for frame in synthetic_frames(scene):
        write_color(root / "color" / f"{frame.frame_id:06d}.png", frame.color)
        write_depth(root / "depth" / f"{frame.frame_id:06d}.png", frame.depth)
        count += 1
    return count


def load_sequence(directory) -> Iterator[RGBDFrame]:
    root = Path(directory)
    if not root.is_dir():
        raise LoadError(f"{root}: sequence directory not found")
    intr = read_intrinsics(root / "intrinsics.txt")
    poses = read_poses(root / "poses.txt")
    colors = sorted((root / "color").glob("*.png"))
    depths = sorted((root / "depth").glob("*.png"))
    if not (len(colors) == len(depths) == len(poses)):
        raise FormatError(
            f"{root}: {len(poses)} poses but {len(colors)} color and {len(depths)} depth images"
        )
    for i, (pose, cpath, dpath) in enumerate(zip(poses, colors, depths)):
        color = read_color(cpath)
        depth = read_depth(dpath)
        if color.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
            raise FormatError(f"{cpath.name}: image size does not match intrinsics")
        yield RGBDFrame(color, depth, intr, pose, frame_id=i)


def sequence_length(directory) -> int:
    return len(read_poses(Path(directory) / "poses.txt"))
