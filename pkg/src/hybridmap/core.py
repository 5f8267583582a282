"""Camera, pose and frame types plus the projection helpers used everywhere.

Pixel convention: integer pixel ``(row, col)`` covers the continuous square
``[col, col+1) x [row, row+1)``; its center sits at ``(col + 0.5, row + 0.5)``.
Continuous pixel coordinates ``(u, v)`` are ``u`` along columns, ``v`` along rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6, rtol=0):
            raise InputError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InputError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; camera axes x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points to world frame."""
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World-frame points to camera frame."""
        return (points - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass(frozen=True, eq=False)
class RGBDFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    intrinsics: CameraIntrinsics
    pose: Pose
    frame_id: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        color = np.asarray(self.color)
        depth = np.asarray(self.depth)
        h, w = self.intrinsics.height, self.intrinsics.width
        if depth.shape != (h, w) or color.shape != (h, w, 3):
            raise InputError(
                f"frame {self.frame_id}: image shapes {color.shape}/{depth.shape} do not match {w}x{h}"
            )
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise InputError(f"frame {self.frame_id}: depth must be finite and >= 0")
        if np.any(color < 0) or np.any(color > 1):
            raise InputError(f"frame {self.frame_id}: color values must lie in [0, 1]")
        color.setflags(write=False)
        depth.setflags(write=False)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def width(self) -> int:
        return self.intrinsics.width


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]
    gt_color: np.ndarray
    gt_depth: float
    # camera-z advanced per meter travelled along the ray
    depth_scale: float = 1.0

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise InputError("ray direction must be a unit vector")


def pixel_directions(intr: CameraIntrinsics, rows, cols) -> np.ndarray:
    """Camera-frame directions with z = 1 through the centers of the given pixels."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    x = (cols + 0.5 - intr.cx) / intr.fx
    y = (rows + 0.5 - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def back_project(frame: RGBDFrame, return_pixels: bool = False):
    """World-frame points for every pixel with positive depth, in row-major order."""
    rows, cols = np.nonzero(frame.depth > 0)
    d = frame.depth[rows, cols].astype(np.float64)
    cam = pixel_directions(frame.intrinsics, rows, cols) * d[:, None]
    points = frame.pose.transform(cam)
    if return_pixels:
        return points, np.stack([rows, cols], axis=1)
    return points


def project(points, frame: RGBDFrame):
    """Project world points into ``frame``.

    Returns ``(uv, z, in_view)``: continuous pixel coordinates ``(u, v)``, the
    camera-z distance, and a mask that is False behind the camera or outside the
    image. A single 3-vector returns scalars / a bool.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    cam = frame.pose.inverse_transform(pts)
    z = cam[:, 2]
    intr = frame.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    in_view = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    uv = np.stack([u, v], axis=1)
    if single:
        return uv[0], float(z[0]), bool(in_view[0])
    return uv, z, in_view


def lookup_depth(frame: RGBDFrame, uv: np.ndarray, in_view: np.ndarray) -> np.ndarray:
    """Measured depth at the pixels containing ``uv``; 0 where not in view."""
    out = np.zeros(len(uv), dtype=np.float64)
    idx = np.nonzero(in_view)[0]
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    out[idx] = frame.depth[rows, cols]
    return out


@dataclass
class RayBatch:
    """Structure-of-arrays form of a list of :class:`Ray`, used on hot paths."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    depth_scale: np.ndarray  # (R,) camera-z per meter along the ray
    gt_color: np.ndarray  # (R, 3)
    gt_depth: np.ndarray  # (R,)
    pixels: np.ndarray  # (R, 2) row, col
    frame_index: np.ndarray  # (R,) position of the source frame in the batch's frame list

    def __len__(self):
        return len(self.origins)

    def subset(self, mask) -> "RayBatch":
        return RayBatch(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))

    @classmethod
    def concatenate(cls, batches) -> "RayBatch":
        batches = list(batches)
        return cls(
            *(np.concatenate([getattr(b, f) for b in batches]) for f in cls.__dataclass_fields__)
        )

    def rays(self) -> list[Ray]:
        return [
            Ray(
                self.origins[i],
                self.directions[i],
                (int(self.pixels[i, 0]), int(self.pixels[i, 1])),
                self.gt_color[i],
                float(self.gt_depth[i]),
                float(self.depth_scale[i]),
            )
            for i in range(len(self))
        ]


def ray_batch(frame: RGBDFrame, pixels, frame_index: int = 0) -> RayBatch:
    """Rays through the centers of ``pixels`` ((N, 2) row/col) of ``frame``."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows >= frame.height) or np.any(cols < 0) or np.any(cols >= frame.width):
        raise InputError(f"pixel out of bounds for {frame.width}x{frame.height} image")
    d_cam = pixel_directions(frame.intrinsics, rows, cols)
    norm = np.linalg.norm(d_cam, axis=1)
    d_world = (d_cam / norm[:, None]) @ frame.pose.rotation.T
    origins = np.broadcast_to(frame.pose.translation, d_world.shape).copy()
    return RayBatch(
        origins=origins,
        directions=d_world,
        depth_scale=1.0 / norm,
        gt_color=np.asarray(frame.color[rows, cols], dtype=np.float64),
        gt_depth=np.asarray(frame.depth[rows, cols], dtype=np.float64),
        pixels=pixels,
        frame_index=np.full(len(pixels), frame_index, dtype=np.int64),
    )


def generate_rays(frame: RGBDFrame, pixels) -> list[Ray]:
    return ray_batch(frame, pixels).rays()


def full_pixel_grid(intr: CameraIntrinsics) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)
