"""Sparse leaf-voxel structure carrying trainable coarse SDF values at voxel corners.

Leaves all live at one depth (edge length ``voxel_size``) and are stored as a
flat hash keyed by integer cell coordinates; interior octree nodes are never
queried, so they are not materialized. Cell of a point ``p`` is
``floor(p / voxel_size)`` per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import RGBDFrame, back_project, lookup_depth, project
from .errors import QueryError

# corner c of a cell has offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _KEY_OFFSET
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return (
        np.stack(
            [(keys >> (2 * _KEY_BITS)) & _KEY_MASK, (keys >> _KEY_BITS) & _KEY_MASK, keys & _KEY_MASK],
            axis=1,
        )
        - _KEY_OFFSET
    )


class _KeyIndex:
    """Sorted int64 key array supporting vectorized lookups."""

    def __init__(self):
        self._keys = np.empty(0, dtype=np.int64)
        self._order = np.empty(0, dtype=np.int64)
        self._sorted = np.empty(0, dtype=np.int64)

    def __len__(self):
        return len(self._keys)

    def extend(self, keys: np.ndarray):
        self._keys = np.concatenate([self._keys, keys])
        self._order = np.argsort(self._keys, kind="stable")
        self._sorted = self._keys[self._order]

    def find(self, keys: np.ndarray) -> np.ndarray:
        """Index of each key, or -1 when absent."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self._sorted) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted, keys)
        pos = np.minimum(pos, len(self._sorted) - 1)
        hit = self._sorted[pos] == keys
        return np.where(hit, self._order[pos], -1)


@dataclass(frozen=True)
class VoxelRecord:
    coord: tuple[int, int, int]
    vertices: tuple[int, ...]
    frame_id: int
    expanded: bool


@dataclass
class AllocationStats:
    points: int = 0
    occupied_cells: int = 0
    new_leaves: int = 0
    new_vertices: int = 0


@dataclass
class CoarseRecord:
    """Interpolation record: per query point, 8 vertex indices and their weights."""

    vertex_ids: np.ndarray  # (N, 8)
    weights: np.ndarray  # (N, 8)


class SparseVoxelOctree:
    def __init__(
        self,
        voxel_size: float = 0.1,
        default_sdf: float = 0.05,
        min_points: int = 10,
        edge_band_fraction: float = 0.2,
        dtype=np.float32,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.default_sdf = float(default_sdf)
        self.min_points = int(min_points)
        self.edge_band_fraction = float(edge_band_fraction)
        self.dtype = np.dtype(dtype)

        self.leaf_coords = np.empty((0, 3), dtype=np.int64)
        self.leaf_vertices = np.empty((0, 8), dtype=np.int64)
        self.leaf_frame = np.empty(0, dtype=np.int64)
        self.leaf_expanded = np.empty(0, dtype=bool)
        self.vertex_coords = np.empty((0, 3), dtype=np.int64)
        self.vertex_sdf = np.empty(0, dtype=self.dtype)
        self.vertex_initialized = np.empty(0, dtype=bool)
        self._leaf_index = _KeyIndex()
        self._vertex_index = _KeyIndex()

    # ------------------------------------------------------------------ basics
    @property
    def num_leaves(self) -> int:
        return len(self.leaf_coords)

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_coords)

    def __len__(self):
        return self.num_leaves

    def leaf(self, leaf_id: int) -> VoxelRecord:
        return VoxelRecord(
            tuple(int(x) for x in self.leaf_coords[leaf_id]),
            tuple(int(x) for x in self.leaf_vertices[leaf_id]),
            int(self.leaf_frame[leaf_id]),
            bool(self.leaf_expanded[leaf_id]),
        )

    def find_leaves(self, coords) -> np.ndarray:
        return self._leaf_index.find(pack_keys(coords))

    def cell_of(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def leaf_centers(self, leaf_ids=None) -> np.ndarray:
        coords = self.leaf_coords if leaf_ids is None else self.leaf_coords[leaf_ids]
        return (coords + 0.5) * self.voxel_size

    def vertex_positions(self, vertex_ids=None) -> np.ndarray:
        coords = self.vertex_coords if vertex_ids is None else self.vertex_coords[vertex_ids]
        return coords * self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space AABB of all leaves."""
        if self.num_leaves == 0:
            raise QueryError("octree is empty")
        lo = self.leaf_coords.min(axis=0) * self.voxel_size
        hi = (self.leaf_coords.max(axis=0) + 1) * self.voxel_size
        return lo, hi

    def contains(self, points) -> np.ndarray:
        return self.find_leaves(self.cell_of(points)) >= 0

    # -------------------------------------------------------------- allocation
    def add_leaves(self, coords, frame_id: int = 0, expanded: bool = False) -> np.ndarray:
        """Create leaves at ``coords`` that do not exist yet; returns new leaf ids."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = np.unique(pack_keys(coords))
        keys = keys[self._leaf_index.find(keys) < 0]
        if len(keys) == 0:
            return np.empty(0, dtype=np.int64)
        coords = unpack_keys(keys)

        corner_coords = (coords[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
        corner_keys = pack_keys(corner_coords)
        vid = self._vertex_index.find(corner_keys)
        missing = np.unique(corner_keys[vid < 0])
        if len(missing):
            start = self.num_vertices
            self.vertex_coords = np.concatenate([self.vertex_coords, unpack_keys(missing)])
            self.vertex_sdf = np.concatenate(
                [self.vertex_sdf, np.full(len(missing), self.default_sdf, dtype=self.dtype)]
            )
            self.vertex_initialized = np.concatenate(
                [self.vertex_initialized, np.zeros(len(missing), dtype=bool)]
            )
            self._vertex_index.extend(missing)
            vid = self._vertex_index.find(corner_keys)
            assert vid.min() >= 0 and self.num_vertices == start + len(missing)

        first = self.num_leaves
        self.leaf_coords = np.concatenate([self.leaf_coords, coords])
        self.leaf_vertices = np.concatenate([self.leaf_vertices, vid.reshape(-1, 8)])
        self.leaf_frame = np.concatenate([self.leaf_frame, np.full(len(coords), frame_id, dtype=np.int64)])
        self.leaf_expanded = np.concatenate([self.leaf_expanded, np.full(len(coords), expanded)])
        self._leaf_index.extend(keys)
        return np.arange(first, self.num_leaves)

    def _bin_points(self, points: np.ndarray):
        cells = self.cell_of(points)
        keys = pack_keys(cells)
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        return cells, uniq, inverse, counts

    def allocate_from_frame(self, frame: RGBDFrame, points: np.ndarray | None = None):
        """Add leaves for cells holding more than ``min_points`` back-projected points.

        Returns ``(new_leaf_ids, stats)``.
        """
        if points is None:
            points = back_project(frame)
        stats = AllocationStats(points=len(points))
        if len(points) == 0:
            return np.empty(0, dtype=np.int64), stats
        _, uniq, _, counts = self._bin_points(points)
        dense = uniq[counts > self.min_points]
        stats.occupied_cells = len(dense)
        before = self.num_vertices
        new = self.add_leaves(unpack_keys(dense), frame_id=frame.frame_id)
        stats.new_leaves = len(new)
        stats.new_vertices = self.num_vertices - before
        return new, stats

    def populated_leaves(self, points: np.ndarray) -> np.ndarray:
        """Ids of existing leaves that hold more than ``min_points`` of ``points``."""
        if len(points) == 0:
            return np.empty(0, dtype=np.int64)
        _, uniq, _, counts = self._bin_points(points)
        ids = self._leaf_index.find(uniq[counts > self.min_points])
        return ids[ids >= 0]

    def expand_voxels(self, frame: RGBDFrame, touched_leaves=None, points: np.ndarray | None = None):
        """Allocate the neighbor across a face when all of a leaf's points hug that face.

        ``touched_leaves`` restricts the rule to the given leaf ids; by default all
        leaves populated by this frame are considered. Returns new leaf ids.
        """
        if points is None:
            points = back_project(frame)
        if len(points) == 0:
            return np.empty(0, dtype=np.int64)
        cells = self.cell_of(points)
        leaf_of_point = self.find_leaves(cells)
        if touched_leaves is None:
            touched_leaves = self.populated_leaves(points)
        touched = np.zeros(self.num_leaves, dtype=bool)
        touched[np.asarray(touched_leaves, dtype=np.int64)] = True
        keep = leaf_of_point >= 0
        keep[keep] = touched[leaf_of_point[keep]]
        if not keep.any():
            return np.empty(0, dtype=np.int64)
        leaf_of_point = leaf_of_point[keep]
        frac = points[keep] / self.voxel_size - cells[keep]

        order = np.argsort(leaf_of_point, kind="stable")
        leaf_sorted = leaf_of_point[order]
        frac = frac[order]
        starts = np.flatnonzero(np.r_[True, leaf_sorted[1:] != leaf_sorted[:-1]])
        leaves = leaf_sorted[starts]
        fmin = np.minimum.reduceat(frac, starts, axis=0)
        fmax = np.maximum.reduceat(frac, starts, axis=0)

        band = self.edge_band_fraction
        targets = []
        for axis in range(3):
            step = np.zeros(3, dtype=np.int64)
            step[axis] = 1
            low = fmax[:, axis] < band
            high = fmin[:, axis] > 1.0 - band
            targets.append(self.leaf_coords[leaves[low]] - step)
            targets.append(self.leaf_coords[leaves[high]] + step)
        targets = np.concatenate(targets)
        if len(targets) == 0:
            return np.empty(0, dtype=np.int64)
        return self.add_leaves(targets, frame_id=frame.frame_id, expanded=True)

    def initialize_priors(self, frame: RGBDFrame, vertex_ids) -> int:
        """Set projective SDF priors on not-yet-initialized vertices seen by ``frame``.

        prior = D(u) - z for a vertex at camera depth z projecting into pixel u, kept
        only when D(u) is valid and the prior is below sqrt(6) * voxel_size.
        """
        vids = np.unique(np.asarray(vertex_ids, dtype=np.int64))
        vids = vids[~self.vertex_initialized[vids]]
        if len(vids) == 0:
            return 0
        uv, z, in_view = project(self.vertex_positions(vids), frame)
        measured = lookup_depth(frame, uv, in_view)
        prior = measured - z
        ok = in_view & (measured > 0) & (prior < math.sqrt(6.0) * self.voxel_size)
        chosen = vids[ok]
        self.vertex_sdf[chosen] = prior[ok].astype(self.dtype)
        self.vertex_initialized[chosen] = True
        return int(ok.sum())

    # ------------------------------------------------------------------ query
    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Leaf id and local coordinates in [0, 1]^3 for each point.

        Points on a shared face resolve to the floor cell; if that cell is not
        allocated but the point lies on the closed boundary of an allocated
        neighbor, the neighbor is used (trilinear interpolation is continuous
        across faces, so the value agrees). Raises QueryError otherwise.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = pts / self.voxel_size
        # lattice points like -2.1 / 0.1 land a hair off the integer; snap them onto the face
        near = np.round(g)
        g = np.where(np.abs(g - near) < 1e-9, near, g)
        cells = np.floor(g).astype(np.int64)
        leaf = self.find_leaves(cells)
        miss = np.flatnonzero(leaf < 0)
        if len(miss):
            frac = g[miss] - cells[miss]
            on_low = frac < 1e-9
            for combo in range(1, 8):
                bits = np.array([(combo >> a) & 1 for a in range(3)], dtype=bool)
                ok = np.all(on_low[:, bits], axis=1) & (leaf[miss] < 0)
                if not ok.any():
                    continue
                cand = cells[miss[ok]] - bits.astype(np.int64)
                found = self.find_leaves(cand)
                sel = miss[ok][found >= 0]
                leaf[sel] = found[found >= 0]
                cells[sel] = cand[found >= 0]
            if np.any(leaf < 0):
                bad = pts[np.flatnonzero(leaf < 0)[0]]
                raise QueryError(f"point {bad.tolist()} lies outside all allocated leaves")
        local = np.clip(g - cells, 0.0, 1.0)
        return leaf, local

    def query_coarse_sdf(self, points) -> tuple[np.ndarray, CoarseRecord]:
        """Trilinear interpolation of vertex SDFs at ``points``."""
        leaf, local = self.locate(points)
        weights = trilinear_weights(local).astype(self.dtype)
        vids = self.leaf_vertices[leaf]
        values = np.einsum("nk,nk->n", weights, self.vertex_sdf[vids])
        return values, CoarseRecord(vids, weights)

    # ------------------------------------------------------------- traversal
    def intersect_rays(self, origins, directions, merge_gap: float = 1e-9):
        """Intervals along each ray that lie inside allocated leaves.

        Returns flat arrays ``(ray_index, t_near, t_far)`` sorted by ray, then by
        ``t_near``. Abutting intervals are merged. Only ``t >= 0`` is considered.
        """
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        empty = (np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))
        if self.num_leaves == 0 or len(o) == 0:
            return empty
        vs = self.voxel_size
        lo, hi = self.bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        t0 = np.maximum(np.max(np.minimum(ta, tb), axis=1), 0.0)
        t1 = np.min(np.maximum(ta, tb), axis=1)
        hit = t1 > t0
        if not hit.any():
            return empty
        rays = np.flatnonzero(hit)
        o, d, inv, t0, t1 = o[rays], d[rays], inv[rays], t0[rays], t1[rays]

        # every grid-plane crossing between t0 and t1, per axis
        crossings = [t0[:, None], t1[:, None]]
        for a in range(3):
            g0 = (o[:, a] + t0 * d[:, a]) / vs
            g1 = (o[:, a] + t1 * d[:, a]) / vs
            pos = d[:, a] > 0
            neg = d[:, a] < 0
            first = np.where(pos, np.floor(g0) + 1, np.ceil(g0) - 1)
            last = np.where(pos, np.ceil(g1) - 1, np.floor(g1) + 1)
            count = np.where(pos, last - first + 1, np.where(neg, first - last + 1, 0))
            count = np.clip(count, 0, None).astype(np.int64)
            n = int(count.max()) if len(count) else 0
            if n == 0:
                continue
            k = np.arange(n)
            step = np.where(pos, 1.0, -1.0)
            planes = first[:, None] + step[:, None] * k[None]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (planes * vs - o[:, a : a + 1]) * inv[:, a : a + 1]
            t = np.where(k[None] < count[:, None], t, np.inf)
            crossings.append(t)
        ts = np.sort(np.concatenate(crossings, axis=1), axis=1)
        ts = np.minimum(ts, t1[:, None])
        ta_, tb_ = ts[:, :-1], ts[:, 1:]
        seg_valid = tb_ > ta_
        mid = 0.5 * (ta_ + tb_)
        r_idx, s_idx = np.nonzero(seg_valid)
        p = o[r_idx] + mid[r_idx, s_idx, None] * d[r_idx]
        inside = self.find_leaves(self.cell_of(p)) >= 0
        r_idx, s_idx = r_idx[inside], s_idx[inside]
        if len(r_idx) == 0:
            return empty
        starts = ta_[r_idx, s_idx]
        ends = tb_[r_idx, s_idx]
        # merge touching segments of the same ray (already ordered by ray, then t)
        new = np.r_[True, (r_idx[1:] != r_idx[:-1]) | (starts[1:] - ends[:-1] > merge_gap)]
        first_idx = np.flatnonzero(new)
        last_idx = np.r_[first_idx[1:] - 1, len(new) - 1]
        return rays[r_idx[first_idx]], starts[first_idx], ends[last_idx]

    def ray_voxel_intersect(self, ray) -> list[tuple[float, float]]:
        _, tn, tf = self.intersect_rays(ray.origin[None], ray.direction[None])
        return [(float(a), float(b)) for a, b in zip(tn, tf)]

    # ------------------------------------------------------------------ misc
    def dump_table(self) -> str:
        """Plain-text table, one leaf per line: coord, then its 8 vertex SDFs."""
        lines = ["# i j k expanded frame s0 s1 s2 s3 s4 s5 s6 s7"]
        order = np.lexsort(self.leaf_coords.T[::-1])
        for lid in order:
            c = self.leaf_coords[lid]
            sdf = self.vertex_sdf[self.leaf_vertices[lid]]
            lines.append(
                f"{c[0]} {c[1]} {c[2]} {int(self.leaf_expanded[lid])} {self.leaf_frame[lid]} "
                + " ".join(f"{float(v):.6f}" for v in sdf)
            )
        return "\n".join(lines) + "\n"

    def state(self) -> dict:
        return {
            "leaf_coords": self.leaf_coords,
            "leaf_vertices": self.leaf_vertices,
            "leaf_frame": self.leaf_frame,
            "leaf_expanded": self.leaf_expanded,
            "vertex_coords": self.vertex_coords,
            "vertex_initialized": self.vertex_initialized,
        }

    @classmethod
    def from_state(cls, state: dict, vertex_sdf: np.ndarray, **kwargs) -> "SparseVoxelOctree":
        tree = cls(**kwargs)
        tree.leaf_coords = np.asarray(state["leaf_coords"], dtype=np.int64).reshape(-1, 3)
        tree.leaf_vertices = np.asarray(state["leaf_vertices"], dtype=np.int64).reshape(-1, 8)
        tree.leaf_frame = np.asarray(state["leaf_frame"], dtype=np.int64)
        tree.leaf_expanded = np.asarray(state["leaf_expanded"]).astype(bool)
        tree.vertex_coords = np.asarray(state["vertex_coords"], dtype=np.int64).reshape(-1, 3)
        tree.vertex_initialized = np.asarray(state["vertex_initialized"]).astype(bool)
        tree.vertex_sdf = np.asarray(vertex_sdf, dtype=tree.dtype).copy()
        tree._leaf_index.extend(pack_keys(tree.leaf_coords))
        tree._vertex_index.extend(pack_keys(tree.vertex_coords))
        return tree


def trilinear_weights(local: np.ndarray) -> np.ndarray:
    """(N, 3) local coordinates -> (N, 8) corner weights in canonical corner order."""
    x, y, z = local[:, 0:1], local[:, 1:2], local[:, 2:3]
    ox, oy, oz = CORNER_OFFSETS[:, 0], CORNER_OFFSETS[:, 1], CORNER_OFFSETS[:, 2]
    wx = np.where(ox == 1, x, 1.0 - x)
    wy = np.where(oy == 1, y, 1.0 - y)
    wz = np.where(oz == 1, z, 1.0 - z)
    return wx * wy * wz
