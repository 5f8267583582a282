"""Multiresolution hash encoding of 3D points into trainable features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QueryError
from .octree import CORNER_OFFSETS, trilinear_weights

PRIMES = (1, 2654435761, 805459861)


def hash_corners(corners: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer corners, computed in wrapping uint32 arithmetic.

    slot = (x * 1  XOR  y * 2654435761  XOR  z * 805459861) mod table_size
    """
    c = np.asarray(corners, dtype=np.int64).astype(np.uint32)
    h = c[..., 0] * np.uint32(PRIMES[0])
    h ^= c[..., 1] * np.uint32(PRIMES[1])
    h ^= c[..., 2] * np.uint32(PRIMES[2])
    return (h % np.uint32(table_size)).astype(np.int64)


def hash_corner(level: int, corner, table_size: int) -> int:
    # the level does not enter the hash; each level owns its own table
    return int(hash_corners(np.asarray(corner)[None], table_size)[0])


@dataclass
class EncodingRecord:
    slots: np.ndarray  # (L, N, 8) table rows
    weights: np.ndarray  # (L, N, 8)


class HashEncoding:
    """L levels of hashed feature tables, finest cell = base / scale**(L-1).

    The table is a flat ``(L * T * F,)`` parameter array; ``table`` exposes it
    as ``(L, T, F)``.
    """

    def __init__(
        self,
        levels: int = 4,
        features: int = 2,
        log2_table_size: int = 19,
        base_cell: float = 0.1,
        scale: float = 2.0,
        bounds=None,
        dtype=np.float32,
        rng: np.random.Generator | None = None,
        init_range: float = 1e-4,
    ):
        self.levels = int(levels)
        self.features = int(features)
        self.table_size = 1 << int(log2_table_size)
        self.scale = float(scale)
        self.cell_sizes = np.array([base_cell / scale**lvl for lvl in range(self.levels)])
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        rng = np.random.default_rng(0) if rng is None else rng
        n = self.levels * self.table_size * self.features
        self.params = rng.uniform(-init_range, init_range, size=n).astype(dtype)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.levels, self.table_size, self.features)

    def check_domain(self, points: np.ndarray):
        if self.bounds is None:
            return
        lo, hi = self.bounds
        bad = np.any((points < lo) | (points > hi), axis=1)
        if bad.any():
            p = points[np.flatnonzero(bad)[0]]
            raise QueryError(f"point {p.tolist()} outside encoding domain [{lo.tolist()}, {hi.tolist()}]")

    def lookup(self, points) -> EncodingRecord:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.check_domain(pts)
        n = len(pts)
        slots = np.empty((self.levels, n, 8), dtype=np.int64)
        weights = np.empty((self.levels, n, 8), dtype=self.params.dtype)
        for lvl, cell in enumerate(self.cell_sizes):
            g = pts / cell
            base = np.floor(g)
            corners = base.astype(np.int64)[:, None, :] + CORNER_OFFSETS[None]
            slots[lvl] = hash_corners(corners, self.table_size) + lvl * self.table_size
            weights[lvl] = trilinear_weights(g - base)
        return EncodingRecord(slots, weights)

    def encode(self, points) -> tuple[np.ndarray, EncodingRecord]:
        """Concatenated per-level features, shape (N, L*F), plus the lookup record."""
        rec = self.lookup(points)
        table = self.params.reshape(-1, self.features)
        n = rec.slots.shape[1]
        out = np.empty((n, self.output_dim), dtype=self.params.dtype)
        for lvl in range(self.levels):
            feats = table[rec.slots[lvl]]  # (N, 8, F)
            out[:, lvl * self.features : (lvl + 1) * self.features] = np.einsum(
                "nk,nkf->nf", rec.weights[lvl], feats
            )
        return out, rec

    def table_gradient(self, rec: EncodingRecord, grad_out: np.ndarray) -> np.ndarray:
        """Scatter d(loss)/d(features) back onto the flat table."""
        f = self.features
        g = grad_out.reshape(-1, self.levels, f).transpose(1, 0, 2)  # (L, N, F)
        contrib = rec.weights[..., None] * g[:, :, None, :]  # (L, N, 8, F)
        idx = rec.slots[..., None] * f + np.arange(f)
        grad = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=self.params.size)
        return grad.astype(self.params.dtype)
