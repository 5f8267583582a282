"""Binary checkpoints: a versioned JSON header followed by little-endian array sections.

Layout::

    b"HYBMAPCK" | uint32 version | uint32 header bytes | header (UTF-8 JSON) | sections

The header lists every section's name, dtype and shape in file order.
Trainable parameters are stored as ``<f4`` (``<f8`` for 64-bit models), so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import LoadError
from .network import HybridModel, ModelConfig
from .octree import SparseVoxelOctree

MAGIC = b"HYBMAPCK"
VERSION = 1

_OCTREE_SECTIONS = {
    "leaf_coords": "<i4",
    "leaf_vertices": "<i4",
    "leaf_frame": "<i4",
    "leaf_expanded": "u1",
    "vertex_coords": "<i4",
    "vertex_initialized": "u1",
}


def save_checkpoint(path, model: HybridModel, extra: dict | None = None):
    float_code = "<f8" if model.dtype == np.float64 else "<f4"
    arrays = [(name, np.asarray(arr), float_code) for name, arr in model.parameters().items()]
    arrays += [(f"octree/{k}", np.asarray(v), _OCTREE_SECTIONS[k]) for k, v in model.octree.state().items()]
    bounds = model.bounds
    header = {
        "model_config": asdict(model.config),
        "bounds": None if bounds is None else [bounds[0].tolist(), bounds[1].tolist()],
        "sections": [{"name": n, "dtype": code, "shape": list(a.shape)} for n, a, code in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, arr, code in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and raw sections of a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise LoadError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    try:
        header = json.loads(data[off : off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: corrupt header") from exc
    off += n
    sections = {}
    for sec in header["sections"]:
        dt = np.dtype(sec["dtype"])
        count = int(np.prod(sec["shape"], dtype=np.int64))
        size = count * dt.itemsize
        if off + size > len(data):
            raise LoadError(f"{path}: section {sec['name']!r} is truncated")
        sections[sec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(sec["shape"])
        off += size
    if off != len(data):
        raise LoadError(f"{path}: {len(data) - off} trailing bytes")
    return header, sections


def load_checkpoint(path) -> HybridModel:
    header, sections = read_checkpoint(path)
    try:
        cfg = ModelConfig(**header["model_config"])
        state = {k: sections[f"octree/{k}"] for k in _OCTREE_SECTIONS}
        tree = SparseVoxelOctree.from_state(
            state,
            sections["vertex_sdf"],
            voxel_size=cfg.voxel_size,
            default_sdf=cfg.truncation,
            min_points=cfg.min_points,
            edge_band_fraction=cfg.edge_band_fraction,
            dtype=np.dtype(cfg.dtype),
        )
        bounds = header["bounds"]
        model = HybridModel(cfg, bounds=bounds, octree=tree)
        for name, param in model.parameters().items():
            if name == "vertex_sdf":
                continue
            stored = sections[name]
            if stored.shape != param.shape:
                raise LoadError(f"{path}: section {name!r} has shape {stored.shape}, expected {param.shape}")
            param[...] = stored
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{path}: missing or malformed entry {exc}") from exc
    return model
