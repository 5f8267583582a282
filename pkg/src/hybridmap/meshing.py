"""Marching-cubes extraction of the zero level set, restricted to allocated voxels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CUBE_CORNERS, EDGE_CORNERS, TRIANGLES
from .errors import FormatError, InputError
from .octree import pack_keys

MIN_TRIANGLE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray | None = None  # (V, 3) uint8

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise InputError("one color per vertex required")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InputError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def marching_cubes_blocks(field, blocks, block_size: float, subdivisions: int) -> tuple[TriangleMesh, np.ndarray]:
    """Run marching cubes over a set of cubic blocks sharing one global lattice.

    Each block ``b`` spans ``[b, b + 1] * block_size`` and is split into
    ``subdivisions**3`` cubes. Nodes and crossed edges shared between blocks
    are merged, so the output is watertight across block faces.

    Args:
        field: callable mapping (M, 3) positions to (M,) scalar values; the
            surface is its zero level set, negative values are inside.
        blocks: (B, 3) integer block coordinates.
        block_size: edge length of one block in meters.
        subdivisions: cubes per block edge.

    Returns:
        The mesh and, for every mesh vertex, the pair of lattice node positions
        of the edge it was interpolated on (shape (V, 2, 3)).
    """
    blocks = np.unique(np.asarray(blocks, dtype=np.int64).reshape(-1, 3), axis=0)
    n = int(subdivisions)
    if n < 1:
        raise InputError("subdivisions must be >= 1")
    if len(blocks) == 0:
        return TriangleMesh.empty(), np.zeros((0, 2, 3))
    cell = block_size / n

    r = np.arange(n + 1)
    local = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    node_coords = (blocks[:, None, :] * n + local[None]).reshape(-1, 3)
    uniq, inverse = np.unique(pack_keys(node_coords), return_inverse=True)
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inverse] = np.arange(len(inverse))
    lattice = node_coords[first]
    node_ids = inverse.reshape(len(blocks), -1)
    values = np.asarray(field(lattice * cell), dtype=np.float64).reshape(-1)

    c = np.arange(n)
    origins = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    corner_local = origins[:, None, :] + CUBE_CORNERS[None]  # (n^3, 8, 3)
    flat = (corner_local[..., 0] * (n + 1) + corner_local[..., 1]) * (n + 1) + corner_local[..., 2]
    cube_nodes = node_ids[:, flat].reshape(-1, 8)

    inside = values[cube_nodes] < 0
    case = (inside << np.arange(8)).sum(axis=1)
    active = np.flatnonzero((case > 0) & (case < 255))
    if len(active) == 0:
        return TriangleMesh.empty(), np.zeros((0, 2, 3))
    rows = TRIANGLES[case[active], :15].reshape(len(active), 5, 3)
    cube_idx, tri_slot = np.nonzero(rows[:, :, 0] >= 0)
    tri_edges = rows[cube_idx, tri_slot]  # (T, 3)
    owner = active[cube_idx]

    ends = cube_nodes[owner[:, None, None], EDGE_CORNERS[tri_edges]]  # (T, 3, 2)
    lo = np.minimum(ends[..., 0], ends[..., 1])
    hi = np.maximum(ends[..., 0], ends[..., 1])
    keys = lo * len(uniq) + hi
    edge_keys, vert_of = np.unique(keys.ravel(), return_inverse=True)
    a, b = edge_keys // len(uniq), edge_keys % len(uniq)
    va, vb = values[a], values[b]
    t = va / (va - vb)
    pa, pb = lattice[a] * cell, lattice[b] * cell
    verts = pa + t[:, None] * (pb - pa)

    faces = vert_of.reshape(-1, 3)
    # the table winds triangles clockwise seen from the positive side; flip so
    # normals point toward increasing values (free space)
    faces = faces[:, ::-1]
    mesh = TriangleMesh(verts, faces)
    keep = mesh.triangle_areas() >= MIN_TRIANGLE_AREA
    faces = faces[keep]
    used, faces = np.unique(faces, return_inverse=True)
    return TriangleMesh(verts[used], faces.reshape(-1, 3)), np.stack([pa[used], pb[used]], axis=1)


def extraction_subdivisions(voxel_size: float, cell: float) -> int:
    n = int(round(voxel_size / cell))
    if n < 1 or abs(n * cell - voxel_size) > 1e-9 * voxel_size:
        raise InputError(f"cell {cell} must divide the voxel size {voxel_size}")
    return n


def extract_mesh(model, octree=None, cell: float | None = None, with_color: bool = False) -> TriangleMesh:
    """Zero level set of the model's SDF over the allocated leaves.

    Only cubes lying inside allocated leaves are polygonized, so the surface
    stops at the allocation boundary. ``cell`` defaults to voxel_size / 8 and
    must divide the voxel size.
    """
    octree = model.octree if octree is None else octree
    if octree.num_leaves == 0:
        return TriangleMesh.empty()
    vs = octree.voxel_size
    n = extraction_subdivisions(vs, vs / 8 if cell is None else cell)
    mesh, _ = marching_cubes_blocks(model.sdf, octree.leaf_coords, vs, n)
    if with_color and mesh.num_vertices:
        rgb = model.color(mesh.vertices)
        mesh.colors = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    return mesh


def mesh_from_sdf(sdf, lo, hi, cell: float = 0.01, block_size: float = 0.1) -> TriangleMesh:
    """Mesh an analytic SDF inside the box [lo, hi], visiting only blocks near the surface."""
    n = extraction_subdivisions(block_size, cell)
    lo_b = np.floor(np.asarray(lo, float) / block_size).astype(np.int64)
    hi_b = np.ceil(np.asarray(hi, float) / block_size).astype(np.int64)
    axes = [np.arange(a, b) for a, b in zip(lo_b, hi_b)]
    blocks = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = (blocks + 0.5) * block_size
    # a block can hold the surface only if |sdf(center)| is within its half diagonal
    near = np.abs(sdf(centers)) <= 0.5 * np.sqrt(3) * block_size + cell
    mesh, _ = marching_cubes_blocks(sdf, blocks[near], block_size, n)
    return mesh


# ------------------------------------------------------------------- raster
def rasterize(mesh: TriangleMesh, pose, intrinsics, near: float = 1e-3):
    """Z-buffer render of ``mesh`` from ``pose``.

    Returns ``(color (H,W,3) in [0,1], depth (H,W) camera z)``; pixels whose
    center ray hits no triangle get zeros. Depth and color are interpolated
    perspective-correctly, so depth is exact for each planar triangle.
    Triangles with a vertex closer than ``near`` are skipped.
    """
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros(h * w)
    color = np.zeros((h * w, 3))
    if mesh.num_faces == 0:
        return color.reshape(h, w, 3), depth.reshape(h, w)
    cam = (mesh.vertices - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    f = mesh.faces
    ok = np.all(z[f] > near, axis=1)
    f = f[ok]
    fu, fv, fz = u[f], v[f], z[f]
    # pixel (i, j) has its center at u = j + 0.5, v = i + 0.5
    j0 = np.maximum(np.ceil(fu.min(axis=1) - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(fu.max(axis=1) - 0.5), w - 1).astype(np.int64)
    i0 = np.maximum(np.ceil(fv.min(axis=1) - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(fv.max(axis=1) - 0.5), h - 1).astype(np.int64)
    nj = np.clip(j1 - j0 + 1, 0, None)
    ni = np.clip(i1 - i0 + 1, 0, None)
    count = nj * ni
    tri = np.repeat(np.arange(len(f)), count)
    k = np.arange(len(tri)) - np.repeat(np.cumsum(count) - count, count)
    pj = j0[tri] + k % nj[tri]
    pi = i0[tri] + k // nj[tri]
    pu, pv = pj + 0.5, pi + 0.5

    # screen-space barycentrics from edge functions
    au, av = fu[tri, 0], fv[tri, 0]
    bu, bv = fu[tri, 1], fv[tri, 1]
    cu, cv = fu[tri, 2], fv[tri, 2]
    area = (bu - au) * (cv - av) - (bv - av) * (cu - au)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = ((bu - pu) * (cv - pv) - (bv - pv) * (cu - pu)) / area
        l1 = ((cu - pu) * (av - pv) - (cv - pv) * (au - pu)) / area
    l2 = 1.0 - l0 - l1
    eps = -1e-9
    inside = (area != 0) & (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    tri, l0, l1, l2 = tri[inside], l0[inside], l1[inside], l2[inside]
    pix = (pi * w + pj)[inside]
    inv_z = l0 / fz[tri, 0] + l1 / fz[tri, 1] + l2 / fz[tri, 2]
    zpix = 1.0 / inv_z
    if len(pix) == 0:
        return color.reshape(h, w, 3), depth.reshape(h, w)

    order = np.lexsort((zpix, pix))
    first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
    depth[pix[first]] = zpix[first]
    if mesh.colors is not None:
        rgb = mesh.colors.astype(np.float64) / 255.0
        t = tri[first]
        wts = np.stack([l0[first] / fz[t, 0], l1[first] / fz[t, 1], l2[first] / fz[t, 2]], axis=1) * zpix[first, None]
        color[pix[first]] = np.einsum("nk,nkc->nc", wts, rgb[f[t]])
    return np.clip(color, 0, 1).reshape(h, w, 3), depth.reshape(h, w)


# ------------------------------------------------------------------------ PLY
def write_ply(path, mesh: TriangleMesh):
    """ASCII PLY with float positions and optional uchar RGB."""
    has_color = mesh.colors is not None
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.num_vertices}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.num_faces}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i, v in enumerate(mesh.vertices.astype(np.float32)):
            line = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
            if has_color:
                r, g, b = mesh.colors[i]
                line += f" {r} {g} {b}"
            fh.write(line + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path) -> TriangleMesh:
    """Read an ASCII PLY holding x/y/z (+ optional red/green/blue) and triangle faces."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        elements: list[list] = []  # [name, count, [properties]]
        fmt = None
        for raw in fh:
            line = raw.split()
            if not line or line[0] in ("comment", "obj_info"):
                continue
            if line[0] == "format":
                fmt = line[1]
            elif line[0] == "element":
                elements.append([line[1], int(line[2]), []])
            elif line[0] == "property":
                if not elements:
                    raise FormatError(f"{path}: property before element")
                elements[-1][2].append(line[-1])
            elif line[0] == "end_header":
                break
        else:
            raise FormatError(f"{path}: missing end_header")
        if fmt != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported, got {fmt!r}")
        body = fh.read().split("\n")

    verts = np.zeros((0, 3))
    colors = None
    faces = np.zeros((0, 3), dtype=np.int64)
    pos = 0
    for name, count, props in elements:
        rows = [r for r in body[pos : pos + count]]
        pos += count
        if len(rows) < count:
            raise FormatError(f"{path}: truncated {name} block")
        if name == "vertex":
            data = np.array([r.split() for r in rows], dtype=np.float64).reshape(count, len(props))
            try:
                verts = data[:, [props.index(k) for k in ("x", "y", "z")]]
            except ValueError as exc:
                raise FormatError(f"{path}: vertex element lacks x/y/z") from exc
            if all(k in props for k in ("red", "green", "blue")):
                colors = data[:, [props.index(k) for k in ("red", "green", "blue")]].astype(np.uint8)
        elif name == "face":
            lists = [np.array(r.split(), dtype=np.int64) for r in rows]
            if any(len(x) != 4 or x[0] != 3 for x in lists):
                raise FormatError(f"{path}: only triangle faces are supported")
            faces = np.array([x[1:] for x in lists], dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, faces, colors)
