"""Decoders, the parameter store and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .encoding import HashEncoding
from .errors import NumericalError
from .octree import SparseVoxelOctree
from .tape import GradientTape, Node, add

PARAM_GROUPS = ("vertex_sdf", "geo_table", "color_table", "geo_mlp", "color_mlp")


class Mlp:
    """Fully connected ReLU network whose weights live in one flat array.

    ``widths`` lists every layer width including input and output, e.g.
    ``(8, 64, 1)`` has one hidden transform of width 64.
    """

    def __init__(self, widths, group: str, output: str = "linear", dtype=np.float32, rng=None,
                 zero_last: bool = False):
        self.widths = tuple(int(w) for w in widths)
        self.group = group
        self.output = output
        rng = np.random.default_rng(0) if rng is None else rng
        self._slices = []
        offset = 0
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            self._slices.append((w, b, n_in, n_out))
        self.params = np.zeros(offset, dtype=dtype)
        for i, (w, b, n_in, n_out) in enumerate(self._slices):
            if zero_last and i == len(self._slices) - 1:
                continue
            self.params[w] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=n_in * n_out)

    @property
    def num_layers(self) -> int:
        return len(self._slices)

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        w, b, n_in, n_out = self._slices[i]
        return self.params[w].reshape(n_in, n_out), self.params[b]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(self.num_layers):
            w, b = self.layer(i)
            h = h @ w + b
            if i < self.num_layers - 1:
                h = np.maximum(h, 0)
        return expit(h) if self.output == "sigmoid" else h

    def forward(self, x: Node, tape: GradientTape) -> Node:
        h = x
        for i in range(self.num_layers):
            h = self._linear(h, i, tape)
            if i < self.num_layers - 1:
                h = relu(tape, h)
        if self.output == "sigmoid":
            h = sigmoid(tape, h)
        return h

    def _linear(self, x: Node, i: int, tape: GradientTape) -> Node:
        w, b = self.layer(i)
        ws, bs, _, _ = self._slices[i]
        xv = x.value

        def vjp(g):
            tape.accumulate(self.group, (xv.T @ g).ravel(), ws)
            tape.accumulate(self.group, g.sum(axis=0), bs)
            return (g @ w.T,)

        return tape.record(xv @ w + b, (x,), vjp)


def relu(tape: GradientTape, x: Node) -> Node:
    mask = x.value > 0
    return tape.record(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def sigmoid(tape: GradientTape, x: Node) -> Node:
    y = expit(x.value)
    return tape.record(y, (x,), lambda g: (g * y * (1 - y),))


@dataclass
class ModelConfig:
    voxel_size: float = 0.1
    truncation: float = 0.05
    levels: int = 4
    features: int = 2
    log2_table_size: int = 19
    scale: float = 2.0
    hidden: int = 64
    color_hidden_layers: int = 2
    geo_hidden_layers: int = 1
    min_points: int = 10
    edge_band_fraction: float = 0.2
    dtype: str = "float32"


class HybridModel:
    """Coarse octree SDF plus hash-encoded residual SDF and hash-encoded color."""

    def __init__(self, config: ModelConfig | None = None, bounds=None, seed: int = 0,
                 octree: SparseVoxelOctree | None = None):
        self.config = cfg = config or ModelConfig()
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.octree = octree or SparseVoxelOctree(
            cfg.voxel_size,
            default_sdf=cfg.truncation,
            min_points=cfg.min_points,
            edge_band_fraction=cfg.edge_band_fraction,
            dtype=self.dtype,
        )
        enc_kw = dict(
            levels=cfg.levels,
            features=cfg.features,
            log2_table_size=cfg.log2_table_size,
            base_cell=cfg.voxel_size,
            scale=cfg.scale,
            bounds=bounds,
            dtype=self.dtype,
        )
        self.geo_encoding = HashEncoding(rng=rng, **enc_kw)
        self.color_encoding = HashEncoding(rng=rng, **enc_kw)
        d = self.geo_encoding.output_dim
        h = cfg.hidden
        self.geo_mlp = Mlp((d,) + (h,) * cfg.geo_hidden_layers + (1,), "geo_mlp", dtype=self.dtype,
                           rng=rng, zero_last=True)
        self.color_mlp = Mlp((d,) + (h,) * cfg.color_hidden_layers + (3,), "color_mlp",
                             output="sigmoid", dtype=self.dtype, rng=rng)

    @property
    def truncation(self) -> float:
        return self.config.truncation

    @property
    def bounds(self):
        return self.geo_encoding.bounds

    def parameters(self) -> dict[str, np.ndarray]:
        """Current flat parameter arrays, keyed by group name."""
        return {
            "vertex_sdf": self.octree.vertex_sdf,
            "geo_table": self.geo_encoding.params,
            "color_table": self.color_encoding.params,
            "geo_mlp": self.geo_mlp.params,
            "color_mlp": self.color_mlp.params,
        }

    def new_tape(self) -> GradientTape:
        return GradientTape({k: v.shape for k, v in self.parameters().items()}, dtype=self.dtype)

    # ---------------------------------------------------------- taped forward
    def coarse_sdf_node(self, points, tape: GradientTape) -> Node:
        values, rec = self.octree.query_coarse_sdf(points)
        n_vertices = self.octree.num_vertices

        def vjp(g):
            grad = np.bincount(rec.vertex_ids.ravel(), weights=(rec.weights * g[:, None]).ravel(),
                               minlength=n_vertices)
            tape.accumulate("vertex_sdf", grad.astype(self.dtype))
            return ()

        return tape.record(values, (), vjp)

    def encode_node(self, encoding: HashEncoding, group: str, points, tape: GradientTape) -> Node:
        feats, rec = encoding.encode(points)

        def vjp(g):
            tape.accumulate(group, encoding.table_gradient(rec, g))
            return ()

        return tape.record(feats, (), vjp)

    def predict_sdf(self, points, tape: GradientTape | None = None):
        """s = coarse(p) + residual_mlp(geo_hash(p)); returns ``(Node, tape)``."""
        tape = self.new_tape() if tape is None else tape
        coarse = self.coarse_sdf_node(points, tape)
        feats = self.encode_node(self.geo_encoding, "geo_table", points, tape)
        res = self.geo_mlp.forward(feats, tape)
        flat = tape.record(res.value[:, 0], (res,), lambda g: (g[:, None],))
        return add(tape, coarse, flat), tape

    def predict_color(self, points, tape: GradientTape | None = None):
        """c = sigmoid(color_mlp(color_hash(p))); returns ``(Node, tape)``."""
        tape = self.new_tape() if tape is None else tape
        feats = self.encode_node(self.color_encoding, "color_table", points, tape)
        return self.color_mlp.forward(feats, tape), tape

    # ------------------------------------------------------- untaped inference
    def sdf(self, points, chunk: int = 65536) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts), dtype=self.dtype)
        for i in range(0, len(pts), chunk):
            p = pts[i : i + chunk]
            coarse, _ = self.octree.query_coarse_sdf(p)
            feats, _ = self.geo_encoding.encode(p)
            out[i : i + chunk] = coarse + self.geo_mlp(feats)[:, 0]
        return out

    def color(self, points, chunk: int = 65536) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(pts), 3), dtype=self.dtype)
        for i in range(0, len(pts), chunk):
            feats, _ = self.color_encoding.encode(pts[i : i + chunk])
            out[i : i + chunk] = self.color_mlp(feats)
        return out


@dataclass
class AdamConfig:
    lr: dict = field(default_factory=lambda: {
        "vertex_sdf": 1e-2,
        "geo_table": 1e-2,
        "color_table": 1e-2,
        "geo_mlp": 1e-3,
        "color_mlp": 1e-3,
    })
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, step):
    """One in-place Adam update with bias correction; ``step`` counts from 1."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    bc1 = 1 - beta1**step
    bc2 = 1 - beta2**step
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    """Adam over named parameter groups; moment buffers grow with their groups."""

    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _state(self, name, param):
        m = self.m.get(name)
        if m is None or m.shape != param.shape:
            new_m = np.zeros_like(param)
            new_v = np.zeros_like(param)
            if m is not None:
                n = min(m.size, param.size)
                new_m[:n] = m[:n]
                new_v[:n] = self.v[name][:n]
            self.m[name], self.v[name] = new_m, new_v
        return self.m[name], self.v[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.count_nonzero(~np.isfinite(g)))
                raise NumericalError(f"non-finite gradient in group {name!r} ({bad} entries); step rejected")
        self.step_count += 1
        cfg = self.config
        for name, g in grads.items():
            p = params[name]
            m, v = self._state(name, p)
            adam_step(p, g.astype(p.dtype, copy=False), m, v, cfg.lr.get(name, 1e-3),
                      cfg.beta1, cfg.beta2, cfg.eps, self.step_count)
