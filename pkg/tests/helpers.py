"""Small deterministic fixtures shared by unit and acceptance tests."""

import numpy as np

from hybridmap.core import RayBatch
from hybridmap.mapper import TrainConfig
from hybridmap.network import HybridModel, ModelConfig


def small_model(seed=0, dtype="float64", log2_table_size=12, leaves=((0, 0, 0), (1, 0, 0))):
    """Model over two x-adjacent leaves with non-trivial parameters everywhere."""
    cfg = ModelConfig(log2_table_size=log2_table_size, dtype=dtype)
    model = HybridModel(cfg, bounds=([-1.0, -1.0, -1.0], [1.5, 1.0, 1.0]), seed=seed)
    model.octree.add_leaves(leaves)
    rng = np.random.default_rng(seed + 100)
    tree = model.octree
    # a tilted plane crossing the two leaves, plus noise
    x = tree.vertex_positions()[:, 0]
    tree.vertex_sdf[:] = 0.12 - x + rng.normal(0, 0.01, size=tree.num_vertices)
    for enc in (model.geo_encoding, model.color_encoding):
        enc.params[:] = rng.normal(0, 0.05, size=enc.params.size)
    # non-zero residual output so gradients reach every geometry group
    model.geo_mlp.params[:] = rng.normal(0, 0.1, size=model.geo_mlp.params.size)
    return model


def x_rays(n=8, seed=0, spacing=0.02, start=-0.01):
    """Rays along +x through the two leaves of :func:`small_model`; 10 samples each at 2 cm."""
    rng = np.random.default_rng(seed)
    yz = rng.uniform(0.01, 0.09, size=(n, 2))
    origins = np.c_[np.full(n, start), yz]
    dirs = np.tile([1.0, 0.0, 0.0], (n, 1))
    gt_depth = rng.uniform(0.1, 0.16, size=n)  # depth measured along x, origin just before the leaves
    gt_depth[-1] = 0.0  # one ray without a depth measurement
    return RayBatch(
        origins=origins,
        directions=dirs,
        depth_scale=np.ones(n),
        gt_color=rng.uniform(0.1, 0.9, size=(n, 3)),
        gt_depth=gt_depth,
        pixels=np.zeros((n, 2), dtype=np.int64),
        frame_index=np.zeros(n, dtype=np.int64),
    )


def fixture_config(**kw):
    return TrainConfig(step=0.02, **kw)


def total_loss(model, batch, config):
    from hybridmap.mapper import forward_losses

    losses, _, _ = forward_losses(model, batch, config)
    return float(losses.total.value)


def gradient_check(model, batch, config, per_group=None, eps=1e-5, seed=0, floor=1e-6):
    """Max relative error between taped and central-difference gradients, per group.

    ``per_group`` caps the number of entries checked per group (None = all);
    entries are drawn from those with a non-zero analytic gradient first so
    the check exercises live paths.
    """
    from hybridmap.mapper import forward_losses

    losses, tape, _ = forward_losses(model, batch, config)
    grads = tape.backward(losses.total)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, param in model.parameters().items():
        g = grads[name]
        live = np.flatnonzero(g)
        idx = live
        if per_group is not None and len(live) > per_group:
            idx = np.sort(rng.choice(live, size=per_group, replace=False))
        worst = 0.0
        for i in idx:
            old = param[i]
            param[i] = old + eps
            fp = total_loss(model, batch, config)
            param[i] = old - eps
            fm = total_loss(model, batch, config)
            param[i] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), floor))
        errors[name] = (worst, len(idx))
    return errors
