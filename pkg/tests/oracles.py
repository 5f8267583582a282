"""Straight-line reference implementations used as test oracles.

Everything here is written with scalar loops over plain Python floats and
never calls into the vectorized package code paths it is compared against.
"""

import math

import numpy as np

MASK32 = 0xFFFFFFFF
PRIMES = (1, 2654435761, 805459861)


def hash_slot(corner, table_size):
    x, y, z = (int(c) for c in corner)
    h = ((x * PRIMES[0]) & MASK32) ^ ((y * PRIMES[1]) & MASK32) ^ ((z * PRIMES[2]) & MASK32)
    return h % table_size


def trilerp(values, f):
    out = 0.0
    for c in range(8):
        w = 1.0
        for axis in range(3):
            bit = (c >> axis) & 1
            w *= f[axis] if bit else 1.0 - f[axis]
        out += w * values[c]
    return out


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def coarse_sdf(tree, p):
    vs = tree.voxel_size
    g = [p[a] / vs for a in range(3)]
    cell = [math.floor(v) for v in g]
    lookup = {tuple(c): i for i, c in enumerate(tree.vertex_coords.tolist())}
    leaves = {tuple(c) for c in tree.leaf_coords.tolist()}
    if tuple(cell) not in leaves:
        # closed boundary: try the lower neighbor along axes where p sits on a face
        for a in range(3):
            if g[a] == cell[a]:
                cand = list(cell)
                cand[a] -= 1
                if tuple(cand) in leaves:
                    cell = cand
                    break
    f = [g[a] - cell[a] for a in range(3)]
    vals = []
    for c in range(8):
        key = (cell[0] + (c & 1), cell[1] + ((c >> 1) & 1), cell[2] + ((c >> 2) & 1))
        vals.append(float(tree.vertex_sdf[lookup[key]]))
    return trilerp(vals, f)


def encode(enc, p):
    out = []
    table = enc.params.reshape(enc.levels, enc.table_size, enc.features)
    for lvl in range(enc.levels):
        cell = enc.cell_sizes[lvl]
        g = [p[a] / cell for a in range(3)]
        base = [math.floor(v) for v in g]
        f = [g[a] - base[a] for a in range(3)]
        for k in range(enc.features):
            vals = []
            for c in range(8):
                corner = (base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1))
                vals.append(float(table[lvl, hash_slot(corner, enc.table_size), k]))
            out.append(trilerp(vals, f))
    return out


def mlp(params, widths, x, sigmoid_out=False):
    h = list(x)
    off = 0
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        w = params[off : off + n_in * n_out]
        off += n_in * n_out
        b = params[off : off + n_out]
        off += n_out
        nxt = []
        for j in range(n_out):
            acc = float(b[j])
            for k in range(n_in):
                acc += h[k] * float(w[k * n_out + j])
            nxt.append(acc)
        if i < len(widths) - 2:
            nxt = [max(v, 0.0) for v in nxt]
        h = nxt
    if sigmoid_out:
        h = [sigmoid(v) for v in h]
    return h


def predict_sdf(model, p):
    return coarse_sdf(model.octree, p) + mlp(model.geo_mlp.params, model.geo_mlp.widths, encode(model.geo_encoding, p))[0]


def predict_color(model, p):
    return mlp(model.color_mlp.params, model.color_mlp.widths, encode(model.color_encoding, p), True)


def render_ray(s, c, d, tr, first_surface=True):
    """Composite one ray's samples; returns (color, depth, weight_sum)."""
    n = len(s)
    limit = math.inf
    if first_surface:
        for j in range(n - 1):
            if (s[j] < 0 < s[j + 1]) or (s[j + 1] < 0 < s[j]):
                limit = d[j] + tr
                break
    w = []
    for j in range(n):
        w.append(sigmoid(s[j] / tr) * sigmoid(-s[j] / tr) if d[j] <= limit else 0.0)
    total = sum(w)
    color = [sum(w[j] * c[j][k] for j in range(n)) / total for k in range(3)]
    depth = sum(w[j] * d[j] for j in range(n)) / total
    return color, depth, total


def losses(rays, tr, alphas):
    """Loss terms from per-ray dicts holding s, c, d, gt_depth, gt_color.

    ``alphas`` = (sdf, fs, depth, rgb).
    """
    fs_terms, sdf_terms, d_terms, rgb_terms = [], [], [], []
    for r in rays:
        color, depth, total = render_ray(r["s"], r["c"], r["d"], tr)
        if total < 1e-12:
            continue
        rgb_terms.append(sum(abs(color[k] - r["gt_color"][k]) for k in range(3)) / 3)
        gt = r["gt_depth"]
        if gt <= 0:
            continue
        d_terms.append(abs(depth - gt))
        fs = [(s - tr) ** 2 for s, d in zip(r["s"], r["d"]) if d < gt - tr]
        band = [(s - (gt - d)) ** 2 for s, d in zip(r["s"], r["d"]) if abs(gt - d) <= tr]
        fs_terms.append(sum(fs) / len(fs) if fs else 0.0)
        sdf_terms.append(sum(band) / len(band) if band else 0.0)
    n_d = len(d_terms)
    l_fs = sum(fs_terms) / n_d if n_d else 0.0
    l_sdf = sum(sdf_terms) / n_d if n_d else 0.0
    l_d = sum(d_terms) / n_d if n_d else 0.0
    l_rgb = sum(rgb_terms) / len(rgb_terms) if rgb_terms else 0.0
    total = alphas[0] * l_sdf + alphas[1] * l_fs + alphas[2] * l_d + alphas[3] * l_rgb
    return {"fs": l_fs, "sdf": l_sdf, "depth": l_d, "rgb": l_rgb, "total": total}


def depth_l1(rendered, gt, valid):
    total, count = 0.0, 0
    for i in range(rendered.shape[0]):
        for j in range(rendered.shape[1]):
            if valid[i, j] and rendered[i, j] > 0 and gt[i, j] > 0:
                total += abs(float(rendered[i, j]) - float(gt[i, j]))
                count += 1
    return 100.0 * total / count


def psnr(rendered, gt, valid):
    total, count = 0.0, 0
    for i in range(rendered.shape[0]):
        for j in range(rendered.shape[1]):
            if valid[i, j]:
                for k in range(3):
                    total += (float(rendered[i, j, k]) - float(gt[i, j, k])) ** 2
                    count += 1
    return 10.0 * math.log10(count / total)


def ssim(a, b, size=11, sigma=1.5):
    """Direct-formula SSIM: explicit Gaussian-weighted statistics per window."""
    ga = a @ np.array([0.299, 0.587, 0.114])
    gb = b @ np.array([0.299, 0.587, 0.114])
    r = size // 2
    k = [math.exp(-((i - r) ** 2) / (2 * sigma**2)) for i in range(size)]
    s = sum(k)
    k = [v / s for v in k]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(r, ga.shape[0] - r):
        for j in range(r, ga.shape[1] - r):
            mx = my = xx = yy = xy = 0.0
            for u in range(size):
                for v in range(size):
                    w = k[u] * k[v]
                    x = float(ga[i - r + u, j - r + v])
                    y = float(gb[i - r + u, j - r + v])
                    mx += w * x
                    my += w * y
                    xx += w * x * x
                    yy += w * y * y
                    xy += w * x * y
            vx, vy, cxy = xx - mx * mx, yy - my * my, xy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)
