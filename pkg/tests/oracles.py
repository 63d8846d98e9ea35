"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def selective_loop(x, Wg, bg, Wu, bu, Wo, bo, mask=None):
    """Per-step loop over one (T, C) sequence."""
    T, C = x.shape
    mask = np.ones(T, bool) if mask is None else mask
    h = np.zeros(C)
    y = np.zeros((T, C))
    for t in range(T):
        if not mask[t]:
            continue
        g = sigmoid(Wg @ x[t] + bg)
        u = Wu @ x[t] + bu
        h = g * h + (1.0 - g) * u
        o = Wo @ x[t] + bo
        y[t] = h * o * sigmoid(o)
    return y


def wkv_quadratic(x, Wr, Wk, Wv, w, u, mask=None, eps=1e-8):
    """Attention form: every output is an explicit weighted average over its past."""
    T, C = x.shape
    mask = np.ones(T, bool) if mask is None else mask
    idx = np.flatnonzero(mask)
    y = np.zeros((T, C))
    r, k, v = x @ Wr.T, x @ Wk.T, x @ Wv.T
    for n, t in enumerate(idx):
        past = idx[:n]
        # the i-th unmasked predecessor has decayed (n - i) times by step t
        logits = [-(n - i) * w + k[j] for i, j in enumerate(past)] + [u + k[t]]
        vals = [v[j] for j in past] + [v[t]]
        logits, vals = np.array(logits), np.array(vals)
        m = logits.max(axis=0)
        wts = np.exp(logits - m)
        y[t] = sigmoid(r[t]) * (wts * vals).sum(axis=0) / (wts.sum(axis=0) + eps * np.exp(-m))
    return y


def dense_conv_masked(coords, feats, weights, bias):
    """Scatter to a dense volume, correlate with the 3x3x3 kernel, read back
    at the occupied sites."""
    coords = np.asarray(coords)
    lo = coords[:, 1:].min(axis=0) - 1
    dims = coords[:, 1:].max(axis=0) - lo + 2
    cin = feats.shape[1]
    vol = np.zeros(tuple(dims) + (cin,))
    for (b, x, y, z), f in zip(coords, feats):
        vol[x - lo[0], y - lo[1], z - lo[2]] = f
    out = np.zeros((len(coords), weights.shape[-1]))
    for n, (b, x, y, z) in enumerate(coords):
        cx, cy, cz = x - lo[0], y - lo[1], z - lo[2]
        patch = vol[cx - 1:cx + 2, cy - 1:cy + 2, cz - 1:cz + 2]  # (3, 3, 3, cin)
        out[n] = np.einsum("abci,abcio->o", patch, weights) + bias
    return out


def hash_merge(coords, feats, stride):
    """Dict-of-lists grouping by coordinate quotient; mean per group, sorted (b, z, y, x)."""
    groups = defaultdict(list)
    for c, f in zip(map(tuple, np.asarray(coords).tolist()), feats):
        key = (c[0], c[1] // stride[0], c[2] // stride[1], c[3] // stride[2])
        groups[key].append(f)
    keys = sorted(groups, key=lambda k: (k[0], k[3], k[2], k[1]))
    return (np.array(keys, dtype=np.int64).reshape(-1, 4),
            np.array([np.mean(groups[k], axis=0) for k in keys]).reshape(len(keys), -1),
            {k: len(groups[k]) for k in keys})


def generation_oracle(existing, pm, extent, offsets=((-1, -1, 0), (1, 1, 0), (1, -1, 0), (-1, 1, 0))):
    """Set of coordinates voxel generation must add."""
    have = set(map(tuple, np.asarray(existing).tolist()))
    new = set()
    for b, x, y, z in np.asarray(pm).tolist():
        for dx, dy, dz in offsets:
            c = (b, x + dx, y + dy, z + dz)
            if all(0 <= c[i + 1] < extent[i] for i in range(3)) and c not in have:
                new.add(c)
    return new


def partition_tuple_order(coords, ws, order, extent):
    """Sort by an explicit (batch, window tuple, offset tuple) key."""
    sx, sy, sz = ws

    def key(i):
        b, x, y, z = coords[i]
        wx, wy, wz = x // sx, y // sy, z // sz
        ox, oy, oz = x % sx, y % sy, z % sz
        if order == "x":
            return (b, wz, wy, wx, ox, oy, oz)
        return (b, wz, wx, wy, oy, ox, oz)

    return sorted(range(len(coords)), key=key)


def voxelize_hash(points, origin, size, extent):
    cells = defaultdict(list)
    for p in points:
        idx = tuple(int(math.floor((p[i] - origin[i]) / size[i])) for i in range(3))
        if all(0 <= idx[i] < extent[i] for i in range(3)):
            cells[idx].append(p)
    return cells


def lift_loop(raster, cam, grid, K):
    """Per pixel, per candidate unprojection into a {voxel: summed feature} dict."""
    kinv = np.linalg.inv(cam.intrinsics)
    h, w = raster.scores.shape[:2]
    centers = 0.5 * (raster.bin_edges[:-1] + raster.bin_edges[1:])
    acc = {}
    for v in range(h):
        for u in range(w):
            s = raster.scores[v, u]
            top = sorted(range(len(s)), key=lambda j: (-s[j], j))[:K]
            e = np.exp(s[top] - max(s[top]))
            conf = e / e.sum()
            ray = kinv @ np.array([u + 0.5, v + 0.5, 1.0])
            for j, c in zip(top, conf):
                pc = ray * centers[j]
                pe = cam.extrinsics[:3, :3] @ pc + cam.extrinsics[:3, 3]
                idx = tuple(int(math.floor((pe[i] - grid.origin[i]) / grid.voxel_size[i])) for i in range(3))
                if all(0 <= idx[i] < grid.extent[i] for i in range(3)):
                    acc[idx] = acc.get(idx, 0.0) + raster.features[v, u] * c
    return acc


def align_loop(coords, feats, grid, pose_prev, pose_cur):
    """Transform each voxel center separately and average collisions."""
    rel = np.linalg.inv(pose_cur) @ pose_prev
    groups = defaultdict(list)
    for (b, x, y, z), f in zip(np.asarray(coords).tolist(), feats):
        c = np.array(grid.origin) + (np.array([x, y, z]) + 0.5) * np.array(grid.voxel_size)
        m = rel[:3, :3] @ c + rel[:3, 3]
        idx = tuple(int(math.floor((m[i] - grid.origin[i]) / grid.voxel_size[i])) for i in range(3))
        if all(0 <= idx[i] < grid.extent[i] for i in range(3)):
            groups[(b,) + idx].append(f)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def stencil_offsets():
    return list(itertools.product((-1, 0, 1), repeat=3))
