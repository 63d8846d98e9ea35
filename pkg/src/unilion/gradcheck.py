"""Finite-difference checks of every differentiable primitive and of a full block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import linrnn
from .backbone import (BackboneConfig, LayerConfig, backbone_forward, init_backbone, init_layer,
                       init_vfe, unilion_layer, vfe)
from .losses import bce_with_logits, focal_loss, smooth_l1, softmax_cross_entropy
from .sparse_ops import ConvKernel3, neighbor_table, sparse_conv, voxel_expand, voxel_merge
from .voxel import SparseFeatureSet, VoxelGrid, canonical_order

OP_TOL = 1e-6
E2E_TOL = 1e-4


def random_sparse(rng: np.random.Generator, n: int, extent=(6, 6, 6), channels: int = 3,
                  grid_origin=(0.0, 0.0, 0.0)) -> SparseFeatureSet:
    """Canonical set of ``n`` distinct random voxels in batch 0."""
    total = int(np.prod(extent))
    flat = rng.choice(total, size=min(n, total), replace=False)
    xyz = np.column_stack(np.unravel_index(flat, extent))
    coords = np.column_stack([np.zeros(len(xyz), np.int64), xyz])
    coords = coords[canonical_order(coords)]
    grid = VoxelGrid(grid_origin, (1.0, 1.0, 1.0), extent)
    return SparseFeatureSet(coords, rng.standard_normal((len(coords), channels)), grid)


def _weighted_sum(out, weights: np.ndarray):
    return ad.sum(ad.mul(out, weights))


def _case(name: str, build: Callable[[np.random.Generator], tuple], rng) -> ad.GradientReport:
    """``build`` returns (params, forward-producing-output); loss = <out, R>."""
    params, fwd = build(rng)
    probe = ad.value(fwd())
    R = rng.standard_normal(np.shape(probe))
    return ad.fd_check(lambda: _weighted_sum(fwd(), R), params,
                       names=[f"{name}.{p.name or i}" for i, p in enumerate(params)], label=name)


def _T(rng, *shape, positive=False, name=None):
    a = rng.standard_normal(shape)
    if positive:
        a = np.abs(a) + 0.5
    return ad.Tensor(a, requires_grad=True, name=name)


def _op_builders() -> dict[str, Callable]:
    def binary(fn, positive_y=False):
        def build(rng):
            x, y = _T(rng, 4, 3, name="x"), _T(rng, 4, 3, positive=positive_y, name="y")
            return [x, y], lambda: fn(x, y)
        return build

    def unary(fn, positive=False):
        def build(rng):
            x = _T(rng, 5, 3, positive=positive, name="x")
            return [x], lambda: fn(x)
        return build

    def affine(rng):
        x, W, b = _T(rng, 5, 3, name="x"), _T(rng, 4, 3, name="W"), _T(rng, 4, name="b")
        return [x, W, b], lambda: ad.affine(x, W, b)

    def layer_norm(rng):
        x, g, b = _T(rng, 5, 4, name="x"), _T(rng, 4, name="gamma"), _T(rng, 4, name="beta")
        return [x, g, b], lambda: ad.layer_norm(x, g, b)

    def reductions(rng):
        x = _T(rng, 4, 3, name="x")
        return [x], lambda: ad.add(ad.sum(x, axis=0), ad.mean(x, axis=0))

    def gather(rng):
        x = _T(rng, 5, 2, name="x")
        idx = np.array([[3, 0, -1], [3, 4, 1]])
        return [x], lambda: ad.gather_rows(x, idx)

    def segments(rng):
        x = _T(rng, 6, 2, name="x")
        seg = np.array([0, 2, 2, 1, 0, 2])
        return [x], lambda: ad.concat_rows([ad.segment_sum(x, seg, 4), ad.segment_mean(x, seg, 4)])

    def where(rng):
        x, y = _T(rng, 4, 3, name="x"), _T(rng, 4, 3, name="y")
        cond = rng.random((4, 3)) < 0.5
        return [x, y], lambda: ad.where(cond, x, y)

    def reshape(rng):
        x = _T(rng, 4, 3, name="x")
        return [x], lambda: ad.reshape(x, (2, 6))

    def scan_case(chunk):
        def build(rng):
            a = ad.Tensor(rng.uniform(0.2, 0.95, (2, 9, 3)), requires_grad=True, name="a")
            b = _T(rng, 2, 9, 3, name="b")
            return [a, b], lambda: linrnn.linear_scan(a, b, chunk)
        return build

    def selective(chunk):
        def build(rng):
            x = _T(rng, 2, 7, 3, name="x")
            p = ad.trainable(linrnn.SelectiveScanParams.random(3, rng))
            mask = np.ones((2, 7), bool)
            mask[1, 5:] = False
            params = [x] + [leaf for _, leaf in ad.named_leaves(p)]
            if chunk is None:
                return params, lambda: linrnn.selective_scan_seq(x, p, mask)
            return params, lambda: linrnn.selective_scan_chunked(x, p, mask, chunk)
        return build

    def selective_t3(rng):
        x = _T(rng, 3, 2, name="x")
        p = ad.trainable(linrnn.SelectiveScanParams.random(2, rng))
        return [x] + [leaf for _, leaf in ad.named_leaves(p)], lambda: linrnn.selective_scan_seq(x, p)

    def wkv(rng):
        x = _T(rng, 2, 8, 3, name="x")
        p = ad.trainable(linrnn.WKVScanParams.random(3, rng))
        mask = np.ones((2, 8), bool)
        mask[0, 6:] = False
        return [x] + [leaf for _, leaf in ad.named_leaves(p)], lambda: linrnn.wkv_scan(x, p, mask)

    def conv(rng):
        fs = random_sparse(rng, 30, (4, 4, 4), 2)
        x = ad.Tensor(fs.values, requires_grad=True, name="x")
        k = ConvKernel3.random(2, 3, rng)
        W = ad.Tensor(k.weights, requires_grad=True, name="W")
        b = ad.Tensor(k.bias, requires_grad=True, name="b")
        table = neighbor_table(fs.coords)
        return [x, W, b], lambda: sparse_conv(x, W, b, table)

    def merge_expand(rng):
        fs = random_sparse(rng, 40, (6, 6, 6), 2)
        x = ad.Tensor(fs.values, requires_grad=True, name="x")

        def fwd():
            m, mp = voxel_merge(fs.with_features(x), (2, 2, 2))
            e = voxel_expand(m.with_features(ad.mul(m.features, m.features)), mp)
            return ad.concat_rows([m.features, e.features])
        return [x], fwd

    def vfe_case(rng):
        fs = random_sparse(rng, 12, (4, 4, 4), 4)
        p = ad.trainable(init_vfe(4, 3, rng))
        x = ad.Tensor(fs.values, requires_grad=True, name="x")
        return [x] + [l for _, l in ad.named_leaves(p)], lambda: vfe(fs.with_features(x), p).features

    def layer_case(operator):
        def build(rng):
            fs = random_sparse(rng, 25, (5, 5, 4), 3)
            cfg = LayerConfig((3, 3, 2), 6, 3, operator, 4)
            p = ad.trainable(init_layer(cfg, rng))
            x = ad.Tensor(fs.values, requires_grad=True, name="x")
            return ([x] + [l for _, l in ad.named_leaves(p)],
                    lambda: unilion_layer(fs.with_features(x), p, cfg).features)
        return build

    def focal(rng):
        x = _T(rng, 12, name="logits")
        t = np.clip(rng.random(12), 0, 0.9)
        t[[2, 7]] = 1.0
        return [x], lambda: focal_loss(x, t)

    def bce(rng):
        x = _T(rng, 10, name="logits")
        t = (rng.random(10) < 0.5).astype(float)
        return [x], lambda: bce_with_logits(x, t)

    def ce(rng):
        x = _T(rng, 6, 3, name="logits")
        labels = np.array([0, 1, 2, 2, 1, 0])
        return [x], lambda: softmax_cross_entropy(x, labels)

    def huber(rng):
        x = _T(rng, 8, name="pred")
        t = ad.value(x) + np.array([0.3, -0.2, 2.0, -3.0, 0.5, -0.7, 1.6, -0.1])
        return [x], lambda: smooth_l1(x, t)

    return {
        "add": binary(ad.add), "sub": binary(ad.sub), "mul": binary(ad.mul),
        "div": binary(ad.div, positive_y=True), "where": where,
        "exp": unary(ad.exp), "log": unary(ad.log, positive=True),
        "sigmoid": unary(ad.sigmoid), "silu": unary(ad.silu), "gelu": unary(ad.gelu),
        "affine": affine, "layer_norm": layer_norm, "sum_mean": reductions, "reshape": reshape,
        "gather_rows": gather, "segment_sum_mean": segments,
        "linear_scan_seq": scan_case(None), "linear_scan_chunked": scan_case(4),
        "selective_scan_seq": selective(None), "selective_scan_chunked": selective(3),
        "selective_scan_T3": selective_t3, "wkv_scan": wkv,
        "submanifold_conv": conv, "merge_expand": merge_expand, "vfe": vfe_case,
        "layer_selective": layer_case("selective"), "layer_wkv": layer_case("wkv"),
        "focal_loss": focal, "bce": bce, "softmax_ce": ce, "smooth_l1": huber,
    }


def op_suite(seed: int = 0, only=None) -> list[ad.GradientReport]:
    """Coordinate-wise central differences for each primitive on a small case."""
    reports = []
    for i, (name, build) in enumerate(_op_builders().items()):
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        reports.append(_case(name, build, rng))
    return reports


def end_to_end(seed: int = 0, directions: int = 64, operator: str = "selective") -> ad.GradientReport:
    """One-block backbone to BEV to a random linear loss, random-direction FD."""
    rng = np.random.default_rng(seed)
    fs = random_sparse(rng, 48, (8, 8, 8), 4)
    cfg = BackboneConfig.build(4, [(4, 4, 4)], [16], operator, chunk=4)
    params = ad.trainable(init_backbone(cfg, rng))
    x = ad.Tensor(fs.values, requires_grad=True, name="features")
    R = rng.standard_normal((8, 8, 4))

    def fwd():
        return _weighted_sum(backbone_forward(fs.with_features(x), params, cfg), R)

    leaves = [x] + [leaf for _, leaf in ad.named_leaves(params)]
    report = ad.fd_check(fwd, leaves, directions=directions, seed=seed, label=f"one_block_{operator}")
    report.extra["parameters"] = int(sum(l.data.size for l in leaves))
    return report
