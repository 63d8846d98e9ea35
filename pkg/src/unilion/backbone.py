"""Hierarchical linear-group-RNN backbone over sparse voxels.

Wiring of one block (resolutions 1x, 1/2x, 1/4x)::

    L1 -> D1 -> merge -> L2 -> D2 -> merge -> L3
                          |                   |
                          +------ + <- expand-+
                                  |
                                  L4 -> expand -> + (skip from L1) -> D3

where L is a layer (two group scans over X- and Y-major partitions) and D a
spatial descriptor (submanifold conv, LayerNorm, GELU).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .linrnn import SelectiveScanParams, WKVScanParams, group_scan
from .partition import AxisOrder, WindowShape, partition
from .sparse_ops import (ConvKernel3, gelu, layer_norm, neighbor_table, submanifold_conv3, voxel_expand,
                         voxel_merge)
from .voxel import SparseFeatureSet, canonical_order

DIFFUSION_OFFSETS = ((-1, -1, 0), (1, 1, 0), (1, -1, 0), (-1, 1, 0))
OPERATORS = ("selective", "wkv")


@dataclass(frozen=True)
class LayerConfig:
    window: WindowShape
    group_size: int
    channels: int
    operator: str = "selective"
    chunk: int | None = 64

    def __post_init__(self):
        object.__setattr__(self, "window", WindowShape.of(self.window))
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")
        if self.operator not in OPERATORS:
            raise ValueError(f"operator must be one of {OPERATORS}, got {self.operator!r}")


@dataclass(frozen=True)
class BlockConfig:
    layers: tuple[LayerConfig, LayerConfig, LayerConfig, LayerConfig]
    merge_strides: tuple = ((2, 2, 2), (2, 2, 2))

    def __post_init__(self):
        if len(self.layers) != 4:
            raise ValueError("a block has exactly four layers")
        if len(self.merge_strides) != 2:
            raise ValueError("a block has exactly two merge stages")

    @property
    def channels(self) -> int:
        return self.layers[0].channels


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[BlockConfig, ...]
    height_stride: tuple[int, int, int] = (1, 1, 2)
    fg_ratio: float = 0.2
    offsets: tuple = DIFFUSION_OFFSETS

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError("need at least one block")
        if not 0.0 < self.fg_ratio <= 1.0:
            raise ValueError(f"foreground ratio must lie in (0, 1], got {self.fg_ratio}")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def channels(self) -> int:
        return self.blocks[0].channels

    @classmethod
    def build(cls, channels: int, windows, group_sizes, operator: str = "selective",
              chunk: int | None = 64, fg_ratio: float = 0.2,
              height_stride=(1, 1, 2)) -> "BackboneConfig":
        """One block per (window, group size) pair, all four layers alike."""
        if len(windows) != len(group_sizes):
            raise ValueError("need one group size per block window")
        blocks = []
        for win, G in zip(windows, group_sizes):
            layer = LayerConfig(WindowShape.of(win), int(G), channels, operator, chunk)
            blocks.append(BlockConfig((layer,) * 4))
        return cls(tuple(blocks), tuple(height_stride), fg_ratio)

    @classmethod
    def reference(cls, channels: int, operator: str = "selective", chunk: int | None = 64) -> "BackboneConfig":
        """Four blocks with 13x13 windows spanning the shrinking height."""
        return cls.build(channels, [(13, 13, 32), (13, 13, 16), (13, 13, 8), (13, 13, 4)],
                         [4096, 2048, 1024, 512], operator, chunk, 0.2)


# --------------------------------------------------------------- params


@dataclass
class VFEParams:
    W1: Any
    b1: Any
    W2: Any
    b2: Any


@dataclass
class LayerParams:
    x_gamma: Any
    x_beta: Any
    scan_x: Any
    y_gamma: Any
    y_beta: Any
    scan_y: Any


@dataclass
class DescriptorParams:
    kernel: ConvKernel3
    gamma: Any
    beta: Any


@dataclass
class BlockParams:
    layers: list[LayerParams]
    descriptors: list[DescriptorParams]


@dataclass
class ScorerParams:
    weight: Any  # (1, C)
    bias: Any  # (1,)


@dataclass
class BackboneParams:
    scorers: list[ScorerParams]
    blocks: list[BlockParams] = field(default_factory=list)


def init_vfe(raw_channels: int, channels: int, rng: np.random.Generator, dtype=np.float64) -> VFEParams:
    s1, s2 = 1.0 / np.sqrt(raw_channels), 1.0 / np.sqrt(channels)
    return VFEParams((rng.standard_normal((channels, raw_channels)) * s1).astype(dtype),
                     np.zeros(channels, dtype),
                     (rng.standard_normal((channels, channels)) * s2).astype(dtype),
                     np.zeros(channels, dtype))


def _init_scan(operator: str, C: int, rng, dtype):
    if operator == "selective":
        return SelectiveScanParams.random(C, rng, dtype=dtype)
    return WKVScanParams.random(C, rng, dtype=dtype)


def init_layer(cfg: LayerConfig, rng: np.random.Generator, dtype=np.float64) -> LayerParams:
    C = cfg.channels
    return LayerParams(np.ones(C, dtype), np.zeros(C, dtype), _init_scan(cfg.operator, C, rng, dtype),
                       np.ones(C, dtype), np.zeros(C, dtype), _init_scan(cfg.operator, C, rng, dtype))


def init_descriptor(C: int, rng: np.random.Generator, dtype=np.float64) -> DescriptorParams:
    return DescriptorParams(ConvKernel3.random(C, C, rng, dtype), np.ones(C, dtype), np.zeros(C, dtype))


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64) -> BackboneParams:
    C = cfg.channels
    scorers, blocks = [], []
    for bcfg in cfg.blocks:
        scorers.append(ScorerParams((rng.standard_normal((1, C)) / np.sqrt(C)).astype(dtype),
                                    np.zeros(1, dtype)))
        blocks.append(BlockParams([init_layer(lc, rng, dtype) for lc in bcfg.layers],
                                  [init_descriptor(C, rng, dtype) for _ in range(3)]))
    return BackboneParams(scorers, blocks)


# ------------------------------------------------------------ operations


def vfe(fs: SparseFeatureSet, p: VFEParams) -> SparseFeatureSet:
    """Raw voxel attributes -> C channels: affine, GELU, affine."""
    if fs.channels != ad.value(p.W1).shape[1]:
        raise ValueError(f"VFE expects {ad.value(p.W1).shape[1]} raw channels, got {fs.channels}")
    if len(fs) == 0:
        return SparseFeatureSet.empty(fs.grid, ad.value(p.W2).shape[0], fs.values.dtype)
    h = ad.gelu(ad.affine(fs.features, p.W1, p.b1))
    return fs.with_features(ad.affine(h, p.W2, p.b2))


def unilion_layer(fs: SparseFeatureSet, p: LayerParams, cfg: LayerConfig) -> SparseFeatureSet:
    """Pre-norm residual pair of group scans over X- then Y-major partitions."""
    if fs.channels != cfg.channels:
        raise ValueError(f"layer expects {cfg.channels} channels, got {fs.channels}")
    if len(fs) == 0:
        return fs
    x = fs.features
    for order, gamma, beta, op in ((AxisOrder.XMajor, p.x_gamma, p.x_beta, p.scan_x),
                                   (AxisOrder.YMajor, p.y_gamma, p.y_beta, p.scan_y)):
        layout = partition(fs, cfg.window, order, cfg.group_size)
        normed = fs.with_features(ad.layer_norm(x, gamma, beta))
        x = x + group_scan(normed, layout, op, cfg.chunk).features
    return fs.with_features(x)


def descriptor(fs: SparseFeatureSet, p: DescriptorParams, table: np.ndarray | None = None) -> SparseFeatureSet:
    return gelu(layer_norm(submanifold_conv3(fs, p.kernel, table), p.gamma, p.beta))


def unilion_block(fs: SparseFeatureSet, p: BlockParams, cfg: BlockConfig,
                  trace: list | None = None) -> SparseFeatureSet:
    if len(fs) == 0:
        return fs
    L1, L2, L3, L4 = p.layers
    D1, D2, D3 = p.descriptors
    c1, c2, c3, c4 = cfg.layers
    a1 = unilion_layer(fs, L1, c1)
    table = neighbor_table(a1.coords)  # D1 and D3 share the full-resolution pattern
    m1, map1 = voxel_merge(descriptor(a1, D1, table), cfg.merge_strides[0])
    a2 = unilion_layer(m1, L2, c2)
    m2, map2 = voxel_merge(descriptor(a2, D2), cfg.merge_strides[1])
    a3 = unilion_layer(m2, L3, c3)
    up2 = voxel_expand(a3, map2)
    a4 = unilion_layer(a2.with_features(up2.features + a2.features), L4, c4)
    up1 = voxel_expand(a4, map1)
    out = descriptor(a1.with_features(up1.features + a1.features), D3, table)
    if trace is not None:
        for name, s in (("block_in", fs), ("half", m1), ("quarter", m2), ("block_out", out)):
            trace.append(_stage(name, s))
    return out


def foreground_count(ratio: float, n: int) -> int:
    # round first so that e.g. 0.7 * 10 = 7.000000000000001 still gives 7
    return min(n, math.ceil(round(ratio * n, 9)))


def select_foreground(fs: SparseFeatureSet, scorer: ScorerParams, ratio: float) -> np.ndarray:
    """Row indices (ascending) of the top ceil(ratio * L) rows by linear score.

    Ties go to the lower canonical index.  Selection is a constant with
    respect to differentiation.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    L = len(fs)
    if L == 0:
        return np.zeros(0, dtype=np.int64)
    scores = ad.value(ad.affine(fs.values, ad.value(scorer.weight), ad.value(scorer.bias)))[:, 0]
    k = foreground_count(ratio, L)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def diffusion_candidates(coords: np.ndarray, offsets=DIFFUSION_OFFSETS) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    off = np.asarray(offsets, dtype=np.int64)
    cand = coords[:, None, :].repeat(len(off), axis=1)
    cand[:, :, 1:] += off[None]
    return cand.reshape(-1, 4)


def voxel_generate(fs: SparseFeatureSet, pm, offsets=DIFFUSION_OFFSETS,
                   return_mask: bool = False):
    """Append zero-feature voxels diffused from ``pm`` at the given offsets.

    Candidates outside the extent, on already occupied cells, or repeated
    are dropped.  The result is canonical; with ``return_mask`` a boolean
    array flags the generated rows.
    """
    pm = np.asarray(pm, dtype=np.int64).reshape(-1, 4)
    cand = diffusion_candidates(pm, offsets)
    extent = np.asarray(fs.grid.extent)
    inside = np.all((cand[:, 1:] >= 0) & (cand[:, 1:] < extent), axis=1)
    cand = cand[inside]
    if len(cand):
        cand = np.unique(cand, axis=0)
        existing = {tuple(c) for c in fs.coords.tolist()}
        keep = np.array([tuple(c) not in existing for c in cand.tolist()], dtype=bool)
        cand = cand[keep]
    if len(cand) == 0:
        return (fs, np.zeros(len(fs), dtype=bool)) if return_mask else fs
    zeros = np.zeros((len(cand), fs.channels), dtype=fs.values.dtype)
    coords = np.concatenate([fs.coords, cand])
    order = canonical_order(coords)
    feats = ad.gather_rows(ad.concat_rows([fs.features, zeros]), order)
    out = SparseFeatureSet(coords[order], feats, fs.grid)
    if return_mask:
        generated = np.r_[np.zeros(len(fs), bool), np.ones(len(cand), bool)][order]
        return out, generated
    return out


def bev_flatten(fs: SparseFeatureSet):
    """Sum features over height into a dense (H, W, C) bird's-eye grid."""
    H, W, _ = fs.grid.extent
    if len(fs) and np.any(fs.coords[:, 0] != 0):
        raise ValueError("bev_flatten handles a single scene (batch index 0)")
    cell = fs.coords[:, 1] * W + fs.coords[:, 2]
    flat = ad.segment_sum(fs.features, cell, H * W)
    return ad.reshape(flat, (H, W, fs.channels))


def _stage(name: str, fs: SparseFeatureSet) -> dict:
    return {"stage": name, "count": len(fs), "canonical": fs.is_canonical(),
            "in_extent": fs.in_extent(), "extent": list(fs.grid.extent)}


def backbone_forward(fs: SparseFeatureSet, params: BackboneParams, cfg: BackboneConfig,
                     trace: list | None = None):
    """Blocks with voxel generation before and height merging after each; returns the BEV."""
    if fs.channels != cfg.channels:
        raise ValueError(f"backbone expects {cfg.channels} channels, got {fs.channels}")
    x = fs
    if trace is not None:
        trace.append(_stage("input", x))
    for i, bcfg in enumerate(cfg.blocks):
        pm = select_foreground(x, params.scorers[i], cfg.fg_ratio)
        x = voxel_generate(x, x.coords[pm], cfg.offsets)
        if trace is not None:
            trace.append(_stage(f"generate[{i}]", x))
        x = unilion_block(x, params.blocks[i], bcfg, trace=trace)
        x, _ = voxel_merge(x, cfg.height_stride)
        if trace is not None:
            trace.append(_stage(f"height_merge[{i}]", x))
    return bev_flatten(x)
