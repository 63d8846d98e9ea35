"""End-to-end frame encoding: modalities -> tokens -> backbone -> BEV."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import BackboneParams, VFEParams, backbone_forward, init_backbone, init_vfe, vfe
from .config import RunConfig
from .fusion import MemoryBank, concat_modalities, fuse_frame, lift_cameras
from .losses import HeadParams, init_heads
from .scene import SceneFrame
from .voxel import SparseFeatureSet, voxelize

RAW_CHANNELS = 4  # intensity + offset of the point mean from the voxel center


class MissingInputError(ValueError):
    """A modality requested for this run is absent from the frame."""


@dataclass
class Model:
    vfe: VFEParams
    backbone: BackboneParams
    heads: HeadParams


def init_model(cfg: RunConfig, seed: int | None = None) -> Model:
    """Weights depend on (channels, blocks, operator, precision, seed) only,
    never on which modalities are enabled."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    return Model(init_vfe(RAW_CHANNELS, cfg.channels, rng, dt),
                 init_backbone(cfg.backbone, rng, dt),
                 init_heads(cfg.channels, rng, dt))


def save_model(model: Model, path) -> None:
    arrays = {name: ad.value(leaf) for name, leaf in ad.named_leaves(model)}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(cfg: RunConfig, path) -> Model:
    template = init_model(cfg)
    with np.load(path) as data:
        stored = dict(data)
    names = [n for n, _ in ad.named_leaves(template)]
    if set(names) != set(stored):
        raise ValueError("checkpoint does not match the configured model")
    it = iter(names)
    return ad.tree_map(lambda leaf: stored[next(it)].astype(cfg.dtype), template)


def _available(cfg: RunConfig, availability: str | None) -> tuple[bool, bool, bool]:
    avail = cfg.regime if availability is None else availability.upper()
    if set(avail) - set("LCT"):
        raise ValueError(f"bad availability {availability!r}")
    return cfg.lidar and "L" in avail, cfg.camera and "C" in avail, cfg.temporal and "T" in avail


def encode_tokens(frame: SceneFrame, model: Model, cfg: RunConfig, bank: MemoryBank | None,
                  availability: str | None = None) -> SparseFeatureSet:
    """Voxel tokens entering the backbone.

    The configured modality paths always run.  An input that is unavailable
    (per ``availability``, e.g. ``"L"``) enters as an empty set, and an
    unavailable history as an empty bank, both of which are exact identities
    of the merges.
    """
    grid, dt, C = cfg.grid, cfg.dtype, cfg.channels
    use_l, use_c, use_t = _available(cfg, availability)

    vl = vc = None
    if cfg.lidar:
        vl = SparseFeatureSet.empty(grid, C, dt)
        if use_l:
            raw = voxelize(frame.points, grid)
            vl = vfe(raw.with_features(raw.values.astype(dt)), model.vfe)
    if cfg.camera:
        vc = SparseFeatureSet.empty(grid, C, dt)
        if use_c:
            if not frame.cameras:
                raise MissingInputError("camera input requested but the frame has no cameras")
            lifted = lift_cameras(frame.cameras, grid, cfg.top_k)
            vc = lifted.with_features(lifted.values.astype(dt))
    if vl is not None and vc is not None:
        tokens = concat_modalities(vl, vc)
    else:
        tokens = vl if vl is not None else vc

    if cfg.temporal:
        if not use_t or bank is None:
            bank = MemoryBank(cfg.memory)
        tokens = fuse_frame(tokens, bank, frame.pose)
    return tokens


@dataclass
class FrameResult:
    bev: object
    tokens: int
    trace: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_frame(frame: SceneFrame, model: Model, cfg: RunConfig, bank: MemoryBank | None,
              availability: str | None = None) -> FrameResult:
    tokens = encode_tokens(frame, model, cfg, bank, availability)
    trace: list = []
    bev = backbone_forward(tokens, model.backbone, cfg.backbone, trace)
    return FrameResult(bev, len(tokens), trace, check_invariants(trace, ad.value(bev), cfg))


def run_sequence(frames, model: Model, cfg: RunConfig, availability: str | None = None) -> list[FrameResult]:
    """Stream frames in order through one memory bank."""
    bank = MemoryBank(cfg.memory)
    return [run_frame(f, model, cfg, bank, availability) for f in frames]


def check_invariants(trace: list, bev: np.ndarray, cfg: RunConfig) -> list[str]:
    """Structural checks on a backbone trace; returns failure messages."""
    failures = []
    for st in trace:
        if not st["canonical"]:
            failures.append(f"{st['stage']}: coordinates not unique and canonical")
        if not st["in_extent"]:
            failures.append(f"{st['stage']}: coordinates outside extent")
    prev = None
    block_in = None
    for st in trace:
        name, n = st["stage"], st["count"]
        if name.startswith("generate") and prev is not None and n < prev:
            failures.append(f"{name}: generation removed voxels ({prev} -> {n})")
        if name.startswith("height_merge") and prev is not None and n > prev:
            failures.append(f"{name}: merge increased voxels ({prev} -> {n})")
        if name == "block_in":
            block_in = n
        if name in ("half", "quarter") and prev is not None and n > prev:
            failures.append(f"{name}: merge increased voxels ({prev} -> {n})")
        if name == "block_out" and n != block_in:
            failures.append(f"block_out: {n} voxels, block input had {block_in}")
        prev = n
    H, W, _ = cfg.grid.extent
    if bev.shape != (H, W, cfg.channels):
        failures.append(f"BEV shape {bev.shape}, expected {(H, W, cfg.channels)}")
    if not np.all(np.isfinite(bev)):
        failures.append("BEV has non-finite values")
    return failures
