"""Toy multi-task training over a short synthetic sequence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import backbone_forward
from .config import RunConfig
from .fusion import MemoryBank
from .losses import toy_heads, total_loss
from .pipeline import Model, encode_tokens, init_model
from .scene import SceneFrame, toy_targets


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params: list[ad.Tensor], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def sequence_loss(frames, targets, model: Model, cfg: RunConfig, breakdown: dict | None = None):
    """Mean total loss over the frames, streamed through a fresh memory bank."""
    bank = MemoryBank(cfg.memory)
    totals, parts = [], []
    for frame, tg in zip(frames, targets):
        tokens = encode_tokens(frame, model, cfg, bank)
        bev = backbone_forward(tokens, model.backbone, cfg.backbone)
        info: dict = {}
        totals.append(total_loss(toy_heads(bev, tg, model.heads, cfg.tasks), cfg.weights, info))
        parts.append(info)
    loss = totals[0]
    for t in totals[1:]:
        loss = ad.add(loss, t)
    loss = ad.mul(loss, 1.0 / len(totals))
    if breakdown is not None:
        for key in parts[0]:
            breakdown[key] = float(np.mean([p[key] for p in parts]))
        breakdown["total"] = float(ad.value(loss))
    return loss


@dataclass
class TrainResult:
    records: list[dict]
    model: Model

    @property
    def curve(self) -> list[float]:
        return [r["total"] for r in self.records]

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def train(cfg: RunConfig, frames: list[SceneFrame], steps: int | None = None, lr: float | None = None,
          model: Model | None = None, on_step=None) -> TrainResult:
    """Adam on the mean per-frame total loss; record ``i`` is the loss before update ``i``."""
    if not frames:
        raise ValueError("training needs at least one frame")
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    targets = [toy_targets(f, cfg.grid, cfg.scene.dt) for f in frames]
    params = ad.trainable(model if model is not None else init_model(cfg))
    leaves = [leaf for _, leaf in ad.named_leaves(params)]
    opt = Adam(lr)
    records = []
    for step in range(steps):
        info: dict = {"step": step}
        with ad.Tape() as tape:
            loss = sequence_loss(frames, targets, params, cfg, info)
        grads = ad.backward(tape, loss, leaves)
        records.append(info)
        if on_step is not None:
            on_step(info)
        opt.update(leaves, grads)
    return TrainResult(records, ad.detached(params))
