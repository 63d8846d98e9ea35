"""Dynamic multi-task loss balancing and the toy BEV heads that feed it."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np
from scipy import special

from . import autodiff as ad

TASK_EPS = 1e-5
TASKS = ("det", "map", "occ", "mot", "plan")
MAP_CLASSES = 3


@dataclass
class TaskLosses:
    """Per-task scalar losses; ``None`` marks an absent task."""

    det: Any = None
    map: Any = None
    occ: Any = None
    mot: Any = None
    plan: Any = None

    def __post_init__(self):
        for name, v in self.items():
            x = float(ad.value(v))
            if not np.isfinite(x) or x < 0:
                raise ValueError(f"loss {name} must be finite and non-negative, got {x}")

    def present(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) is not None for f in fields(self)}

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def values(self) -> dict[str, float]:
        return {k: float(ad.value(v)) for k, v in self.items()}


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 0.5
    l3: float = 1.0
    l4: float = 1.0
    l5: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3, self.l4, self.l5) < 0:
            raise ValueError("loss weights must be non-negative")


def dynamic_weight(l_det, l_task) -> float:
    """l_det / (l_task + 1e-5) on the current values; carries no gradient."""
    l_det, l_task = float(ad.value(l_det)), float(ad.value(l_task))
    if l_task < 0:
        raise ValueError("task loss must be non-negative")
    return l_det / (l_task + TASK_EPS)


def total_loss(losses: TaskLosses, weights: LossWeights = LossWeights(), breakdown: dict | None = None):
    """Weighted sum with map and occupancy rescaled toward the detection loss.

    When ``breakdown`` is a dict it receives the per-term values and the
    dynamic weights used.
    """
    if losses.det is None and (losses.map is not None or losses.occ is not None):
        raise ValueError("map/occupancy losses are balanced against detection, which is missing")
    terms = []
    info: dict[str, float] = {}
    if losses.det is not None:
        terms.append(ad.mul(losses.det, weights.l1))
    for name, lam in (("map", weights.l2), ("occ", weights.l3)):
        l = getattr(losses, name)
        if l is None:
            continue
        w = dynamic_weight(losses.det, l)
        info[f"w_{name}"] = w
        terms.append(ad.mul(l, lam * w))
    for name, lam in (("mot", weights.l4), ("plan", weights.l5)):
        l = getattr(losses, name)
        if l is not None:
            terms.append(ad.mul(l, lam))
    total = terms[0] if terms else 0.0
    for t in terms[1:]:
        total = ad.add(total, t)
    if breakdown is not None:
        breakdown.update(losses.values())
        breakdown.update(info)
        breakdown["total"] = float(ad.value(total))
    return total


# ------------------------------------------------------------ loss kernels


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def focal_loss(logits, target, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced pixel focal loss on a centerness heatmap.

    Cells with target exactly 1 are positives; the sum is divided by the
    positive count (at least 1).
    """
    x = ad.value(logits)
    t = np.asarray(target, dtype=x.dtype)
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and heatmap {t.shape} differ")
    p = special.expit(x)
    q = 1.0 - p
    log_p, log_q = -_softplus(-x), -_softplus(x)
    pos = t == 1.0
    neg_w = (1.0 - t) ** beta
    n_pos = max(int(pos.sum()), 1)
    per = np.where(pos, -(q ** alpha) * log_p, -neg_w * p ** alpha * log_q)
    out = np.asarray(per.sum() / n_pos)

    def bwd(g):
        d_pos = alpha * p * q ** alpha * log_p - q ** (alpha + 1)
        d_neg = -neg_w * (alpha * p ** alpha * q * log_q - p ** (alpha + 1))
        return (g * np.where(pos, d_pos, d_neg) / n_pos, None)

    return ad.record("focal_loss", out, (logits, target), bwd)


def bce_with_logits(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    x = ad.value(logits)
    t = np.asarray(target, dtype=x.dtype)
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and targets {t.shape} differ")
    n = max(x.size, 1)
    out = np.asarray(np.sum(_softplus(x) - t * x) / n)
    return ad.record("bce", out, (logits, target),
                     lambda g: (g * (special.expit(x) - t) / n, None))


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    x = ad.value(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError(f"logits {x.shape} do not match {len(labels)} labels")
    n = max(len(x), 1)
    lse = special.logsumexp(x, axis=1)
    rows = np.arange(len(x))
    out = np.asarray(np.sum(lse - x[rows, labels]) / n)

    def bwd(g):
        grad = np.exp(x - lse[:, None])
        grad[rows, labels] -= 1.0
        return (g * grad / n, None)

    return ad.record("softmax_ce", out, (logits, labels), bwd)


def smooth_l1(pred, target, beta: float = 1.0):
    """Mean elementwise Huber-style loss, quadratic below ``beta``."""
    x = ad.value(pred)
    t = np.asarray(target, dtype=x.dtype)
    if x.shape != t.shape:
        raise ValueError(f"prediction {x.shape} and target {t.shape} differ")
    d = x - t
    a = np.abs(d)
    n = max(d.size, 1)
    out = np.asarray(np.sum(np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)) / n)
    return ad.record("smooth_l1", out, (pred, target),
                     lambda g: (g * np.where(a < beta, d / beta, np.sign(d)) / n, None))


# ------------------------------------------------------------------- heads


@dataclass
class Affine:
    weight: Any  # (out, C)
    bias: Any  # (out,)


@dataclass
class HeadParams:
    det: Affine
    map: Affine
    occ: Affine
    mot: Affine
    plan: Affine


def init_heads(channels: int, rng: np.random.Generator, dtype=np.float64) -> HeadParams:
    def make(out):
        return Affine((rng.standard_normal((out, channels)) * (0.1 / np.sqrt(channels))).astype(dtype),
                      np.zeros(out, dtype))

    return HeadParams(make(1), make(MAP_CLASSES), make(1), make(2), make(2))


@dataclass
class BEVTargets:
    """Dense per-cell targets plus sparse motion and a single plan offset."""

    heatmap: np.ndarray  # (H, W) in [0, 1]
    occupancy: np.ndarray  # (H, W) in {0, 1}
    map_labels: np.ndarray  # (H, W) ints < MAP_CLASSES
    motion_cells: np.ndarray  # (M, 2) int (x, y) cells
    motion: np.ndarray  # (M, 2) offsets
    plan: np.ndarray  # (2,)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in
                ("heatmap", "occupancy", "map_labels", "motion_cells", "motion", "plan")}


def toy_heads(bev, targets: BEVTargets, heads: HeadParams, tasks=TASKS) -> TaskLosses:
    """1x1 affine heads over a shared (H, W, C) BEV; only ``tasks`` are evaluated."""
    H, W, C = ad.value(bev).shape
    if targets.heatmap.shape != (H, W):
        raise ValueError(f"targets are {targets.heatmap.shape}, BEV is {(H, W)}")
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    flat = ad.reshape(bev, (H * W, C))
    out: dict[str, Any] = {}
    if "det" in tasks:
        logits = ad.reshape(ad.affine(flat, heads.det.weight, heads.det.bias), (H * W,))
        out["det"] = focal_loss(logits, targets.heatmap.reshape(-1))
    if "map" in tasks:
        out["map"] = softmax_cross_entropy(ad.affine(flat, heads.map.weight, heads.map.bias),
                                           targets.map_labels.reshape(-1))
    if "occ" in tasks:
        logits = ad.reshape(ad.affine(flat, heads.occ.weight, heads.occ.bias), (H * W,))
        out["occ"] = bce_with_logits(logits, targets.occupancy.reshape(-1))
    if "mot" in tasks and len(targets.motion_cells):
        cells = targets.motion_cells[:, 0] * W + targets.motion_cells[:, 1]
        pred = ad.affine(ad.gather_rows(flat, cells), heads.mot.weight, heads.mot.bias)
        out["mot"] = smooth_l1(pred, targets.motion)
    if "plan" in tasks:
        pooled = ad.mean(flat, axis=0, keepdims=True)
        pred = ad.reshape(ad.affine(pooled, heads.plan.weight, heads.plan.bias), (2,))
        out["plan"] = smooth_l1(pred, targets.plan)
    return TaskLosses(**out)
