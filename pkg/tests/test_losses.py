import math

import numpy as np
import pytest

from unilion import autodiff as ad
from unilion.losses import (MAP_CLASSES, Affine, BEVTargets, HeadParams, LossWeights, TaskLosses,
                            bce_with_logits, dynamic_weight, focal_loss, init_heads, smooth_l1,
                            softmax_cross_entropy, total_loss, toy_heads)


def test_dynamic_weight_examples():
    assert dynamic_weight(2.0, 4.0) == 2.0 / (4.0 + 1e-5)
    assert abs(dynamic_weight(2.0, 4.0) - 0.4999987) < 1e-7
    assert dynamic_weight(3.0, 0.0) == 3.0 / 1e-5
    with pytest.raises(ValueError):
        dynamic_weight(1.0, -1.0)


def test_dynamic_weight_aligns_within_rounding(rng):
    det, task = rng.uniform(0.01, 10, 1000), rng.uniform(0.01, 10, 1000)
    w = np.array([dynamic_weight(a, b) for a, b in zip(det, task)])
    # one division and one multiplication: at most a couple of ulps apart
    assert np.max(np.abs(w * (task + 1e-5) - det) / det) <= 4 * np.finfo(float).eps
    # alignment: w * l_task lands within 1e-5 / l_task of l_det
    assert np.all(np.abs(w * task - det) / det <= 1e-5 / task + 1e-15)


def test_dynamic_weight_is_detached():
    det = ad.Tensor(np.array(2.0), requires_grad=True)
    occ = ad.Tensor(np.array(0.5), requires_grad=True)
    with ad.Tape() as tape:
        loss = total_loss(TaskLosses(det=det, occ=occ))
    g_det, g_occ = ad.backward(tape, loss, [det, occ])
    w = 2.0 / (0.5 + 1e-5)
    assert float(g_det) == 1.0 and float(g_occ) == w


def test_total_only_detection():
    assert float(ad.value(total_loss(TaskLosses(det=1.7)))) == 1.7


def test_total_three_tasks_by_hand():
    info = {}
    L = float(ad.value(total_loss(TaskLosses(det=2.0, map=4.0, occ=1.0), breakdown=info)))
    w_map, w_occ = 2.0 / (4.0 + 1e-5), 2.0 / (1.0 + 1e-5)
    assert L == 2.0 + 0.5 * w_map * 4.0 + 1.0 * w_occ * 1.0
    assert abs(L - 5.0) < 1e-4
    assert info["w_map"] == w_map and info["total"] == L


def test_total_all_five_tasks_spreadsheet():
    l = {"det": 1.3, "map": 0.7, "occ": 2.9, "mot": 0.25, "plan": 0.4}
    lam = (1, 0.5, 1, 1, 1)
    L = float(ad.value(total_loss(TaskLosses(**l), LossWeights(*lam))))
    # column by column as a spreadsheet would
    w_map = l["det"] / (l["map"] + 0.00001)
    w_occ = l["det"] / (l["occ"] + 0.00001)
    cells = [lam[0] * l["det"], lam[1] * w_map * l["map"], lam[2] * w_occ * l["occ"],
             lam[3] * l["mot"], lam[4] * l["plan"]]
    assert math.isclose(L, math.fsum(cells), rel_tol=1e-15)


def test_total_requires_detection():
    with pytest.raises(ValueError):
        total_loss(TaskLosses(map=1.0))
    assert float(ad.value(total_loss(TaskLosses(mot=0.5, plan=0.25)))) == 0.75


def test_task_losses_validation():
    with pytest.raises(ValueError):
        TaskLosses(det=-1.0)
    with pytest.raises(ValueError):
        TaskLosses(det=float("nan"))
    assert TaskLosses(det=1.0, plan=2.0).present() == {"det": True, "map": False, "occ": False,
                                                       "mot": False, "plan": True}


def test_focal_direct_formula(rng):
    x = rng.standard_normal(50)
    t = rng.uniform(0, 0.9, 50)
    t[[3, 17]] = 1.0
    p = 1 / (1 + np.exp(-x))
    ref = np.where(t == 1, -(1 - p) ** 2 * np.log(p), -(1 - t) ** 4 * p ** 2 * np.log(1 - p)).sum() / 2
    assert math.isclose(float(focal_loss(x, t)), ref, rel_tol=1e-12)


def test_loss_floors():
    t = np.array([1.0, 0.0, 0.0])
    assert float(focal_loss(np.array([40.0, -40.0, -40.0]), t)) < 1e-15
    assert float(bce_with_logits(np.array([40.0, -40.0]), np.array([1.0, 0.0]))) < 1e-15
    assert float(softmax_cross_entropy(np.array([[40.0, 0, 0], [0, 0, 40.0]]), [0, 2])) < 1e-15
    assert float(smooth_l1(np.array([1.0, 2.0]), np.array([1.0, 2.0]))) == 0.0


def test_smooth_l1_branches():
    assert float(smooth_l1(np.array([0.5]), np.array([0.0]))) == 0.125
    assert float(smooth_l1(np.array([3.0]), np.array([0.0]))) == 2.5


def test_bce_near_ln2_on_small_random_logits():
    vals = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        t = np.r_[np.ones(500), np.zeros(500)]
        vals.append(float(bce_with_logits(r.uniform(-0.5, 0.5, 1000), t)))
    assert abs(np.mean(vals) - math.log(2)) <= 0.05


def test_loss_shape_checks():
    with pytest.raises(ValueError):
        focal_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        bce_with_logits(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((3, 2)), [0, 1])


def _targets(H, W, rng):
    heat = rng.uniform(0, 0.5, (H, W))
    heat[1, 2] = 1.0
    return BEVTargets(heat, (rng.random((H, W)) < 0.5).astype(float), rng.integers(0, MAP_CLASSES, (H, W)),
                      np.array([[1, 2], [0, 0]]), rng.standard_normal((2, 2)), np.array([0.8, -0.3]))


def test_zero_bev_constant_baselines(rng):
    H, W, C = 4, 5, 3
    tg = _targets(H, W, rng)
    heads = ad.tree_map(np.zeros_like, init_heads(C, rng))
    out = toy_heads(np.zeros((H, W, C)), tg, heads).values()
    ln2 = math.log(2)
    pos = tg.heatmap == 1
    det = (0.25 * ln2 * pos.sum() + (0.25 * ln2 * (1 - tg.heatmap[~pos]) ** 4).sum()) / pos.sum()
    assert math.isclose(out["det"], det, rel_tol=1e-12)
    assert math.isclose(out["occ"], ln2, rel_tol=1e-12)
    assert math.isclose(out["map"], math.log(3), rel_tol=1e-12)
    hub = lambda d: np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5).mean()  # noqa: E731
    assert math.isclose(out["mot"], hub(tg.motion), rel_tol=1e-12)
    assert math.isclose(out["plan"], hub(tg.plan), rel_tol=1e-12)


def test_heads_share_the_bev(rng):
    H, W, C = 3, 3, 2
    tg = _targets(H, W, rng)
    bev = ad.Tensor(rng.standard_normal((H, W, C)), requires_grad=True)
    heads = init_heads(C, rng)
    with ad.Tape() as tape:
        losses = toy_heads(bev, tg, heads, tasks=("det", "occ"))
        loss = total_loss(losses)
    (g,) = ad.backward(tape, loss, [bev])
    assert losses.map is None and losses.plan is None
    assert np.abs(g).sum() > 0


def test_heads_reject_bad_inputs(rng):
    tg = _targets(3, 3, rng)
    heads = init_heads(2, rng)
    with pytest.raises(ValueError):
        toy_heads(np.zeros((4, 3, 2)), tg, heads)
    with pytest.raises(ValueError):
        toy_heads(np.zeros((3, 3, 2)), tg, heads, tasks=("seg",))


def test_head_param_shapes(rng):
    h = init_heads(8, rng)
    assert isinstance(h, HeadParams) and isinstance(h.det, Affine)
    assert h.map.weight.shape == (MAP_CLASSES, 8) and h.plan.bias.shape == (2,)
