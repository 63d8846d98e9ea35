import json

import numpy as np
import pytest

from unilion import autodiff as ad
from unilion.gradcheck import OP_TOL, op_suite
from unilion.linrnn import SelectiveScanParams, selective_scan_seq


def test_affine_sum_bias_gradient_is_ones():
    W = ad.Tensor(np.eye(3), requires_grad=True)
    b = ad.Tensor(np.zeros(3), requires_grad=True)
    x = np.arange(6.0).reshape(2, 3)
    with ad.Tape() as tape:
        loss = ad.sum(ad.affine(x, W, b))
    gW, gb = ad.backward(tape, loss, [W, b])
    assert gb.tolist() == [2.0, 2.0, 2.0]
    np.testing.assert_array_equal(gW, np.tile(x.sum(axis=0), (3, 1)))


def test_selective_scan_small_fd():
    rng = np.random.default_rng(3)
    p = ad.trainable(SelectiveScanParams.random(2, rng))
    x = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True, name="x")
    R = rng.standard_normal((3, 2))
    leaves = [x] + [leaf for _, leaf in ad.named_leaves(p)]
    rep = ad.fd_check(lambda: ad.sum(selective_scan_seq(x, p) * R), leaves)
    assert rep.max_error <= 1e-6


def test_quadratic_fd():
    p = ad.Tensor(np.array([3.0]), requires_grad=True, name="p")
    rep = ad.fd_check(lambda: ad.sum(p * p), [p])
    assert rep.errors["p"] <= 1e-9


def test_zero_function_has_zero_error():
    p = ad.Tensor(np.ones(4), requires_grad=True)
    rep = ad.fd_check(lambda: ad.sum(p * 0.0), [p])
    assert rep.max_error == 0.0


def test_constant_function_not_on_tape():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    rep = ad.fd_check(lambda: 1.5, [p])
    assert rep.max_error == 0.0


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        ad.backward(tape, y, [x])


def test_fd_rejects_bad_eps_and_float32():
    p = ad.Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ValueError):
        ad.fd_check(lambda: ad.sum(p), [p], eps=0.0)
    q = ad.Tensor(np.ones(1, np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        ad.fd_check(lambda: ad.sum(q), [q])


def test_gradients_accumulate_over_reuse():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x * x + x * 3.0)
    (g,) = ad.backward(tape, loss, [x])
    assert g.tolist() == [7.0]


def test_no_tape_returns_plain_values():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    out = ad.sum(x * 2.0)
    assert isinstance(out, ad.Tensor) and not out.requires_grad
    assert ad.sum(np.ones(2)) == 2.0


def test_gather_rows_negative_index_is_zero_row():
    x = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.gather_rows(x, np.array([[2, -1], [0, 2]]))
        loss = ad.sum(y)
    assert ad.value(y)[0, 1].tolist() == [0.0, 0.0]
    (g,) = ad.backward(tape, loss, [x])
    assert g[:, 0].tolist() == [1.0, 0.0, 2.0]


def test_where_keeps_float32():
    x = np.ones(3, np.float32)
    assert ad.where(np.array([True, False, True]), x, 0.0).dtype == np.float32


def test_tree_helpers():
    tree = {"b": [np.zeros(2)], "a": (np.ones(1),)}
    assert [n for n, _ in ad.named_leaves(tree)] == ["a[0]", "b[0]"]
    t = ad.trainable(tree)
    assert all(isinstance(leaf, ad.Tensor) and leaf.requires_grad for _, leaf in ad.named_leaves(t))
    d = ad.detached(t)
    assert all(type(leaf) is np.ndarray for _, leaf in ad.named_leaves(d))


def test_report_json_roundtrip():
    rep = ad.GradientReport({"w": 1e-8, "b": 2e-9}, 1e-5, label="x")
    doc = json.loads(rep.to_json())
    assert doc["max_error"] == 1e-8 and doc["eps"] == 1e-5
    back = ad.GradientReport.from_dict(doc)
    assert back == rep and back.passed(1e-6) and not back.passed(1e-9)


def test_relative_error_floor():
    assert ad.relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert ad.relative_error(2.0, 1.0) == 0.5


@pytest.mark.parametrize("name", ["affine", "layer_norm", "gelu", "linear_scan_chunked", "wkv_scan",
                                  "submanifold_conv", "merge_expand"])
def test_selected_ops(name):
    (rep,) = op_suite(only={name})
    assert rep.label == name and rep.max_error <= OP_TOL


def test_op_suite_is_deterministic():
    a = op_suite(seed=4, only={"silu", "segment_sum_mean"})
    b = op_suite(seed=4, only={"silu", "segment_sum_mean"})
    assert len(a) == 2
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
