import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unilion import autodiff as ad
from unilion.sparse_ops import (ConvKernel3, layer_norm, gelu, merge_coords, neighbor_table, submanifold_conv3,
                                voxel_expand, voxel_merge)
from unilion.voxel import SparseFeatureSet, VoxelGrid

from oracles import dense_conv_masked, hash_merge, stencil_offsets

GRID = VoxelGrid((0, 0, 0), (1, 1, 1), (8, 8, 8))


def test_identity_kernel(make_sparse, rng):
    fs = make_sparse(rng, 50, (8, 8, 8), 3)
    out = submanifold_conv3(fs, ConvKernel3.identity(3))
    assert np.array_equal(out.coords, fs.coords)
    np.testing.assert_array_equal(out.values, fs.values)


def test_isolated_voxel_sees_only_center():
    fs = SparseFeatureSet(np.array([[0, 3, 3, 3]]), np.array([[2.0, -1.0]]), GRID)
    k = ConvKernel3(np.ones((3, 3, 3, 2, 1)), np.array([0.5]))
    assert submanifold_conv3(fs, k).values.tolist() == [[1.5]]


def test_conv_matches_dense_oracle(make_sparse, rng):
    fs = make_sparse(rng, 200, (10, 10, 10), 3)
    k = ConvKernel3.random(3, 4, rng)
    out = submanifold_conv3(fs, k)
    ref = dense_conv_masked(fs.coords, fs.values, k.weights, k.bias)
    np.testing.assert_allclose(out.values, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch(make_sparse, rng):
    with pytest.raises(ValueError):
        submanifold_conv3(make_sparse(rng, 5, channels=2), ConvKernel3.identity(3))


def test_neighbor_table_matches_set_lookup(make_sparse, rng):
    fs = make_sparse(rng, 120, (7, 7, 7))
    table = neighbor_table(fs.coords)
    where = {tuple(c): i for i, c in enumerate(fs.coords.tolist())}
    for i, (b, x, y, z) in enumerate(fs.coords.tolist()):
        for k, (dx, dy, dz) in enumerate(stencil_offsets()):
            assert table[i, k] == where.get((b, x + dx, y + dy, z + dz), -1)


def test_layer_norm_closed_forms():
    fs = SparseFeatureSet(np.array([[0, 0, 0, 0], [0, 1, 0, 0]]), np.array([[3.0, 3.0], [1.0, -1.0]]), GRID)
    out = layer_norm(fs, np.ones(2), np.zeros(2)).values
    assert out[0].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(out[1], np.array([1, -1]) / math.sqrt(1 + 1e-5), rtol=1e-15)


def test_layer_norm_random_statistics(make_sparse, rng):
    fs = make_sparse(rng, 100, channels=16)
    fs = fs.with_features(fs.values * 20 + 3)  # variance well above eps
    out = layer_norm(fs, np.ones(16), np.zeros(16)).values
    assert np.abs(out.mean(axis=1)).max() <= 1e-12
    assert np.abs(out.var(axis=1) - 1).max() <= 1e-6


def test_gelu_values():
    x = np.array([[0.0, 1.0, 30.0, -30.0]])
    fs = SparseFeatureSet(np.zeros((1, 4), int), x, GRID)
    out = gelu(fs).values[0]
    assert out[0] == 0.0 and out[2] == 30.0 and abs(out[3]) < 1e-12
    # x * Phi(x) with Phi from its own erf series
    erf1 = 2 / math.sqrt(math.pi) * sum((-1) ** n * (2 ** -0.5) ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
                                        for n in range(30))
    assert abs(out[1] - 0.5 * (1 + erf1)) <= 1e-12


def test_unit_stride_merge_is_identity(make_sparse, rng):
    fs = make_sparse(rng, 30)
    merged, m = voxel_merge(fs, (1, 1, 1))
    assert np.array_equal(merged.coords, fs.coords) and np.array_equal(merged.values, fs.values)
    assert np.array_equal(m.parent_of, np.arange(30))


def test_two_children_mean():
    fs = SparseFeatureSet(np.array([[0, 0, 0, 0], [0, 1, 1, 0]]), np.array([[1.0], [3.0]]), GRID)
    merged, m = voxel_merge(fs, (2, 2, 2))
    assert merged.coords.tolist() == [[0, 0, 0, 0]] and merged.values.tolist() == [[2.0]]
    assert merged.grid.extent == (4, 4, 4)
    assert m.children_of(0).tolist() == [0, 1]


def test_merge_against_hash_grouping(make_sparse, rng):
    fs = make_sparse(rng, 150, (9, 9, 9), 2)
    merged, m = voxel_merge(fs, (2, 2, 2))
    coords, means, counts = hash_merge(fs.coords, fs.values, (2, 2, 2))
    assert np.array_equal(merged.coords, coords)
    np.testing.assert_allclose(merged.values, means, rtol=1e-13, atol=1e-14)
    kids = m.children()
    assert np.array_equal(np.sort(np.concatenate(kids)), np.arange(len(fs)))
    assert [len(k) for k in kids] == list(counts.values())
    assert merged.is_canonical()


def test_expand_roundtrip(make_sparse, rng):
    fs = make_sparse(rng, 150, (9, 9, 9), 2)
    merged, m = voxel_merge(fs, (2, 2, 3))
    back = voxel_expand(merged, m)
    assert np.array_equal(back.coords, fs.coords)
    for kids in m.children():
        np.testing.assert_allclose(back.values[kids], np.broadcast_to(fs.values[kids].mean(axis=0), (len(kids), 2)),
                                   rtol=1e-12, atol=1e-12)


def test_expand_single_children_is_exact(make_sparse, rng):
    fs = make_sparse(rng, 20, (4, 4, 4))
    fs = SparseFeatureSet(fs.coords * [1, 2, 2, 2], fs.values, VoxelGrid((0, 0, 0), (1, 1, 1), (8, 8, 8)))
    merged, m = voxel_merge(fs, (2, 2, 2))
    assert np.array_equal(voxel_expand(merged, m).values, fs.values)


def test_expand_rejects_foreign_map(make_sparse, rng):
    merged, m = voxel_merge(make_sparse(rng, 30), (2, 2, 2))
    other, _ = voxel_merge(make_sparse(rng, 31), (2, 2, 2))
    with pytest.raises(ValueError):
        voxel_expand(other, m)


def test_merge_rejects_bad_stride(make_sparse, rng):
    with pytest.raises(ValueError):
        voxel_merge(make_sparse(rng, 3), (0, 1, 1))


def test_merge_expand_sum_gradient_is_ones(make_sparse, rng):
    fs = make_sparse(rng, 40, (6, 6, 6), 3)
    x = ad.Tensor(fs.values, requires_grad=True)
    with ad.Tape() as tape:
        merged, m = voxel_merge(fs.with_features(x), (2, 2, 2))
        loss = ad.sum(voxel_expand(merged, m).features)
    (g,) = ad.backward(tape, loss, [x])
    np.testing.assert_allclose(g, 1.0, rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 80), st.tuples(*[st.integers(1, 3)] * 3))
def test_merge_conserves_mass(seed, n, stride):
    rng = np.random.default_rng(seed)
    flat = rng.choice(216, size=n, replace=False)
    coords = np.column_stack([np.zeros(n, int), np.column_stack(np.unravel_index(flat, (6, 6, 6)))])
    feats = rng.standard_normal((n, 2))
    fs = SparseFeatureSet(coords, feats, VoxelGrid((0, 0, 0), (1, 1, 1), (6, 6, 6)))
    merged, m = voxel_merge(fs, stride)
    np.testing.assert_allclose((merged.values * m.child_counts[:, None]).sum(axis=0), feats.sum(axis=0),
                               atol=1e-10)
    coarse, parent = merge_coords(coords, stride)
    assert np.array_equal(coarse[parent, 1:], coords[:, 1:] // np.array(stride))
