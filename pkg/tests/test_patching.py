import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchdiff.patching import (PatchError, PatchGrid, PatchIndex, assemble_condition, crop,
                                flat_index, global_content, one_hot, partition, reassemble,
                                unflatten_index)


def index_image(h, w):
    rows, cols = np.mgrid[0:h, 0:w]
    return (10 * rows + cols)[None].astype(np.float32)


def test_identity_partition():
    x = np.random.default_rng(0).standard_normal((3, 8, 8))
    patches = partition(x, PatchGrid(1, 8, 8))
    assert len(patches) == 1
    assert np.array_equal(patches[0][1], x)


def test_sixteen_patches_of_32():
    patches = partition(np.zeros((3, 128, 128)), PatchGrid(4, 128, 128))
    assert len(patches) == 16
    assert all(p.shape == (3, 32, 32) for _, p in patches)
    assert [idx.s for idx, _ in patches] == list(range(16))


def test_partition_hand_slice():
    patches = dict((idx.s, p) for idx, p in partition(index_image(4, 4), PatchGrid(2, 4, 4)))
    np.testing.assert_array_equal(patches[flat_index(1, 0, 2)][0], [[20, 21], [30, 31]])


def test_partition_dimension_mismatch():
    with pytest.raises(PatchError):
        PatchGrid(3, 8, 8)
    with pytest.raises(PatchError):
        partition(np.zeros((1, 8, 4)), PatchGrid(2, 8, 8))


def test_round_trip_and_shuffle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    grid = PatchGrid(2, 8, 8)
    patches = partition(x, grid)
    assert np.array_equal(reassemble(patches, grid), x)
    shuffled = [patches[k] for k in rng.permutation(len(patches))]
    assert np.array_equal(reassemble(shuffled, grid), x)


def test_reassemble_errors():
    grid = PatchGrid(2, 4, 4)
    patches = partition(index_image(4, 4), grid)
    with pytest.raises(PatchError, match="missing"):
        reassemble(patches[:3], grid)
    with pytest.raises(PatchError, match="duplicate"):
        reassemble(patches + patches[:1], grid)
    bad = list(patches)
    bad[2] = (bad[2][0], np.zeros((1, 3, 2)))
    with pytest.raises(PatchError):
        reassemble(bad, grid)


@settings(max_examples=60, deadline=None)
@given(N=st.sampled_from([1, 2, 4, 8]), hp=st.integers(1, 4), wp=st.integers(1, 4),
       C=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_partition_bijection_property(N, hp, wp, C, seed):
    grid = PatchGrid(N, N * hp, N * wp)
    x = np.random.default_rng(seed).standard_normal((C, grid.H, grid.W)).astype(np.float32)
    patches = partition(x, grid)
    assert len(patches) == N * N
    covered = np.zeros((grid.H, grid.W), dtype=int)
    for idx, _ in patches:
        rows, cols = grid.bounds(idx.s)
        covered[rows, cols] += 1
    assert np.all(covered == 1)
    assert np.array_equal(reassemble(patches, grid), x)


def test_flat_index_and_one_hot():
    assert flat_index(1, 2, 4) == 6
    assert flat_index(0, 0, 5) == 0
    np.testing.assert_array_equal(one_hot(0, 3), [1, 0, 0, 0, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(one_hot(2, 2), [0, 0, 1, 0])
    with pytest.raises(PatchError):
        flat_index(2, 0, 2)
    with pytest.raises(PatchError):
        one_hot(4, 2)
    with pytest.raises(PatchError):
        unflatten_index(-1, 2)


@pytest.mark.parametrize("N", range(1, 9))
def test_index_inverses_exhaustive(N):
    for s in range(N * N):
        i, j = unflatten_index(s, N)
        assert flat_index(i, j, N) == s
        code = one_hot(s, N)
        assert code.sum() == 1.0 and code[s] == 1.0
        assert int(np.argmax(code)) == s


def test_global_content_examples():
    grid = PatchGrid(2, 2, 2)
    np.testing.assert_array_equal(global_content(np.array([[[1.0, 3.0], [5.0, 7.0]]]), grid), [[[4.0]]])
    const = np.full((2, 8, 8), 0.37, dtype=np.float32)
    g = global_content(const, PatchGrid(4, 8, 8))
    assert g.shape == (2, 2, 2)
    np.testing.assert_allclose(g, 0.37, rtol=1e-7)
    x = np.random.default_rng(2).standard_normal((3, 6, 6)).astype(np.float32)
    assert np.array_equal(global_content(x, PatchGrid(1, 6, 6)), x)


def test_global_content_block_means():
    x = np.random.default_rng(3).standard_normal((2, 8, 8))
    g = global_content(x, PatchGrid(4, 8, 8))
    for c in range(2):
        for y in range(2):
            for xx in range(2):
                assert g[c, y, xx] == pytest.approx(x[c, 4 * y:4 * y + 4, 4 * xx:4 * xx + 4].mean(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(N=st.sampled_from([1, 2, 4]), a=st.floats(-3, 3), b=st.floats(-3, 3),
       seed=st.integers(0, 2**31 - 1))
def test_global_content_affine_and_mean(N, a, b, seed):
    grid = PatchGrid(N, 16, 16)
    x = np.random.default_rng(seed).standard_normal((2, 16, 16))
    lhs = global_content(a * x + b, grid)
    rhs = a * global_content(x, grid) + b
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=8 * np.finfo(np.float64).eps * (abs(a) * 4 + abs(b) + 1))
    x32 = x.astype(np.float32)
    assert global_content(x32, grid).mean(dtype=np.float64) == pytest.approx(
        x32.mean(dtype=np.float64), rel=1e-6, abs=1e-6)


def test_assemble_condition():
    patch = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    g = np.array([[[9.0, 8.0], [7.0, 6.0]]])
    out = assemble_condition(patch, g)
    assert out.shape == (2, 2, 2)
    assert np.array_equal(out[0], patch[0]) and np.array_equal(out[1], g[0])
    assert assemble_condition(np.zeros((3, 4, 4)), np.zeros((3, 4, 4))).shape == (6, 4, 4)
    x = np.random.default_rng(4).standard_normal((1, 4, 4))
    dup = assemble_condition(x, global_content(x, PatchGrid(1, 4, 4)))
    assert np.array_equal(dup[0], dup[1])
    with pytest.raises(PatchError):
        assemble_condition(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


def test_batched_crop_matches_single():
    grid = PatchGrid(4, 8, 8)
    x = np.random.default_rng(5).standard_normal((5, 2, 8, 8))
    s = np.array([0, 3, 7, 15, 9])
    batch = crop(x, grid, s)
    for b in range(5):
        assert np.array_equal(batch[b], crop(x[b], grid, int(s[b])))
    assert isinstance(grid.indices()[5], PatchIndex)
