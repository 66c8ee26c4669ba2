import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import log_softmax as scipy_log_softmax
from scipy.special import softmax as scipy_softmax

from lrsa.tensor import (Rng, Tensor, cross_entropy, gather_rows, matmul, mul, ordered_matmul, ordered_sum,
                         reduce_minmax, reduce_std, reduce_sum, rms_norm, softmax, silu)
from lrsa.utils import DegenerateRowError, DimensionError, GatherIndexError, GradientError

from conftest import central_difference

def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)

class TestMatmul(object):
    def test_identity(self):
        out = matmul(t([[1, 0], [0, 1]]), t([[3, 4], [5, 6]]))
        assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_inner_product(self):
        assert_array_equal(matmul(t([[1, 2]]), t([[3], [4]])).data, [[11]])

    def test_matches_triple_loop(self):
        rng = np.random.RandomState(3)
        a, b = rng.randn(3, 4), rng.randn(4, 2)
        oracle = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = 0.0
                for k in range(4):
                    acc = acc + a[i, k] * b[k, j]
                oracle[i, j] = acc
        assert_array_equal(ordered_matmul(a, b), oracle)

    def test_row_subset_is_bitwise_stable(self):
        rng = np.random.RandomState(4)
        a, b = rng.randn(9, 16), rng.randn(16, 5)
        assert_array_equal(ordered_matmul(a, b)[3:5], ordered_matmul(a[3:5], b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError) as e:
            matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
        assert '(2, 3)' in str(e.value)

def test_ordered_sum_ignores_zero_terms():
    rng = np.random.RandomState(5)
    x = rng.randn(7)
    padded = np.zeros(12)
    padded[[0, 2, 3, 6, 8, 9, 11]] = x
    assert ordered_sum(x) == ordered_sum(padded)

@pytest.mark.parametrize('dtype', [np.float32, np.float64])
def test_ordered_sum_matches_sequential_loop(dtype):
    x = np.random.RandomState(6).randn(5, 7).astype(dtype)
    for axis in [0, 1]:
        moved = np.moveaxis(x, axis, 0)
        oracle = np.zeros(moved.shape[1:], dtype=dtype)
        for row in moved:
            oracle = oracle + row
        out = ordered_sum(x, axis=axis)
        assert out.dtype == dtype
        assert_array_equal(out, oracle)
    assert ordered_sum(x, axis=1, keepdims=True).shape == (5, 1)

def test_ordered_reductions_of_empty_axes():
    assert_array_equal(ordered_sum(np.zeros((3, 0)), axis=1), np.zeros(3))
    assert_array_equal(ordered_matmul(np.zeros((2, 0)), np.zeros((0, 4))), np.zeros((2, 4)))

def test_ordered_sum_of_negative_zeros_is_positive_zero():
    assert not np.signbit(ordered_sum(np.array([-0.0, -0.0])))

class TestSoftmax(object):
    def test_symmetric(self):
        assert_allclose(softmax(t([0.0, 0.0]), axis=0).data, [0.5, 0.5])

    def test_masked_entry(self):
        assert_array_equal(softmax(t([0.0, -np.inf]), axis=0).data, [1.0, 0.0])

    def test_direct_evaluation(self):
        assert_allclose(softmax(t([0.0, 0.5]), axis=0).data, [0.3775406687981454, 0.6224593312018546], rtol=1e-12)

    def test_matches_scipy(self):
        x = np.random.RandomState(6).randn(4, 5)
        assert_allclose(softmax(t(x), axis=-1).data, scipy_softmax(x, axis=-1), rtol=1e-12)

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateRowError):
            softmax(t([[0.0, 1.0], [-np.inf, -np.inf]]), axis=-1)

class TestReductions(object):
    def test_std_constant(self):
        assert reduce_std(t([5.0, 5.0, 5.0]), axis=0).item() == 0.0

    def test_std_two_point(self):
        assert_allclose(reduce_std(t([0.0, 10.0]), axis=0).item(), 5.0)

    def test_std_population(self):
        assert_allclose(reduce_std(t([1.0, 2.0, 3.0, 4.0]), axis=0).item(), 1.118033988749895, rtol=1e-12)

    def test_std_zero_gradient_at_constant_row(self):
        x = t([[2.0, 2.0, 2.0]], grad=True)
        reduce_sum(reduce_std(x, axis=1)).backward()
        assert_array_equal(x.grad, np.zeros((1, 3)))

    def test_minmax(self):
        lo, hi = reduce_minmax(t([[1, 9], [3, 2]]), axis=0)
        assert_array_equal(lo.data, [1, 2])
        assert_array_equal(hi.data, [3, 9])

    def test_minmax_single_row(self):
        lo, hi = reduce_minmax(t([[4.0, -1.0]]), axis=0)
        assert_array_equal(lo.data, [4.0, -1.0])
        assert_array_equal(hi.data, [4.0, -1.0])

    def test_minmax_matches_loop(self):
        x = np.random.RandomState(8).randn(8, 4)
        lo, hi = reduce_minmax(t(x), axis=0)
        for c in range(4):
            assert lo.data[c] == min(x[:, c])
            assert hi.data[c] == max(x[:, c])

class TestGather(object):
    def test_full_selection(self):
        x = np.arange(8.0).reshape(4, 2)
        assert_array_equal(gather_rows(t(x), [0, 1, 2, 3]).data, x)

    def test_single_row(self):
        assert_array_equal(gather_rows(t([[1], [2], [3]]), [2]).data, [[3]])

    def test_rejects_unsorted(self):
        with pytest.raises(GatherIndexError):
            gather_rows(t(np.zeros((4, 2))), [2, 1])

    def test_rejects_out_of_range(self):
        with pytest.raises(GatherIndexError):
            gather_rows(t(np.zeros((4, 2))), [1, 4])

    def test_backward_matches_finite_differences(self):
        rng = np.random.RandomState(9)
        x0 = rng.randn(5, 2)
        w = rng.randn(3, 2)
        idx = [0, 2, 4]
        x = t(x0.copy(), grad=True)
        reduce_sum(mul(gather_rows(x, idx), t(w))).backward()
        numeric = central_difference(lambda a: np.sum(a[idx] * w), x0.copy())
        assert_allclose(x.grad, numeric, atol=1e-8)

class TestBackward(object):
    def test_sum_gives_ones(self):
        w = t(np.random.RandomState(1).randn(2, 2), grad=True)
        reduce_sum(w).backward()
        assert_array_equal(w.grad, np.ones((2, 2)))

    def test_square(self):
        w = t([1.5], grad=True)
        reduce_sum(mul(w, w)).backward()
        assert_allclose(w.grad, [3.0])

    def test_composite_matches_finite_differences(self):
        rng = np.random.RandomState(2)
        a0, b0, c = rng.randn(3, 3), rng.randn(3, 3), rng.randn(3, 3)

        def f(a):
            return np.sum(scipy_softmax(a.dot(b0), axis=-1) * c)

        a = t(a0.copy(), grad=True)
        reduce_sum(mul(softmax(matmul(a, t(b0)), axis=-1), t(c))).backward()
        numeric = central_difference(f, a0.copy())
        rel = np.max(np.abs(a.grad - numeric) / np.maximum(np.abs(numeric), 1e-3))
        assert rel < 1e-6

    def test_rms_norm_and_silu(self):
        rng = np.random.RandomState(10)
        x0, g0, c = rng.randn(3, 4), rng.randn(4), rng.randn(3, 4)

        def f(x):
            y = x / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + 1e-6) * g0
            return np.sum(y / (1.0 + np.exp(-y)) * c)

        x = t(x0.copy(), grad=True)
        reduce_sum(mul(silu(rms_norm(x, t(g0))), t(c))).backward()
        assert_allclose(x.grad, central_difference(f, x0.copy()), atol=1e-7)

    def test_non_scalar_loss(self):
        w = t(np.ones((2, 2)), grad=True)
        with pytest.raises(GradientError):
            mul(w, w).backward()

    def test_second_backward(self):
        w = t([1.0, 2.0], grad=True)
        loss = reduce_sum(mul(w, w))
        loss.backward()
        with pytest.raises(GradientError):
            loss.backward()

    def test_no_lineage(self):
        with pytest.raises(GradientError):
            reduce_sum(t([1.0, 2.0])).backward()

def test_cross_entropy_matches_log_softmax():
    rng = np.random.RandomState(11)
    logits = rng.randn(6, 5)
    targets = rng.randint(0, 5, size=6)
    weights = np.array([0, 1, 1, 0, 1, 1], dtype=np.float64)
    expected = -np.sum(weights * scipy_log_softmax(logits, axis=1)[np.arange(6), targets]) / np.sum(weights)
    assert_allclose(cross_entropy(t(logits), targets, weights).item(), expected, rtol=1e-12)

def test_cross_entropy_uniform_logits():
    assert_allclose(cross_entropy(t(np.zeros((3, 7))), [0, 3, 6]).item(), np.log(7), rtol=1e-12)

class TestRng(object):
    def test_same_seed_same_draws(self):
        assert_array_equal(Rng(5).normal((3, 2)), Rng(5).normal((3, 2)))

    def test_split_children_differ(self):
        a, b = Rng(5).split(2)
        assert not np.array_equal(a.integers(0, 1000, size=8), b.integers(0, 1000, size=8))

    def test_split_is_deterministic(self):
        assert_array_equal(Rng(5).split(2)[1].uniform(4), Rng(5).split(2)[1].uniform(4))
