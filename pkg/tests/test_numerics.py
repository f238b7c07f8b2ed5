import math

import numpy as np
import pytest

from app.utils.error_handler import DomainError, ShapeError
from app.utils.numerics import (Rng, activation, activation_grad, as_matrix, fsum_columns, logsumexp, matmul,
                                pairwise_sum, softmax, softplus)


class TestLogsumexp:
    def test_large_values_do_not_overflow(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_very_negative_values(self):
        assert logsumexp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + math.log(2.0), abs=1e-12)

    def test_single_value_is_identity(self):
        assert logsumexp([3.25]) == 3.25

    def test_axis_reduction(self):
        v = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = logsumexp(v, axis=0)
        np.testing.assert_allclose(out, [math.log(2.0), 1.0 + math.log(2.0)], atol=1e-15)

    def test_empty_raises(self):
        with pytest.raises(DomainError):
            logsumexp([])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as excinfo:
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    assert excinfo.value.left == (2, 3)
    assert excinfo.value.right == (4, 5)
    assert '(2, 3)' in str(excinfo.value) and '(4, 5)' in str(excinfo.value)


def test_as_matrix_rejects_non_finite():
    with pytest.raises(DomainError):
        as_matrix([[1.0, float('nan')]])


def test_softplus_is_linear_for_large_inputs_and_positive_elsewhere():
    assert softplus(np.array([40.0]))[0] == 40.0
    assert softplus(np.array([-40.0]))[0] > 0.0
    assert softplus(np.array([0.0]))[0] == pytest.approx(math.log(2.0))


@pytest.mark.parametrize('kind', ['relu', 'tanh', 'softplus', 'identity'])
def test_activation_grad_matches_finite_difference(kind):
    x = np.array([-1.3, -0.2, 0.4, 2.1])
    h = 1e-6
    numeric = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
    np.testing.assert_allclose(activation_grad(x, kind), numeric, atol=1e-8)


def test_softmax_rows_sum_to_one():
    out = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]), axis=1)
    np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], atol=1e-15)


def test_fsum_columns_is_order_independent():
    stack = np.array([[1e16, 1.0], [1.0, 2.0], [-1e16, 3.0]])
    assert fsum_columns(stack)[0] == 1.0
    assert fsum_columns(stack[::-1])[0] == 1.0


def test_pairwise_sum_fixed_order():
    values = [0.1] * 10
    assert pairwise_sum(values) == pairwise_sum(list(values))
    assert pairwise_sum(values) == pytest.approx(1.0, abs=1e-15)
    assert pairwise_sum([]) == 0.0


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(42).random_raw(8), Rng(42).random_raw(8))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).random_raw(8), Rng(2).random_raw(8))

    def test_child_streams_do_not_depend_on_call_order(self):
        a = Rng(7)
        a.uniform(size=100)
        first = a.child(3).random_raw(4)
        second = Rng(7).child(3).random_raw(4)
        assert np.array_equal(first, second)

    def test_spawned_streams_are_distinct(self):
        s1, s2 = Rng(5).spawn(2)
        assert not np.array_equal(s1.random_raw(4), s2.random_raw(4))

    def test_negative_seed_rejected(self):
        with pytest.raises(DomainError):
            Rng(-1)

    def test_seed_preserved_in_children(self):
        assert Rng(11).child(0, 1).seed == 11


@pytest.mark.parametrize('seed', range(5))
def test_logsumexp_lies_between_max_and_max_plus_log_n(seed):
    rng = Rng(seed)
    n = int(rng.integers(1, 50))
    v = rng.normal(0.0, 10.0 ** int(rng.integers(0, 4)), size=n)
    value = logsumexp(v)
    assert value >= np.max(v)
    assert value <= np.max(v) + math.log(n) + 1e-12 * max(1.0, abs(value))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_column_selection(self):
        np.testing.assert_array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]])),
                                      [[2.0], [4.0]])

    def test_zero_annihilates(self):
        assert not np.any(matmul(np.zeros((2, 3)), Rng(0).normal(size=(3, 4))))

    @pytest.mark.parametrize('seed', range(5))
    def test_associative(self, seed):
        rng = Rng(seed)
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)
