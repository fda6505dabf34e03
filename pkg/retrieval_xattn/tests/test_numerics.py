import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from retrieval_xattn.errors import ArgumentError, NumericError, ShapeError
from retrieval_xattn.numerics import (
    Rng,
    as_matrix,
    grad_check,
    log_softmax_rows,
    matmul,
    seeded_normal,
    softmax,
    softmax_backward,
    softmax_rows,
)


class TestMatmul:
    def test_identity(self):
        a = Rng(1).generator.standard_normal((3, 5)).astype(np.float32)
        assert_array_equal(matmul(a, np.eye(5, dtype=np.float32)), a)

    def test_hand_computed(self):
        a = as_matrix([[1, 2], [3, 4]])
        b = as_matrix([[0, 1], [1, 0]])
        assert_array_equal(matmul(a, b), [[2, 1], [4, 3]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_associativity(self):
        gen = Rng(2).generator
        a, b, c = (gen.standard_normal(s).astype(np.float32) for s in ((4, 6), (6, 5), (5, 3)))
        assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-4, atol=1e-5)


class TestSoftmax:
    def test_symmetric(self):
        assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_analytic(self):
        assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-12)

    def test_large_inputs_do_not_overflow(self):
        assert_allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    def test_shift_invariance(self):
        v = Rng(3).generator.standard_normal(12)
        for shift in (-1e4, -3.5, 17.0, 1e4):
            assert_allclose(softmax(v + shift), softmax(v), atol=1e-6)

    def test_sums_to_one_and_preserves_order(self):
        v = Rng(4).generator.standard_normal(50).astype(np.float32)
        p = softmax(v)
        assert abs(float(p.sum()) - 1.0) < 1e-6
        assert_array_equal(np.argsort(p, kind="stable"), np.argsort(v, kind="stable"))

    def test_empty_is_argument_error(self):
        with pytest.raises(ArgumentError):
            softmax([])

    def test_nan_is_numeric_error(self):
        with pytest.raises(NumericError):
            softmax([0.0, float("nan")])

    def test_masked_entries_get_zero_mass(self):
        p = softmax_rows(np.array([[0.0, -np.inf, 0.0]]))
        assert_allclose(p, [[0.5, 0.0, 0.5]])

    def test_log_softmax_matches_log_of_softmax(self):
        x = Rng(5).generator.standard_normal((3, 7))
        assert_allclose(log_softmax_rows(x), np.log(softmax_rows(x)), atol=1e-12)

    def test_backward_matches_finite_differences(self):
        gen = Rng(6).generator
        z = gen.standard_normal(6)
        w = gen.standard_normal(6)
        analytic = softmax_backward(softmax(z), w)
        err = grad_check(lambda x: float(softmax(x) @ w), analytic, z, eps=1e-5)
        assert err < 1e-4


class TestSeededNormal:
    def test_deterministic(self):
        a = seeded_normal(Rng(7), 4, 5, 0.02)
        b = seeded_normal(Rng(7), 4, 5, 0.02)
        assert_array_equal(a, b)
        assert a.dtype == np.float32

    def test_sample_std(self):
        x = seeded_normal(Rng(8), 1000, 100, 0.02)
        assert abs(float(x.std()) - 0.02) < 0.05 * 0.02
        assert abs(float(x.mean())) < 1e-3

    def test_zero_rows(self):
        assert seeded_normal(Rng(9), 0, 4, 1.0).shape == (0, 4)

    @pytest.mark.parametrize("std", [0.0, -1.0])
    def test_non_positive_std(self, std):
        with pytest.raises(ArgumentError):
            seeded_normal(Rng(0), 2, 2, std)


class TestRng:
    def test_same_seed_same_stream(self):
        assert_array_equal(Rng(11).generator.random(8), Rng(11).generator.random(8))

    def test_split_is_deterministic_and_independent(self):
        root = Rng(12)
        assert_array_equal(root.split("a", 3).generator.random(4), Rng(12).split("a", 3).generator.random(4))
        assert not np.array_equal(root.split("a").generator.random(4), root.split("b").generator.random(4))

    def test_negative_key_rejected(self):
        with pytest.raises(ArgumentError):
            Rng(0).split(-1)


class TestGradCheck:
    def test_quadratic(self):
        x = Rng(13).generator.standard_normal((3, 4))
        assert grad_check(lambda v: float(np.sum(v * v)), 2 * x, x) < 1e-6

    def test_softmax_classifier_cross_entropy(self):
        gen = Rng(14).generator
        inputs = gen.standard_normal((6, 3))
        labels = gen.integers(0, 5, size=6)
        w = gen.standard_normal((3, 5))

        def loss(weights):
            logp = log_softmax_rows(inputs @ weights)
            return -float(np.mean(logp[np.arange(6), labels]))

        p = softmax_rows(inputs @ w)
        p[np.arange(6), labels] -= 1.0
        analytic = inputs.T @ p / 6
        assert grad_check(loss, analytic, w, eps=1e-4) < 1e-3

    def test_zero_gradient_negative_control(self):
        x = Rng(15).generator.standard_normal((2, 3)) + 0.5
        err = grad_check(lambda v: float(np.sum(v * v)), np.zeros_like(x), x)
        assert err == pytest.approx(1.0)

    def test_does_not_mutate_input(self):
        x = Rng(16).generator.standard_normal((2, 2))
        before = x.copy()
        grad_check(lambda v: float(np.sum(v**3)), 3 * x**2, x)
        assert_array_equal(x, before)

    def test_non_finite_function(self):
        with pytest.raises(NumericError):
            grad_check(lambda v: float("inf"), np.zeros((1, 1)), np.zeros((1, 1)))

    def test_eps_must_be_positive(self):
        with pytest.raises(ArgumentError):
            grad_check(lambda v: 0.0, np.zeros((1, 1)), np.zeros((1, 1)), eps=0.0)
