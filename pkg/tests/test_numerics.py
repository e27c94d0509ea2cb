import numpy as np
import pytest

from dynskip.errors import DegenerateInputError, ShapeError
from dynskip.numerics import (
    Adam,
    affine_forward,
    cosine_similarity,
    grad_check,
    sigmoid,
)


class TestAffineForward:
    def test_identity(self):
        out = affine_forward(np.eye(2), np.zeros(2), np.array([3.0, 4.0]))
        assert np.array_equal(out, [3.0, 4.0])

    def test_zero_weights(self):
        out = affine_forward(np.zeros((2, 2)), np.ones(2), np.array([5.0, 5.0]))
        assert np.array_equal(out, [1.0, 1.0])

    def test_hand_arithmetic(self):
        W = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = affine_forward(W, np.zeros(2), np.array([1.0, 1.0]))
        assert np.array_equal(out, [3.0, 7.0])

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        X = rng.normal(size=(5, 4))
        batched = affine_forward(W, b, X)
        for i in range(5):
            # GEMV vs GEMM may differ in the last ulp; bit-equality is only
            # guaranteed for identical input shapes
            assert np.allclose(batched[i], affine_forward(W, b, X[i]), rtol=1e-13, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affine_forward(np.eye(2), np.zeros(2), np.zeros(3))
        with pytest.raises(ShapeError):
            affine_forward(np.eye(2), np.zeros(3), np.zeros(2))

    def test_linearity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            W = rng.normal(size=(4, 3))
            b = rng.normal(size=4)
            x, y = rng.normal(size=3), rng.normal(size=3)
            a, c = rng.normal(), rng.normal()
            lhs = affine_forward(W, b, a * x + c * y)
            rhs = (a * affine_forward(W, b, x) + c * affine_forward(W, b, y)
                   - (a + c - 1.0) * b)
            assert np.allclose(lhs, rhs, atol=1e-12)


class TestCosineSimilarity:
    def test_self_similarity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.normal(size=rng.integers(1, 10))
            if np.linalg.norm(a) == 0:
                continue
            assert abs(cosine_similarity(a, a) - 1.0) < 1e-12

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        got = cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        assert abs(got - 0.70710678) < 1e-8

    def test_symmetry_and_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            s = cosine_similarity(a, b)
            assert abs(s - cosine_similarity(b, a)) < 1e-15
            assert abs(s - cosine_similarity(3.7 * a, b)) < 1e-12
            assert abs(s - cosine_similarity(a, 0.01 * b)) < 1e-12
            assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12

    def test_zero_vector_raises(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity(np.zeros(3), np.ones(3))


class TestGradCheck:
    def test_quadratic_exact(self):
        params = {"w": np.array([3.0])}

        def f(p):
            w = p["w"][0]
            return w * w, {"w": np.array([2.0 * w])}

        assert grad_check(f, params, step=1e-5) < 1e-8

    def test_detects_wrong_gradient(self):
        params = {"w": np.array([3.0])}

        def f(p):
            w = p["w"][0]
            return w * w, {"w": np.array([3.0 * w])}  # wrong on purpose

        assert grad_check(f, params, step=1e-5) > 1e-2


class TestAdam:
    def test_zero_grad_is_identity(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        before = params["w"].copy()
        opt = Adam(lr=0.1)
        for _ in range(5):
            opt.step(params, {"w": np.zeros(3)})
        assert np.array_equal(params["w"], before)

    def test_first_step_moves_against_gradient(self):
        params = {"w": np.array([0.0])}
        Adam(lr=0.1).step(params, {"w": np.array([1.0])})
        assert params["w"][0] < 0.0

    def test_converges_on_quadratic(self):
        params = {"w": np.array([0.0])}
        opt = Adam(lr=0.1)
        for _ in range(100):
            opt.step(params, {"w": 2.0 * (params["w"] - 2.0)})
        assert abs(params["w"][0] - 2.0) < 0.05

    def test_step_count_increases(self):
        opt = Adam()
        p = {"w": np.zeros(1)}
        opt.step(p, {"w": np.zeros(1)})
        opt.step(p, {"w": np.zeros(1)})
        assert opt.t == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_sigmoid_range():
    z = np.linspace(-20, 20, 101)
    s = sigmoid(z)
    assert np.all(s > 0.0) and np.all(s < 1.0)
