import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prime_impute.numerics import (
    DimensionError,
    NonFiniteError,
    ParamStore,
    activation,
    apply_linear,
    check_gradients,
    precision,
    set_precision,
    softmax_scaled,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestApplyLinear:
    def test_identity(self):
        assert apply_linear(torch.eye(3, dtype=torch.float64), t([1.0, 2.0, 3.0])).tolist() == [1, 2, 3]

    def test_zero(self):
        assert apply_linear(torch.zeros(2, 3), t([4.0, 5.0, 6.0]).float()).tolist() == [0, 0]

    def test_hand_product(self):
        assert apply_linear(t([[1.0, 2.0], [3.0, 4.0]]), t([1.0, 1.0])).tolist() == [3, 7]

    def test_bias(self):
        assert apply_linear(t([[1.0, 0.0]]), t([2.0, 9.0]), t([0.5])).tolist() == [2.5]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_linear(torch.zeros(2, 3), torch.zeros(4))
        with pytest.raises(DimensionError):
            apply_linear(torch.zeros(2, 3), torch.zeros(3), torch.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-10, 10), st.floats(-10, 10))
    def test_linearity(self, seed, a, b):
        g = torch.Generator().manual_seed(seed)
        W = torch.randn(4, 5, generator=g, dtype=torch.float64)
        x = torch.randn(5, generator=g, dtype=torch.float64)
        y = torch.randn(5, generator=g, dtype=torch.float64)
        lhs = apply_linear(W, a * x + b * y)
        rhs = a * apply_linear(W, x) + b * apply_linear(W, y)
        assert torch.allclose(lhs, rhs, atol=1e-9, rtol=0)


class TestSoftmax:
    def test_uniform(self):
        assert torch.allclose(softmax_scaled(t([0.0, 0.0, 0.0]), 1.0), t([1 / 3] * 3))

    def test_single(self):
        assert softmax_scaled(t([123.0]), 0.3).tolist() == [1.0]

    def test_closed_form(self):
        assert torch.allclose(softmax_scaled(t([math.log(2), 0.0]), 1.0), t([2 / 3, 1 / 3]), atol=1e-15)

    def test_large_scores_stable(self):
        out = softmax_scaled(t([1e6, 1e6 - 1.0, -1e6]), 1.0)
        assert torch.isfinite(out).all()
        assert math.isclose(out.sum().item(), 1.0, abs_tol=1e-12)

    def test_validity_mask(self):
        out = softmax_scaled(t([[5.0, 0.0, 0.0]]), 1.0, valid=torch.tensor([[False, True, True]]))
        assert out.tolist() == [[0.0, 0.5, 0.5]]

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            softmax_scaled(t([1.0]), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 10))
    def test_simplex(self, scores, scale):
        out = softmax_scaled(t(scores), scale)
        assert abs(out.sum().item() - 1.0) <= 1e-9
        assert (out > 0).all() or len(scores) > 1  # tiny weights may underflow
        assert (out <= 1).all() and (out >= 0).all()


class TestActivation:
    def test_values(self):
        assert activation("sigmoid", t(0.0)).item() == 0.5
        assert activation("gelu", t(0.0)).item() == 0.0
        assert activation("gelu", t(0.0), gelu_form="tanh").item() == 0.0
        assert math.isclose(activation("sigmoid", t(math.log(3))).item(), 0.75, rel_tol=1e-15)
        assert activation("relu_max0", t([-1.0, 2.0])).tolist() == [0.0, 2.0]
        assert activation("tanh", t(0.0)).item() == 0.0

    def test_exact_gelu_is_gaussian_cdf_form(self):
        x = 1.3
        expected = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
        assert math.isclose(activation("gelu", t(x)).item(), expected, rel_tol=1e-14)

    def test_unknown(self):
        with pytest.raises(ValueError):
            activation("swish", t(0.0))

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "gelu", "relu_max0"])
    def test_finite_on_large_inputs(self, kind):
        x = torch.linspace(-1e6, 1e6, 101, dtype=torch.float64)
        assert torch.isfinite(activation(kind, x)).all()


class TestParamStore:
    def test_unique_names(self):
        store = ParamStore({"a": torch.nn.Parameter(torch.zeros(2))})
        with pytest.raises(KeyError):
            store.add("a", torch.nn.Parameter(torch.zeros(1)))

    def test_grad_shape_matches(self):
        p = torch.nn.Parameter(torch.ones(2, 3))
        store = ParamStore({"p": p})
        assert store.grad("p").shape == p.shape
        (p * 2).sum().backward()
        assert store.grad("p").shape == p.shape
        store.zero_grad()
        assert p.grad is None

    def test_precision_switch(self):
        before = precision()
        set_precision(64)
        assert precision() == 64 and torch.zeros(1).dtype == torch.float64
        set_precision(32)
        assert precision() == 32
        set_precision(before)
        with pytest.raises(ValueError):
            set_precision(16)


class TestCheckGradients:
    def test_square(self):
        theta = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
        store = ParamStore({"theta": theta})
        report = check_gradients(lambda: (theta**2).sum(), store, eps=1e-5)
        assert report["theta"] < 1e-8
        theta.grad = None
        (theta**2).sum().backward()
        assert theta.grad.item() == 6.0

    def test_constant_function(self):
        theta = torch.nn.Parameter(torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64))
        store = ParamStore({"theta": theta})
        (softmax_scaled(theta, 1.0).sum()).backward()
        assert torch.allclose(theta.grad, torch.zeros(3, dtype=torch.float64), atol=1e-15)
        # both gradients sit at round-off level, so only the 1e-8 floor bounds the ratio
        report = check_gradients(lambda: softmax_scaled(theta, 1.0).sum(), store)
        assert report["theta"] < 1e-2

    def test_composite(self):
        g = torch.Generator().manual_seed(0)
        W = torch.nn.Parameter(torch.randn(3, 4, generator=g, dtype=torch.float64))
        b = torch.nn.Parameter(torch.randn(3, generator=g, dtype=torch.float64))
        x = torch.randn(4, generator=g, dtype=torch.float64)
        store = ParamStore({"W": W, "b": b})

        def f():
            h = activation("gelu", apply_linear(W, x, b))
            return (softmax_scaled(h, 0.5) * torch.tanh(h)).sum()

        report = check_gradients(f, store)
        assert max(report.values()) < 1e-6

    def test_requires_float64(self):
        p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float32))
        with pytest.raises(TypeError):
            check_gradients(lambda: p.sum(), ParamStore({"p": p}))

    def test_non_finite_aborts(self):
        p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        with pytest.raises(NonFiniteError):
            check_gradients(lambda: (p / 0.0).sum(), ParamStore({"p": p}))
