import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from knowmvg.numerics import (
    ContractError,
    NonFiniteError,
    attention,
    check_gradients,
    relative_error,
    stable_softmax,
)

from oracles import dense_attention

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_single_key_returns_value_row():
    q = torch.randn(3, 4, dtype=torch.float64)
    k = torch.randn(1, 4, dtype=torch.float64)
    v = torch.randn(1, 5, dtype=torch.float64)
    out = attention(q, k, v)
    assert torch.equal(out, v.expand(3, 5))


def test_orthogonal_query_identical_keys_gives_column_mean():
    k = torch.tensor([[1.0, 0.0]] * 4, dtype=torch.float64)
    q = torch.tensor([[0.0, 2.0]], dtype=torch.float64)
    v = torch.arange(12, dtype=torch.float64).view(4, 3)
    _, w = attention(q, k, v, return_weights=True)
    assert torch.allclose(w, torch.full((1, 4), 0.25, dtype=torch.float64), atol=0, rtol=0)
    assert torch.allclose(attention(q, k, v), v.mean(0, keepdim=True), atol=1e-15)


def test_random_attention_matches_dense_oracle():
    g = torch.Generator().manual_seed(3)
    q, k, v = (torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3))
    np.testing.assert_allclose(attention(q, k, v).numpy(), dense_attention(q, k, v), atol=1e-10, rtol=0)


def test_attention_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        attention(torch.randn(2, 3), torch.randn(4, 5), torch.randn(4, 5))
    with pytest.raises(ContractError):
        attention(torch.randn(2, 3), torch.randn(4, 3), torch.randn(5, 3))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one_even_for_huge_logits(logits):
    p = stable_softmax(torch.from_numpy(logits) * 1e3)
    assert torch.isfinite(p).all()
    assert torch.allclose(p.sum(-1), torch.ones(p.shape[0], dtype=p.dtype), atol=1e-6)


@given(st.integers(0, 10_000))
def test_attention_permutation_properties(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(5, 4, generator=g, dtype=torch.float64)
    k = torch.randn(6, 4, generator=g, dtype=torch.float64)
    v = torch.randn(6, 3, generator=g, dtype=torch.float64)
    pq = torch.randperm(5, generator=g)
    pk = torch.randperm(6, generator=g)
    base = attention(q, k, v)
    assert torch.allclose(attention(q[pq], k, v), base[pq], atol=1e-12)
    assert torch.allclose(attention(q, k[pk], v[pk]), base, atol=1e-12)


def test_relative_error_definition():
    a, n = torch.tensor(2.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64)
    assert float(relative_error(a, n)) == 0.5
    assert float(relative_error(torch.tensor(0.0), torch.tensor(1e-12))) == pytest.approx(1e-4)


def test_quadratic_passes():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    (rep,) = check_gradients(lambda: x**2, {"x": x}, step=1e-5, tol=1e-4)
    assert rep.passed and rep.max_rel_error < 1e-8 and rep.step == 1e-5


def test_constant_passes():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    (rep,) = check_gradients(lambda: (x * 0).sum() + 4.0, {"x": x})
    assert rep.passed and rep.max_rel_error == 0.0


def test_wrong_gradient_is_caught():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x**2  # should be 3 x^2

    x = torch.randn(40, dtype=torch.float64, requires_grad=True)
    (rep,) = check_gradients(lambda: Bad.apply(x), {"x": x})
    assert rep.mode == "directional" and not rep.passed


def test_passed_iff_below_tolerance():
    x = torch.tensor([0.5, -1.0], dtype=torch.float64, requires_grad=True)
    for tol in (1e-12, 1e-3):
        (rep,) = check_gradients(lambda: torch.sin(x).sum() * 1e3, {"x": x}, tol=tol)
        assert rep.passed == (rep.max_rel_error < tol)


def test_non_finite_names_the_parameter():
    x = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    with pytest.raises(NonFiniteError, match="weight_x"):
        check_gradients(lambda: torch.log(x + 1e-6), {"weight_x": x}, step=1e-3)


def test_parameters_restored_after_check():
    x = torch.randn(30, dtype=torch.float64, requires_grad=True)
    before = x.detach().clone()
    check_gradients(lambda: (x.sin() * x).sum(), {"x": x})
    assert torch.equal(x.detach(), before)


@pytest.mark.parametrize("op", [
    lambda a, b: torch.relu(a @ b).sum(),
    lambda a, b: torch.nn.functional.gelu(a @ b).pow(2).sum(),
    lambda a, b: attention(a, b.T, b.T).sum(),
    lambda a, b: stable_softmax(a @ b).log().sum(),
])
def test_ops_pass_gradient_check(op):
    g = torch.Generator().manual_seed(1)
    a = (torch.randn(3, 4, generator=g, dtype=torch.float64) + 0.1).requires_grad_()
    b = torch.randn(4, 4, generator=g, dtype=torch.float64).requires_grad_()
    reports = check_gradients(lambda: op(a, b), {"a": a, "b": b}, step=1e-5, tol=1e-4)
    assert all(r.passed for r in reports), reports
