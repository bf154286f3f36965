"""Differentiable substrate shared by the model modules.

Everything here runs on torch tensors; torch autograd supplies the reverse
mode and :func:`check_gradients` verifies it against central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch


class ContractError(ValueError):
    """Raised when a shape or precondition contract is violated."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a checked tensor."""


def assert_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return t


def stable_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    return_weights: bool = False,
    bias: torch.Tensor | None = None,
):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d) + bias) v``.

    Works on ``(..., n, d)`` queries against ``(..., m, d)`` keys/values;
    ``bias`` broadcasts against the ``(..., n, m)`` logits (use ``-inf`` to mask).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ContractError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    weights = stable_softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


@dataclass
class GradReport:
    parameter_name: str
    max_rel_error: float
    passed: bool
    step: float
    mode: str = "elementwise"


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-8)
    return (analytic - numeric).abs() / denom


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_elementwise: int = 16,
    n_directions: int = 2,
    seed: int = 0,
) -> list[GradReport]:
    """Compare autograd gradients of the scalar ``f()`` with central differences.

    ``f`` must close over the tensors in ``params``; they are perturbed in
    place. Tensors with at most ``max_elementwise`` entries are checked entry
    by entry, larger ones along ``n_directions`` random unit directions (the
    directional derivative ``g . v`` against ``(f(p + hv) - f(p - hv)) / 2h``).
    """
    tensors = dict(params)
    for p in tensors.values():
        p.grad = None
    loss = f()
    if loss.numel() != 1:
        raise ContractError("check_gradients needs a scalar function")
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)

    def evaluate(name: str) -> float:
        with torch.no_grad():
            value = f()
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteError(f"f is non-finite while perturbing {name}")
        return value

    reports = []
    for (name, p), g in zip(tensors.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        errors = []
        if p.numel() <= max_elementwise:
            mode = "elementwise"
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = evaluate(name)
                flat[i] = orig - step
                down = evaluate(name)
                flat[i] = orig
                num = torch.tensor((up - down) / (2 * step), dtype=torch.float64)
                errors.append(relative_error(g.view(-1)[i].double(), num))
        else:
            mode = "directional"
            for _ in range(n_directions):
                v = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
                v /= v.norm()
                orig = p.data.clone()
                p.data.add_(step * v)
                up = evaluate(name)
                p.data.copy_(orig - step * v)
                down = evaluate(name)
                p.data.copy_(orig)
                num = torch.tensor((up - down) / (2 * step), dtype=torch.float64)
                ana = (g.double() * v.double()).sum()
                errors.append(relative_error(ana, num))
        worst = float(torch.stack(errors).max()) if errors else 0.0
        reports.append(GradReport(name, worst, worst < tol, step, mode))
    return reports
