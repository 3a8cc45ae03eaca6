"""Differentiable primitives and a central-difference gradient checker.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
fixes the handful of primitives the toy transformer and the losses are built
from, so that every one of them can be checked against finite differences.
"""

from __future__ import annotations

import math
from typing import Callable

import torch
from torch import Tensor

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check(cond: bool, msg: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{msg}: " + ", ".join(str(tuple(s)) for s in shapes))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[-1] == b.shape[-2] if b.dim() > 1 else a.shape[-1] == b.shape[0],
           "matmul inner dimensions differ", a.shape, b.shape)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _check(False, "add shapes do not broadcast", a.shape, b.shape)
    return a + b


def scale(a: Tensor, c: float | Tensor) -> Tensor:
    return a * c


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _check(False, "elementwise-mul shapes do not broadcast", a.shape, b.shape)
    return a * b


def softmax(z: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(z, dim=dim)


def log_softmax(z: Tensor, dim: int = -1) -> Tensor:
    return torch.log_softmax(z, dim=dim)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale by the reciprocal root-mean-square over the last axis, then apply a learnable gain."""
    _check(x.shape[-1] == gain.shape[-1], "rms_norm gain size differs from feature size", x.shape, gain.shape)
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise ShapeError(f"token id out of range for embedding table {tuple(table.shape)}")
    return table[ids]


def gather(x: Tensor, dim: int, index: Tensor) -> Tensor:
    return torch.gather(x, dim, index)


def concat(xs: list[Tensor], dim: int = 0) -> Tensor:
    ref = xs[0].shape
    for x in xs[1:]:
        _check(len(x.shape) == len(ref) and all(
            a == b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != dim % len(ref)
        ), "concat shapes differ off the concat axis", ref, x.shape)
    return torch.cat(xs, dim=dim)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[-1] == b.shape[-1], "dot operand sizes differ", a.shape, b.shape)
    return (a * b).sum(-1)


def l2norm(x: Tensor) -> Tensor:
    return x.pow(2).sum(-1).sqrt()


def cosine(x: Tensor, r: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis; ``r`` broadcasts against ``x``."""
    return dot(x, r) / (l2norm(x) * l2norm(r)).clamp_min(eps)


def cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over (masked) positions."""
    logp = log_softmax(logits, -1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum().clamp_min(1.0)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Row-wise KL(P || Q) from logits, over the last axis."""
    logp = log_softmax(p_logits, -1)
    logq = log_softmax(q_logits, -1)
    return (logp.exp() * (logp - logq)).sum(-1)


def kl_from_probs(p, q) -> float:
    p = torch.as_tensor(p, dtype=DTYPE)
    q = torch.as_tensor(q, dtype=DTYPE)
    terms = torch.where(p > 0, p * (p.log() - q.log()), torch.zeros_like(p))
    return float(terms.sum())


def backward(loss: Tensor, leaves: list[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``leaves`` (zeros for unused leaves)."""
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for g, x in zip(grads, leaves)]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    eps: float = 1e-6,
) -> float:
    """Max relative error between the autograd gradient of ``f`` at ``x`` and central differences.

    The error for coordinate i is ``|analytic_i - central_i| / (|central_i| + eps)``.
    The central estimate uses the five-point stencil (error O(h^4)), so small
    gradient components are not swamped by truncation error.
    """
    x0 = x.detach().clone().to(DTYPE)
    xg = x0.clone().requires_grad_(True)
    val = f(xg)
    if not torch.isfinite(val).all():
        raise NonFiniteError("f is not finite at x")
    (analytic,) = backward(val, [xg])
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    central = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                xs = flat.clone()
                xs[i] += step
                v = float(f(xs.reshape(x0.shape)))
                if not math.isfinite(v):
                    raise NonFiniteError(f"f is not finite at perturbed index {i}")
                vals.append(v)
            f2p, f1p, f1m, f2m = vals
            central[i] = (-f2p + 8 * f1p - 8 * f1m + f2m) / (12 * h)
    err = (analytic - central).abs() / (central.abs() + eps)
    return float(err.max()) if err.numel() else 0.0
