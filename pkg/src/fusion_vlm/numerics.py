"""Dense float64 primitives shared by the encoder, decoder, losses and filters.

All functions take and return ``torch.Tensor`` in float64 and are
differentiable through torch autograd.  ``finite_diff_grad`` is the
independent check: it never touches autograd.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64


class DegenerateMaskError(ValueError):
    """A query row had every key masked out."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Numerically stable softmax along ``axis``."""
    if not -x.dim() <= axis < x.dim():
        raise ValueError(f"axis {axis} out of range for a {x.dim()}-d tensor")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d)) v``.

    ``q`` is ``[..., m, d]``, ``k`` and ``v`` are ``[..., k, d]`` and ``mask``
    is a boolean ``[m, k]`` (or broadcastable) array where True means the
    query may attend to the key.  Masked logits are removed before the
    softmax, not just pushed to a large negative value.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is None:
        return softmax(logits, -1) @ v
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise DegenerateMaskError("a query row has all keys masked")
    logits = logits.masked_fill(~mask, -math.inf)
    # max over allowed entries only; -inf entries exponentiate to exact 0
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    weights = e / e.sum(dim=-1, keepdim=True)
    return weights @ v


def cosine_rows(a: torch.Tensor, b: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Row-wise cosine similarity of two ``[t, d]`` matrices.

    With ``eps == 0`` a zero-norm row raises; a positive ``eps`` floors each
    norm at ``eps`` instead (the loss functions use 1e-8).  Flooring rather
    than adding keeps the result exactly scale invariant for ordinary rows.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if eps == 0.0 and (bool((na == 0).any()) or bool((nb == 0).any())):
        raise FloatingPointError("cosine of a zero-norm row is undefined")
    if eps:
        na = na.clamp(min=eps)
        nb = nb.clamp(min=eps)
    return (a * b).sum(-1) / (na * nb)


def _axis_coords(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    dst = torch.arange(n_out, dtype=DTYPE)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = src.clamp(0.0, n_in - 1)
    lo = src.floor().long()
    hi = torch.clamp(lo + 1, max=n_in - 1)
    frac = src - lo.to(DTYPE)
    return lo, hi, frac


def bilinear_resize(grid: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize an ``[h, w, c]`` grid with half-pixel-centre bilinear sampling.

    Source coordinates are ``(dst + 0.5) * in / out - 0.5`` clamped to the
    border.  Interpolation is written as ``a + f * (b - a)`` so constant
    grids stay exactly constant and equal sizes give an exact copy.
    """
    if grid.dim() != 3:
        raise ValueError(f"expected an [h, w, c] grid, got shape {tuple(grid.shape)}")
    h, w, _ = grid.shape
    if h < 1 or w < 1:
        raise ValueError("input grid must be non-empty")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extent must be positive, got ({out_h}, {out_w})")
    if (out_h, out_w) == (h, w):
        return grid.clone()
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows0 = grid[y0]
    rows1 = grid[y1]
    col = rows0 + fy * (rows1 - rows0)
    left = col[:, x0]
    right = col[:, x1]
    return left + fx * (right - left)


def finite_diff_grad(
    f: Callable[[torch.Tensor], float],
    x,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x).detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near element {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = as_tensor(analytic)
    n = as_tensor(numeric)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    if a.numel() == 0:
        return 0.0
    return float(((a - n).abs() / denom).max())
