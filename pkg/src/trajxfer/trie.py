"""Attention with learnable 2D rotary encoding of relative spatial offsets.

Queries and keys are rotated pairwise by angles ``phi(x, y) * theta`` where
``phi`` is a bias-free linear map of the point's offset. Because ``phi`` is
linear and planar rotations compose additively, the logit between points i
and j depends on positions only through ``phi(x_i - x_j, y_i - y_j)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from trajxfer.errors import DimMismatch


def rotary_thetas(head_dim: int, base: float = 10000.0, dtype=torch.float64) -> torch.Tensor:
    """``base ** (-2j / head_dim)`` for ``j = 1 .. head_dim/2`` (strictly decreasing)."""
    j = torch.arange(1, head_dim // 2 + 1, dtype=torch.float64)
    return (base ** (-2.0 * j / head_dim)).to(dtype)


def phi(xy: torch.Tensor, W_phi: torch.Tensor) -> torch.Tensor:
    """Angle vector ``W_phi @ (x || y)``; ``W_phi`` has shape ``(head_dim/2, 2)``."""
    return xy @ W_phi.transpose(-1, -2)


def rotate(v: torch.Tensor, angles: torch.Tensor, thetas: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs ``(v[2j], v[2j+1])`` by ``angles[j] * thetas[j]``."""
    if v.shape[-1] != 2 * angles.shape[-1] or angles.shape[-1] != thetas.shape[-1]:
        raise DimMismatch(f"vector dim {v.shape[-1]} vs {angles.shape[-1]} angles / {thetas.shape[-1]} thetas")
    a = angles * thetas
    cos, sin = torch.cos(a), torch.sin(a)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return out.flatten(-2)


def rotation_matrix(angles: torch.Tensor, thetas: torch.Tensor) -> torch.Tensor:
    """Dense block-diagonal matrix equivalent of :func:`rotate` (for verification)."""
    a = angles * thetas
    m = len(a)
    R = torch.zeros(2 * m, 2 * m, dtype=a.dtype)
    for j in range(m):
        c, s = torch.cos(a[j]), torch.sin(a[j])
        R[2 * j, 2 * j], R[2 * j, 2 * j + 1] = c, -s
        R[2 * j + 1, 2 * j], R[2 * j + 1, 2 * j + 1] = s, c
    return R


class TrieAttention(nn.Module):
    """Multi-head self-attention with spatial rotary queries/keys.

    ``W_phi`` is shared across the heads of one layer. Values of padded keys
    are never attended and padded outputs are zero.
    """

    def __init__(self, d: int, n_heads: int, theta_base: float = 10000.0):
        super().__init__()
        if d % (2 * n_heads):
            raise DimMismatch(f"d={d} not divisible by 2*heads={2 * n_heads}")
        self.d, self.n_heads, self.head_dim = d, n_heads, d // n_heads
        self.W_q = nn.Linear(d, d, bias=False)
        self.W_k = nn.Linear(d, d, bias=False)
        self.W_v = nn.Linear(d, d, bias=False)
        self.W_phi = nn.Linear(2, self.head_dim // 2, bias=False)
        self.theta_base = theta_base

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def logits(self, E: torch.Tensor, xy: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Scaled attention logits ``[B, H, n, n]`` and values ``[B, H, n, d_h]``."""
        if E.shape[-1] != self.d or xy.shape[-1] != 2 or xy.shape[:-1] != E.shape[:-1]:
            raise DimMismatch(f"E {tuple(E.shape)} / offsets {tuple(xy.shape)} for d={self.d}")
        thetas = rotary_thetas(self.head_dim, self.theta_base, E.dtype)
        ang = phi(xy, self.W_phi.weight).unsqueeze(1)  # [B, 1, n, d_h/2]
        q = rotate(self._heads(self.W_q(E)), ang, thetas)
        k = rotate(self._heads(self.W_k(E)), ang, thetas)
        v = self._heads(self.W_v(E))
        return q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), v

    def forward(self, E: torch.Tensor, xy: torch.Tensor, valid: torch.Tensor | None = None,
                return_weights: bool = False):
        """``E [B, n, d]``, ``xy [B, n, 2]``, ``valid [B, n]`` bool."""
        logits, v = self.logits(E, xy)
        if valid is not None:
            logits = logits.masked_fill(~valid[:, None, None, :], float("-inf"))
        w = torch.softmax(logits, dim=-1)
        if valid is not None:
            w = torch.nan_to_num(w, nan=0.0)  # fully padded rows
        out = (w @ v).transpose(1, 2).reshape(E.shape)
        if valid is not None:
            out = out * valid.unsqueeze(-1).to(out.dtype)
        return (out, w) if return_weights else out
