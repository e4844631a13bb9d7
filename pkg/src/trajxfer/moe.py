"""Noisy top-k gated mixture of experts over ``h_i + e_i``, plus routing statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DENSITY_CLASSES = ("high", "medium", "low")


def topk_mask(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    order = torch.sort(logits, dim=-1, descending=True, stable=True).indices[..., :k]
    return torch.zeros_like(logits, dtype=torch.bool).scatter_(-1, order, True)


def noisy_topk_gate(u: torch.Tensor, W_g: torch.Tensor, W_noise: torch.Tensor, k: int,
                    train_mode: bool = False, generator: torch.Generator | None = None,
                    return_logits: bool = False):
    """Gate weights ``[..., C]``: softmax over the top-k of (noisy) gate logits.

    Noise ``N(0,1) * softplus(u @ W_noise)`` is added only in train mode and
    is drawn from ``generator`` so that runs are reproducible.
    """
    C = W_g.shape[-1]
    if not 1 <= k <= C:
        raise ValueError(f"need 1 <= k <= C, got k={k}, C={C}")
    clean = u @ W_g
    logits = clean
    noise_std = None
    if train_mode:
        noise_std = F.softplus(u @ W_noise)
        eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
        logits = clean + eps * noise_std
    keep = topk_mask(logits, k)
    gates = torch.softmax(logits.masked_fill(~keep, float("-inf")), dim=-1)
    if return_logits:
        return gates, keep, clean, logits, noise_std
    return gates


def _cv_squared(x: torch.Tensor) -> torch.Tensor:
    if x.numel() <= 1:
        return x.new_zeros(())
    return x.float().var() / (x.float().mean() ** 2 + 1e-10)


def load_balance_loss(gates, clean, noisy, noise_std, k: int) -> torch.Tensor:
    """Importance + load coefficient-of-variation penalty (flattened tokens)."""
    importance = gates.sum(0)
    if noise_std is None or k >= gates.shape[-1]:
        load = (gates > 0).sum(0).to(gates.dtype)
    else:
        top = torch.topk(noisy, k + 1, dim=-1).values
        in_thr, out_thr = top[:, k : k + 1], top[:, k - 1 : k]
        is_in = noisy > in_thr
        normal = torch.distributions.Normal(0.0, 1.0, validate_args=False)
        std = noise_std.clamp_min(1e-9)
        p_in = normal.cdf((clean - in_thr) / std)
        p_out = normal.cdf((clean - out_thr) / std)
        load = torch.where(is_in, p_in, p_out).sum(0)
    return _cv_squared(importance) + _cv_squared(load)


class Expert(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SCMoE(nn.Module):
    def __init__(self, d: int, d_ff: int, n_experts: int, k: int):
        super().__init__()
        self.k = k
        self.experts = nn.ModuleList(Expert(d, d_ff) for _ in range(n_experts))
        self.W_g = nn.Parameter(torch.randn(d, n_experts) * (1.0 / d**0.5))
        self.W_noise = nn.Parameter(torch.zeros(d, n_experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def forward(self, h: torch.Tensor, e: torch.Tensor, train_mode: bool = False,
                generator: torch.Generator | None = None):
        """Returns ``(h', gates, aux_loss)``; only experts with a nonzero gate run."""
        u = h + e
        shape = u.shape
        flat = u.reshape(-1, shape[-1])
        gates, keep, clean, noisy, noise_std = noisy_topk_gate(
            flat, self.W_g, self.W_noise, self.k, train_mode, generator, return_logits=True
        )
        out = torch.zeros_like(flat)
        for j, expert in enumerate(self.experts):
            idx = keep[:, j].nonzero(as_tuple=True)[0]
            if len(idx):
                out = out.index_add(0, idx, gates[idx, j : j + 1] * expert(flat[idx]))
        aux = load_balance_loss(gates, clean, noisy, noise_std, self.k) if train_mode else flat.new_zeros(())
        return out.reshape(shape), gates.reshape(*shape[:-1], -1), aux


def moe_forward(h, e, moe: SCMoE, train_mode: bool = False, generator=None) -> torch.Tensor:
    return moe(h, e, train_mode, generator)[0]


def density_class(n_neighbors: int) -> str:
    """POI+road count -> ``high`` (>15), ``medium`` (5..15) or ``low`` (<5)."""
    if n_neighbors > 15:
        return "high"
    if n_neighbors >= 5:
        return "medium"
    return "low"


@dataclass
class GateStats:
    """Per density class, the fraction of top-k selections landing on each expert.

    Counts top-k membership, not gate-weighted mass.
    """

    n_experts: int
    counts: dict[str, np.ndarray]

    @classmethod
    def empty(cls, n_experts: int) -> "GateStats":
        return cls(n_experts, {c: np.zeros(n_experts, dtype=np.int64) for c in DENSITY_CLASSES})

    def add(self, gates: np.ndarray, labels) -> None:
        """``gates [N, C]`` for N tokens with density labels (``None`` to skip)."""
        sel = np.asarray(gates) > 0
        for row, lab in zip(sel, labels):
            if lab is not None:
                self.counts[lab] += row

    def histograms(self) -> dict[str, np.ndarray]:
        out = {}
        for c, cnt in self.counts.items():
            tot = cnt.sum()
            out[c] = cnt / tot if tot else np.zeros(self.n_experts)
        return out

    def tokens(self, cls_name: str) -> int:
        return int(self.counts[cls_name].sum())

    def total_variation(self, a: str = "high", b: str = "low") -> float:
        h = self.histograms()
        return 0.5 * float(np.abs(h[a] - h[b]).sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["density"] + [f"expert_{j}" for j in range(self.n_experts)] + ["n_selections"])
        for c, hist in self.histograms().items():
            w.writerow([c] + [f"{x:.10f}" for x in hist] + [int(self.counts[c].sum())])
        return buf.getvalue()

    @staticmethod
    def read_csv(text: str) -> dict[str, np.ndarray]:
        rows = list(csv.reader(io.StringIO(text)))
        return {r[0]: np.array([float(x) for x in r[1:-1]]) for r in rows[1:]}


def gate_stats(gate_batches, label_batches, n_experts: int) -> GateStats:
    """Accumulate routing histograms from per-token gates and density labels."""
    stats = GateStats.empty(n_experts)
    for g, labels in zip(gate_batches, label_batches):
        stats.add(g, labels)
    return stats
