"""Per-point modality embeddings (spatial, temporal, POI, road) and their mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from trajxfer.core import GeoPoint, MaskKind, temporal_features  # noqa: F401  (re-exported)

N_MODALITIES = 4  # spatial, temporal, poi, road


def encode_spatial(p_i: GeoPoint, p_1: GeoPoint, linear: nn.Linear | None = None):
    """Degree offset of ``p_i`` from ``p_1`` and, if a map is given, its embedding."""
    x, y = p_i.lng - p_1.lng, p_i.lat - p_1.lat
    if linear is None:
        return None, (x, y)
    w = linear.weight
    return linear(torch.tensor([x, y], dtype=w.dtype)), (x, y)


class FourierEncoder(nn.Module):
    """Learnable Fourier features of the 4 temporal scalars, then a 2-layer MLP."""

    def __init__(self, d: int, n_freq: int = 32, n_in: int = 4, init_std: float = 0.25):
        super().__init__()
        self.n_freq = n_freq
        self.W_r = nn.Parameter(torch.randn(n_in, n_freq) * init_std)
        self.mlp = nn.Sequential(nn.Linear(2 * n_freq, d), nn.GELU(), nn.Linear(d, d))

    def features(self, feat: torch.Tensor) -> torch.Tensor:
        proj = feat @ self.W_r
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1) / math.sqrt(self.n_freq)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.features(feat))


@dataclass
class ModalityEmbeddings:
    e_s: torch.Tensor  # [..., d]
    e_t: torch.Tensor
    e_p: torch.Tensor
    e_r: torch.Tensor
    xy: torch.Tensor  # [..., 2]

    def stack(self) -> torch.Tensor:
        return torch.stack([self.e_s, self.e_t, self.e_p, self.e_r], dim=-2)


class MaskTokens(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.m_s = nn.Parameter(torch.randn(d) * 0.02)
        self.m_t = nn.Parameter(torch.randn(d) * 0.02)
        self.m_p = nn.Parameter(torch.randn(d) * 0.02)
        self.m_r = nn.Parameter(torch.randn(d) * 0.02)


def apply_mask(emb: ModalityEmbeddings, kinds, tokens: MaskTokens) -> ModalityEmbeddings:
    """Substitute mask tokens for hidden modalities.

    ``kinds`` is a MaskKind or an integer tensor broadcastable to the leading
    dims of the embeddings. Spatial masking also hides POI/road context and
    zeroes the offset, which makes the rotary angle an identity rotation.
    """
    kinds = torch.as_tensor(int(kinds) if isinstance(kinds, MaskKind) else kinds)
    sp = ((kinds == MaskKind.SPATIAL) | (kinds == MaskKind.FULL)).unsqueeze(-1)
    tm = ((kinds == MaskKind.TEMPORAL) | (kinds == MaskKind.FULL)).unsqueeze(-1)
    return ModalityEmbeddings(
        e_s=torch.where(sp, tokens.m_s, emb.e_s),
        e_t=torch.where(tm, tokens.m_t, emb.e_t),
        e_p=torch.where(sp, tokens.m_p, emb.e_p),
        e_r=torch.where(sp, tokens.m_r, emb.e_r),
        xy=torch.where(sp, torch.zeros_like(emb.xy), emb.xy),
    )


class EncoderBlock(nn.Module):
    """Pre-norm transformer block; zero ``attn_out`` and ``ff[-1]`` and it is the identity."""

    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, m, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, m, self.n_heads, dh).transpose(-2, -3)
        q, k, v = split(q), split(k), split(v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (att @ v).transpose(-2, -3).reshape(*lead, m, d)
        x = x + self.attn_out(o)
        return x + self.ff(self.norm2(x))


class ModalityMixer(nn.Module):
    """Treat the 4 modality vectors as a length-4 sequence, encode, mean-pool."""

    def __init__(self, d: int, n_heads: int, d_ff: int, n_layers: int = 1):
        super().__init__()
        self.type_enc = nn.Parameter(torch.randn(N_MODALITIES, d) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(d, n_heads, d_ff) for _ in range(n_layers))

    def make_identity(self):
        """Zero every residual branch and the type encodings (test helper)."""
        with torch.no_grad():
            self.type_enc.zero_()
            for b in self.blocks:
                b.attn_out.weight.zero_()
                b.attn_out.bias.zero_()
                b.ff[-1].weight.zero_()
                b.ff[-1].bias.zero_()

    def forward(self, emb: ModalityEmbeddings) -> torch.Tensor:
        x = emb.stack() + self.type_enc
        for b in self.blocks:
            x = b(x)
        return x.mean(dim=-2)


class ModalityEncoder(nn.Module):
    """Maps raw per-point features to the mixed point embedding ``e_i``."""

    def __init__(self, d: int, d_text: int, n_freq: int, n_heads: int, d_ff: int, mixer_layers: int = 1,
                 fourier_init_std: float = 0.25):
        super().__init__()
        self.spatial = nn.Linear(2, d)
        self.temporal = FourierEncoder(d, n_freq, init_std=fourier_init_std)
        self.poi = nn.Linear(d_text, d)
        self.road = nn.Linear(d_text, d)
        self.null_poi = nn.Parameter(torch.randn(d_text) * 0.02)
        self.null_road = nn.Parameter(torch.randn(d_text) * 0.02)
        self.tokens = MaskTokens(d)
        self.mixer = ModalityMixer(d, n_heads, d_ff, mixer_layers)

    def encode_context(self, pooled_poi: torch.Tensor, pooled_road: torch.Tensor):
        return self.poi(pooled_poi), self.road(pooled_road)

    def embed(self, xy, tfeat, poi, poi_has, road, road_has) -> ModalityEmbeddings:
        poi = torch.where(poi_has.unsqueeze(-1), poi, self.null_poi)
        road = torch.where(road_has.unsqueeze(-1), road, self.null_road)
        e_p, e_r = self.encode_context(poi, road)
        return ModalityEmbeddings(self.spatial(xy), self.temporal(tfeat), e_p, e_r, xy)

    def forward(self, xy, tfeat, poi, poi_has, road, road_has, kinds):
        emb = apply_mask(self.embed(xy, tfeat, poi, poi_has, road, road_has), kinds, self.tokens)
        return self.mixer(emb), emb.xy


def index_encoding(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal encoding of the point index, ``[n, d]``.

    Fully masked points have no location and no time, so without this every
    one of them would receive the same embedding and the same prediction.
    """
    pos = torch.arange(n, dtype=dtype).unsqueeze(1)
    freq = torch.exp(torch.arange(0, d, 2, dtype=dtype) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def mix_modalities(emb: ModalityEmbeddings, mixer: ModalityMixer) -> torch.Tensor:
    return mixer(emb)


def fourier_encode(feat: torch.Tensor, enc: FourierEncoder) -> torch.Tensor:
    return enc(feat)


__all__ = [
    "FourierEncoder",
    "MaskTokens",
    "ModalityEmbeddings",
    "ModalityEncoder",
    "ModalityMixer",
    "apply_mask",
    "encode_spatial",
    "fourier_encode",
    "index_encoding",
    "mix_modalities",
    "temporal_features",
]
