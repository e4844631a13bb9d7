"""The full trajectory encoder: modality mixing, stacked TRIE + SC-MoE layers, predictor."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from trajxfer.core import GeoPoint, MaskKind, ModelConfig, TaskInstance, temporal_features
from trajxfer.errors import DimMismatch, IncompatibleCheckpoint
from trajxfer.geo import RegionContext
from trajxfer.modality import ModalityEncoder, index_encoding
from trajxfer.moe import SCMoE, density_class
from trajxfer.trie import TrieAttention

CHECKPOINT_FORMAT = 1
TEMPORAL_EPS = 1e-8


def torch_dtype(cfg: ModelConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


@dataclass
class Batch:
    """Padded tensors for a list of task instances."""

    xy: torch.Tensor  # [B, n, 2] scaled offsets from the anchor, 0 where hidden
    tfeat: torch.Tensor  # [B, n, 4]
    poi: torch.Tensor  # [B, n, d_text]
    poi_has: torch.Tensor  # [B, n] bool
    road: torch.Tensor
    road_has: torch.Tensor
    kinds: torch.Tensor  # [B, n] long
    valid: torch.Tensor  # [B, n] bool
    xy_target: torch.Tensor  # [B, n, 2] degrees from the anchor
    xy_on: torch.Tensor  # [B, n] bool
    t_target: torch.Tensor  # [B, n, 4]
    t_on: torch.Tensor
    anchor: np.ndarray  # [B, 2] float64 (lng, lat)
    density: list  # per instance, per point: class name or None
    instances: list

    @property
    def lengths(self) -> list[int]:
        return [len(i) for i in self.instances]


class Featurizer:
    """Turns task instances into model inputs against one region context.

    Pooled neighbour embeddings are memoised per location; only points whose
    location is visible are ever looked up.
    """

    def __init__(self, ctx: RegionContext, cfg: ModelConfig):
        if ctx.poi_vectors is None or ctx.road_vectors is None:
            raise ValueError("region context has no embeddings attached")
        if ctx.d_text != cfg.d_text:
            raise DimMismatch(f"context d_text={ctx.d_text} but model expects {cfg.d_text}")
        self.ctx, self.cfg = ctx, cfg
        self._memo: dict[tuple[float, float], tuple] = {}

    def context_at(self, loc: GeoPoint):
        key = (loc.lng, loc.lat)
        hit = self._memo.get(key)
        if hit is None:
            poi_ids, road_ids = self.ctx.neighbor_ids(loc, self.cfg.poi_radius_m, self.cfg.road_radius_m)
            d = self.cfg.d_text
            poi = self.ctx.poi_vectors[poi_ids].mean(0) if poi_ids else np.zeros(d)
            road = self.ctx.road_vectors[road_ids].mean(0) if road_ids else np.zeros(d)
            hit = (poi, bool(poi_ids), road, bool(road_ids), len(poi_ids) + len(road_ids))
            self._memo[key] = hit
        return hit

    def __call__(self, instances: Sequence[TaskInstance], dtype=torch.float32) -> Batch:
        B, n, d = len(instances), max(len(i) for i in instances), self.cfg.d_text
        xy = np.zeros((B, n, 2))
        tfeat = np.zeros((B, n, 4))
        poi = np.zeros((B, n, d))
        road = np.zeros((B, n, d))
        poi_has = np.zeros((B, n), dtype=bool)
        road_has = np.zeros((B, n), dtype=bool)
        kinds = np.zeros((B, n), dtype=np.int64)
        valid = np.zeros((B, n), dtype=bool)
        xy_t = np.zeros((B, n, 2))
        xy_on = np.zeros((B, n), dtype=bool)
        t_t = np.zeros((B, n, 4))
        t_on = np.zeros((B, n), dtype=bool)
        anchor = np.zeros((B, 2))
        density = []
        scale = self.cfg.coord_scale
        for b, inst in enumerate(instances):
            a = inst.anchor
            anchor[b] = (a.lng, a.lat)
            dens = []
            for i, (ip, kind) in enumerate(zip(inst.input_points, inst.mask.kinds)):
                valid[b, i] = True
                kinds[b, i] = int(kind)
                if ip.loc is not None:
                    xy[b, i] = ((ip.loc.lng - a.lng) * scale, (ip.loc.lat - a.lat) * scale)
                    poi[b, i], poi_has[b, i], road[b, i], road_has[b, i], cnt = self.context_at(ip.loc)
                    dens.append(density_class(cnt))
                else:
                    dens.append(None)
                if ip.t is not None:
                    tfeat[b, i] = temporal_features(ip.t, inst.t_ref)
            for i, (s, t) in enumerate(zip(inst.spatial_targets, inst.temporal_targets)):
                if s is not None:
                    xy_t[b, i], xy_on[b, i] = s, True
                if t is not None:
                    t_t[b, i], t_on[b, i] = t, True
            density.append(dens)
        f = lambda arr: torch.as_tensor(arr, dtype=dtype)
        return Batch(
            xy=f(xy), tfeat=f(tfeat), poi=f(poi), poi_has=torch.as_tensor(poi_has),
            road=f(road), road_has=torch.as_tensor(road_has), kinds=torch.as_tensor(kinds),
            valid=torch.as_tensor(valid), xy_target=f(xy_t), xy_on=torch.as_tensor(xy_on),
            t_target=f(t_t), t_on=torch.as_tensor(t_on), anchor=anchor, density=density,
            instances=list(instances),
        )


class EncoderLayer(nn.Module):
    """TRIE then SC-MoE, each wrapped in residual + LayerNorm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = TrieAttention(cfg.d, cfg.n_heads, cfg.theta_base)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.moe = SCMoE(cfg.d, cfg.ff_dim, cfg.n_experts, cfg.top_k)
        self.norm2 = nn.LayerNorm(cfg.d)

    def forward(self, x, e, xy, valid, train_mode=False, generator=None):
        h = self.norm1(x + self.attn(x, xy, valid))
        m, gates, aux = self.moe(h, e, train_mode, generator)
        return self.norm2(h + m), gates, aux


@dataclass
class ModelOutput:
    xy_scaled: torch.Tensor  # [B, n, 2]
    t_hat: torch.Tensor  # [B, n, 4]
    z: torch.Tensor
    gates: list  # per layer [B, n, C]
    aux_loss: torch.Tensor
    coord_scale: float

    @property
    def xy_deg(self) -> torch.Tensor:
        return self.xy_scaled / self.coord_scale


@dataclass(frozen=True)
class PointPrediction:
    xy_hat: tuple[float, float]  # degrees from the anchor
    t_hat: tuple[float, float, float, float]
    lnglat_hat: GeoPoint


class RTTE(nn.Module):
    """Region-transferable trajectory encoder with its modality predictor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ModalityEncoder(
            cfg.d, cfg.d_text, cfg.n_freq, cfg.n_heads, cfg.ff_dim, cfg.mixer_layers, cfg.fourier_init_std
        )
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.head_xy = nn.Linear(cfg.d, 2)
        self.head_t = nn.Linear(cfg.d, 4)
        for layer in self.layers:
            nn.init.normal_(layer.attn.W_phi.weight, std=cfg.phi_init_std)
        self.to(torch_dtype(cfg))

    @property
    def dtype(self) -> torch.dtype:
        return self.head_xy.weight.dtype

    def forward(self, batch: Batch, train_mode: bool = False, generator: torch.Generator | None = None) -> ModelOutput:
        e, xy = self.encoder(batch.xy, batch.tfeat, batch.poi, batch.poi_has, batch.road, batch.road_has, batch.kinds)
        if self.cfg.index_encoding:
            e = e + index_encoding(e.shape[1], e.shape[2], e.dtype)
        validf = batch.valid.unsqueeze(-1).to(e.dtype)
        e = e * validf
        x, gates, aux = e, [], e.new_zeros(())
        for layer in self.layers:
            x, g, a = layer(x, e, xy, batch.valid, train_mode, generator)
            x = x * validf
            gates.append(g)
            aux = aux + a
        xy_hat, t_hat = predict_modalities(x, self.head_xy, self.head_t, self.cfg.time_scale)
        return ModelOutput(xy_hat * validf, t_hat * validf, x, gates, aux, self.cfg.coord_scale)

    def predictions(self, out: ModelOutput, batch: Batch) -> list[list[PointPrediction]]:
        xy = out.xy_deg.detach().double().numpy()
        th = out.t_hat.detach().double().numpy()
        res = []
        for b, n in enumerate(batch.lengths):
            alng, alat = batch.anchor[b]
            res.append([
                PointPrediction(
                    (float(xy[b, i, 0]), float(xy[b, i, 1])),
                    tuple(float(v) for v in th[b, i]),
                    GeoPoint(alng + float(xy[b, i, 0]), alat + float(xy[b, i, 1])),
                )
                for i in range(n)
            ])
        return res

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    def param_digest(self) -> str:
        """SHA-256 over every named parameter's bytes, in name order."""
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def predict_modalities(z: torch.Tensor, head_xy: nn.Linear, head_t: nn.Linear, time_scale: float = 1.0):
    """Linear spatial head and softplus temporal head (in units of ``time_scale``)."""
    return head_xy(z), F.softplus(head_t(z)) * time_scale


def reconstruction_loss(xy_deg: torch.Tensor, t_hat: torch.Tensor, xy_target: torch.Tensor, xy_on: torch.Tensor,
                        t_target: torch.Tensor, t_on: torch.Tensor, spatial_weight: float = 1.0) -> torch.Tensor:
    """Masked-modality reconstruction loss, averaged over contributing positions.

    Spatial term: squared degree error (times ``spatial_weight``) where the
    location was masked. Temporal term: L2 norm of the 4-feature error where
    the time was masked. A fully masked point contributes both terms and
    counts once. Positions without a masked modality are selected away
    with ``torch.where`` so their targets cannot reach the loss.
    """
    zero = xy_deg.new_zeros(())
    s_err = ((xy_deg - xy_target) ** 2).sum(-1)
    s_term = torch.where(xy_on, s_err, zero).sum() * spatial_weight
    t_sq = ((t_hat - t_target) ** 2).sum(-1)
    t_err = torch.sqrt(torch.where(t_on, t_sq, zero) + TEMPORAL_EPS)
    t_term = torch.where(t_on, t_err, zero).sum()
    count = (xy_on | t_on).sum()
    if int(count) == 0:
        return zero
    return (s_term + t_term) / count


def batch_loss(out: ModelOutput, batch: Batch, spatial_weight: float, task_filter: str | None = None) -> torch.Tensor:
    xy_on, t_on = batch.xy_on, batch.t_on
    if task_filter == "spatial":
        t_on = torch.zeros_like(t_on)
    elif task_filter == "temporal":
        xy_on = torch.zeros_like(xy_on)
    return reconstruction_loss(out.xy_deg, out.t_hat, batch.xy_target, xy_on, batch.t_target, t_on, spatial_weight)


def instance_loss(preds: Sequence[PointPrediction], inst: TaskInstance, spatial_weight: float = 1.0) -> float:
    """:func:`reconstruction_loss` for one instance given per-point predictions."""
    n = len(inst)
    if len(preds) != n:
        raise DimMismatch(f"{len(preds)} predictions for {n} points")
    xy = torch.tensor([p.xy_hat for p in preds], dtype=torch.float64)
    th = torch.tensor([p.t_hat for p in preds], dtype=torch.float64)
    xy_t = torch.tensor([s if s is not None else (0.0, 0.0) for s in inst.spatial_targets], dtype=torch.float64)
    t_t = torch.tensor([t if t is not None else (0.0,) * 4 for t in inst.temporal_targets], dtype=torch.float64)
    xy_on = torch.tensor([k.spatial for k in inst.mask.kinds])
    t_on = torch.tensor([k.temporal for k in inst.mask.kinds])
    return float(reconstruction_loss(xy, th, xy_t, xy_on, t_t, t_on, spatial_weight))


def forward_instances(model: RTTE, featurizer: Featurizer, instances: Sequence[TaskInstance],
                      train_mode: bool = False, generator=None):
    batch = featurizer(instances, model.dtype)
    return model(batch, train_mode, generator), batch


def named_gradients(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for k, p in model.named_parameters()}


def save_checkpoint(model: RTTE, path: str | Path, extra: dict | None = None) -> None:
    """Write format version, config and named tensors to one ``.npz`` container."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_dict(), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        tensors = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"unsupported checkpoint format {meta.get('format')}")
    return meta, tensors


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> RTTE:
    """Rebuild a model from a checkpoint; ``expect`` must agree on architecture."""
    meta, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    if expect is not None:
        check_compatible(cfg, expect)
    model = RTTE(cfg)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
    return model


ARCH_FIELDS = (
    "d", "n_layers", "n_heads", "n_experts", "top_k", "d_text", "n_freq", "d_ff", "mixer_layers",
    "index_encoding", "coord_scale", "time_scale",
)


def check_compatible(have: ModelConfig, want: ModelConfig) -> None:
    bad = [f for f in ARCH_FIELDS if getattr(have, f) != getattr(want, f)]
    if bad:
        detail = ", ".join(f"{f}: {getattr(have, f)} != {getattr(want, f)}" for f in bad)
        raise IncompatibleCheckpoint(f"checkpoint/config mismatch ({detail})")


__all__ = [
    "Batch",
    "Featurizer",
    "MaskKind",
    "ModelOutput",
    "PointPrediction",
    "RTTE",
    "batch_loss",
    "check_compatible",
    "forward_instances",
    "instance_loss",
    "load_checkpoint",
    "named_gradients",
    "predict_modalities",
    "reconstruction_loss",
    "save_checkpoint",
]
