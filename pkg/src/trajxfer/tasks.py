"""Mask-and-recover task adapters, travel-time readout, metrics, linear baseline.

Every task is expressed as a :class:`TaskInstance` built only from the
masking primitives: whole-point masks (``FULL``) and single-modality masks
(``SPATIAL`` / ``TEMPORAL``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajxfer.core import GeoPoint, MaskKind, TaskInstance, Trajectory
from trajxfer.errors import TooShort, ZeroTarget
from trajxfer.geo import haversine

TP_HORIZON = 5
TR_RATIOS = (4, 8, 16)


class TaskKind(str, enum.Enum):
    PRETRAIN = "pretrain"
    TP = "tp"
    TR = "tr"
    TTE = "tte"


@dataclass(frozen=True)
class MaskSpan:
    """1-based inclusive indices of the fully masked sub-trajectory."""

    s: int
    e: int

    def __post_init__(self):
        if not 1 <= self.s < self.e:
            raise ValueError(f"invalid span ({self.s}, {self.e})")


def draw_span(n: int, rng: np.random.Generator) -> MaskSpan:
    """Two distinct uniform draws from ``1..n``, ordered."""
    a, b = rng.choice(n, size=2, replace=False) + 1
    return MaskSpan(int(min(a, b)), int(max(a, b)))


def pretrain_mask_with_span(traj: Trajectory, rng: np.random.Generator) -> tuple[TaskInstance, MaskSpan]:
    n = len(traj)
    if n < 3:
        raise TooShort(f"pretraining needs n >= 3, got {n}")
    while True:
        span = draw_span(n, rng)
        coins = rng.random(n) < 0.5
        kinds = [
            MaskKind.FULL if span.s <= i + 1 <= span.e else (MaskKind.SPATIAL if coins[i] else MaskKind.TEMPORAL)
            for i in range(n)
        ]
        if any(not k.spatial for k in kinds):
            return TaskInstance.from_trajectory(traj, kinds), span


def pretrain_mask(traj: Trajectory, rng: np.random.Generator) -> TaskInstance:
    """Mask a random span fully and one random modality of every other point.

    Redraws when no point keeps its location (nothing to anchor offsets on).
    """
    return pretrain_mask_with_span(traj, rng)[0]


def make_tp_input(traj: Trajectory, horizon: int = TP_HORIZON) -> TaskInstance:
    """Observe all but the last ``horizon`` points, which are fully masked."""
    n = len(traj)
    if n < horizon + 1:
        raise TooShort(f"trajectory prediction needs n >= {horizon + 1}, got {n}")
    kinds = [MaskKind.NONE] * (n - horizon) + [MaskKind.FULL] * horizon
    return TaskInstance.from_trajectory(traj, kinds)


def tr_kept_indices(n: int, ratio: int) -> list[int]:
    kept = list(range(0, n, ratio))
    if kept[-1] != n - 1:
        kept.append(n - 1)
    return kept


def make_tr_input(dense: Trajectory, ratio: int) -> TaskInstance:
    """Keep every ``ratio``-th point (0-based) and the last one; mask the rest fully."""
    if ratio < 2:
        raise ValueError(f"sparsification ratio must be >= 2, got {ratio}")
    n = len(dense)
    if n < 3:
        raise TooShort(f"trajectory recovery needs n >= 3, got {n}")
    kept = set(tr_kept_indices(n, ratio))
    kinds = [MaskKind.NONE if i in kept else MaskKind.FULL for i in range(n)]
    return TaskInstance.from_trajectory(dense, kinds)


def make_tte_input(traj: Trajectory) -> TaskInstance:
    """Origin (visible) and destination (time masked) as a 2-point instance."""
    n = len(traj)
    if n < 2:
        raise TooShort(f"travel time estimation needs n >= 2, got {n}")
    od = Trajectory(traj.id, (traj.points[0], traj.points[-1]))
    return TaskInstance.from_trajectory(od, [MaskKind.NONE, MaskKind.TEMPORAL])


def make_instance(traj: Trajectory, task: TaskKind | str, ratio: int = 4, rng=None) -> TaskInstance:
    task = TaskKind(task)
    if task is TaskKind.PRETRAIN:
        return pretrain_mask(traj, rng)
    if task is TaskKind.TP:
        return make_tp_input(traj)
    if task is TaskKind.TR:
        return make_tr_input(traj, ratio)
    return make_tte_input(traj)


def extract_travel_time(pred) -> float:
    """Minutes: the elapsed-time component of the predicted temporal features."""
    return float(pred.t_hat[3])


def metrics(preds: Sequence, targets: Sequence, kind: str = "spatial", with_mape: bool | None = None) -> dict[str, float]:
    """RMSE / MAE (and MAPE for travel time).

    ``kind="spatial"``: GeoPoints, error = haversine meters.
    ``kind="time"``: minutes, error = pred - target; adds MAPE (percent).
    """
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    if kind == "spatial":
        err = np.array([haversine(p, t) for p, t in zip(preds, targets)], dtype=np.float64)
    elif kind == "time":
        err = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    if len(err) == 0:
        out = {"RMSE": math.nan, "MAE": math.nan}
    else:
        out = {"RMSE": float(np.sqrt(np.mean(err**2))), "MAE": float(np.mean(np.abs(err)))}
    if with_mape if with_mape is not None else kind == "time":
        tgt = np.asarray(targets, dtype=np.float64)
        if np.any(tgt == 0):
            raise ZeroTarget("MAPE undefined for zero targets")
        out["MAPE"] = float(np.mean(np.abs(err) / tgt) * 100.0) if len(tgt) else math.nan
    return out


def masked_positions(inst: TaskInstance) -> list[int]:
    return [i for i, k in enumerate(inst.mask.kinds) if k.spatial]


def linear_interp_baseline(inst: TaskInstance) -> dict[int, GeoPoint]:
    """Index-space linear interpolation of every location-masked point between visible neighbours."""
    known = [i for i, p in enumerate(inst.input_points) if p.loc is not None]
    out = {}
    for i in masked_positions(inst):
        left = max((k for k in known if k < i), default=None)
        right = min((k for k in known if k > i), default=None)
        if left is None or right is None:
            ref = inst.input_points[left if right is None else right].loc
            out[i] = ref
            continue
        a, b = inst.input_points[left].loc, inst.input_points[right].loc
        w = (i - left) / (right - left)
        out[i] = GeoPoint(a.lng + w * (b.lng - a.lng), a.lat + w * (b.lat - a.lat))
    return out
