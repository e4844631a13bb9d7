"""Domain types shared across the package.

Everything here is immutable after construction and carries no learnable
state. Timestamps are integer unix seconds (UTC).
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

from trajxfer.errors import (
    EmptyTrajectory,
    MissingTarget,
    NegativeDelta,
    NoAnchor,
    NonMonotonicTime,
    OutOfRangeCoordinate,
)


@dataclass(frozen=True)
class GeoPoint:
    lng: float
    lat: float

    def __post_init__(self):
        object.__setattr__(self, "lng", float(self.lng))
        object.__setattr__(self, "lat", float(self.lat))

    def in_range(self) -> bool:
        return -180.0 <= self.lng <= 180.0 and -90.0 <= self.lat <= 90.0


@dataclass(frozen=True)
class TrajectoryPoint:
    loc: GeoPoint
    t: int


@dataclass(frozen=True)
class Trajectory:
    id: str
    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        if not isinstance(self.points, tuple):
            object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def departure(self) -> int:
        return self.points[0].t

    @classmethod
    def from_rows(cls, traj_id: str, rows: Sequence[tuple[float, float, int]]) -> "Trajectory":
        """Build from ``(lng, lat, t)`` triples."""
        return cls(traj_id, tuple(TrajectoryPoint(GeoPoint(float(lng), float(lat)), int(t)) for lng, lat, t in rows))


@dataclass(frozen=True)
class POI:
    loc: GeoPoint
    desc: str

    def __post_init__(self):
        if not self.desc:
            raise ValueError("POI description must be nonempty")


@dataclass(frozen=True)
class RoadSegment:
    loc: GeoPoint  # midpoint
    desc: str

    def __post_init__(self):
        if not self.desc:
            raise ValueError("road description must be nonempty")


def validate_trajectory(traj: Trajectory) -> Trajectory:
    """Return ``traj`` unchanged if it is well formed, raise otherwise.

    Equal consecutive timestamps are accepted.
    """
    if not traj.points:
        raise EmptyTrajectory(f"trajectory {traj.id!r} has no points")
    prev = None
    for i, p in enumerate(traj.points):
        if not p.loc.in_range():
            raise OutOfRangeCoordinate(f"trajectory {traj.id!r} point {i}: ({p.loc.lng}, {p.loc.lat})")
        if p.t < 0:
            raise NonMonotonicTime(f"trajectory {traj.id!r} point {i}: negative timestamp {p.t}")
        if prev is not None and p.t < prev:
            raise NonMonotonicTime(f"trajectory {traj.id!r} point {i}: t={p.t} after t={prev}")
        prev = p.t
    return traj


def temporal_features(t_i: int, t_1: int) -> tuple[float, float, float, float]:
    """``[day of week (Monday=0), hour, minute, minutes since t_1]`` in UTC."""
    if t_i < t_1:
        raise NegativeDelta(f"t_i={t_i} precedes t_1={t_1}")
    dt = datetime.fromtimestamp(t_i, tz=timezone.utc)
    return (float(dt.weekday()), float(dt.hour), float(dt.minute), (t_i - t_1) / 60.0)


class MaskKind(enum.IntEnum):
    NONE = 0
    SPATIAL = 1
    TEMPORAL = 2
    FULL = 3

    @property
    def spatial(self) -> bool:
        """True when location (and so POI and road context) is hidden."""
        return self in (MaskKind.SPATIAL, MaskKind.FULL)

    @property
    def temporal(self) -> bool:
        return self in (MaskKind.TEMPORAL, MaskKind.FULL)


@dataclass(frozen=True)
class ModalityMask:
    kinds: tuple[MaskKind, ...]

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(MaskKind(k) for k in self.kinds))

    def __len__(self) -> int:
        return len(self.kinds)

    def __getitem__(self, i: int) -> MaskKind:
        return self.kinds[i]

    @classmethod
    def for_trajectory(cls, traj: Trajectory, kinds: Sequence[MaskKind | int]) -> "ModalityMask":
        if len(kinds) != len(traj):
            raise ValueError(f"mask length {len(kinds)} != trajectory length {len(traj)}")
        return cls(tuple(kinds))

    @classmethod
    def none(cls, n: int) -> "ModalityMask":
        return cls((MaskKind.NONE,) * n)


@dataclass(frozen=True)
class InputPoint:
    """A point as the model sees it; masked modalities are ``None``."""

    loc: GeoPoint | None
    t: int | None


@dataclass(frozen=True)
class TaskInstance:
    """Masked input sequence plus recovery targets.

    Targets are kept as absolute locations/timestamps so that unmasking is
    lossless; the relative forms the loss needs are derived on demand.
    Spatial offsets are measured from ``anchor``, the earliest point whose
    location is visible. Elapsed minutes are measured from ``t_ref``, the
    trajectory's departure time.
    """

    traj_id: str
    input_points: tuple[InputPoint, ...]
    mask: ModalityMask
    target_locs: tuple[GeoPoint | None, ...]
    target_times: tuple[int | None, ...]
    t_ref: int
    anchor_index: int = field(init=False)

    def __post_init__(self):
        n = len(self.input_points)
        if not (len(self.mask) == len(self.target_locs) == len(self.target_times) == n):
            raise ValueError("instance fields disagree in length")
        anchor = None
        for i, (kind, ip, loc, t) in enumerate(zip(self.mask.kinds, self.input_points, self.target_locs, self.target_times)):
            if kind.spatial != (loc is not None):
                raise MissingTarget(f"point {i}: spatial target presence does not match mask {kind.name}")
            if kind.temporal != (t is not None):
                raise MissingTarget(f"point {i}: temporal target presence does not match mask {kind.name}")
            if kind.spatial == (ip.loc is not None) or kind.temporal == (ip.t is not None):
                raise ValueError(f"point {i}: input leaks or lacks a modality under mask {kind.name}")
            if anchor is None and not kind.spatial:
                anchor = i
        if anchor is None:
            raise NoAnchor(f"instance {self.traj_id!r}: every location is masked")
        object.__setattr__(self, "anchor_index", anchor)

    def __len__(self) -> int:
        return len(self.input_points)

    @property
    def anchor(self) -> GeoPoint:
        return self.input_points[self.anchor_index].loc

    @property
    def spatial_targets(self) -> tuple[tuple[float, float] | None, ...]:
        a = self.anchor
        return tuple(None if g is None else (g.lng - a.lng, g.lat - a.lat) for g in self.target_locs)

    @property
    def temporal_targets(self) -> tuple[tuple[float, float, float, float] | None, ...]:
        return tuple(None if t is None else temporal_features(t, self.t_ref) for t in self.target_times)

    @classmethod
    def from_trajectory(cls, traj: Trajectory, kinds: Sequence[MaskKind | int]) -> "TaskInstance":
        mask = ModalityMask.for_trajectory(traj, kinds)
        inputs, locs, times = [], [], []
        for p, kind in zip(traj.points, mask.kinds):
            inputs.append(InputPoint(None if kind.spatial else p.loc, None if kind.temporal else p.t))
            locs.append(p.loc if kind.spatial else None)
            times.append(p.t if kind.temporal else None)
        return cls(traj.id, tuple(inputs), mask, tuple(locs), tuple(times), traj.points[0].t)

    def with_targets(self, target_locs=None, target_times=None) -> "TaskInstance":
        """Copy with replaced targets (input side unchanged)."""
        return dataclasses.replace(
            self,
            target_locs=self.target_locs if target_locs is None else tuple(target_locs),
            target_times=self.target_times if target_times is None else tuple(target_times),
        )

    def unmask_all(self) -> Trajectory:
        """Merge inputs and targets back into the original trajectory."""
        pts = []
        for ip, loc, t in zip(self.input_points, self.target_locs, self.target_times):
            pts.append(TrajectoryPoint(loc if ip.loc is None else ip.loc, t if ip.t is None else ip.t))
        return Trajectory(self.traj_id, tuple(pts))


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the encoder and its training loop.

    ``coord_scale`` multiplies degree offsets before they enter the network
    (100 gives units of about 1.1 km, so city-scale offsets are O(1) for
    the linear input and output maps). ``phi_init_std`` is the initial
    spread of the rotary angle map in radians per unit offset.
    ``time_scale`` is the output unit of the temporal head, so hours and
    minutes are reached without huge pre-activations. ``index_encoding``
    adds a fixed sinusoidal code of the point's index to its mixed
    embedding; switch it off for the purely modality-driven variant.
    ``lr_schedule="cosine"`` decays the rate to zero over the planned
    steps of one training call. ``spatial_loss_weight`` multiplies the squared-degree spatial loss; 1e6
    makes it squared milli-degrees, comparable to the temporal term.
    """

    d: int = 128
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 4
    theta_base: float = 10000.0
    poi_radius_m: float = 100.0
    road_radius_m: float = 100.0
    max_len: int = 120
    lr: float = 1e-3
    lr_schedule: str = "constant"
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    d_text: int = 64
    n_freq: int = 32
    fourier_init_std: float = 1.0
    d_ff: int | None = None
    mixer_layers: int = 1
    coord_scale: float = 100.0
    phi_init_std: float = 30.0
    time_scale: float = 10.0
    index_encoding: bool = True
    spatial_loss_weight: float = 1e6
    aux_loss_coef: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"d must be even and positive, got {self.d}")
        if self.n_heads <= 0 or self.d % (2 * self.n_heads):
            raise ValueError(f"d={self.d} must be divisible by 2*H={2 * self.n_heads}")
        if self.n_layers < 1 or self.mixer_layers < 1:
            raise ValueError("layer counts must be positive")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= k <= C, got k={self.top_k}, C={self.n_experts}")
        if self.poi_radius_m <= 0 or self.road_radius_m <= 0:
            raise ValueError("radii must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})
