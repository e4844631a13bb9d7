"""Ingestion, preprocessing, chronological split and the synthetic region generator."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from trajxfer.core import POI, GeoPoint, RoadSegment, Trajectory, TrajectoryPoint, validate_trajectory
from trajxfer.errors import InvalidSpec, OutOfRange, ParseError, TrajError
from trajxfer.geo import EARTH_RADIUS_M, RegionContext, build_index, write_store

log = logging.getLogger(__name__)

FORMATS = ("point-rows", "line-records")


# --------------------------------------------------------------------------- io

def _parse_float(text: str, line: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(line, f"{what} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(line, f"{what} {text!r} is not finite")
    return v


def _parse_time(text: str, line: int) -> int:
    v = _parse_float(text, line, "timestamp")
    return int(v)


def ingest(path: str | os.PathLike, fmt: str = "point-rows") -> list[Trajectory]:
    """Read trajectories from a delimited UTF-8 file.

    ``point-rows``: header ``traj_id,lng,lat,t``, one point per row, rows of
    one trajectory contiguous and time-ordered.
    ``line-records``: header ``id,points``, one trajectory per row with
    ``points`` = ``"lng lat t;lng lat t;..."``.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) <= 1:
        log.warning("%s: no trajectories", path)
        return []
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if r]
    trajs: list[Trajectory] = []
    if fmt == "point-rows":
        cur_id, pts, first_line = None, [], 0
        for line, r in body:
            if len(r) != 4:
                raise ParseError(line, f"expected 4 fields, got {len(r)}")
            tid = r[0]
            p = TrajectoryPoint(GeoPoint(_parse_float(r[1], line, "lng"), _parse_float(r[2], line, "lat")),
                                _parse_time(r[3], line))
            if tid != cur_id:
                if cur_id is not None:
                    trajs.append(_checked(Trajectory(cur_id, tuple(pts)), first_line))
                cur_id, pts, first_line = tid, [], line
            pts.append(p)
        if cur_id is not None:
            trajs.append(_checked(Trajectory(cur_id, tuple(pts)), first_line))
    else:
        for line, r in body:
            if len(r) != 2:
                raise ParseError(line, f"expected 2 fields, got {len(r)}")
            pts = []
            for triple in filter(None, r[1].split(";")):
                parts = triple.split()
                if len(parts) != 3:
                    raise ParseError(line, f"bad point {triple!r}")
                pts.append(TrajectoryPoint(
                    GeoPoint(_parse_float(parts[0], line, "lng"), _parse_float(parts[1], line, "lat")),
                    _parse_time(parts[2], line)))
            trajs.append(_checked(Trajectory(r[0], tuple(pts)), line))
    return trajs


def _checked(traj: Trajectory, line: int) -> Trajectory:
    try:
        return validate_trajectory(traj)
    except TrajError as exc:
        raise ParseError(line, str(exc)) from exc


def write_trajectories(path: str | os.PathLike, trajs: Sequence[Trajectory], fmt: str = "point-rows") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fmt == "point-rows":
            w.writerow(["traj_id", "lng", "lat", "t"])
            for tr in trajs:
                for p in tr.points:
                    w.writerow([tr.id, repr(p.loc.lng), repr(p.loc.lat), p.t])
        elif fmt == "line-records":
            w.writerow(["id", "points"])
            for tr in trajs:
                w.writerow([tr.id, ";".join(f"{p.loc.lng!r} {p.loc.lat!r} {p.t}" for p in tr.points)])
        else:
            raise ValueError(f"unknown format {fmt!r}")


# ------------------------------------------------------------------ preprocess

def three_hop_resample(traj: Trajectory) -> Trajectory:
    """Keep 0-based indices divisible by 3, plus the final point."""
    n = len(traj)
    idx = list(range(0, n, 3))
    if n and idx[-1] != n - 1:
        idx.append(n - 1)
    return Trajectory(traj.id, tuple(traj.points[i] for i in idx))


def filter_lengths(trajs: Sequence[Trajectory], min_len: int = 5, max_len: int = 120) -> list[Trajectory]:
    return [t for t in trajs if min_len <= len(t) <= max_len]


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]


def chronological_split(trajs: Sequence[Trajectory], ratios: Sequence[float] = (8, 1, 1)) -> DatasetSplit:
    """Sort by departure (stable) and cut train/val by floor, test takes the rest."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    order = sorted(range(len(trajs)), key=lambda i: trajs[i].departure)
    ordered = [trajs[i] for i in order]
    n, tot = len(ordered), float(sum(ratios))
    n_train = math.floor(n * ratios[0] / tot)
    n_val = math.floor(n * ratios[1] / tot)
    return DatasetSplit(ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:])


def preprocess(trajs: Sequence[Trajectory], resample: bool = True, min_len: int = 5, max_len: int = 120,
               ratios=(8, 1, 1)) -> DatasetSplit:
    if resample:
        trajs = [three_hop_resample(t) for t in trajs]
    return chronological_split(filter_lengths(trajs, min_len, max_len), ratios)


# ------------------------------------------------------------------- synthetic

POI_TYPES_DENSE = ("restaurant", "cafe", "shopping mall", "bank", "hotel", "cinema", "pharmacy", "bookstore")
POI_TYPES_SPARSE = ("gas station", "warehouse", "farm supply", "car wash", "storage yard")
STREET_NAMES = ("Oak", "Maple", "River", "Hill", "Cedar", "Lake", "Pine", "Elm", "Bridge", "Market", "Park", "Mill")


@dataclass(frozen=True)
class SynthRegionSpec:
    """Parameters of a synthetic city.

    The road network is a square grid warped by a smooth sinusoidal field,
    so streets are gently curved. POIs are drawn mostly from a few seeded
    clusters (dense context) with a thin uniform background. Vehicles move
    slowly with frequent turns inside clusters and fast, straight outside.
    """

    seed: int = 0
    bounds: tuple[float, float, float, float] = (104.040, 30.660, 104.075, 30.690)  # lng_min, lat_min, lng_max, lat_max
    grid_spacing_m: float = 230.0
    n_pois: int = 600
    n_roads: int = 10_000
    n_trajectories: int = 200
    n_clusters: int = 3
    cluster_radius_m: float = 350.0
    background_poi_fraction: float = 0.1
    dense_speed_mps: tuple[float, float] = (2.0, 7.0)
    sparse_speed_mps: tuple[float, float] = (11.0, 17.0)
    sampling_interval_s: int = 2
    warp_amplitude_m: float = 45.0
    warp_wavelength_m: float = 700.0
    min_trip_m: float = 800.0
    gps_noise_m: float = 0.0
    t_start: int = 1_696_118_400  # 2023-10-01T00:00:00Z
    t_span_s: int = 7 * 86400

    def validate(self) -> "SynthRegionSpec":
        lng0, lat0, lng1, lat1 = self.bounds
        if not (lng0 < lng1 and lat0 < lat1):
            raise InvalidSpec(f"empty bounds {self.bounds}")
        if not (-180 <= lng0 and lng1 <= 180 and -90 <= lat0 and lat1 <= 90):
            raise InvalidSpec(f"bounds out of range {self.bounds}")
        for name in ("n_pois", "n_roads", "n_trajectories", "n_clusters", "sampling_interval_s"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.grid_spacing_m <= 0 or self.cluster_radius_m <= 0:
            raise InvalidSpec("grid spacing and cluster radius must be positive")
        if min(self.dense_speed_mps + self.sparse_speed_mps) <= 0:
            raise InvalidSpec("speeds must be positive")
        return self


class _Frame:
    """Local metric frame (meters east/north of the box corner)."""

    def __init__(self, bounds):
        self.lng0, self.lat0, lng1, lat1 = bounds
        self.m_lat = EARTH_RADIUS_M * math.pi / 180.0
        self.m_lng = self.m_lat * math.cos(math.radians((self.lat0 + lat1) / 2))
        self.width = (lng1 - self.lng0) * self.m_lng
        self.height = (lat1 - self.lat0) * self.m_lat

    def to_geo(self, x: float, y: float) -> GeoPoint:
        return GeoPoint(self.lng0 + x / self.m_lng, self.lat0 + y / self.m_lat)


@dataclass
class _City:
    spec: SynthRegionSpec
    frame: _Frame
    nx: int
    ny: int
    margin: float
    phase: tuple[float, float]
    centers: np.ndarray  # [n_clusters, 2] meters

    def node_xy(self, ix: float, iy: float) -> tuple[float, float]:
        return self.margin + ix * self.spec.grid_spacing_m, self.margin + iy * self.spec.grid_spacing_m

    def warp(self, x: float, y: float) -> tuple[float, float]:
        a, lam = self.spec.warp_amplitude_m, self.spec.warp_wavelength_m
        return (x + a * math.sin(2 * math.pi * y / lam + self.phase[0]),
                y + a * math.sin(2 * math.pi * x / lam + self.phase[1]))

    def dense_at(self, x: float, y: float) -> bool:
        d = np.hypot(self.centers[:, 0] - x, self.centers[:, 1] - y)
        return bool(np.any(d <= self.spec.cluster_radius_m))


def _layout(spec: SynthRegionSpec, rng: np.random.Generator) -> _City:
    frame = _Frame(spec.bounds)
    margin = spec.warp_amplitude_m + 20.0
    nx = int((frame.width - 2 * margin) // spec.grid_spacing_m)
    ny = int((frame.height - 2 * margin) // spec.grid_spacing_m)
    if nx < 2 or ny < 2:
        raise InvalidSpec("bounds too small for the grid spacing")
    phase = tuple(rng.uniform(0, 2 * math.pi, size=2))
    cx = rng.uniform(margin, frame.width - margin, size=spec.n_clusters)
    cy = rng.uniform(margin, frame.height - margin, size=spec.n_clusters)
    return _City(spec, frame, nx, ny, margin, phase, np.stack([cx, cy], axis=1))


def _make_pois(city: _City, rng: np.random.Generator) -> list[POI]:
    spec, fr = city.spec, city.frame
    n_bg = int(round(spec.n_pois * spec.background_poi_fraction))
    n_cl = spec.n_pois - n_bg
    pois = []
    for k in range(spec.n_pois):
        if k < n_cl:
            c = city.centers[k % spec.n_clusters]
            x, y = rng.normal(c, spec.cluster_radius_m / 2.0)
            kind = POI_TYPES_DENSE[rng.integers(len(POI_TYPES_DENSE))]
        else:
            x, y = rng.uniform(0, fr.width), rng.uniform(0, fr.height)
            kind = POI_TYPES_SPARSE[rng.integers(len(POI_TYPES_SPARSE))]
        x, y = float(np.clip(x, 1.0, fr.width - 1.0)), float(np.clip(y, 1.0, fr.height - 1.0))
        name = STREET_NAMES[rng.integers(len(STREET_NAMES))]
        desc = f"{name} {kind} #{k}, type {kind}, address {int(rng.integers(1, 999))} {name} Street"
        pois.append(POI(fr.to_geo(x, y), desc))
    return pois


def _make_roads(city: _City, rng: np.random.Generator) -> list[RoadSegment]:
    spec, g = city.spec, city.spec.grid_spacing_m
    roads = []
    for iy in range(city.ny + 1):
        for ix in range(city.nx + 1):
            for dx, dy in ((1, 0), (0, 1)):
                jx, jy = ix + dx, iy + dy
                if jx > city.nx or jy > city.ny:
                    continue
                mx, my = city.node_xy((ix + jx) / 2, (iy + jy) / 2)
                dense = city.dense_at(mx, my)
                kind = "lane" if dense else "avenue"
                name = STREET_NAMES[(iy if dx else ix) % len(STREET_NAMES)]
                desc = f"{name} {kind}, type {'local street' if dense else 'arterial road'}, length {int(g)} m"
                roads.append(RoadSegment(city.frame.to_geo(*city.warp(mx, my)), desc))
    if len(roads) > spec.n_roads:
        keep = np.sort(rng.choice(len(roads), size=spec.n_roads, replace=False))
        roads = [roads[i] for i in keep]
    return roads


def _grid_path(city: _City, start, goal, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Monotone (shortest) lattice path; random axis choice in dense cells, straight otherwise."""
    (x, y), (gx, gy) = start, goal
    sx, sy = (1 if gx > x else -1), (1 if gy > y else -1)
    path = [(x, y)]
    heading = None
    while (x, y) != (gx, gy):
        moves = []
        if x != gx:
            moves.append("x")
        if y != gy:
            moves.append("y")
        if len(moves) == 1:
            axis = moves[0]
        elif city.dense_at(*city.node_xy(x, y)):
            axis = moves[rng.integers(2)]
        else:
            axis = heading if heading in moves else moves[rng.integers(2)]
        if axis == "x":
            x += sx
        else:
            y += sy
        heading = axis
        path.append((x, y))
    return path


def _drive(city: _City, path, t0: int, traj_id: str, rng: np.random.Generator) -> Trajectory:
    spec = city.spec
    verts = np.array([city.node_xy(ix, iy) for ix, iy in path], dtype=np.float64)
    seg = np.diff(verts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]

    def at(s: float) -> tuple[float, float]:
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        w = (s - cum[k]) / seg_len[k]
        return tuple(verts[k] + w * seg[k])

    pts, s, t = [], 0.0, t0
    while True:
        x, y = at(min(s, total))
        wx, wy = city.warp(x, y)
        if spec.gps_noise_m:
            wx += rng.normal(0, spec.gps_noise_m)
            wy += rng.normal(0, spec.gps_noise_m)
        pts.append(TrajectoryPoint(city.frame.to_geo(wx, wy), int(t)))
        if s >= total:
            break
        lo, hi = spec.dense_speed_mps if city.dense_at(x, y) else spec.sparse_speed_mps
        s += rng.uniform(lo, hi) * spec.sampling_interval_s
        t += spec.sampling_interval_s
    return Trajectory(traj_id, tuple(pts))


def generate_region(spec: SynthRegionSpec) -> tuple[RegionContext, list[Trajectory]]:
    """Deterministic synthetic city: context stores and trajectories for one seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    city = _layout(spec, rng)
    pois = _make_pois(city, rng)
    roads = _make_roads(city, rng)
    trajs = []
    min_hops = max(1, math.ceil(spec.min_trip_m / spec.grid_spacing_m))
    k = 0
    while len(trajs) < spec.n_trajectories:
        a = (int(rng.integers(city.nx + 1)), int(rng.integers(city.ny + 1)))
        b = (int(rng.integers(city.nx + 1)), int(rng.integers(city.ny + 1)))
        k += 1
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) < min_hops:
            continue
        t0 = spec.t_start + int(rng.integers(spec.t_span_s))
        path = _grid_path(city, a, b, rng)
        trajs.append(_drive(city, path, t0, f"s{spec.seed}-{len(trajs):05d}", rng))
    return build_index(pois, roads), trajs


def point_speeds(traj: Trajectory) -> np.ndarray:
    """Haversine speed (m/s) of each consecutive step."""
    from trajxfer.geo import haversine

    out = []
    for a, b in zip(traj.points, traj.points[1:]):
        dt = b.t - a.t
        if dt > 0:
            out.append(haversine(a.loc, b.loc) / dt)
    return np.array(out)


def translate_region(ctx: RegionContext, trajs: Sequence[Trajectory], dlng: float, dlat: float):
    """Shift every POI, road and trajectory point by the same degree offset."""

    def shift(p: GeoPoint) -> GeoPoint:
        q = GeoPoint(p.lng + dlng, p.lat + dlat)
        if not q.in_range():
            raise OutOfRange(f"({p.lng}, {p.lat}) shifted out of range")
        return q

    pois = [POI(shift(p.loc), p.desc) for p in ctx.pois]
    roads = [RoadSegment(shift(r.loc), r.desc) for r in ctx.roads]
    new_ctx = build_index(pois, roads, ctx.cell_size_m)
    new_ctx.poi_vectors, new_ctx.road_vectors = ctx.poi_vectors, ctx.road_vectors
    new_trajs = [
        Trajectory(t.id, tuple(TrajectoryPoint(shift(p.loc), p.t) for p in t.points)) for t in trajs
    ]
    return new_ctx, new_trajs


def export_region(out_dir: str | os.PathLike, ctx: RegionContext, trajs: Sequence[Trajectory],
                  fmt: str = "point-rows") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"pois": out / "pois.csv", "roads": out / "roads.csv", "trajectories": out / "trajectories.csv"}
    write_store(paths["pois"], ctx.pois)
    write_store(paths["roads"], ctx.roads)
    write_trajectories(paths["trajectories"], trajs, fmt)
    return paths
