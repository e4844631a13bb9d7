"""Spatial retrieval of POIs / road segments and text-embedding provisioning."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from trajxfer.core import POI, GeoPoint, RoadSegment
from trajxfer.errors import ProviderUnavailable

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
_M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlng = math.radians(b.lng - a.lng)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlng / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_np(lng1, lat1, lng2, lat2) -> np.ndarray:
    """Vectorised haversine over broadcastable degree arrays."""
    lat1, lat2 = np.radians(lat1), np.radians(lat2)
    dlat = lat2 - lat1
    dlng = np.radians(np.asarray(lng2) - np.asarray(lng1))
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlng / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


class GridIndex:
    """Uniform lat/lng grid over a list of located items.

    Cells are ``cell_size_m`` tall; their width in degrees is fixed from the
    mean latitude of the stored items. Queries enumerate every cell that can
    hold a point within the radius, so results never depend on cell size.
    Antimeridian wrap-around is not handled.
    """

    def __init__(self, locs: Sequence[GeoPoint], cell_size_m: float = 100.0):
        if cell_size_m <= 0:
            raise ValueError("cell_size_m must be positive")
        self.cell_size_m = float(cell_size_m)
        self.lng = np.array([p.lng for p in locs], dtype=np.float64)
        self.lat = np.array([p.lat for p in locs], dtype=np.float64)
        ref_lat = float(self.lat.mean()) if len(locs) else 0.0
        self.cell_lat = self.cell_size_m / _M_PER_DEG
        self.cell_lng = self.cell_lat / max(math.cos(math.radians(ref_lat)), 1e-6)
        cells: dict[tuple[int, int], list[int]] = {}
        for i in range(len(locs)):
            cells.setdefault(self._key(self.lng[i], self.lat[i]), []).append(i)
        self.cells = {k: np.array(v, dtype=np.int64) for k, v in cells.items()}

    def __len__(self) -> int:
        return len(self.lng)

    def _key(self, lng: float, lat: float) -> tuple[int, int]:
        return (math.floor(lng / self.cell_lng), math.floor(lat / self.cell_lat))

    def query(self, p: GeoPoint, radius_m: float) -> list[tuple[int, float]]:
        """``(item index, distance)`` pairs within ``radius_m``, by distance then index."""
        if radius_m <= 0:
            raise ValueError("radius_m must be positive")
        if not self.cells:
            return []
        delta = radius_m / EARTH_RADIUS_M
        dlat = math.degrees(delta) * 1.001
        edge = math.radians(min(89.999, abs(p.lat) + dlat))
        ratio = math.sin(delta) / math.cos(edge)
        dlng = 180.0 if ratio >= 1.0 else math.degrees(math.asin(ratio)) * 1.001
        lo_x, lo_y = self._key(p.lng - dlng, p.lat - dlat)
        hi_x, hi_y = self._key(p.lng + dlng, p.lat + dlat)
        chunks = [
            self.cells[(x, y)]
            for x in range(lo_x, hi_x + 1)
            for y in range(lo_y, hi_y + 1)
            if (x, y) in self.cells
        ]
        if not chunks:
            return []
        cand = np.concatenate(chunks)
        dist = haversine_np(p.lng, p.lat, self.lng[cand], self.lat[cand])
        keep = dist <= radius_m
        cand, dist = cand[keep], dist[keep]
        order = np.lexsort((cand, dist))
        return [(int(cand[i]), float(dist[i])) for i in order]


class TextEmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Unit-norm rows, one per text, deterministic per text."""
        ...


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class StubProvider:
    """Offline provider: a seeded Gaussian direction per text hash."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.calls: list[list[str]] = []

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls.append(list(texts))
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            seed = int(content_hash(text)[:16], 16)
            v = np.random.default_rng(seed).standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class RemoteProvider:
    """HTTP adapter for an OpenAI-style embedding endpoint.

    Request: ``POST {url}`` with JSON ``{"model": ..., "input": [texts]}``.
    Response: either ``{"data": [{"embedding": [...]}, ...]}`` or
    ``{"embeddings": [[...], ...]}``, one row per input in order.
    Configured from ``TRAJXFER_EMBED_URL``, ``TRAJXFER_EMBED_TOKEN`` and
    ``TRAJXFER_EMBED_MODEL`` unless given explicitly.
    """

    def __init__(self, dim: int, url: str | None = None, token: str | None = None,
                 model: str | None = None, client=None, timeout: float = 30.0):
        import httpx

        self.dim = dim
        self.url = url or os.environ.get("TRAJXFER_EMBED_URL")
        self.token = token or os.environ.get("TRAJXFER_EMBED_TOKEN")
        self.model = model or os.environ.get("TRAJXFER_EMBED_MODEL", "text-embedding-3-small")
        if not self.url:
            raise ProviderUnavailable("no embedding endpoint configured (TRAJXFER_EMBED_URL)")
        self.client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            resp = self.client.post(self.url, json={"model": self.model, "input": list(texts)}, headers=headers)
            resp.raise_for_status()
            body = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise ProviderUnavailable(str(exc)) from exc
        rows = [r["embedding"] for r in body["data"]] if "data" in body else body["embeddings"]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.shape != (len(texts), self.dim):
            raise ProviderUnavailable(f"expected {(len(texts), self.dim)} embeddings, got {arr.shape}")
        return arr / np.linalg.norm(arr, axis=1, keepdims=True)


class EmbeddingCache:
    """Content-hash keyed vectors, optionally persisted to an append-only file.

    File lines are ``<sha256 hex>\\t<dim>\\t<space separated floats>``. A
    torn trailing line (crash mid-write) is ignored on load.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._data: dict[str, np.ndarray] = {}
        if self.path and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    continue
                key, dim, floats = parts
                vec = np.array([float(x) for x in floats.split()], dtype=np.float64)
                if len(vec) == int(dim):
                    self._data[key] = vec

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> np.ndarray | None:
        return self._data.get(key)

    def put_many(self, items: Iterable[tuple[str, np.ndarray]]):
        items = list(items)
        with self._lock:
            if self.path:
                lines = "".join(
                    f"{k}\t{len(v)}\t{' '.join(repr(float(x)) for x in v)}\n" for k, v in items
                )
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(lines)
            for k, v in items:
                self._data[k] = np.asarray(v, dtype=np.float64)


def embed_texts(provider: TextEmbeddingProvider, cache: EmbeddingCache, descs: Sequence[str]) -> np.ndarray:
    """Embed ``descs`` in order, fetching each distinct cache miss exactly once."""
    keys = [content_hash(d) for d in descs]
    missing: dict[str, str] = {}
    for k, d in zip(keys, descs):
        if k not in cache and k not in missing:
            missing[k] = d
    if missing:
        vecs = provider.embed(list(missing.values()))
        cache.put_many(zip(missing.keys(), vecs))
    if not descs:
        return np.zeros((0, provider.dim))
    return np.stack([cache.get(k) for k in keys])


def pool_context(vectors, null_vector):
    """Element-wise mean of ``vectors``; ``null_vector`` when there are none."""
    if len(vectors) == 0:
        return null_vector
    try:
        import torch

        if isinstance(null_vector, torch.Tensor) or isinstance(vectors[0], torch.Tensor):
            return torch.stack([torch.as_tensor(v) for v in vectors]).mean(dim=0)
    except ImportError:  # pragma: no cover
        pass
    return np.mean(np.asarray(vectors, dtype=np.float64), axis=0)


@dataclass
class RegionContext:
    """POI and road stores of one region plus their index and embeddings.

    Swapping the context is how a trained model is moved to a new region.
    """

    pois: list[POI]
    roads: list[RoadSegment]
    cell_size_m: float = 100.0
    poi_index: GridIndex = field(init=False)
    road_index: GridIndex = field(init=False)
    poi_vectors: np.ndarray | None = field(default=None, init=False)
    road_vectors: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        self.poi_index = GridIndex([p.loc for p in self.pois], self.cell_size_m)
        self.road_index = GridIndex([r.loc for r in self.roads], self.cell_size_m)

    def attach_embeddings(self, provider: TextEmbeddingProvider, cache: EmbeddingCache | None = None) -> "RegionContext":
        cache = cache if cache is not None else EmbeddingCache()
        self.poi_vectors = embed_texts(provider, cache, [p.desc for p in self.pois])
        self.road_vectors = embed_texts(provider, cache, [r.desc for r in self.roads])
        return self

    @property
    def d_text(self) -> int | None:
        return None if self.poi_vectors is None else self.poi_vectors.shape[1]

    def neighbor_ids(self, p: GeoPoint, poi_radius_m: float, road_radius_m: float | None = None):
        road_radius_m = poi_radius_m if road_radius_m is None else road_radius_m
        return (
            [i for i, _ in self.poi_index.query(p, poi_radius_m)],
            [i for i, _ in self.road_index.query(p, road_radius_m)],
        )


def build_index(pois: Sequence[POI], roads: Sequence[RoadSegment], cell_size_m: float = 100.0) -> RegionContext:
    return RegionContext(list(pois), list(roads), cell_size_m)


def neighbors_within(ctx: RegionContext, p: GeoPoint, radius_m: float) -> tuple[list[POI], list[RoadSegment]]:
    """POIs and roads within ``radius_m`` of ``p``, nearest first (ties by insertion order)."""
    poi_ids, road_ids = ctx.neighbor_ids(p, radius_m)
    return [ctx.pois[i] for i in poi_ids], [ctx.roads[i] for i in road_ids]


def read_store(path: str | os.PathLike, kind: type = POI) -> list:
    """Read a ``lng,lat,desc`` delimited file into POIs or RoadSegments."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(kind(GeoPoint(float(row["lng"]), float(row["lat"])), row["desc"]))
    return out


def write_store(path: str | os.PathLike, items: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lng", "lat", "desc"])
        for it in items:
            w.writerow([repr(it.loc.lng), repr(it.loc.lat), it.desc])


def load_context(poi_path, road_path, provider: TextEmbeddingProvider, cache_path=None,
                 cell_size_m: float = 100.0) -> RegionContext:
    ctx = build_index(read_store(poi_path, POI), read_store(road_path, RoadSegment), cell_size_m)
    return ctx.attach_embeddings(provider, EmbeddingCache(cache_path))
