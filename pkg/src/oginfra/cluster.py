"""Group filtered detections into candidate sites.

Sites are single-linkage connected components under great-circle distance
``<= radius_m``. Neighbor search buckets points on a 3D grid of unit-sphere
coordinates whose cell edge is the chord length of the radius, so poles and
the antimeridian need no special handling.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from oginfra.errors import CatalogError, ConfigError
from oginfra.firms import HotspotRecord

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class ClusterParams:
    radius_m: float = 750.0
    min_detections: int = 1

    def __post_init__(self) -> None:
        if not self.radius_m > 0:
            raise ConfigError(f"radius_m must be positive, got {self.radius_m}")
        if self.min_detections < 1:
            raise ConfigError(f"min_detections must be >= 1, got {self.min_detections}")


@dataclass(frozen=True)
class CandidateSite:
    site_id: str
    centroid_lat: float
    centroid_lon: float
    detection_count: int
    first_seen: date
    last_seen: date
    bbox: tuple[float, float, float, float]  # min_lon, min_lat, max_lon, max_lat
    member_ids: tuple[int, ...] = field(default=(), compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "site_id": self.site_id,
                "lat": self.centroid_lat,
                "lon": self.centroid_lon,
                "count": self.detection_count,
                "first_seen": self.first_seen.isoformat(),
                "last_seen": self.last_seen.isoformat(),
                "bbox": list(self.bbox),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> CandidateSite:
        obj = json.loads(line)
        return cls(
            site_id=str(obj["site_id"]),
            centroid_lat=float(obj["lat"]),
            centroid_lon=float(obj["lon"]),
            detection_count=int(obj["count"]),
            first_seen=date.fromisoformat(obj["first_seen"]),
            last_seen=date.fromisoformat(obj["last_seen"]),
            bbox=tuple(float(v) for v in obj["bbox"]),
        )


def haversine_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between two (lat, lon) points in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # smaller index wins so roots do not depend on visit order
            if rj < ri:
                ri, rj = rj, ri
            self.parent[rj] = ri


def _dedupe(records: Sequence[HotspotRecord]) -> list[int]:
    seen = set()
    keep = []
    for i, r in enumerate(records):
        key = (r.latitude, r.longitude, r.acq_date, r.acq_time, r.satellite)
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return keep


def _unit_vector(lat: float, lon: float) -> tuple[float, float, float]:
    phi, lam = math.radians(lat), math.radians(lon)
    return (math.cos(phi) * math.cos(lam), math.cos(phi) * math.sin(lam), math.sin(phi))


def _candidate_pairs(points: Sequence[tuple[float, float]], radius_m: float) -> Iterator[tuple[int, int]]:
    chord = 2 * math.sin(min(math.pi, radius_m / EARTH_RADIUS_M) / 2)
    cell = chord * (1 + 1e-9)
    buckets: dict[tuple[int, int, int], list[int]] = defaultdict(list)
    keys = []
    for i, (lat, lon) in enumerate(points):
        key = tuple(math.floor(c / cell) for c in _unit_vector(lat, lon))
        keys.append(key)
        buckets[key].append(i)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for i, (kx, ky, kz) in enumerate(keys):
        for dx, dy, dz in offsets:
            for j in buckets.get((kx + dx, ky + dy, kz + dz), ()):
                if j > i:
                    yield i, j


def _assemble(records: Sequence[HotspotRecord], groups: Iterable[list[int]]) -> list[CandidateSite]:
    provisional = []
    for members in groups:
        lats = [records[i].latitude for i in members]
        lons = [records[i].longitude for i in members]
        dates = [records[i].acq_date for i in members]
        n = len(members)
        provisional.append(
            (
                math.fsum(lats) / n,
                math.fsum(lons) / n,
                n,
                min(dates),
                max(dates),
                (min(lons), min(lats), max(lons), max(lats)),
                tuple(sorted(members)),
            )
        )
    provisional.sort(key=lambda p: (p[0], p[1], p[6]))
    width = max(5, len(str(len(provisional))))
    return [
        CandidateSite(f"site-{k:0{width}d}", lat, lon, n, first, last, bbox, members)
        for k, (lat, lon, n, first, last, bbox, members) in enumerate(provisional, start=1)
    ]


def cluster_hotspots(records: Sequence[HotspotRecord], params: ClusterParams = ClusterParams()) -> list[CandidateSite]:
    """Cluster records into sites.

    Exact duplicates (same lat, lon, acq_date, acq_time, satellite) count
    once. Site ids follow ascending centroid (lat, lon) order; ``member_ids``
    index into ``records``.
    """
    records = list(records)
    kept = _dedupe(records)
    points = [(records[i].latitude, records[i].longitude) for i in kept]
    uf = _UnionFind(len(points))
    for i, j in _candidate_pairs(points, params.radius_m):
        if haversine_distance(points[i], points[j]) <= params.radius_m:
            uf.union(i, j)
    groups: dict[int, list[int]] = defaultdict(list)
    for local, original in enumerate(kept):
        groups[uf.find(local)].append(original)
    return _assemble(records, groups.values())


def cluster_bruteforce(records: Sequence[HotspotRecord], params: ClusterParams = ClusterParams()) -> list[CandidateSite]:
    """All-pairs reference implementation of ``cluster_hotspots``.

    Builds the full distance graph and labels components with an explicit
    depth-first search. Quadratic; intended for cross-checking.
    """
    records = list(records)
    kept = _dedupe(records)
    n = len(kept)
    adjacency = [[] for _ in range(n)]
    for i in range(n):
        a = (records[kept[i]].latitude, records[kept[i]].longitude)
        for j in range(i + 1, n):
            b = (records[kept[j]].latitude, records[kept[j]].longitude)
            if haversine_distance(a, b) <= params.radius_m:
                adjacency[i].append(j)
                adjacency[j].append(i)
    label = [-1] * n
    groups = []
    for start in range(n):
        if label[start] >= 0:
            continue
        label[start] = len(groups)
        stack, members = [start], []
        while stack:
            u = stack.pop()
            members.append(kept[u])
            for v in adjacency[u]:
                if label[v] < 0:
                    label[v] = label[start]
                    stack.append(v)
        groups.append(members)
    return _assemble(records, groups)


def rank_sites(sites: Iterable[CandidateSite], min_detections: int = 1) -> list[CandidateSite]:
    """Drop sparse sites, then order by detection count (desc), then (lat, lon)."""
    kept = [s for s in sites if s.detection_count >= min_detections]
    return sorted(kept, key=lambda s: (-s.detection_count, s.centroid_lat, s.centroid_lon))


def write_catalog(sites: Iterable[CandidateSite], dest: IO[str]) -> int:
    ordered = sorted(sites, key=lambda s: s.site_id)
    for site in ordered:
        dest.write(site.to_json() + "\n")
    return len(ordered)


def read_catalog(path: str | Path) -> list[CandidateSite]:
    sites = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                sites.append(CandidateSite.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed catalog line ({exc})") from exc
    return sites
