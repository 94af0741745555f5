"""Web Mercator (slippy map) tile arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass

from oginfra.errors import ConfigError

DEFAULT_ZOOM = 15
WEB_MERCATOR_RADIUS_M = 6_378_137.0
# latitude where the square Mercator world ends: atan(sinh(pi)), ~85.05112878
MAX_LATITUDE = math.degrees(math.atan(math.sinh(math.pi)))


@dataclass(frozen=True, slots=True)
class TileRef:
    x: int
    y: int
    z: int = DEFAULT_ZOOM

    def __post_init__(self) -> None:
        if self.z < 0:
            raise ConfigError(f"zoom must be >= 0, got {self.z}")
        n = 1 << self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ConfigError(f"tile ({self.x}, {self.y}) outside the {n}x{n} grid at zoom {self.z}")


@dataclass(frozen=True, slots=True)
class GeoBBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self) -> None:
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise ConfigError(f"bbox must have min < max on both axes: {self}")
        if self.min_lat < -MAX_LATITUDE or self.max_lat > MAX_LATITUDE:
            raise ConfigError(f"bbox exceeds the Mercator latitude limit: {self}")

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_lon <= lon <= self.max_lon and self.min_lat <= lat <= self.max_lat


def normalize_lon(lon: float) -> float:
    """Wrap longitude into [-180, 180)."""
    wrapped = (lon + 180.0) % 360.0 - 180.0
    return -180.0 if wrapped >= 180.0 else wrapped


def clamp_lat(lat: float) -> float:
    return max(-MAX_LATITUDE, min(MAX_LATITUDE, lat))


def _row_edge_lat(y: int, z: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / (1 << z)))))


def _col_edge_lon(x: int, z: int) -> float:
    return x / (1 << z) * 360.0 - 180.0


def lonlat_to_tile(lon: float, lat: float, z: int = DEFAULT_ZOOM) -> TileRef:
    """Tile containing the point; longitude wraps and latitude clamps to the Mercator limit."""
    lon = normalize_lon(lon)
    lat = clamp_lat(lat)
    phi = math.radians(lat)
    n = 1 << z
    x = min(max(math.floor((lon + 180.0) / 360.0 * n), 0), n - 1)
    y = min(max(math.floor((1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n), 0), n - 1)
    # Rounding can land a point a hair outside the edges tile_to_bbox reports; step back in.
    while x > 0 and lon < _col_edge_lon(x, z):
        x -= 1
    while x < n - 1 and lon > _col_edge_lon(x + 1, z):
        x += 1
    while y > 0 and lat > _row_edge_lat(y, z):
        y -= 1
    while y < n - 1 and lat < _row_edge_lat(y + 1, z):
        y += 1
    return TileRef(x, y, z)


def tile_to_bbox(t: TileRef) -> GeoBBox:
    return GeoBBox(
        min_lon=_col_edge_lon(t.x, t.z),
        min_lat=_row_edge_lat(t.y + 1, t.z),
        max_lon=_col_edge_lon(t.x + 1, t.z),
        max_lat=_row_edge_lat(t.y, t.z),
    )


def meters_per_pixel(lat: float, z: int = DEFAULT_ZOOM, tile_px: int = 256) -> float:
    """Ground distance covered by one pixel at ``lat`` and zoom ``z``."""
    if tile_px <= 0:
        raise ConfigError(f"tile_px must be positive, got {tile_px}")
    return 2 * math.pi * WEB_MERCATOR_RADIUS_M * math.cos(math.radians(lat)) / (tile_px * (1 << z))
