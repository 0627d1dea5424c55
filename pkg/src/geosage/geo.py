"""Great-circle distance and the spatial pyramid (a uniform lat/lon quadtree).

Level ``h`` of the pyramid splits the bounding box into ``2**h x 2**h`` cells.
Cells are addressed by ``(level, x, y)`` where ``x`` indexes longitude and
``y`` latitude, both counted from the box's minimum corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvalidCoordinate, PointOutsideBbox

EARTH_RADIUS_KM = 6371.0
DEFAULT_HEIGHT = 5


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidCoordinate(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidCoordinate(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise InvalidCoordinate(f"longitude {lon} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    def __iter__(self) -> Iterator[float]:
        yield self.lat
        yield self.lon


@dataclass(frozen=True)
class BoundingBox:
    min: GeoPoint
    max: GeoPoint

    def __post_init__(self):
        if not (self.min.lat < self.max.lat and self.min.lon < self.max.lon):
            raise InvalidCoordinate(f"degenerate bounding box {self.min} .. {self.max}")

    @classmethod
    def from_bounds(cls, min_lat, min_lon, max_lat, max_lon) -> "BoundingBox":
        return cls(GeoPoint(min_lat, min_lon), GeoPoint(max_lat, max_lon))

    def contains(self, p: GeoPoint) -> bool:
        return (self.min.lat <= p.lat <= self.max.lat
                and self.min.lon <= p.lon <= self.max.lon)

    def as_list(self) -> list[float]:
        return [self.min.lat, self.min.lon, self.max.lat, self.max.lon]


# Continental USA; both reference datasets are US check-ins.
USA_BBOX = BoundingBox.from_bounds(24.0, -125.0, 50.0, -66.0)


@dataclass(frozen=True, order=True)
class CellId:
    level: int
    x: int
    y: int

    def __post_init__(self):
        side = 1 << self.level if self.level >= 0 else 0
        if self.level < 1 or not (0 <= self.x < side and 0 <= self.y < side):
            raise ValueError(f"invalid cell {self.level, self.x, self.y}")

    def parent(self) -> "CellId | None":
        if self.level == 1:
            return None
        return CellId(self.level - 1, self.x >> 1, self.y >> 1)

    def is_child_of(self, other: "CellId") -> bool:
        return self.parent() == other


CellPath = tuple  # tuple[CellId, ...]; entry i has level i + 1


@dataclass(frozen=True)
class PyramidConfig:
    bbox: BoundingBox = USA_BBOX
    height: int = DEFAULT_HEIGHT

    def __post_init__(self):
        if int(self.height) < 1:
            raise ValueError(f"pyramid height must be >= 1, got {self.height}")

    def to_dict(self) -> dict:
        return {"bbox": self.bbox.as_list(), "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        return cls(BoundingBox.from_bounds(*d["bbox"]), int(d["height"]))

    def with_height(self, height: int) -> "PyramidConfig":
        return PyramidConfig(self.bbox, height)


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lon1 = math.radians(a.lat), math.radians(a.lon)
    lat2, lon2 = math.radians(b.lat), math.radians(b.lon)
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_km_many(lat, lon, lats, lons) -> np.ndarray:
    """Vectorised ``haversine_km`` from one point to arrays of points."""
    lat1, lon1 = math.radians(lat), math.radians(lon)
    lat2, lon2 = np.radians(lats), np.radians(lons)
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def _grid_index(value, lo, hi, side):
    i = math.floor(side * (value - lo) / (hi - lo))
    return min(max(i, 0), side - 1)


def cell_of(p: GeoPoint, level: int, cfg: PyramidConfig) -> CellId:
    if not 1 <= level <= cfg.height:
        raise ValueError(f"level {level} outside [1, {cfg.height}]")
    box = cfg.bbox
    if not box.contains(p):
        raise PointOutsideBbox(f"{p} outside {box}")
    side = 1 << level
    x = _grid_index(p.lon, box.min.lon, box.max.lon, side)
    y = _grid_index(p.lat, box.min.lat, box.max.lat, side)
    return CellId(level, x, y)


def path_of(p: GeoPoint, cfg: PyramidConfig) -> CellPath:
    return tuple(cell_of(p, h, cfg) for h in range(1, cfg.height + 1))


def centroid(c: CellId, cfg: PyramidConfig) -> GeoPoint:
    box = cfg.bbox
    side = 1 << c.level
    dlat = (box.max.lat - box.min.lat) / side
    dlon = (box.max.lon - box.min.lon) / side
    return GeoPoint(box.min.lat + (c.y + 0.5) * dlat, box.min.lon + (c.x + 0.5) * dlon)


def cell_bounds(c: CellId, cfg: PyramidConfig) -> BoundingBox:
    box = cfg.bbox
    side = 1 << c.level
    dlat = (box.max.lat - box.min.lat) / side
    dlon = (box.max.lon - box.min.lon) / side
    return BoundingBox.from_bounds(box.min.lat + c.y * dlat, box.min.lon + c.x * dlon,
                                   box.min.lat + (c.y + 1) * dlat,
                                   box.min.lon + (c.x + 1) * dlon)


def grid_xy(lats, lons, level: int, cfg: PyramidConfig) -> tuple[np.ndarray, np.ndarray]:
    """Array form of ``cell_of``; callers guarantee containment."""
    box = cfg.bbox
    side = 1 << level
    x = np.floor(side * (np.asarray(lons, float) - box.min.lon) / (box.max.lon - box.min.lon))
    y = np.floor(side * (np.asarray(lats, float) - box.min.lat) / (box.max.lat - box.min.lat))
    return (np.clip(x, 0, side - 1).astype(np.int64),
            np.clip(y, 0, side - 1).astype(np.int64))


def cells_at_level(level: int) -> Iterator[CellId]:
    side = 1 << level
    for x in range(side):
        for y in range(side):
            yield CellId(level, x, y)


def circle_cell_range(center: GeoPoint, radius_km: float, level: int,
                      cfg: PyramidConfig) -> tuple[range, range]:
    """Cell index ranges (x, y) at ``level`` covering a circle's lat/lon envelope."""
    box = cfg.bbox
    side = 1 << level
    ang = radius_km / EARTH_RADIUS_KM
    dlat = math.degrees(ang) + 1e-9
    lat_lo, lat_hi = center.lat - dlat, center.lat + dlat
    coslat = math.cos(math.radians(center.lat))
    if lat_lo <= -90.0 or lat_hi >= 90.0 or ang >= math.pi / 2 or math.sin(ang) >= coslat:
        lon_lo, lon_hi = -180.0, 180.0
    else:
        dlon = math.degrees(math.asin(math.sin(ang) / coslat)) + 1e-9
        lon_lo, lon_hi = center.lon - dlon, center.lon + dlon
        if lon_lo < -180.0 or lon_hi > 180.0:
            lon_lo, lon_hi = -180.0, 180.0

    def span(lo, hi, blo, bhi):
        if hi < blo or lo > bhi:
            return range(0)
        i0 = _grid_index(max(lo, blo), blo, bhi, side)
        i1 = _grid_index(min(hi, bhi), blo, bhi, side)
        return range(i0, i1 + 1)

    return (span(lon_lo, lon_hi, box.min.lon, box.max.lon),
            span(lat_lo, lat_hi, box.min.lat, box.max.lat))
