"""
Geometry, gridding, and conversion of raw trajectories into Pixelated
Trajectories (PiTs) and ODT-Input encodings.

Axis convention: x indexes longitude bins eastward, y indexes latitude bins
northward, both 1-based. A PiT array is stored as ``data[x - 1, y - 1, c]``
with channels (mask, time-of-day, time-offset).
"""

from dataclasses import dataclass

import numpy as np

from config import SECONDS_PER_DAY

AOI_MARGIN_DEG = 1e-6
PIT_CHANNELS = 3
MASK, TOD, OFFSET = 0, 1, 2


class GeoError(ValueError):
    """Bad geometry input: empty data, degenerate box, point outside the AoI."""


class TrajectoryError(GeoError):
    """A trajectory violates its invariants."""


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class GeoPoint:
    lng: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lng <= 180.0 or not -90.0 <= self.lat <= 90.0:
            raise GeoError(f"invalid coordinate ({self.lng}, {self.lat})")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped GPS sequence. Arrays are parallel and ordered by time."""
    traj_id: str
    lng: np.ndarray
    lat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        lng = np.asarray(self.lng, dtype=np.float64)
        lat = np.asarray(self.lat, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if not (lng.shape == lat.shape == t.shape) or lng.ndim != 1:
            raise TrajectoryError(f"trajectory {self.traj_id}: ragged point arrays")
        if not (np.isfinite(lng).all() and np.isfinite(lat).all() and np.isfinite(t).all()):
            raise TrajectoryError(f"trajectory {self.traj_id}: non-finite coordinate or timestamp")
        t = t.astype(np.int64)
        if len(t) < 2:
            raise TrajectoryError(f"trajectory {self.traj_id}: needs at least 2 points")
        if np.any(np.diff(t) < 0):
            raise TrajectoryError(f"trajectory {self.traj_id}: timestamps decrease")
        if t[-1] <= t[0]:
            raise TrajectoryError(f"trajectory {self.traj_id}: zero duration")
        if np.any(np.abs(lng) > 180.0) or np.any(np.abs(lat) > 90.0):
            raise TrajectoryError(f"trajectory {self.traj_id}: coordinate out of range")
        object.__setattr__(self, "lng", lng)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "t", t)

    def __len__(self):
        return len(self.t)

    @property
    def points(self):
        return [(GeoPoint(float(x), float(y)), int(ts)) for x, y, ts in zip(self.lng, self.lat, self.t)]

    @property
    def t_first(self) -> int:
        return int(self.t[0])

    @property
    def t_last(self) -> int:
        return int(self.t[-1])

    def same_as(self, other: "Trajectory") -> bool:
        return (self.traj_id == other.traj_id
                and np.array_equal(self.lng, other.lng)
                and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.t, other.t))


@dataclass(frozen=True)
class AreaOfInterest:
    lng_min: float
    lng_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not (self.lng_min < self.lng_max and self.lat_min < self.lat_max):
            raise GeoError("degenerate area of interest")

    def contains(self, lng, lat) -> bool:
        return bool(np.all((lng >= self.lng_min) & (lng <= self.lng_max)
                           & (lat >= self.lat_min) & (lat <= self.lat_max)))

    def to_dict(self) -> dict:
        return {"lng_min": self.lng_min, "lng_max": self.lng_max,
                "lat_min": self.lat_min, "lat_max": self.lat_max}


@dataclass(frozen=True)
class GridSpec:
    aoi: AreaOfInterest
    L_G: int

    def __post_init__(self):
        if self.L_G < 2:
            raise GeoError(f"L_G must be >= 2, got {self.L_G}")

    @property
    def n_cells(self) -> int:
        return self.L_G * self.L_G


@dataclass(frozen=True)
class CellIdx:
    x: int
    y: int


@dataclass(frozen=True, eq=False)
class ODTInput:
    g_o: GeoPoint
    g_d: GeoPoint
    t_o: int
    encoded: np.ndarray


# ============================================================
# OPERATIONS
# ============================================================

def compute_area_of_interest(trajectories) -> AreaOfInterest:
    """Tight bounding box of all points, widened by a tiny margin."""
    trajectories = list(trajectories)
    if not trajectories:
        raise GeoError("no trajectories")
    lngs = np.concatenate([tr.lng for tr in trajectories])
    lats = np.concatenate([tr.lat for tr in trajectories])
    if lngs.size == 0:
        raise GeoError("no trajectories")
    lng_min, lng_max = float(lngs.min()), float(lngs.max())
    lat_min, lat_max = float(lats.min()), float(lats.max())
    if lng_min == lng_max or lat_min == lat_max:
        raise GeoError("degenerate area of interest: points span zero width or height")
    return AreaOfInterest(lng_min - AOI_MARGIN_DEG, lng_max + AOI_MARGIN_DEG,
                          lat_min - AOI_MARGIN_DEG, lat_max + AOI_MARGIN_DEG)


def _cells_of(lng, lat, grid: GridSpec):
    """Vectorized cell lookup, returns 1-based (x, y) integer arrays."""
    aoi = grid.aoi
    lng = np.asarray(lng, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if not aoi.contains(lng, lat):
        raise GeoError("out of area")
    L = grid.L_G
    x = 1 + np.floor(L * (lng - aoi.lng_min) / (aoi.lng_max - aoi.lng_min)).astype(np.int64)
    y = 1 + np.floor(L * (lat - aoi.lat_min) / (aoi.lat_max - aoi.lat_min)).astype(np.int64)
    return np.clip(x, 1, L), np.clip(y, 1, L)


def cell_of(g: GeoPoint, grid: GridSpec) -> CellIdx:
    x, y = _cells_of(g.lng, g.lat, grid)
    return CellIdx(int(x), int(y))


def normalize_tod(t) -> np.ndarray:
    """Time of day mapped onto [-1, 1)."""
    return 2.0 * (np.asarray(t, dtype=np.int64) % SECONDS_PER_DAY) / SECONDS_PER_DAY - 1.0


def rasterize(traj: Trajectory, grid: GridSpec) -> np.ndarray:
    """L_G x L_G x 3 PiT of a trajectory; each cell keeps its earliest point."""
    t = traj.t
    if traj.t_last == traj.t_first:
        raise GeoError("zero duration")
    x, y = _cells_of(traj.lng, traj.lat, grid)
    L = grid.L_G
    pit = np.full((L, L, PIT_CHANNELS), -1.0, dtype=np.float64)

    flat = (x - 1) * L + (y - 1)
    # timestamps are non-decreasing, so the first occurrence per cell is the
    # earliest point, ties resolved by sequence order
    _, first = np.unique(flat, return_index=True)
    xs, ys, ts = x[first] - 1, y[first] - 1, t[first]
    pit[xs, ys, MASK] = 1.0
    pit[xs, ys, TOD] = normalize_tod(ts)
    pit[xs, ys, OFFSET] = 2.0 * (ts - t[0]) / (t[-1] - t[0]) - 1.0
    return pit


def encode_odt(g_o: GeoPoint, g_d: GeoPoint, t_o: int, aoi: AreaOfInterest) -> ODTInput:
    """Build an ODT-Input from raw query values."""
    if not (aoi.contains(g_o.lng, g_o.lat) and aoi.contains(g_d.lng, g_d.lat)):
        raise GeoError("out of area")
    dlng = aoi.lng_max - aoi.lng_min
    dlat = aoi.lat_max - aoi.lat_min
    encoded = np.array([
        2.0 * (g_o.lng - aoi.lng_min) / dlng - 1.0,
        2.0 * (g_o.lat - aoi.lat_min) / dlat - 1.0,
        2.0 * (g_d.lng - aoi.lng_min) / dlng - 1.0,
        2.0 * (g_d.lat - aoi.lat_min) / dlat - 1.0,
        float(normalize_tod(t_o)),
    ], dtype=np.float64)
    return ODTInput(g_o, g_d, int(t_o), np.clip(encoded, -1.0, 1.0))


def odt_input_of(traj: Trajectory, aoi: AreaOfInterest) -> ODTInput:
    g_o = GeoPoint(float(traj.lng[0]), float(traj.lat[0]))
    g_d = GeoPoint(float(traj.lng[-1]), float(traj.lat[-1]))
    return encode_odt(g_o, g_d, traj.t_first, aoi)


def flatten_index(cell: CellIdx, L_G: int) -> int:
    return cell.x + (cell.y - 1) * L_G


def unflatten_index(position: int, L_G: int) -> CellIdx:
    return CellIdx((position - 1) % L_G + 1, (position - 1) // L_G + 1)


def travel_time_of(traj: Trajectory) -> float:
    """Travel time in minutes."""
    return (traj.t_last - traj.t_first) / 60.0


def empty_pit(L_G: int) -> np.ndarray:
    return np.full((L_G, L_G, PIT_CHANNELS), -1.0, dtype=np.float64)
