"""
Trajectory ingestion, preprocessing filters, chronological split, and the
dataset containers shared by both stages.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import get_logger
from geo_pit import (GridSpec, Trajectory, TrajectoryError, compute_area_of_interest,
                     odt_input_of, rasterize, travel_time_of)

log = get_logger(__name__)

CSV_COLUMNS = ["traj_id", "lng", "lat", "timestamp"]
EARTH_RADIUS_M = 6371000.0

MIN_LENGTH_M = 500.0
MIN_DURATION_S = 5 * 60
MAX_DURATION_S = 60 * 60
MAX_MEAN_INTERVAL_S = 80.0


class ParseError(ValueError):
    """Malformed trajectory file."""


class SplitError(ValueError):
    """Not enough trajectories to split."""


def haversine_m(lng1, lat1, lng2, lat2):
    """Great-circle distance in meters, vectorized over numpy arrays."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = np.radians(np.asarray(lat2) - np.asarray(lat1))
    dlambda = np.radians(np.asarray(lng2) - np.asarray(lng1))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlambda / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arctan2(np.sqrt(a), np.sqrt(1 - a))


def path_length_m(traj: Trajectory) -> float:
    return float(np.sum(haversine_m(traj.lng[:-1], traj.lat[:-1], traj.lng[1:], traj.lat[1:])))


# ============================================================
# CSV I/O
# ============================================================

def parse_trajectories(path) -> list:
    """Read the `traj_id,lng,lat,timestamp` CSV and group rows into trajectories."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"file not found: {path}")
    if path.stat().st_size == 0:
        return []

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}")

    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
    if df.empty:
        return []

    df = df[CSV_COLUMNS].copy()
    # line 1 is the header
    df["line"] = np.arange(len(df)) + 2
    df["lng"] = pd.to_numeric(df["lng"], errors="coerce")
    df["lat"] = pd.to_numeric(df["lat"], errors="coerce")
    df["timestamp"] = pd.to_numeric(df["timestamp"], errors="coerce")

    bad = (df["traj_id"].str.strip() == "") | df[["lng", "lat", "timestamp"]].isna().any(axis=1)
    bad |= (df["timestamp"] % 1 != 0)
    bad |= (df["lng"].abs() > 180) | (df["lat"].abs() > 90)
    if bad.any():
        line = int(df.loc[bad, "line"].iloc[0])
        raise ParseError(f"{path}: malformed row at line {line}")

    df["timestamp"] = df["timestamp"].astype(np.int64)
    df = df.sort_values(["traj_id", "timestamp", "line"])

    trajectories = []
    for traj_id, grp in df.groupby("traj_id", sort=True):
        try:
            trajectories.append(Trajectory(str(traj_id), grp["lng"].to_numpy(),
                                           grp["lat"].to_numpy(), grp["timestamp"].to_numpy()))
        except TrajectoryError as e:
            raise ParseError(f"{path}: trajectory {traj_id} is not a valid time series: {e}")
    return trajectories


def write_trajectories(trajectories, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = [pd.DataFrame({"traj_id": tr.traj_id, "lng": tr.lng, "lat": tr.lat, "timestamp": tr.t})
              for tr in trajectories]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)
    df.to_csv(path, index=False, float_format="%.7f")
    return path


# ============================================================
# PREPROCESSING
# ============================================================

def passes_filters(traj: Trajectory) -> bool:
    duration = traj.t_last - traj.t_first
    if duration < MIN_DURATION_S or duration > MAX_DURATION_S:
        return False
    if duration / (len(traj) - 1) > MAX_MEAN_INTERVAL_S:
        return False
    return path_length_m(traj) >= MIN_LENGTH_M


def preprocess(trajs) -> list:
    """Keep trips of >= 500 m, 5-60 min, mean sampling interval <= 80 s."""
    trajs = list(trajs)
    kept = [tr for tr in trajs if passes_filters(tr)]
    log.info(f"[OK] Preprocess kept {len(kept)}/{len(trajs)} trajectories")
    return kept


# ============================================================
# DATASETS
# ============================================================

@dataclass
class Dataset:
    trajectories: list
    grid: GridSpec
    _pits: np.ndarray = field(default=None, repr=False)

    @property
    def aoi(self):
        return self.grid.aoi

    def __len__(self):
        return len(self.trajectories)

    def pits(self) -> np.ndarray:
        """Ground-truth PiTs stacked as (n, L_G, L_G, 3); cached."""
        if self._pits is None:
            L = self.grid.L_G
            if self.trajectories:
                self._pits = np.stack([rasterize(tr, self.grid) for tr in self.trajectories])
            else:
                self._pits = np.zeros((0, L, L, 3))
        return self._pits

    def odts(self) -> list:
        return [odt_input_of(tr, self.aoi) for tr in self.trajectories]

    def odt_matrix(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, 5))
        return np.stack([o.encoded for o in self.odts()])

    def travel_times(self) -> np.ndarray:
        return np.array([travel_time_of(tr) for tr in self.trajectories], dtype=np.float64)


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset


def build_grid(trajs, L_G: int) -> GridSpec:
    """AoI over every trajectory (computed before splitting) and its grid."""
    return GridSpec(compute_area_of_interest(trajs), L_G)


def split(trajs, grid: GridSpec = None, L_G: int = 20) -> SplitDataset:
    """Chronological 8:1:1 split by departure time."""
    trajs = list(trajs)
    n = len(trajs)
    if n < 10:
        raise SplitError(f"need at least 10 trajectories to split, got {n}")
    grid = grid or build_grid(trajs, L_G)
    order = sorted(range(n), key=lambda i: trajs[i].t_first)
    ordered = [trajs[i] for i in order]
    n_val = round(n / 10)
    n_train = n - 2 * n_val
    return SplitDataset(
        train=Dataset(ordered[:n_train], grid),
        val=Dataset(ordered[n_train:n_train + n_val], grid),
        test=Dataset(ordered[n_train + n_val:], grid),
    )


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded random subset keeping chronological order (scalability study)."""
    if fraction >= 1.0:
        return dataset
    n = len(dataset)
    k = max(int(round(n * fraction)), 1)
    rng = np.random.Generator(np.random.Philox(seed))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return Dataset([dataset.trajectories[i] for i in idx], dataset.grid)
