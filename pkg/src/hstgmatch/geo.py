"""Trajectory, grid, interval, and route primitives plus normalization.

Coordinates are WGS-84 degrees; local distances use an equirectangular
projection anchored at the grid's min corner, which is accurate to well
under a meter at the city scales this package targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

EARTH_RADIUS_M = 6_371_000.0

ZSCORE_FEATURES = ("lon", "lat", "time_interval", "distance_interval")


@dataclass(frozen=True)
class TrajectoryPoint:
    lon: float
    lat: float
    t: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise ValidationError(f"point out of range: lon={self.lon}, lat={self.lat}")
        if not math.isfinite(self.t):
            raise ValidationError("non-finite timestamp")


@dataclass
class Trajectory:
    traj_id: str
    points: list[TrajectoryPoint]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValidationError(f"trajectory {self.traj_id} has fewer than 2 points")
        ts = [p.t for p in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"trajectory {self.traj_id} timestamps decrease")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GridSpec:
    min_lon: float
    max_lon: float
    min_lat: float
    max_lat: float
    cell_size: float = 100.0
    n_rows: int = field(init=False)
    n_cols: int = field(init=False)

    def __post_init__(self):
        if self.max_lon <= self.min_lon or self.max_lat <= self.min_lat:
            raise ValidationError("grid extent must have max > min on both axes")
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive")
        origin = TrajectoryPoint(self.min_lon, self.min_lat, 0.0)
        corner = TrajectoryPoint(self.max_lon, self.max_lat, 0.0)
        dx, dy = project_to_meters(origin, corner)
        self.n_cols = max(1, int(math.ceil(dx / self.cell_size - 1e-9)))
        self.n_rows = max(1, int(math.ceil(dy / self.cell_size - 1e-9)))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def origin(self) -> TrajectoryPoint:
        return TrajectoryPoint(self.min_lon, self.min_lat, 0.0)


@dataclass(frozen=True)
class CellId:
    row: int
    col: int
    flat: int


@dataclass
class IntervalSeq:
    distance: np.ndarray
    time: np.ndarray


@dataclass
class SegmentRoute:
    roads: list[int]

    def __post_init__(self):
        if not self.roads:
            raise ValidationError("route must be non-empty")
        if any(a == b for a, b in zip(self.roads, self.roads[1:])):
            raise ValidationError("route has consecutive duplicate road ids")


@dataclass
class ZScoreParams:
    mean: np.ndarray
    std: np.ndarray


def project_to_meters(origin: TrajectoryPoint, p: TrajectoryPoint) -> tuple[float, float]:
    """Local east/north offset of `p` from `origin` in meters."""
    dlon = math.radians(p.lon - origin.lon)
    dlat = math.radians(p.lat - origin.lat)
    dx = EARTH_RADIUS_M * math.cos(math.radians(origin.lat)) * dlon
    dy = EARTH_RADIUS_M * dlat
    return dx, dy


def meters_to_lonlat(origin: TrajectoryPoint, x: float, y: float) -> tuple[float, float]:
    """Inverse of project_to_meters for the same origin."""
    lon = origin.lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat))))
    lat = origin.lat + math.degrees(y / EARTH_RADIUS_M)
    return lon, lat


# sub-micrometer slack so projection round-trip noise cannot move a point
# sitting exactly on a cell edge into the lower bin
_EDGE_EPS_M = 1e-7


def point_to_cell(spec: GridSpec, p: TrajectoryPoint) -> CellId:
    """Half-open binning of the projected point; out-of-extent clamps to the border."""
    dx, dy = project_to_meters(spec.origin(), p)
    col = int(math.floor((dx + _EDGE_EPS_M) / spec.cell_size))
    row = int(math.floor((dy + _EDGE_EPS_M) / spec.cell_size))
    col = min(max(col, 0), spec.n_cols - 1)
    row = min(max(row, 0), spec.n_rows - 1)
    return CellId(row=row, col=col, flat=row * spec.n_cols + col)


def points_to_cells(spec: GridSpec, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Vectorized flat cell ids for arrays of coordinates."""
    lat0 = math.radians(spec.min_lat)
    dx = EARTH_RADIUS_M * math.cos(lat0) * np.radians(lons - spec.min_lon)
    dy = EARTH_RADIUS_M * np.radians(lats - spec.min_lat)
    col = np.clip(np.floor((dx + _EDGE_EPS_M) / spec.cell_size).astype(np.int64),
                  0, spec.n_cols - 1)
    row = np.clip(np.floor((dy + _EDGE_EPS_M) / spec.cell_size).astype(np.int64),
                  0, spec.n_rows - 1)
    return row * spec.n_cols + col


def cell_centroid_meters(spec: GridSpec, flat: int) -> tuple[float, float]:
    row, col = divmod(flat, spec.n_cols)
    return (col + 0.5) * spec.cell_size, (row + 0.5) * spec.cell_size


def intervals(traj: Trajectory) -> IntervalSeq:
    """Distance/time offsets of every point from the first one (index 0 is zero)."""
    p0 = traj.points[0]
    n = len(traj.points)
    dist = np.zeros(n)
    time = np.zeros(n)
    for i, p in enumerate(traj.points):
        dx, dy = project_to_meters(p0, p)
        dist[i] = math.hypot(dx, dy)
        time[i] = p.t - p0.t
    return IntervalSeq(distance=dist, time=time)


def fit_zscore(values: np.ndarray) -> ZScoreParams:
    """Column-wise mean/std; degenerate (constant) columns get std = 1."""
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if v.shape[0] < 1:
        raise ValidationError("fit_zscore needs at least one sample")
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    std = np.where(std <= 0.0, 1.0, std)
    return ZScoreParams(mean=mean, std=std)


def apply_zscore(params: ZScoreParams, values: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - params.mean) / params.std


def collapse_to_route(point_labels: Sequence[int]) -> SegmentRoute:
    """Merge consecutive duplicate road ids, preserving order."""
    if len(point_labels) == 0:
        raise ValidationError("cannot collapse an empty label sequence")
    roads = [int(point_labels[0])]
    for lab in point_labels[1:]:
        if int(lab) != roads[-1]:
            roads.append(int(lab))
    return SegmentRoute(roads=roads)


# ---------------------------------------------------------------------------
# trajectory file format
# one record per line: traj_id<TAB>lon<TAB>lat<TAB>t_seconds<TAB>true_road_id
# (-1 when unlabeled), sorted by (traj_id, t); '#' lines are comments
# ---------------------------------------------------------------------------

def write_trajectory_file(path, trajectories: Iterable[Trajectory],
                          labels: dict[str, list[int]] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajectories:
            labs = labels.get(traj.traj_id) if labels else None
            for i, p in enumerate(traj.points):
                road = labs[i] if labs is not None else -1
                fh.write(f"{traj.traj_id}\t{p.lon!r}\t{p.lat!r}\t{p.t!r}\t{road}\n")


def read_trajectory_file(path) -> tuple[list[Trajectory], dict[str, list[int]]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"trajectory file not found: {path}")
    trajs: list[Trajectory] = []
    labels: dict[str, list[int]] = {}
    cur_id: str | None = None
    cur_points: list[TrajectoryPoint] = []
    cur_labels: list[int] = []

    def flush():
        if cur_id is not None:
            trajs.append(Trajectory(traj_id=cur_id, points=list(cur_points)))
            labels[cur_id] = list(cur_labels)

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise ValidationError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
            tid = parts[0]
            try:
                lon, lat, t = float(parts[1]), float(parts[2]), float(parts[3])
                road = int(parts[4]) if len(parts) == 5 else -1
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if tid != cur_id:
                flush()
                cur_id = tid
                cur_points = []
                cur_labels = []
            cur_points.append(TrajectoryPoint(lon, lat, t))
            cur_labels.append(road)
    flush()
    if not trajs:
        raise ValidationError(f"no trajectories in {path}")
    return trajs, labels
