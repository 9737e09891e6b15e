"""Synthetic Manhattan-lattice road networks and noisy labeled trajectories.

Stands in for proprietary GPS corpora: origin/destination pairs walk random
monotone lattice paths (optionally with one detour), motion is simulated at
a per-trip speed, points are emitted at random sampling intervals with
isotropic Gaussian position noise, and every point keeps its true road id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .geo import (GridSpec, SegmentRoute, Trajectory, TrajectoryPoint,
                  collapse_to_route, meters_to_lonlat, project_to_meters)


@dataclass
class GenConfig:
    rows: int = 16                 # M: intersection rows
    cols: int = 16                 # N: intersection columns
    spacing_m: float = 125.0
    n_trajectories: int = 5000
    speed_min_mps: float = 6.0
    speed_max_mps: float = 14.0
    interval_min_s: float = 4.0
    interval_max_s: float = 10.0
    gps_noise_sigma_m: float = 15.0
    detour_fraction: float = 0.1
    min_route_steps: int = 3
    max_route_steps: int = 18
    anchor_lon: float = 8.52
    anchor_lat: float = 47.38
    seed: int = 42

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValidationError("lattice needs at least 2x2 intersections")
        if self.spacing_m <= 0 or self.n_trajectories < 1:
            raise ValidationError("spacing and trajectory count must be positive")
        if not 0 < self.speed_min_mps <= self.speed_max_mps:
            raise ValidationError("bad speed range")
        if self.interval_min_s < 1.0 or self.interval_max_s < self.interval_min_s:
            raise ValidationError("sampling interval range must satisfy 1 <= min <= max")
        if self.gps_noise_sigma_m < 0:
            raise ValidationError("noise sigma must be non-negative")
        if not 2 <= self.min_route_steps <= self.max_route_steps:
            raise ValidationError("bad route step range")


@dataclass
class SyntheticNetwork:
    rows: int
    cols: int
    spacing_m: float
    origin: TrajectoryPoint                  # geographic position of local (0, 0)
    segments_xyxy_m: np.ndarray              # [S, 4] endpoints in local meters
    road_ids: np.ndarray                     # [S]
    lengths_m: np.ndarray                    # [S]
    edge_of: dict = field(default_factory=dict)   # (node_a, node_b) -> road id

    @property
    def n_segments(self) -> int:
        return int(self.road_ids.shape[0])

    def node_xy(self, node: int) -> tuple[float, float]:
        r, c = divmod(node, self.cols)
        return c * self.spacing_m, r * self.spacing_m

    def grid_spec(self, cell_size: float = 100.0) -> GridSpec:
        max_lon, max_lat = meters_to_lonlat(self.origin,
                                            (self.cols - 1) * self.spacing_m,
                                            (self.rows - 1) * self.spacing_m)
        return GridSpec(min_lon=self.origin.lon, max_lon=max_lon,
                        min_lat=self.origin.lat, max_lat=max_lat, cell_size=cell_size)

    def project_points(self, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
        px = np.empty(len(traj.points))
        py = np.empty(len(traj.points))
        for i, p in enumerate(traj.points):
            px[i], py[i] = project_to_meters(self.origin, p)
        return px, py

    def length_table(self) -> dict[int, float]:
        return {int(r): float(l) for r, l in zip(self.road_ids, self.lengths_m)}


def gen_network(config: GenConfig) -> SyntheticNetwork:
    """Lattice with M(N-1) + N(M-1) segments, deterministic road ids."""
    m, n, sp = config.rows, config.cols, config.spacing_m
    origin = TrajectoryPoint(config.anchor_lon, config.anchor_lat, 0.0)
    segs = []
    edge_of: dict[tuple[int, int], int] = {}

    def add(a: int, b: int):
        rid = len(segs)
        ax, ay = divmod(a, n)[1] * sp, divmod(a, n)[0] * sp
        bx, by = divmod(b, n)[1] * sp, divmod(b, n)[0] * sp
        segs.append((ax, ay, bx, by))
        edge_of[(a, b)] = rid
        edge_of[(b, a)] = rid

    for r in range(m):
        for c in range(n - 1):
            add(r * n + c, r * n + c + 1)
    for c in range(n):
        for r in range(m - 1):
            add(r * n + c, (r + 1) * n + c)

    xyxy = np.array(segs, dtype=np.float64)
    lengths = np.hypot(xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1])
    return SyntheticNetwork(rows=m, cols=n, spacing_m=sp, origin=origin,
                            segments_xyxy_m=xyxy,
                            road_ids=np.arange(len(segs), dtype=np.int64),
                            lengths_m=lengths, edge_of=edge_of)


def _monotone_path(rng: np.random.Generator, cols: int, a: int, b: int) -> list[int]:
    """Uniformly random staircase walk between lattice nodes a and b."""
    r0, c0 = divmod(a, cols)
    r1, c1 = divmod(b, cols)
    path = [a]
    r, c = r0, c0
    while (r, c) != (r1, c1):
        moves = []
        if r != r1:
            moves.append((r + (1 if r1 > r else -1), c))
        if c != c1:
            moves.append((r, c + (1 if c1 > c else -1)))
        r, c = moves[rng.integers(0, len(moves))]
        path.append(r * cols + c)
    return path


def _sample_path(rng: np.random.Generator, net: SyntheticNetwork,
                 config: GenConfig) -> list[int]:
    """Node path whose step count lies in the configured band."""
    m, n = net.rows, net.cols
    while True:
        a, b = int(rng.integers(0, m * n)), int(rng.integers(0, m * n))
        if a == b:
            continue
        manhattan = abs(a // n - b // n) + abs(a % n - b % n)
        if not config.min_route_steps <= manhattan <= config.max_route_steps:
            continue
        if rng.random() < config.detour_fraction:
            w = int(rng.integers(0, m * n))
            if w in (a, b):
                return _monotone_path(rng, n, a, b)
            return _monotone_path(rng, n, a, w) + _monotone_path(rng, n, w, b)[1:]
        return _monotone_path(rng, n, a, b)


def _simulate(rng: np.random.Generator, net: SyntheticNetwork, config: GenConfig,
              traj_id: str) -> tuple[Trajectory, list[int], SegmentRoute]:
    sp = net.spacing_m
    while True:
        nodes = _sample_path(rng, net, config)
        roads = [net.edge_of[(a, b)] for a, b in zip(nodes, nodes[1:])]
        coords = [net.node_xy(v) for v in nodes]
        total = sp * (len(nodes) - 1)
        speed = rng.uniform(config.speed_min_mps, config.speed_max_mps)
        points: list[TrajectoryPoint] = []
        labels: list[int] = []
        # start mid-block: an exact-intersection first fix is equidistant to
        # every incident segment, which no matcher can resolve
        d = rng.uniform(0.05, 0.60) * sp
        t = 0.0
        while d < total:
            leg = min(int(d // sp), len(roads) - 1)
            frac = (d - leg * sp) / sp
            x = coords[leg][0] + frac * (coords[leg + 1][0] - coords[leg][0])
            y = coords[leg][1] + frac * (coords[leg + 1][1] - coords[leg][1])
            nx = x + rng.normal(0.0, config.gps_noise_sigma_m)
            ny = y + rng.normal(0.0, config.gps_noise_sigma_m)
            lon, lat = meters_to_lonlat(net.origin, nx, ny)
            points.append(TrajectoryPoint(lon, lat, t))
            labels.append(int(roads[leg]))
            dt = rng.uniform(config.interval_min_s, config.interval_max_s)
            d += speed * dt
            t += dt
        if len(points) >= 2:
            traj = Trajectory(traj_id=traj_id, points=points)
            return traj, labels, collapse_to_route(labels)


def gen_trajectories(net: SyntheticNetwork, config: GenConfig
                     ) -> tuple[list[Trajectory], dict[str, list[int]], dict[str, SegmentRoute]]:
    """Labeled trajectories plus ground-truth routes; per-trip rng streams
    keyed by (seed, index) keep output identical under any scheduling."""
    trajs: list[Trajectory] = []
    labels: dict[str, list[int]] = {}
    routes: dict[str, SegmentRoute] = {}
    for i in range(config.n_trajectories):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        tid = f"t{i:05d}"
        traj, labs, route = _simulate(rng, net, config, tid)
        trajs.append(traj)
        labels[tid] = labs
        routes[tid] = route
    return trajs, labels, routes


def split_dataset(trajs: Sequence, train_fraction: float = 0.8) -> tuple[list, list]:
    """Order-preserving head/tail split (no shuffling)."""
    if len(trajs) < 5:
        raise ValidationError("need at least 5 trajectories to split")
    n_train = int(math.floor(train_fraction * len(trajs)))
    return list(trajs[:n_train]), list(trajs[n_train:])


# ---------------------------------------------------------------------------
# file formats: network.tsv (road_id, x1, y1, x2, y2, length_m; x/y are
# lon/lat) and routes.tsv (traj_id, comma-joined route)
# ---------------------------------------------------------------------------

def write_network_tsv(path, net: SyntheticNetwork) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# rows={net.rows} cols={net.cols} spacing={net.spacing_m!r} "
                 f"anchor_lon={net.origin.lon!r} anchor_lat={net.origin.lat!r}\n")
        for rid, (x1, y1, x2, y2), ln in zip(net.road_ids, net.segments_xyxy_m,
                                             net.lengths_m):
            lon1, lat1 = meters_to_lonlat(net.origin, x1, y1)
            lon2, lat2 = meters_to_lonlat(net.origin, x2, y2)
            fh.write(f"{rid}\t{lon1!r}\t{lat1!r}\t{lon2!r}\t{lat2!r}\t{float(ln)!r}\n")


def read_network_tsv(path) -> SyntheticNetwork:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"network file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise ValidationError(f"missing header in {path}")
        fields = dict(kv.split("=") for kv in header[2:].split())
        origin = TrajectoryPoint(float(fields["anchor_lon"]),
                                 float(fields["anchor_lat"]), 0.0)
        rows, cols = int(fields["rows"]), int(fields["cols"])
        spacing = float(fields["spacing"])
        ids, segs, lens = [], [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise ValidationError(f"bad network record in {path}: {line!r}")
            ids.append(int(parts[0]))
            lon1, lat1, lon2, lat2 = map(float, parts[1:5])
            x1, y1 = project_to_meters(origin, TrajectoryPoint(lon1, lat1, 0.0))
            x2, y2 = project_to_meters(origin, TrajectoryPoint(lon2, lat2, 0.0))
            segs.append((x1, y1, x2, y2))
            lens.append(float(parts[5]))
    net = SyntheticNetwork(rows=rows, cols=cols, spacing_m=spacing, origin=origin,
                           segments_xyxy_m=np.asarray(segs),
                           road_ids=np.asarray(ids, dtype=np.int64),
                           lengths_m=np.asarray(lens))
    return net


def write_routes_tsv(path, routes: dict[str, SegmentRoute]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tid in sorted(routes.keys()):
            fh.write(f"{tid}\t{','.join(str(r) for r in routes[tid].roads)}\n")


def read_routes_tsv(path) -> dict[str, SegmentRoute]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"routes file not found: {path}")
    routes: dict[str, SegmentRoute] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            tid, joined = line.split("\t")
            routes[tid] = SegmentRoute([int(r) for r in joined.split(",")])
    return routes
