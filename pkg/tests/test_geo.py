"""Geometry primitives: projection, binning, intervals, z-score, routes."""

import math

import numpy as np
import pytest

from hstgmatch.errors import ValidationError
from hstgmatch.geo import (GridSpec, Trajectory, TrajectoryPoint, apply_zscore,
                           collapse_to_route, fit_zscore, intervals,
                           meters_to_lonlat, point_to_cell, project_to_meters)

ANCHOR = TrajectoryPoint(8.52, 47.38, 0.0)


def grid_1km() -> GridSpec:
    max_lon, max_lat = meters_to_lonlat(ANCHOR, 1000.0, 1000.0)
    return GridSpec(min_lon=ANCHOR.lon, max_lon=max_lon,
                    min_lat=ANCHOR.lat, max_lat=max_lat, cell_size=100.0)


def at_meters(x, y, t=0.0) -> TrajectoryPoint:
    lon, lat = meters_to_lonlat(ANCHOR, x, y)
    return TrajectoryPoint(lon, lat, t)


class TestProjection:
    def test_identity(self):
        assert project_to_meters(ANCHOR, ANCHOR) == (0.0, 0.0)

    def test_one_degree_at_equator(self):
        origin = TrajectoryPoint(0.0, 0.0, 0.0)
        dx, dy = project_to_meters(origin, TrajectoryPoint(1.0, 0.0, 0.0))
        assert abs(dx - 6_371_000.0 * math.pi / 180.0) < 0.1   # ~111,194.9 m
        assert dy == 0.0

    def test_antisymmetry(self):
        p = TrajectoryPoint(8.53, 47.39, 0.0)
        fwd = project_to_meters(ANCHOR, p)
        # swapping roles negates the vector (up to the cos(lat) anchor change)
        back = project_to_meters(p, ANCHOR)
        assert abs(fwd[1] + back[1]) < 1e-9
        assert abs(fwd[0] + back[0]) < abs(fwd[0]) * 1e-3

    def test_round_trip(self):
        lon, lat = meters_to_lonlat(ANCHOR, 345.6, -120.3)
        dx, dy = project_to_meters(ANCHOR, TrajectoryPoint(lon, lat, 0.0))
        assert abs(dx - 345.6) < 1e-9 and abs(dy + 120.3) < 1e-9


class TestCells:
    def test_worked_example(self):
        cell = point_to_cell(grid_1km(), at_meters(250.0, 730.0))
        assert (cell.row, cell.col, cell.flat) == (7, 2, 72)

    def test_corner(self):
        assert point_to_cell(grid_1km(), at_meters(0.0, 0.0)).flat == 0

    def test_half_open_edges(self):
        cell = point_to_cell(grid_1km(), at_meters(100.0, 0.0))
        assert cell.col == 1

    def test_max_edge_in_last_cell(self):
        cell = point_to_cell(grid_1km(), at_meters(1000.0, 1000.0))
        assert (cell.row, cell.col) == (9, 9)

    def test_out_of_extent_clamps(self):
        cell = point_to_cell(grid_1km(), at_meters(-50.0, 1500.0))
        assert (cell.row, cell.col) == (9, 0)

    def test_centroid_round_trip(self):
        spec = grid_1km()
        rng = np.random.default_rng(0)
        for _ in range(20):
            flat = int(rng.integers(0, spec.n_cells))
            row, col = divmod(flat, spec.n_cols)
            p = at_meters((col + 0.5) * 100.0, (row + 0.5) * 100.0)
            assert point_to_cell(spec, p).flat == flat


class TestIntervals:
    def test_first_entry_zero(self):
        traj = Trajectory("t", [at_meters(10, 20, 0.0), at_meters(50, 70, 5.0)])
        seq = intervals(traj)
        assert seq.distance[0] == 0.0 and seq.time[0] == 0.0

    def test_100m_east_10s(self):
        traj = Trajectory("t", [at_meters(0, 0, 0.0), at_meters(100, 0, 10.0)])
        seq = intervals(traj)
        assert abs(seq.distance[1] - 100.0) < 1e-6
        assert seq.time[1] == 10.0

    def test_decreasing_timestamps_rejected(self):
        with pytest.raises(ValidationError):
            Trajectory("t", [at_meters(0, 0, 5.0), at_meters(1, 1, 3.0)])

    def test_time_translation_invariance(self):
        pts = [at_meters(0, 0, 100.0), at_meters(10, 0, 107.0), at_meters(30, 0, 111.0)]
        shifted = [TrajectoryPoint(p.lon, p.lat, p.t + 55.5) for p in pts]
        a = intervals(Trajectory("a", pts))
        b = intervals(Trajectory("b", shifted))
        np.testing.assert_allclose(a.time, b.time)


class TestZScore:
    def test_analytic(self):
        params = fit_zscore(np.array([[0.0], [10.0]]))
        assert params.mean[0] == 5.0 and params.std[0] == 5.0
        np.testing.assert_allclose(apply_zscore(params, np.array([[0.0], [10.0]]))[:, 0],
                                   [-1.0, 1.0])

    def test_degenerate_feature(self):
        params = fit_zscore(np.full((5, 1), 3.3))
        assert params.std[0] == 1.0
        assert (apply_zscore(params, np.full((5, 1), 3.3)) == 0.0).all()

    def test_fit_apply_normalizes(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(5.0, 2.5, size=(500, 3))
        params = fit_zscore(vals)
        normed = apply_zscore(params, vals)
        assert np.abs(normed.mean(axis=0)).max() < 1e-10
        np.testing.assert_allclose(normed.std(axis=0), 1.0, atol=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            fit_zscore(np.zeros((0, 2)))


class TestRoutes:
    def test_definition(self):
        assert collapse_to_route([1, 1, 2, 2, 1]).roads == [1, 2, 1]
        assert collapse_to_route([1, 2, 2, 2, 3, 3]).roads == [1, 2, 3]

    def test_singleton(self):
        assert collapse_to_route([7]).roads == [7]

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            collapse_to_route([])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            labels = rng.integers(0, 4, size=rng.integers(1, 30)).tolist()
            once = collapse_to_route(labels)
            twice = collapse_to_route(once.roads)
            assert once.roads == twice.roads


class TestValidation:
    def test_short_trajectory(self):
        with pytest.raises(ValidationError):
            Trajectory("t", [at_meters(0, 0)])

    def test_coordinates_range(self):
        with pytest.raises(ValidationError):
            TrajectoryPoint(190.0, 0.0, 0.0)

    def test_grid_extent(self):
        with pytest.raises(ValidationError):
            GridSpec(min_lon=1.0, max_lon=1.0, min_lat=0.0, max_lat=1.0)
