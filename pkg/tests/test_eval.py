"""Metric oracle checks, baseline brute force, and corpus aggregation."""

import numpy as np
import pytest

from hstgmatch.datagen import GenConfig, gen_network, gen_trajectories
from hstgmatch.errors import ValidationError
from hstgmatch.evalmetrics import (CorpusReport, RoadLengthTable, corpus_report,
                                   nearest_road_baseline, route_metrics)
from hstgmatch.geo import SegmentRoute, Trajectory, TrajectoryPoint, meters_to_lonlat


def direct_eval(matched_ids, truth_ids, lengths):
    """Independent re-evaluation of the three ratios from their definition."""
    inter = set(matched_ids) & set(truth_ids)
    len_m = sum(lengths[r] for r in set(matched_ids))
    len_g = sum(lengths[r] for r in set(truth_ids))
    len_i = sum(lengths[r] for r in inter)
    p = len_i / len_m if len_m else 0.0
    r = len_i / len_g if len_g else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


class TestRouteMetrics:
    def test_identical_routes(self):
        lengths = RoadLengthTable({1: 50.0, 2: 70.0})
        route = SegmentRoute([1, 2])
        assert route_metrics(route, route, lengths) == (1.0, 1.0, 1.0)

    def test_worked_example(self):
        # matched {A:100, B:200}, truth {A:100, C:300}
        lengths = RoadLengthTable({1: 100.0, 2: 200.0, 3: 300.0})
        p, r, f1 = route_metrics(SegmentRoute([1, 2]), SegmentRoute([1, 3]), lengths)
        assert abs(p - 1 / 3) < 1e-12
        assert abs(r - 1 / 4) < 1e-12
        assert abs(f1 - 2 / 7) < 1e-12

    def test_disjoint_guard(self):
        lengths = RoadLengthTable({1: 10.0, 2: 10.0})
        assert route_metrics(SegmentRoute([1]), SegmentRoute([2]), lengths) == (0.0, 0.0, 0.0)

    def test_missing_id_rejected(self):
        with pytest.raises(ValidationError):
            route_metrics(SegmentRoute([1]), SegmentRoute([9]), RoadLengthTable({1: 5.0}))

    def test_random_pairs_match_direct_evaluation(self):
        rng = np.random.default_rng(0)
        lengths = {i: float(rng.uniform(10, 500)) for i in range(40)}
        table = RoadLengthTable(lengths)
        for _ in range(1000):
            m = rng.permutation(40)[:rng.integers(1, 12)].tolist()
            g = rng.permutation(40)[:rng.integers(1, 12)].tolist()
            got = route_metrics(SegmentRoute(m), SegmentRoute(g), table)
            expected = direct_eval(m, g, lengths)
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_bounds_and_harmonic_mean(self):
        rng = np.random.default_rng(1)
        lengths = {i: float(rng.uniform(1, 100)) for i in range(20)}
        table = RoadLengthTable(lengths)
        for _ in range(200):
            m = rng.permutation(20)[:rng.integers(1, 8)].tolist()
            g = rng.permutation(20)[:rng.integers(1, 8)].tolist()
            p, r, f1 = route_metrics(SegmentRoute(m), SegmentRoute(g), table)
            assert 0.0 <= p <= 1.0 and 0.0 <= r <= 1.0 and 0.0 <= f1 <= 1.0
            assert f1 <= max(p, r) + 1e-12
            if p + r > 0:
                assert abs(f1 - 2 * p * r / (p + r)) < 1e-12

    def test_symmetry_swaps_p_and_r(self):
        rng = np.random.default_rng(2)
        lengths = RoadLengthTable({i: float(rng.uniform(1, 100)) for i in range(15)})
        m = SegmentRoute([1, 3, 5])
        g = SegmentRoute([3, 7])
        p1, r1, f1a = route_metrics(m, g, lengths)
        p2, r2, f1b = route_metrics(g, m, lengths)
        assert (p1, r1) == (r2, p2) and abs(f1a - f1b) < 1e-15

    def test_duplicate_expansion_invariance(self):
        lengths = RoadLengthTable({1: 10.0, 2: 20.0, 3: 30.0})
        a = route_metrics(SegmentRoute([1, 2, 3]), SegmentRoute([2, 3]), lengths)
        b = route_metrics(SegmentRoute([1, 2, 1, 2, 3]), SegmentRoute([2, 3, 2]), lengths)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_multiset_mode_counts_repeats(self):
        lengths = RoadLengthTable({1: 10.0, 2: 20.0})
        p, r, f1 = route_metrics(SegmentRoute([1, 2, 1]), SegmentRoute([1, 2]),
                                 lengths, multiset=True)
        # matched multiset len 40, truth 30, intersection 30
        assert abs(p - 30 / 40) < 1e-12 and r == 1.0


class TestBaseline:
    def _network(self):
        return gen_network(GenConfig(rows=3, cols=3, spacing_m=200.0,
                                     n_trajectories=1, seed=0))

    def _traj_at(self, net, xy_list):
        pts = [TrajectoryPoint(*meters_to_lonlat(net.origin, x, y), float(i))
               for i, (x, y) in enumerate(xy_list)]
        return Trajectory("b0", pts)

    def test_point_on_segment(self):
        net = self._network()
        traj = self._traj_at(net, [(50.0, 0.0), (150.0, 0.0)])
        res = nearest_road_baseline(traj, net)
        assert res.labels == [0, 0]

    def test_tie_breaks_to_lowest_id(self):
        net = self._network()
        # equidistant between horizontal road 0 (y=0) and road 2 (y=200)
        traj = self._traj_at(net, [(100.0, 100.0), (100.0, 100.0)])
        res = nearest_road_baseline(traj, net)
        ids = sorted(net.road_ids.tolist())
        # exhaustive scan for the minimal distance set
        from hstgmatch.kernels import numpy_impls
        px, py = net.project_points(traj)
        seg = net.segments_xyxy_m
        d = []
        for q in range(seg.shape[0]):
            x1, y1, x2, y2 = seg[q]
            t = np.clip(((px[0]-x1)*(x2-x1) + (py[0]-y1)*(y2-y1)) /
                        max((x2-x1)**2 + (y2-y1)**2, 1e-12), 0, 1)
            d.append(np.hypot(px[0]-x1-t*(x2-x1), py[0]-y1-t*(y2-y1)))
        best = min(d)
        expect = min(int(net.road_ids[q]) for q in range(len(d))
                     if abs(d[q] - best) < 1e-12)
        assert res.labels[0] == expect

    def test_brute_force_oracle_100_points(self):
        rng = np.random.default_rng(3)
        net = self._network()
        xy = [(float(rng.uniform(-50, 450)), float(rng.uniform(-50, 450)))
              for _ in range(100)]
        traj = self._traj_at(net, xy)
        res = nearest_road_baseline(traj, net)
        px, py = net.project_points(traj)
        seg = net.segments_xyxy_m
        for i in range(100):
            dists = []
            for q in range(seg.shape[0]):
                x1, y1, x2, y2 = seg[q]
                ln2 = max((x2 - x1) ** 2 + (y2 - y1) ** 2, 1e-12)
                t = np.clip(((px[i] - x1) * (x2 - x1) + (py[i] - y1) * (y2 - y1)) / ln2,
                            0.0, 1.0)
                dists.append(np.hypot(px[i] - x1 - t * (x2 - x1),
                                      py[i] - y1 - t * (y2 - y1)))
            assert res.labels[i] == int(np.argmin(dists))


class TestCorpusReport:
    def test_macro_average(self):
        lengths = RoadLengthTable({1: 10.0, 2: 10.0})
        matched = {"a": SegmentRoute([1]), "b": SegmentRoute([2])}
        truths = {"a": SegmentRoute([1]), "b": SegmentRoute([1])}
        rep = corpus_report(matched, truths, lengths)
        assert abs(rep.f1 - 0.5) < 1e-12

    def test_single_trajectory_identity(self):
        lengths = RoadLengthTable({1: 10.0, 2: 30.0, 3: 5.0})
        matched = {"a": SegmentRoute([1, 2])}
        truths = {"a": SegmentRoute([2, 3])}
        rep = corpus_report(matched, truths, lengths)
        p, r, f1 = route_metrics(matched["a"], truths["a"], lengths)
        assert (rep.precision, rep.recall, rep.f1) == (p, r, f1)

    def test_id_mismatch_rejected(self):
        lengths = RoadLengthTable({1: 10.0})
        with pytest.raises(ValidationError):
            corpus_report({"a": SegmentRoute([1])}, {"b": SegmentRoute([1])}, lengths)

    def test_spreadsheet_style_recomputation(self):
        rng = np.random.default_rng(4)
        lengths = {i: float(rng.uniform(10, 100)) for i in range(30)}
        table = RoadLengthTable(lengths)
        matched, truths = {}, {}
        for i in range(20):
            matched[f"t{i}"] = SegmentRoute(rng.permutation(30)[:rng.integers(1, 9)].tolist())
            truths[f"t{i}"] = SegmentRoute(rng.permutation(30)[:rng.integers(1, 9)].tolist())
        rep = corpus_report(matched, truths, table)
        ps, rs, f1s = [], [], []
        for tid in matched:
            p, r, f1 = direct_eval(matched[tid].roads, truths[tid].roads, lengths)
            ps.append(p); rs.append(r); f1s.append(f1)
        assert abs(rep.precision - np.mean(ps)) < 1e-12
        assert abs(rep.recall - np.mean(rs)) < 1e-12
        assert abs(rep.f1 - np.mean(f1s)) < 1e-12

    def test_zero_noise_baseline_near_perfect(self):
        gc = GenConfig(rows=5, cols=5, spacing_m=150.0, n_trajectories=40,
                       gps_noise_sigma_m=0.0, seed=3, min_route_steps=3,
                       max_route_steps=8)
        net = gen_network(gc)
        trajs, labels, routes = gen_trajectories(net, gc)
        table = RoadLengthTable(net.length_table())
        matched = {}
        for t in trajs:
            matched[t.traj_id] = nearest_road_baseline(t, net).route
        rep = corpus_report(matched, routes, table)
        assert rep.f1 > 0.99
