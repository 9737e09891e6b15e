"""Lattice generator invariants, noise statistics, splits, file round trips."""

import numpy as np
import pytest

from hstgmatch.datagen import (GenConfig, gen_network, gen_trajectories,
                               read_network_tsv, read_routes_tsv, split_dataset,
                               write_network_tsv, write_routes_tsv)
from hstgmatch.errors import ValidationError
from hstgmatch.geo import collapse_to_route, read_trajectory_file, write_trajectory_file


class TestNetwork:
    def test_2x2_counts(self):
        net = gen_network(GenConfig(rows=2, cols=2, spacing_m=500.0, n_trajectories=1))
        assert net.n_segments == 4
        np.testing.assert_allclose(net.lengths_m, 500.0)

    def test_5x5_counts(self):
        net = gen_network(GenConfig(rows=5, cols=5, spacing_m=100.0, n_trajectories=1))
        assert net.n_segments == 5 * 4 + 5 * 4

    def test_all_intersections_reachable(self):
        net = gen_network(GenConfig(rows=4, cols=6, spacing_m=100.0, n_trajectories=1))
        n = net.rows * net.cols
        adj = {i: set() for i in range(n)}
        for (a, b) in net.edge_of:
            adj[a].add(b)
        seen = {0}
        frontier = [0]
        while frontier:
            v = frontier.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        assert seen == set(range(n))

    def test_degenerate_rejected(self):
        with pytest.raises(ValidationError):
            GenConfig(rows=1, cols=5)


class TestTrajectories:
    def small_config(self, **kw):
        base = dict(rows=5, cols=5, spacing_m=150.0, n_trajectories=30,
                    min_route_steps=3, max_route_steps=8, seed=11)
        base.update(kw)
        return GenConfig(**base)

    def test_zero_noise_points_on_true_segment(self):
        gc = self.small_config(gps_noise_sigma_m=0.0)
        net = gen_network(gc)
        trajs, labels, _ = gen_trajectories(net, gc)
        for traj in trajs[:10]:
            px, py = net.project_points(traj)
            for i, rid in enumerate(labels[traj.traj_id]):
                x1, y1, x2, y2 = net.segments_xyxy_m[rid]
                ln2 = (x2 - x1) ** 2 + (y2 - y1) ** 2
                t = ((px[i] - x1) * (x2 - x1) + (py[i] - y1) * (y2 - y1)) / ln2
                t = min(max(t, 0.0), 1.0)
                d = np.hypot(px[i] - x1 - t * (x2 - x1), py[i] - y1 - t * (y2 - y1))
                assert d < 1e-6

    def test_true_road_in_route(self):
        gc = self.small_config()
        net = gen_network(gc)
        trajs, labels, routes = gen_trajectories(net, gc)
        for traj in trajs:
            route = set(routes[traj.traj_id].roads)
            assert all(lab in route for lab in labels[traj.traj_id])

    def test_collapse_matches_recorded_route(self):
        gc = self.small_config(detour_fraction=0.3)
        net = gen_network(gc)
        trajs, labels, routes = gen_trajectories(net, gc)
        for traj in trajs:
            collapsed = collapse_to_route(labels[traj.traj_id])
            assert collapsed.roads == routes[traj.traj_id].roads

    def test_noise_distance_statistics(self):
        gc = self.small_config(n_trajectories=60, gps_noise_sigma_m=15.0, seed=21)
        net = gen_network(gc)
        trajs, labels, _ = gen_trajectories(net, gc)
        dists = []
        for traj in trajs:
            px, py = net.project_points(traj)
            for i, rid in enumerate(labels[traj.traj_id]):
                x1, y1, x2, y2 = net.segments_xyxy_m[rid]
                ln2 = (x2 - x1) ** 2 + (y2 - y1) ** 2
                t = ((px[i] - x1) * (x2 - x1) + (py[i] - y1) * (y2 - y1)) / ln2
                t = min(max(t, 0.0), 1.0)
                dists.append(np.hypot(px[i] - x1 - t * (x2 - x1),
                                      py[i] - y1 - t * (y2 - y1)))
            if len(dists) >= 1000:
                break
        mean = np.mean(dists[:1000])
        assert 10.0 <= mean <= 14.0     # |N(0, 15)| has mean ~11.97 m

    def test_timestamps_strictly_increase_and_intervals_in_range(self):
        gc = self.small_config()
        net = gen_network(gc)
        trajs, _, _ = gen_trajectories(net, gc)
        for traj in trajs:
            ts = np.array([p.t for p in traj.points])
            dt = np.diff(ts)
            assert (dt > 0).all()
            assert (dt >= gc.interval_min_s - 1e-9).all()
            assert (dt <= gc.interval_max_s + 1e-9).all()

    def test_deterministic_files(self, tmp_path):
        gc = self.small_config(n_trajectories=15)
        for sub in ("a", "b"):
            net = gen_network(gc)
            trajs, labels, routes = gen_trajectories(net, gc)
            write_trajectory_file(tmp_path / sub / "trajectories.tsv", trajs, labels)
            write_network_tsv(tmp_path / sub / "network.tsv", net)
            write_routes_tsv(tmp_path / sub / "routes.tsv", routes)
        for name in ("trajectories.tsv", "network.tsv", "routes.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()


class TestSplit:
    def test_80_20(self):
        train, test = split_dataset(list(range(100)))
        assert len(train) == 80 and len(test) == 20

    def test_five_items(self):
        train, test = split_dataset(list(range(5)))
        assert len(train) == 4 and len(test) == 1

    def test_order_preserved(self):
        items = list(range(37))
        train, test = split_dataset(items)
        assert train + test == items

    def test_too_few(self):
        with pytest.raises(ValidationError):
            split_dataset([1, 2, 3])


class TestFileRoundTrips:
    def test_trajectory_file(self, tmp_path):
        gc = GenConfig(rows=3, cols=3, spacing_m=100.0, n_trajectories=8,
                       min_route_steps=2, max_route_steps=4, seed=5)
        net = gen_network(gc)
        trajs, labels, _ = gen_trajectories(net, gc)
        path = tmp_path / "t.tsv"
        write_trajectory_file(path, trajs, labels)
        loaded, lab2 = read_trajectory_file(path)
        assert len(loaded) == len(trajs)
        for a, b in zip(trajs, loaded):
            assert a.traj_id == b.traj_id
            assert len(a.points) == len(b.points)
            for pa, pb in zip(a.points, b.points):
                assert pa.lon == pb.lon and pa.lat == pb.lat and pa.t == pb.t
            assert labels[a.traj_id] == lab2[a.traj_id]

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("# header comment\nt0\t8.5\t47.3\t0.0\t3\nt0\t8.51\t47.31\t5.0\t3\n")
        trajs, labels = read_trajectory_file(path)
        assert len(trajs) == 1 and labels["t0"] == [3, 3]

    def test_network_round_trip(self, tmp_path):
        gc = GenConfig(rows=3, cols=4, spacing_m=120.0, n_trajectories=1)
        net = gen_network(gc)
        path = tmp_path / "network.tsv"
        write_network_tsv(path, net)
        loaded = read_network_tsv(path)
        assert loaded.n_segments == net.n_segments
        np.testing.assert_allclose(loaded.segments_xyxy_m, net.segments_xyxy_m,
                                   atol=1e-6)
        np.testing.assert_allclose(loaded.lengths_m, net.lengths_m)

    def test_routes_round_trip(self, tmp_path):
        from hstgmatch.geo import SegmentRoute
        routes = {"t0": SegmentRoute([3, 1, 2]), "t1": SegmentRoute([5])}
        path = tmp_path / "routes.tsv"
        write_routes_tsv(path, routes)
        loaded = read_routes_tsv(path)
        assert loaded["t0"].roads == [3, 1, 2]
        assert loaded["t1"].roads == [5]
