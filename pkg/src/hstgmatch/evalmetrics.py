"""Segment-length precision/recall/F1 and a nearest-road anchor baseline.

Routes are compared as road-id sets weighted by segment length; a road
traversed twice counts once (multiset mode is available for the stricter
reading). Corpus scores are macro-averages over trajectories.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ValidationError
from .geo import SegmentRoute, Trajectory, collapse_to_route
from .stmodel import MatchResult


def worker_count() -> int:
    """Worker-thread cap from HSTG_THREADS (default 1)."""
    raw = os.environ.get("HSTG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class RoadLengthTable:
    lengths: dict[int, float]

    def __post_init__(self):
        if any(v <= 0 for v in self.lengths.values()):
            raise ValidationError("all road lengths must be positive")

    def total(self, roads) -> float:
        try:
            return float(sum(self.lengths[r] for r in roads))
        except KeyError as exc:
            raise ValidationError(f"road id {exc} missing from length table") from exc

    def total_multiset(self, counted: Mapping[int, int]) -> float:
        try:
            return float(sum(self.lengths[r] * c for r, c in counted.items()))
        except KeyError as exc:
            raise ValidationError(f"road id {exc} missing from length table") from exc


def route_metrics(matched: SegmentRoute, truth: SegmentRoute,
                  lengths: RoadLengthTable, multiset: bool = False) -> tuple[float, float, float]:
    """Length-weighted precision/recall/F1 of matched vs truth routes."""
    if multiset:
        from collections import Counter
        cm, cg = Counter(matched.roads), Counter(truth.roads)
        inter = {r: min(cm[r], cg[r]) for r in cm.keys() & cg.keys()}
        len_m = lengths.total_multiset(cm)
        len_g = lengths.total_multiset(cg)
        len_i = lengths.total_multiset(inter)
    else:
        sm, sg = set(matched.roads), set(truth.roads)
        len_m = lengths.total(sm)
        len_g = lengths.total(sg)
        len_i = lengths.total(sm & sg)
    precision = len_i / len_m if len_m > 0 else 0.0
    recall = len_i / len_g if len_g > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def nearest_road_baseline(traj: Trajectory, network) -> MatchResult:
    """Label each point with the closest road segment (ties: lowest id)."""
    if network.n_segments == 0:
        raise ValidationError("empty road network")
    px, py = network.project_points(traj)
    idx, _ = kernels.nearest_segments(px, py, network.segments_xyxy_m)
    labels = [int(network.road_ids[i]) for i in idx]
    return MatchResult(traj_id=traj.traj_id, labels=labels,
                       route=collapse_to_route(labels),
                       probs=[1.0] * len(labels))


def baseline_corpus(trajs: Sequence[Trajectory], network) -> list[MatchResult]:
    workers = worker_count()
    if workers == 1:
        return [nearest_road_baseline(t, network) for t in trajs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: nearest_road_baseline(t, network), trajs))


@dataclass
class CorpusReport:
    precision: float
    recall: float
    f1: float
    rows: list[tuple]    # (traj_id, p, r, f1, len_matched, len_truth, len_inter)


def corpus_report(matched: Mapping[str, SegmentRoute], truths: Mapping[str, SegmentRoute],
                  lengths: RoadLengthTable, multiset: bool = False) -> CorpusReport:
    """Macro-averaged metrics plus a per-trajectory table."""
    if set(matched.keys()) != set(truths.keys()):
        missing = set(matched.keys()) ^ set(truths.keys())
        raise ValidationError(f"matched/truth trajectory ids disagree: {sorted(missing)[:5]}")
    rows = []
    for tid in sorted(matched.keys()):
        m, g = matched[tid], truths[tid]
        p, r, f1 = route_metrics(m, g, lengths, multiset)
        sm, sg = set(m.roads), set(g.roads)
        rows.append((tid, p, r, f1, lengths.total(sm), lengths.total(sg),
                     lengths.total(sm & sg)))
    arr = np.array([[r[1], r[2], r[3]] for r in rows])
    mean = arr.mean(axis=0)
    return CorpusReport(precision=float(mean[0]), recall=float(mean[1]),
                        f1=float(mean[2]), rows=rows)


def write_report_csv(path, report: CorpusReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["traj_id", "precision", "recall", "f1",
                         "len_matched_m", "len_truth_m", "len_intersection_m"])
        for tid, p, r, f1, lm, lg, li in report.rows:
            writer.writerow([tid, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}",
                             f"{lm:.3f}", f"{lg:.3f}", f"{li:.3f}"])
        writer.writerow(["ALL", f"{report.precision:.6f}", f"{report.recall:.6f}",
                         f"{report.f1:.6f}", "", "", ""])
