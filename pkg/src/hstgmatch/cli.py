"""Pipeline driver: gen-data, build-graph, pretrain, train, match, eval,
plus the ablation grid and the shrinking-train-data robustness protocol.

Stages communicate only through files under the run directory, so any
stage can be re-run or reused in isolation. Exit codes: 0 success,
1 validation error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .atagraph import build_ata_graph, load_graph_cache, save_graph_cache
from .config import AblationFlags, RunConfig, load_config
from .datagen import (gen_network, gen_trajectories, read_network_tsv,
                      read_routes_tsv, split_dataset, write_network_tsv,
                      write_routes_tsv)
from .errors import HstgError, ValidationError
from .evalmetrics import (RoadLengthTable, baseline_corpus, corpus_report,
                          write_report_csv)
from .geo import collapse_to_route, read_trajectory_file, write_trajectory_file
from .persist import (load_pretrain, load_supervised, save_pretrain,
                      save_supervised)
from .pretrain import (ModelConfig, PretrainModel, fit_feature_zscore,
                       prepare_trajectories, pretrain_loop)
from .stmodel import RoadVocab, match_corpus, train_supervised


class Workspace:
    """Artifact paths for one run directory."""

    def __init__(self, out_dir, data_dir=None, graph=None, pretrain_ckpt=None):
        self.out = Path(out_dir)
        self.data_dir = Path(data_dir) if data_dir else self.out / "data"
        self.graph = Path(graph) if graph else self.out / "graph.tsv"
        self.pretrain_ckpt = Path(pretrain_ckpt) if pretrain_ckpt else self.out / "pretrain.ckpt"
        self.trajectories = self.data_dir / "trajectories.tsv"
        self.network = self.data_dir / "network.tsv"
        self.routes = self.data_dir / "routes.tsv"
        self.model_ckpt = self.out / "model.ckpt"
        self.matched = self.out / "matched.tsv"
        self.report = self.out / "report.csv"
        self.baseline_report = self.out / "baseline_report.csv"
        self.manifest = self.out / "manifest.json"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise ValidationError(f"missing required artifact {path}; run '{hint}' first")
        return path


def _config_hash(path: Path, seed: int) -> str:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    return f"{digest}-seed{seed}"


def _update_manifest(ws: Workspace, cfg_path: Path, cfg: RunConfig,
                     stage: str, wall: float) -> None:
    ws.out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    if ws.manifest.exists():
        manifest = json.loads(ws.manifest.read_text())
    manifest["config_hash"] = _config_hash(cfg_path, cfg.seed)
    manifest["seed"] = cfg.seed
    manifest["version"] = f"hstgmatch-{__version__}"
    stages = manifest.setdefault("stages", {})
    stages[stage] = {"wall_time_s": round(wall, 3)}
    ws.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_dataset(ws: Workspace):
    trajs, labels = read_trajectory_file(ws.require(ws.trajectories, "gen-data"))
    net = read_network_tsv(ws.require(ws.network, "gen-data"))
    routes = read_routes_tsv(ws.require(ws.routes, "gen-data"))
    return trajs, labels, net, routes


def _grid_and_graph(ws: Workspace, cfg: RunConfig, net, train_trajs):
    """Load the cached graph, rebuilding when the header disagrees."""
    grid = net.grid_spec(cfg.cell_size_m)
    graph = load_graph_cache(ws.graph, grid)
    if graph is not None and graph.threshold != cfg.graph_threshold_m:
        graph = None
    if graph is None:
        graph = build_ata_graph(grid, train_trajs, cfg.graph_threshold_m)
        save_graph_cache(ws.graph, graph, grid)
    return grid, graph


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: RunConfig, ws: Workspace, log) -> None:
    net = gen_network(cfg.data)
    trajs, labels, routes = gen_trajectories(net, cfg.data)
    write_network_tsv(ws.network, net)
    write_trajectory_file(ws.trajectories, trajs, labels)
    write_routes_tsv(ws.routes, routes)
    log(f"gen-data: {len(trajs)} trajectories over {net.n_segments} segments "
        f"-> {ws.data_dir}")


def stage_build_graph(cfg: RunConfig, ws: Workspace, log) -> None:
    trajs, _, net, _ = _load_dataset(ws)
    train, _ = split_dataset(trajs)
    grid = net.grid_spec(cfg.cell_size_m)
    graph = build_ata_graph(grid, train, cfg.graph_threshold_m)
    save_graph_cache(ws.graph, graph, grid)
    log(f"build-graph: {graph.n_nodes} cells, {graph.n_edges} edges -> {ws.graph}")


def stage_pretrain(cfg: RunConfig, ws: Workspace, log) -> None:
    trajs, _, net, _ = _load_dataset(ws)
    train, _ = split_dataset(trajs)
    grid, graph = _grid_and_graph(ws, cfg, net, train)
    zscore = fit_feature_zscore(train)
    prepared = prepare_trajectories(train, grid, zscore)
    model_cfg = cfg.model_for_run()
    model, rows = pretrain_loop(prepared, graph, model_cfg,
                                epochs=cfg.training.pretrain_epochs,
                                batch_size=cfg.training.batch_size,
                                lr=cfg.training.lr, seed=cfg.seed,
                                val_fraction=cfg.training.val_fraction, log=log)
    save_pretrain(ws.pretrain_ckpt, model, grid, zscore)
    with open(ws.out / "pretrain_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "joint_loss", "grid_ce", "tuple_rmse", "masked_grid_accuracy"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    log(f"pretrain: checkpoint -> {ws.pretrain_ckpt}")


def stage_train(cfg: RunConfig, ws: Workspace, log, data_fraction: float = 1.0) -> None:
    if not 0.0 < data_fraction <= 1.0:
        raise ValidationError("--data-fraction must be in (0, 1]")
    trajs, labels, net, routes = _load_dataset(ws)
    train, _ = split_dataset(trajs)
    model_cfg = cfg.model_for_run()
    grid, graph = _grid_and_graph(ws, cfg, net, train)
    if cfg.ablation.disable_pretrain:
        zscore = fit_feature_zscore(train)
        pretrained = PretrainModel(
            np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])),
            model_cfg, graph.n_nodes)
        freeze_epochs = 0
    else:
        ws.require(ws.pretrain_ckpt, "pretrain")
        pretrained, grid, zscore = load_pretrain(ws.pretrain_ckpt)
        freeze_epochs = cfg.training.freeze_epochs
    vocab = RoadVocab([int(r) for r in net.road_ids])
    vocab_labels = {tid: vocab.encode(labs) for tid, labs in labels.items()}
    labeled = prepare_trajectories(train, grid, zscore, vocab_labels)
    n_use = max(2, int(math.floor(data_fraction * len(labeled))))
    labeled = labeled[:n_use]
    n_val = min(max(int(len(labeled) * cfg.training.val_fraction), 1),
                cfg.training.val_decode_max)
    fit_set, val_set = labeled[:-n_val], labeled[-n_val:]
    lengths = RoadLengthTable(net.length_table())
    truth_val = {t.traj_id: routes[t.traj_id] for t in val_set}

    def val_scorer(model):
        results = match_corpus(val_set, model, graph)
        matched = {r.traj_id: r.route for r in results}
        rep = corpus_report(matched, truth_val, lengths)
        return rep.precision, rep.recall, rep.f1

    model, rows = train_supervised(
        fit_set, graph, pretrained, vocab, model_cfg,
        epochs=cfg.training.train_epochs, batch_size=cfg.training.batch_size,
        lr=cfg.training.lr, seed=cfg.seed, freeze_epochs=freeze_epochs,
        val_scorer=val_scorer, log=log)
    save_supervised(ws.model_ckpt, model, grid, zscore)
    with open(ws.out / "train_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_precision", "val_recall", "val_f1"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    log(f"train: checkpoint -> {ws.model_ckpt}")


def stage_match(cfg: RunConfig, ws: Workspace, log) -> None:
    trajs, _, net, _ = _load_dataset(ws)
    ws.require(ws.model_ckpt, "train")
    model, grid, zscore = load_supervised(ws.model_ckpt)
    train, test = split_dataset(trajs)
    graph = load_graph_cache(ws.graph, grid)
    if graph is None:
        _, graph = _grid_and_graph(ws, cfg, net, train)
    prepared = prepare_trajectories(test, grid, zscore)
    results = match_corpus(prepared, model, graph)
    with open(ws.matched, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            pts = ",".join(str(x) for x in r.labels)
            rt = ",".join(str(x) for x in r.route.roads)
            fh.write(f"{r.traj_id}\t{pts}\t{rt}\n")
    log(f"match: {len(results)} trajectories -> {ws.matched}")


def read_matched(path) -> dict[str, list[int]]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tid, pts, _route = line.rstrip("\n").split("\t")
            out[tid] = [int(x) for x in pts.split(",")]
    return out


def stage_eval(cfg: RunConfig, ws: Workspace, log, multiset: bool = False) -> None:
    trajs, _, net, routes = _load_dataset(ws)
    if not ws.matched.exists() and not ws.model_ckpt.exists():
        raise ValidationError(
            f"missing required artifact {ws.matched} (and missing checkpoint "
            f"{ws.model_ckpt}); run 'train' then 'match' first")
    ws.require(ws.matched, "match")
    _, test = split_dataset(trajs)
    lengths = RoadLengthTable(net.length_table())
    matched_pts = read_matched(ws.matched)
    matched = {tid: collapse_to_route(labs) for tid, labs in matched_pts.items()}
    truths = {t.traj_id: routes[t.traj_id] for t in test}
    report = corpus_report(matched, truths, lengths, multiset=multiset)
    write_report_csv(ws.report, report)
    base = baseline_corpus(test, net)
    base_routes = {r.traj_id: r.route for r in base}
    base_report = corpus_report(base_routes, truths, lengths, multiset=multiset)
    write_report_csv(ws.baseline_report, base_report)
    log(f"eval: model P={report.precision:.4f} R={report.recall:.4f} "
        f"F1={report.f1:.4f} | baseline F1={base_report.f1:.4f} -> {ws.report}")


ABLATION_VARIANTS = (
    ("full", AblationFlags()),
    ("no_opt_gat", AblationFlags(plain_aggregation_instead_of_opt_gat=True)),
    ("no_hierarchical_repr", AblationFlags(disable_hierarchical_tuple_channel=True)),
    ("no_pretrain", AblationFlags(disable_pretrain=True)),
    ("no_st_factor", AblationFlags(disable_st_factor=True)),
)


def run_variant(cfg: RunConfig, ws: Workspace, log, data_fraction: float = 1.0):
    """pretrain (unless disabled) + train + match + eval in ws; returns report."""
    if not cfg.ablation.disable_pretrain and not ws.pretrain_ckpt.exists():
        stage_pretrain(cfg, ws, log)
    stage_train(cfg, ws, log, data_fraction=data_fraction)
    stage_match(cfg, ws, log)
    stage_eval(cfg, ws, log)
    with open(ws.report, "r", encoding="utf-8") as fh:
        last = list(csv.reader(fh))[-1]
    return float(last[1]), float(last[2]), float(last[3])


def stage_ablate(cfg: RunConfig, ws: Workspace, log) -> None:
    """The five-variant grid; appends one row per variant to ablation.csv."""
    if not ws.trajectories.exists():
        stage_gen_data(cfg, ws, log)
    rows = []
    full_pretrain = None
    for name, flags in ABLATION_VARIANTS:
        vcfg = dataclasses.replace(cfg, ablation=flags)
        # pretraining is untouched by the ST-factor switch: reuse the full run's
        pretrain_override = full_pretrain if name == "no_st_factor" else None
        vws = Workspace(ws.out / "ablate" / name, data_dir=ws.data_dir,
                        graph=ws.graph, pretrain_ckpt=pretrain_override)
        p, r, f1 = run_variant(vcfg, vws, log)
        if name == "full":
            full_pretrain = vws.pretrain_ckpt
        rows.append((name, p, r, f1))
        log(f"ablate[{name}]: P={p:.4f} R={r:.4f} F1={f1:.4f}")
    with open(ws.out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "precision", "recall", "f1"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])
    log(f"ablate: wrote {ws.out / 'ablation.csv'}")


def stage_robustness(cfg: RunConfig, ws: Workspace, log,
                     fractions=(1.0, 0.8, 0.6, 0.4)) -> None:
    """Shrinking labeled-data protocol, with and without pretraining."""
    if not ws.trajectories.exists():
        stage_gen_data(cfg, ws, log)
    if not ws.pretrain_ckpt.exists():
        stage_pretrain(cfg, ws, log)
    rows = []
    for frac in fractions:
        for variant in ("pretrain", "no_pretrain"):
            flags = AblationFlags(disable_pretrain=(variant == "no_pretrain"))
            vcfg = dataclasses.replace(cfg, ablation=flags)
            vws = Workspace(ws.out / "robustness" / f"{variant}_{int(frac * 100)}",
                            data_dir=ws.data_dir, graph=ws.graph,
                            pretrain_ckpt=ws.pretrain_ckpt)
            p, r, f1 = run_variant(vcfg, vws, log, data_fraction=frac)
            rows.append((frac, variant, p, r, f1))
            log(f"robustness[{variant} @ {frac:.0%}]: F1={f1:.4f}")
    with open(ws.out / "robustness.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fraction", "variant", "precision", "recall", "f1"])
        for frac, variant, p, r, f1 in rows:
            writer.writerow([f"{frac:.2f}", variant, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}"])
    log(f"robustness: wrote {ws.out / 'robustness.csv'}")


# ---------------------------------------------------------------------------

STAGES = ("gen-data", "build-graph", "pretrain", "train", "match", "eval",
          "ablate", "robustness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hstgmatch",
        description="Grid/graph trajectory map-matching pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name in ("train", "robustness"):
            p.add_argument("--data-fraction", type=float, default=None,
                           help="labeled training fraction (robustness protocol)")
        if name == "robustness":
            p.add_argument("--fractions", default="1.0,0.8,0.6,0.4",
                           help="comma-separated labeled fractions")
        if name == "eval":
            p.add_argument("--multiset", action="store_true",
                           help="count repeated segments with multiplicity")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        if not args.quiet:
            print(msg, flush=True)

    try:
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
            cfg.data.seed = args.seed
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        ws = Workspace(cfg.out_dir)
        started = time.perf_counter()
        if args.command == "gen-data":
            stage_gen_data(cfg, ws, log)
        elif args.command == "build-graph":
            stage_build_graph(cfg, ws, log)
        elif args.command == "pretrain":
            stage_pretrain(cfg, ws, log)
        elif args.command == "train":
            frac = args.data_fraction if args.data_fraction is not None else 1.0
            stage_train(cfg, ws, log, data_fraction=frac)
        elif args.command == "match":
            stage_match(cfg, ws, log)
        elif args.command == "eval":
            stage_eval(cfg, ws, log, multiset=args.multiset)
        elif args.command == "ablate":
            stage_ablate(cfg, ws, log)
        elif args.command == "robustness":
            fractions = tuple(float(f) for f in args.fractions.split(","))
            if args.data_fraction is not None:
                fractions = (args.data_fraction,)
            stage_robustness(cfg, ws, log, fractions)
        _update_manifest(ws, cfg_path, cfg, args.command, time.perf_counter() - started)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except HstgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
