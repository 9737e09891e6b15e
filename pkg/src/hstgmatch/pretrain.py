"""Self-supervised stage: span masking with one shared sentinel, a
dual-channel token embedding (graph cell embedding + scaled coordinates),
an encoder-only transformer, and the joint grid/tuple reconstruction loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .atagraph import ATAGraph, OptGatStack
from .errors import NumericError, TrainingError, ValidationError
from .geo import (GridSpec, Trajectory, ZScoreParams, apply_zscore, fit_zscore,
                  intervals, points_to_cells)
from .optim import AdamState, adam_step
from .tensor import (Tensor, concat, cross_entropy, gather_rows, getitem, matmul,
                     tsqrt, zero_grads)
from .transformer import Encoder, Linear, padding_mask, sinusoidal_positions


@dataclass
class ModelConfig:
    """Model dimensions; defaults follow the published settings."""
    d_model: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 4
    n_heads: int = 8
    ffn_mult: int = 4
    gat_layers: int = 1
    d_transfer: int = 128        # width of the transferred hidden state
    n_slots: int = 64            # interval slot count per factor table
    mask_rate: float = 0.15
    mean_span: float = 3.0
    k_balance: float = 0.5
    loss_on_unmasked: bool = False
    plain_aggregation: bool = False      # ablation: uniform mean instead of attention
    hierarchical_tuples: bool = True     # ablation: False drops the coordinate channel
    use_st_factor: bool = True           # ablation: False zeroes the interval factors

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValidationError("n_heads must divide d_model")
        for name in ("d_model", "encoder_layers", "decoder_layers", "n_heads",
                     "ffn_mult", "gat_layers", "d_transfer", "n_slots"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValidationError("mask_rate must be in [0, 1]")
        if self.mean_span < 1:
            raise ValidationError("mean_span must be >= 1")
        if not 0.0 <= self.k_balance <= 1.0:
            raise ValidationError("k_balance must be in [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.d_model * self.ffn_mult


@dataclass
class MaskingPlan:
    length: int
    masked: np.ndarray                  # [L] bool
    spans: list[tuple[int, int]]        # (start, span_length)
    sentinel_cell_id: int = -1          # filled in when the vocabulary is known
    sentinel_tuple: tuple[float, float] = (0.0, 0.0)


def mask_spans(length: int, rate: float, mean_span: float, seed) -> MaskingPlan:
    """Sample geometric-length spans until ceil(rate * L) positions are covered.

    The final span is truncated so the masked count is exact; the result is
    a pure function of (length, rate, mean_span, seed).
    """
    if length <= 0:
        raise ValidationError("cannot mask an empty sequence")
    if not 0.0 <= rate <= 1.0:
        raise ValidationError("rate must be in [0, 1]")
    if mean_span < 1:
        raise ValidationError("mean_span must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    target = math.ceil(rate * length)
    masked = np.zeros(length, dtype=bool)
    spans: list[tuple[int, int]] = []
    covered = 0
    while covered < target:
        span = min(1 + rng.geometric(1.0 / mean_span) - 1, length) if mean_span > 1 else 1
        span = max(1, min(span, target - covered))
        free = np.flatnonzero(~masked)
        start_pool = free[free + span <= length]
        # positions where the whole span fits into unmasked territory
        ok = [s for s in start_pool if not masked[s:s + span].any()]
        if not ok:
            span = 1
            ok = free.tolist()
        start = int(ok[rng.integers(0, len(ok))])
        masked[start:start + span] = True
        spans.append((start, span))
        covered += span
    return MaskingPlan(length=length, masked=masked, spans=spans)


@dataclass
class PreparedTraj:
    """Tokenized trajectory: cells, scaled coords, raw interval offsets."""
    traj_id: str
    cells: np.ndarray       # [L] int64 flat cell ids
    coords: np.ndarray      # [L, 2] z-scored (lon, lat)
    dist_iv: np.ndarray     # [L] meters from the first point
    time_iv: np.ndarray     # [L] seconds from the first point
    labels: np.ndarray | None = None   # [L] road-vocab indices when supervised

    def __len__(self) -> int:
        return int(self.cells.shape[0])


def fit_feature_zscore(trajs: Sequence[Trajectory]) -> ZScoreParams:
    """Z-score stats over (lon, lat, time-interval, distance-interval)."""
    rows = []
    for t in trajs:
        iv = intervals(t)
        for p, dt, dd in zip(t.points, iv.time, iv.distance):
            rows.append((p.lon, p.lat, dt, dd))
    return fit_zscore(np.asarray(rows))


def prepare_trajectories(trajs: Sequence[Trajectory], grid: GridSpec,
                         zscore: ZScoreParams,
                         labels: dict[str, np.ndarray] | None = None) -> list[PreparedTraj]:
    out = []
    for t in trajs:
        lons = np.array([p.lon for p in t.points])
        lats = np.array([p.lat for p in t.points])
        cells = points_to_cells(grid, lons, lats)
        iv = intervals(t)
        coords = np.stack([(lons - zscore.mean[0]) / zscore.std[0],
                           (lats - zscore.mean[1]) / zscore.std[1]], axis=1)
        lab = None
        if labels is not None and t.traj_id in labels:
            lab = np.asarray(labels[t.traj_id], dtype=np.int64)
        out.append(PreparedTraj(traj_id=t.traj_id, cells=cells, coords=coords,
                                dist_iv=iv.distance, time_iv=iv.time, labels=lab))
    return out


@dataclass
class SslBatch:
    cells: np.ndarray        # [B, Lmax] cell ids with sentinel at masked, pad rows 0
    coords: np.ndarray       # [B, Lmax, 2] zeroed at masked/pad
    lengths: np.ndarray      # [B]
    masked: np.ndarray       # [B, Lmax] bool, False at pads
    target_cells: np.ndarray    # [B, Lmax] original ids
    target_coords: np.ndarray   # [B, Lmax, 2] original coords
    plans: list[MaskingPlan] = field(default_factory=list)


def build_ssl_batch(trajs: Sequence[PreparedTraj], sentinel_id: int,
                    rate: float, mean_span: float, seeds: Sequence) -> SslBatch:
    b = len(trajs)
    lmax = max(len(t) for t in trajs)
    cells = np.zeros((b, lmax), dtype=np.int64)
    coords = np.zeros((b, lmax, 2))
    lengths = np.zeros(b, dtype=np.int64)
    masked = np.zeros((b, lmax), dtype=bool)
    target_cells = np.zeros((b, lmax), dtype=np.int64)
    target_coords = np.zeros((b, lmax, 2))
    plans = []
    for i, (t, seed) in enumerate(zip(trajs, seeds)):
        n = len(t)
        lengths[i] = n
        plan = mask_spans(n, rate, mean_span, seed)
        plan.sentinel_cell_id = sentinel_id
        plans.append(plan)
        cells[i, :n] = np.where(plan.masked, sentinel_id, t.cells)
        coords[i, :n] = np.where(plan.masked[:, None], 0.0, t.coords)
        masked[i, :n] = plan.masked
        target_cells[i, :n] = t.cells
        target_coords[i, :n] = t.coords
    return SslBatch(cells=cells, coords=coords, lengths=lengths, masked=masked,
                    target_cells=target_cells, target_coords=target_coords, plans=plans)


class PretrainModel:
    """Graph-embedded cells + scaled tuples -> encoder -> two decoding heads."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig, n_cells: int):
        self.config = config
        self.n_cells = n_cells
        d = config.d_model
        self.base_table = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (n_cells, d)),
                                 requires_grad=True)
        self.sentinel = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (1, d)),
                               requires_grad=True)
        self.gat = OptGatStack(rng, d, config.n_heads, config.gat_layers,
                               plain_aggregation=config.plain_aggregation)
        self.coord_proj = Linear(rng, 2, d, bias=False)
        self.tok_proj = Linear(rng, 2 * d, d, bias=False)
        self.encoder = Encoder(rng, d, config.n_heads, config.encoder_layers, config.ffn_dim)
        self.grid_head = Linear(rng, d, n_cells)
        self.tuple_head = Linear(rng, d, 2)

    @property
    def sentinel_id(self) -> int:
        return self.n_cells

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"pre.base_table": self.base_table, "pre.sentinel": self.sentinel}
        out.update(self.gat.named_parameters("pre.gat"))
        out.update(self.coord_proj.named_parameters("pre.coord_proj"))
        out.update(self.tok_proj.named_parameters("pre.tok_proj"))
        out.update(self.encoder.named_parameters("pre.enc"))
        out.update(self.grid_head.named_parameters("pre.grid_head"))
        out.update(self.tuple_head.named_parameters("pre.tuple_head"))
        return out

    def cell_table(self, graph: ATAGraph) -> Tensor:
        """[V+1, D]: graph-attended cell embeddings plus the sentinel row."""
        embedded = self.gat(graph, self.base_table)
        return concat([embedded, self.sentinel], axis=0)

    def embed_tokens(self, cell_table: Tensor, cells: np.ndarray, coords: np.ndarray,
                     add_positional: bool = True) -> Tensor:
        """Token = proj(cell embedding (+) coord embedding), then positions."""
        if cells.max(initial=0) >= cell_table.shape[0]:
            raise IndexError("cell id outside the embedding vocabulary")
        cell_emb = gather_rows(cell_table, cells)
        if self.config.hierarchical_tuples:
            coord_emb = self.coord_proj(Tensor(coords))
        else:
            coord_emb = self.coord_proj(Tensor(np.zeros_like(coords)))
        tok = self.tok_proj(concat([cell_emb, coord_emb], axis=-1))
        if add_positional:
            pe = sinusoidal_positions(cells.shape[1], self.config.d_model)
            tok = tok + pe[None, :, :]
        return tok

    def forward(self, batch: SslBatch, graph: ATAGraph):
        """Returns (grid_logits [B,L,V], tuple_pred [B,L,2], h_s [B,L,D])."""
        table = self.cell_table(graph)
        tok = self.embed_tokens(table, batch.cells, batch.coords)
        mask = padding_mask(batch.lengths, batch.cells.shape[1])
        h_s = self.encoder(tok, mask)
        return self.grid_head(h_s), self.tuple_head(h_s), h_s

    def encode(self, cells: np.ndarray, coords: np.ndarray, lengths: np.ndarray,
               graph: ATAGraph) -> Tensor:
        """Unmasked forward pass producing h_s for the supervised stage."""
        table = self.cell_table(graph)
        tok = self.embed_tokens(table, cells, coords)
        return self.encoder(tok, padding_mask(lengths, cells.shape[1]))


def ssl_loss(grid_logits: Tensor, tuple_pred: Tensor, batch: SslBatch,
             k: float, loss_on_unmasked: bool = False):
    """k * summed grid cross-entropy + (1-k) * per-trajectory tuple RMSE sum.

    Returns (loss, ce_value, rmse_value) with the components detached.
    """
    if not 0.0 <= k <= 1.0:
        raise ValidationError("k must be in [0, 1]")
    sel = batch.masked.copy()
    if loss_on_unmasked:
        valid = np.arange(batch.cells.shape[1])[None, :] < batch.lengths[:, None]
        sel = valid
    if not sel.any():
        raise ValidationError("loss undefined: no masked positions in batch")
    b_idx, p_idx = np.nonzero(sel)
    flat_logits = getitem(grid_logits, (b_idx, p_idx))
    ce = cross_entropy(flat_logits, batch.target_cells[b_idx, p_idx])

    pred = getitem(tuple_pred, (b_idx, p_idx))
    diff = pred - batch.target_coords[b_idx, p_idx]
    sq = (diff * diff).sum(axis=1)
    rmse_terms = []
    for u in range(batch.cells.shape[0]):
        lo = np.searchsorted(b_idx, u, side="left")
        hi = np.searchsorted(b_idx, u, side="right")
        if hi > lo:
            rmse_terms.append(tsqrt(getitem(sq, slice(lo, hi)).mean()))
    rmse = rmse_terms[0]
    for term in rmse_terms[1:]:
        rmse = rmse + term
    loss = ce * k + rmse * (1.0 - k)
    return loss, ce.item(), rmse.item()


def length_bucketed_batches(n_items: int, lengths: np.ndarray, batch_size: int,
                            rng: np.random.Generator) -> list[np.ndarray]:
    """Batches of similar-length items, batch order shuffled per epoch."""
    order = np.argsort(lengths, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, n_items, batch_size)]
    rng.shuffle(batches)
    return batches


def masked_grid_accuracy(model: PretrainModel, graph: ATAGraph,
                         trajs: Sequence[PreparedTraj], config: ModelConfig,
                         seed: int, batch_size: int = 64) -> float:
    """Top-1 accuracy of the grid head at freshly-masked positions."""
    hits = 0
    total = 0
    for lo in range(0, len(trajs), batch_size):
        chunk = trajs[lo:lo + batch_size]
        seeds = [np.random.SeedSequence([seed, 5, lo + i]) for i in range(len(chunk))]
        batch = build_ssl_batch(chunk, model.sentinel_id, config.mask_rate,
                                config.mean_span, seeds)
        logits, _, _ = model.forward(batch, graph)
        pred = logits.data.argmax(axis=2)
        sel = batch.masked
        hits += int((pred[sel] == batch.target_cells[sel]).sum())
        total += int(sel.sum())
    return hits / max(total, 1)


def majority_cell_baseline(train_trajs: Sequence[PreparedTraj],
                           eval_trajs: Sequence[PreparedTraj], config: ModelConfig,
                           seed: int, n_cells: int) -> float:
    """Accuracy of always predicting the most frequent training cell."""
    counts = np.zeros(n_cells, dtype=np.int64)
    for t in train_trajs:
        np.add.at(counts, t.cells, 1)
    majority = int(counts.argmax())
    hits = 0
    total = 0
    for i, t in enumerate(eval_trajs):
        plan = mask_spans(len(t), config.mask_rate, config.mean_span,
                          np.random.SeedSequence([seed, 5, i]))
        hits += int((t.cells[plan.masked] == majority).sum())
        total += int(plan.masked.sum())
    return hits / max(total, 1)


def pretrain_loop(trajs: Sequence[PreparedTraj], graph: ATAGraph, config: ModelConfig,
                  epochs: int, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                  val_fraction: float = 0.1, log=None):
    """Adam-train the self-supervised model; returns (model, metric rows).

    Rows are (epoch, joint_loss, grid_ce, tuple_rmse, masked_accuracy) with
    losses reported as per-trajectory means of the summed objective. Stops
    early once the relative loss change stays below 1e-3 for 3 epochs.
    """
    if len(trajs) < 2:
        raise ValidationError("pretraining needs at least 2 trajectories")
    n_val = min(max(int(len(trajs) * val_fraction), 1), 64) if len(trajs) > 4 else 1
    train, val = trajs[:-n_val], trajs[-n_val:]
    model = PretrainModel(np.random.default_rng(np.random.SeedSequence([seed, 1])),
                          config, graph.n_nodes)
    params = model.named_parameters()
    state = AdamState(lr=lr)
    lengths = np.array([len(t) for t in train])
    rows = []
    prev_loss = None
    stable = 0
    for epoch in range(epochs):
        erng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
        batches = length_bucketed_batches(len(train), lengths, batch_size, erng)
        tot_loss = tot_ce = tot_rmse = 0.0
        for batch_ids in batches:
            chunk = [train[i] for i in batch_ids]
            seeds = [np.random.SeedSequence([seed, 3, epoch, int(i)]) for i in batch_ids]
            batch = build_ssl_batch(chunk, model.sentinel_id, config.mask_rate,
                                    config.mean_span, seeds)
            try:
                logits, tuples, _ = model.forward(batch, graph)
                loss, ce_v, rmse_v = ssl_loss(logits, tuples, batch, config.k_balance,
                                              config.loss_on_unmasked)
                zero_grads(params.values())
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"pretraining diverged: {exc}") from exc
            grads = {n: p.grad / len(batch_ids) for n, p in params.items()
                     if p.grad is not None}
            adam_step(params, grads, state)
            tot_loss += loss.item()
            tot_ce += ce_v
            tot_rmse += rmse_v
        n = len(train)
        acc = masked_grid_accuracy(model, graph, val, config, seed)
        rows.append((epoch, tot_loss / n, tot_ce / n, tot_rmse / n, acc))
        if log:
            log(f"pretrain epoch {epoch}: loss={tot_loss / n:.4f} "
                f"ce={tot_ce / n:.4f} rmse={tot_rmse / n:.4f} masked_acc={acc:.3f}")
        if prev_loss is not None:
            rel = abs(tot_loss - prev_loss) / max(abs(prev_loss), 1e-12)
            stable = stable + 1 if rel < 1e-3 else 0
            if stable >= 3:
                break
        prev_loss = tot_loss
    return model, rows
