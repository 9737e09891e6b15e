"""Supervised stage: slot-interpolated interval embeddings with positional
decay, fusion of the transferred hidden state with the spatial and temporal
factors, a fresh encoder/decoder stack over road tokens, and greedy
route decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .atagraph import ATAGraph
from .errors import DimensionError, NumericError, TrainingError, ValidationError
from .geo import SegmentRoute, collapse_to_route
from .optim import AdamState, adam_step
from .pretrain import (ModelConfig, PreparedTraj, PretrainModel,
                       length_bucketed_batches)
from .tensor import (Tensor, concat, cross_entropy, gather_rows, getitem, matmul,
                     softmax, transpose, zero_grads)
from .transformer import (Decoder, Encoder, Linear, causal_mask, padding_mask,
                          sinusoidal_positions)


@dataclass
class StFactorTable:
    """Slot-row embedding of non-negative interval values.

    `boundaries` holds n_slots+1 ascending edges starting at 0; slot s is
    bounded by rows (s, s+1) of `table`, so the value at boundary b_s
    reproduces row s exactly. The final slot reuses its own row as the
    lower-bound row, and values past the last boundary clamp into it.
    """
    table: Tensor                # [n_slots, D]
    boundaries: np.ndarray       # [n_slots + 1]
    w_decay: Tensor              # [D, D]

    def __post_init__(self):
        if self.boundaries[0] != 0.0 or np.any(np.diff(self.boundaries) <= 0):
            raise ValidationError("boundaries must start at 0 and strictly increase")
        if self.table.shape[0] + 1 != self.boundaries.shape[0]:
            raise ValidationError("need exactly n_slots + 1 boundaries")


def make_boundaries(v_max: float, n_slots: int, v_unit: float = 1.0) -> np.ndarray:
    """[0, v_unit, ...geometric..., v_max]: log spacing resolves short intervals."""
    if v_max <= v_unit:
        v_max = v_unit * (n_slots + 1)
    return np.concatenate([[0.0], np.geomspace(v_unit, v_max, n_slots)])


def make_factor_table(rng: np.random.Generator, d: int, n_slots: int,
                      v_max: float) -> StFactorTable:
    scale = 1.0 / math.sqrt(d)
    return StFactorTable(
        table=Tensor(rng.normal(0.0, scale, (n_slots, d)), requires_grad=True),
        boundaries=make_boundaries(v_max, n_slots),
        w_decay=Tensor(rng.normal(0.0, scale, (d, d)), requires_grad=True))


def _locate_slots(v: np.ndarray, boundaries: np.ndarray):
    """Slot index, bounding-row indices, and interpolation weight for `v`."""
    if np.any(v < 0):
        raise ValidationError("interval values must be non-negative")
    n_slots = boundaries.shape[0] - 1
    slot = np.clip(np.searchsorted(boundaries, v, side="right") - 1, 0, n_slots - 1)
    lower = boundaries[slot]
    upper = boundaries[slot + 1]
    lam = np.clip((v - lower) / (upper - lower), 0.0, 1.0)
    upper_row = slot
    lower_row = np.minimum(slot + 1, n_slots - 1)
    return slot, upper_row, lower_row, lam


def interval_embed_batch(v: np.ndarray, table: StFactorTable) -> Tensor:
    """r = (1-lam) * upper-bound row + lam * lower-bound row, elementwise in v."""
    _, upper_row, lower_row, lam = _locate_slots(np.asarray(v, dtype=np.float64),
                                                 table.boundaries)
    r_u = gather_rows(table.table, upper_row)
    r_l = gather_rows(table.table, lower_row)
    lam = lam[..., None]
    return r_u * (1.0 - lam) + r_l * lam


def interval_embed(v: float, table: StFactorTable) -> Tensor:
    """Single interval value -> [D] factor vector."""
    return interval_embed_batch(np.asarray([v]), table).reshape(table.table.shape[1])


def decay_concat_batch(r: Tensor, v: np.ndarray, positions: np.ndarray,
                       w_decay: Tensor) -> Tensor:
    """r'' = r (+) (ln(1+v)/s) * (r W_i), positions s are 1-based."""
    if np.any(positions < 1):
        raise ValidationError("positions must be >= 1")
    if np.any(v < 0):
        raise ValidationError("interval values must be non-negative")
    coeff = np.log1p(v) / positions
    r_prime = matmul(r, w_decay) * coeff[..., None]
    return concat([r, r_prime], axis=-1)


def decay_concat(r: Tensor, v: float, s: int, w_decay: Tensor) -> Tensor:
    """Single factor vector [D] -> decayed concatenation [2D]."""
    d = r.shape[-1]
    return decay_concat_batch(r.reshape(1, d), np.asarray([float(v)]),
                              np.asarray([s]), w_decay).reshape(2 * d)


@dataclass
class RoadVocab:
    """Dense indexing of road ids plus reserved decoder-side tokens."""
    ids: list[int]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate road ids in vocabulary")
        self.index = {rid: i for i, rid in enumerate(self.ids)}

    @property
    def n_roads(self) -> int:
        return len(self.ids)

    @property
    def bos(self) -> int:
        return self.n_roads

    @property
    def eos(self) -> int:
        return self.n_roads + 1

    @property
    def pad(self) -> int:
        return self.n_roads + 2

    @property
    def embed_size(self) -> int:
        return self.n_roads + 3

    def encode(self, road_ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.index[int(r)] for r in road_ids], dtype=np.int64)
        except KeyError as exc:
            raise IndexError(f"road id {exc} not in vocabulary") from exc

    def decode(self, indices: Sequence[int]) -> list[int]:
        return [self.ids[int(i)] for i in indices]


@dataclass
class MatchResult:
    traj_id: str
    labels: list[int]            # road id per point
    route: SegmentRoute
    probs: list[float]


@dataclass
class SupervisedBatch:
    cells: np.ndarray         # [B, L]
    coords: np.ndarray        # [B, L, 2]
    lengths: np.ndarray       # [B]
    dist_iv: np.ndarray       # [B, L] raw meters
    time_iv: np.ndarray       # [B, L] raw seconds
    targets: np.ndarray       # [B, L] road-vocab indices, pad elsewhere
    route_in: np.ndarray      # [B, L] teacher-forced decoder input (BOS-shifted)


def build_supervised_batch(trajs: Sequence[PreparedTraj], vocab: RoadVocab,
                           sentinel_id: int) -> SupervisedBatch:
    b = len(trajs)
    lmax = max(len(t) for t in trajs)
    cells = np.full((b, lmax), sentinel_id, dtype=np.int64)
    coords = np.zeros((b, lmax, 2))
    lengths = np.zeros(b, dtype=np.int64)
    dist_iv = np.zeros((b, lmax))
    time_iv = np.zeros((b, lmax))
    targets = np.full((b, lmax), vocab.pad, dtype=np.int64)
    route_in = np.full((b, lmax), vocab.pad, dtype=np.int64)
    for i, t in enumerate(trajs):
        n = len(t)
        lengths[i] = n
        cells[i, :n] = t.cells
        coords[i, :n] = t.coords
        dist_iv[i, :n] = t.dist_iv
        time_iv[i, :n] = t.time_iv
        if t.labels is not None:
            targets[i, :n] = t.labels
            route_in[i, 0] = vocab.bos
            route_in[i, 1:n] = t.labels[:-1]
    return SupervisedBatch(cells=cells, coords=coords, lengths=lengths,
                           dist_iv=dist_iv, time_iv=time_iv,
                           targets=targets, route_in=route_in)


class SupervisedModel:
    """Transferred encoder + interval factors -> seq2seq road classifier."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig,
                 pretrained: PretrainModel, vocab: RoadVocab,
                 dist_max: float, time_max: float):
        d = config.d_model
        dp = config.d_transfer
        self.config = config
        self.pretrained = pretrained
        self.vocab = vocab
        self.w_s = Linear(rng, d, dp, bias=False)
        self.dist_table = make_factor_table(rng, d, config.n_slots, dist_max)
        self.time_table = make_factor_table(rng, d, config.n_slots, time_max)
        # fusion input: transferred D' plus two decayed 2D factors
        self.w_prime = Linear(rng, dp + 4 * d, d, bias=False)
        self.encoder = Encoder(rng, d, config.n_heads, config.encoder_layers, config.ffn_dim)
        self.road_embed = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (vocab.embed_size, d)),
                                 requires_grad=True)
        self.decoder = Decoder(rng, d, config.n_heads, config.decoder_layers, config.ffn_dim)
        self.w_q = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (vocab.n_roads, d)),
                          requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.pretrained.named_parameters())
        out.update(self.w_s.named_parameters("sup.w_s"))
        out["sup.dist_table"] = self.dist_table.table
        out["sup.dist_decay"] = self.dist_table.w_decay
        out["sup.time_table"] = self.time_table.table
        out["sup.time_decay"] = self.time_table.w_decay
        out.update(self.w_prime.named_parameters("sup.w_prime"))
        out.update(self.encoder.named_parameters("sup.enc"))
        out["sup.road_embed"] = self.road_embed
        out.update(self.decoder.named_parameters("sup.dec"))
        out["sup.w_q"] = self.w_q
        return out

    def st_factors(self, batch: SupervisedBatch) -> tuple[Tensor, Tensor]:
        """Decayed spatial and temporal factor sequences, each [B, L, 2D]."""
        positions = np.broadcast_to(np.arange(1, batch.cells.shape[1] + 1),
                                    batch.cells.shape)
        s_vec = decay_concat_batch(interval_embed_batch(batch.dist_iv, self.dist_table),
                                   batch.dist_iv, positions, self.dist_table.w_decay)
        t_vec = decay_concat_batch(interval_embed_batch(batch.time_iv, self.time_table),
                                   batch.time_iv, positions, self.time_table.w_decay)
        return s_vec, t_vec

    def encode(self, batch: SupervisedBatch, graph: ATAGraph) -> Tensor:
        h_s = self.pretrained.encode(batch.cells, batch.coords, batch.lengths, graph)
        transferred = self.w_s(h_s)
        if self.config.use_st_factor:
            s_vec, t_vec = self.st_factors(batch)
        else:
            d = self.config.d_model
            zeros = np.zeros(batch.cells.shape + (2 * d,))
            s_vec = Tensor(zeros)
            t_vec = Tensor(zeros)
        fused = self.w_prime(concat([transferred, s_vec, t_vec], axis=-1))
        fused = fused + sinusoidal_positions(batch.cells.shape[1],
                                             self.config.d_model)[None, :, :]
        return self.encoder(fused, padding_mask(batch.lengths, batch.cells.shape[1]))

    def decode_logits(self, memory: Tensor, route_in: np.ndarray,
                      dec_lengths: np.ndarray, enc_lengths: np.ndarray) -> Tensor:
        lmax = route_in.shape[1]
        tok = gather_rows(self.road_embed, route_in)
        tok = tok + sinusoidal_positions(lmax, self.config.d_model)[None, :, :]
        self_mask = causal_mask(lmax) + padding_mask(dec_lengths, lmax)
        cross = padding_mask(enc_lengths, memory.shape[1])
        dec = self.decoder(tok, memory, self_mask, cross)
        return matmul(dec, transpose(self.w_q))

    def forward(self, batch: SupervisedBatch, graph: ATAGraph) -> Tensor:
        """Teacher-forced logits Z [B, L, C] over the road vocabulary."""
        memory = self.encode(batch, graph)
        return self.decode_logits(memory, batch.route_in, batch.lengths, batch.lengths)


def supervised_loss(logits: Tensor, batch: SupervisedBatch, n_roads: int) -> Tensor:
    """Summed cross-entropy over non-pad positions (Adam rescales by batch)."""
    valid = np.arange(batch.cells.shape[1])[None, :] < batch.lengths[:, None]
    b_idx, p_idx = np.nonzero(valid)
    flat = getitem(logits, (b_idx, p_idx))
    targets = batch.targets[b_idx, p_idx]
    if targets.max(initial=0) >= n_roads:
        raise IndexError("target outside the road vocabulary")
    return cross_entropy(flat, targets)


def train_step(model: SupervisedModel, batch: SupervisedBatch, graph: ATAGraph,
               params: dict[str, Tensor], state: AdamState,
               trainable: set[str] | None = None) -> float:
    """One teacher-forced update; returns the summed batch loss."""
    logits = model.forward(batch, graph)
    loss = supervised_loss(logits, batch, model.vocab.n_roads)
    zero_grads(params.values())
    loss.backward()
    b = batch.cells.shape[0]
    grads = {n: p.grad / b for n, p in params.items()
             if p.grad is not None and (trainable is None or n in trainable)}
    adam_step(params, grads, state)
    return loss.item()


def greedy_decode(model: SupervisedModel, batch: SupervisedBatch,
                  graph: ATAGraph) -> tuple[np.ndarray, np.ndarray]:
    """Autoregressive argmax decoding for exactly L steps per trajectory.

    Returns (road-vocab indices [B, L], chosen-probability [B, L]).
    """
    b, lmax = batch.cells.shape
    memory = model.encode(batch, graph)
    route = np.full((b, lmax), model.vocab.pad, dtype=np.int64)
    route[:, 0] = model.vocab.bos
    out = np.full((b, lmax), 0, dtype=np.int64)
    probs = np.ones((b, lmax))
    for step in range(lmax):
        logits = model.decode_logits(memory, route[:, :step + 1],
                                     np.minimum(batch.lengths, step + 1),
                                     batch.lengths)
        z = logits.data[:, step, :]
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        choice = p.argmax(axis=1)
        out[:, step] = choice
        probs[:, step] = p[np.arange(b), choice]
        if step + 1 < lmax:
            route[:, step + 1] = choice
    return out, probs


def match_decode(traj: PreparedTraj, model: SupervisedModel, graph: ATAGraph) -> MatchResult:
    """Match one prepared trajectory to its per-point roads and route."""
    if len(traj) < 2:
        raise ValidationError("trajectory shorter than 2 points")
    batch = build_supervised_batch([traj], model.vocab, model.pretrained.sentinel_id)
    idx, probs = greedy_decode(model, batch, graph)
    n = len(traj)
    labels = model.vocab.decode(idx[0, :n])
    return MatchResult(traj_id=traj.traj_id, labels=labels,
                       route=collapse_to_route(labels),
                       probs=[float(p) for p in probs[0, :n]])


def match_corpus(trajs: Sequence[PreparedTraj], model: SupervisedModel,
                 graph: ATAGraph, batch_size: int = 64,
                 progress: Callable[[int, int], None] | None = None) -> list[MatchResult]:
    """Batched greedy decoding over a corpus (read-only parameters)."""
    results: list[MatchResult] = []
    order = np.argsort([len(t) for t in trajs], kind="stable")
    by_pos: dict[int, MatchResult] = {}
    for lo in range(0, len(trajs), batch_size):
        sel = order[lo:lo + batch_size]
        chunk = [trajs[i] for i in sel]
        batch = build_supervised_batch(chunk, model.vocab, model.pretrained.sentinel_id)
        idx, probs = greedy_decode(model, batch, graph)
        for row, ti in enumerate(sel):
            n = len(trajs[ti])
            labels = model.vocab.decode(idx[row, :n])
            by_pos[ti] = MatchResult(traj_id=trajs[ti].traj_id, labels=labels,
                                     route=collapse_to_route(labels),
                                     probs=[float(p) for p in probs[row, :n]])
        if progress:
            progress(min(lo + batch_size, len(trajs)), len(trajs))
    for i in range(len(trajs)):
        results.append(by_pos[i])
    return results


def train_supervised(trajs: Sequence[PreparedTraj], graph: ATAGraph,
                     pretrained: PretrainModel, vocab: RoadVocab, config: ModelConfig,
                     epochs: int, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                     freeze_epochs: int = 1, val_trajs: Sequence[PreparedTraj] = (),
                     val_scorer=None, log=None):
    """Teacher-forced fine-tuning; returns (model, metric rows).

    The transferred encoder stays frozen for `freeze_epochs` epochs, then
    everything trains jointly. When a `val_scorer(model) -> (p, r, f1)` is
    given, rows carry it per epoch and the best-F1 parameter snapshot is
    restored at the end.
    """
    if not trajs:
        raise ValidationError("empty supervised training set")
    if any(t.labels is None for t in trajs):
        raise ValidationError("supervised training requires per-point labels")
    dist_max = max(float(t.dist_iv.max()) for t in trajs)
    time_max = max(float(t.time_iv.max()) for t in trajs)
    model = SupervisedModel(np.random.default_rng(np.random.SeedSequence([seed, 11])),
                            config, pretrained, vocab, dist_max, time_max)
    params = model.named_parameters()
    frozen = set(pretrained.named_parameters())
    state = AdamState(lr=lr)
    lengths = np.array([len(t) for t in trajs])
    rows = []
    best = None
    for epoch in range(epochs):
        erng = np.random.default_rng(np.random.SeedSequence([seed, 12, epoch]))
        batches = length_bucketed_batches(len(trajs), lengths, batch_size, erng)
        trainable = None
        if epoch < freeze_epochs:
            trainable = {n for n in params if n not in frozen}
        total = 0.0
        for batch_ids in batches:
            chunk = [trajs[i] for i in batch_ids]
            batch = build_supervised_batch(chunk, vocab, pretrained.sentinel_id)
            try:
                total += train_step(model, batch, graph, params, state, trainable)
            except NumericError as exc:
                raise TrainingError(f"supervised training diverged: {exc}") from exc
        scores = val_scorer(model) if val_scorer else (math.nan, math.nan, math.nan)
        rows.append((epoch, total / len(trajs), *scores))
        if log:
            log(f"train epoch {epoch}: loss={total / len(trajs):.4f} val_f1={scores[2]:.4f}")
        if val_scorer and (best is None or scores[2] >= best[0]):
            best = (scores[2], {n: p.data.copy() for n, p in params.items()})
    if best is not None:
        for n, p in params.items():
            p.data = best[1][n]
    return model, rows
