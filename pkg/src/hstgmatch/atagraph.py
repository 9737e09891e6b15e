"""Grid-cell adjacency graph with count-derived edge weights, and the
simplified multi-head graph-attention layer that embeds its nodes.

Edges connect cells whose centroids are closer than a distance threshold
(self-loops always included); per-neighbor weights gamma are the
Laplace-smoothed share of trajectory points observed in each neighbor.
Attention scores are plain scaled dot products of transformed features —
no concatenation scoring — averaged over heads and fused with the
gamma-weighted neighbor sum, then projected back to the model width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, ValidationError
from .geo import GridSpec, Trajectory, cell_centroid_meters, points_to_cells
from .tensor import Tensor, concat, matmul, _make


@dataclass
class ATAGraph:
    n_nodes: int
    indptr: np.ndarray   # [N+1] CSR row pointers into nbr/gamma
    nbr: np.ndarray      # [E] neighbor ids, ascending within each node
    gamma: np.ndarray    # [E] per-(node, neighbor) weights, each row sums to 1
    threshold: float
    counts: np.ndarray   # [N] trajectory points tallied per cell

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValidationError("graph needs at least one node")
        if np.any(np.diff(self.indptr) < 1):
            raise ValidationError("every node needs at least one neighbor")

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr[self.indptr[i]:self.indptr[i + 1]]

    def gamma_row(self, i: int) -> np.ndarray:
        return self.gamma[self.indptr[i]:self.indptr[i + 1]]

    @property
    def n_edges(self) -> int:
        return int(self.nbr.shape[0])


def gamma_from_counts(counts: np.ndarray, indptr: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Laplace-smoothed neighbor weights: (1 + count_j) / sum over the row."""
    smoothed = 1.0 + counts[nbr].astype(np.float64)
    denom = np.add.reduceat(smoothed, indptr[:-1])
    centers = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    return smoothed / denom[centers]


def build_ata_graph(spec: GridSpec, trajectories: Iterable[Trajectory],
                    threshold: float = 150.0) -> ATAGraph:
    """Edges by centroid distance < threshold; weights from point counts."""
    if threshold <= 0:
        raise ValidationError("threshold must be positive")
    n = spec.n_cells
    if n < 1:
        raise ValidationError("empty grid")

    counts = np.zeros(n, dtype=np.int64)
    for traj in trajectories:
        lons = np.array([p.lon for p in traj.points])
        lats = np.array([p.lat for p in traj.points])
        np.add.at(counts, points_to_cells(spec, lons, lats), 1)

    reach = int(math.floor((threshold - 1e-9) / spec.cell_size)) + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    nbr_lists: list[np.ndarray] = []
    for flat in range(n):
        row, col = divmod(flat, spec.n_cols)
        neigh = []
        for dr in range(-reach, reach + 1):
            rr = row + dr
            if rr < 0 or rr >= spec.n_rows:
                continue
            for dc in range(-reach, reach + 1):
                cc = col + dc
                if cc < 0 or cc >= spec.n_cols:
                    continue
                dist = spec.cell_size * math.hypot(dr, dc)
                if dist < threshold:
                    neigh.append(rr * spec.n_cols + cc)
        neigh.sort()
        arr = np.array(neigh, dtype=np.int64)
        nbr_lists.append(arr)
        indptr[flat + 1] = indptr[flat] + arr.shape[0]
    nbr = np.concatenate(nbr_lists)
    gamma = gamma_from_counts(counts, indptr, nbr)
    return ATAGraph(n_nodes=n, indptr=indptr, nbr=nbr, gamma=gamma,
                    threshold=float(threshold), counts=counts)


# ---------------------------------------------------------------------------
# graph cache file: textual header, then node<TAB>neighbor<TAB>gamma lines
# ---------------------------------------------------------------------------

def save_graph_cache(path, graph: ATAGraph, spec: GridSpec) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n_nodes={graph.n_nodes} threshold={graph.threshold!r} "
                 f"cell_size={spec.cell_size!r}\n")
        fh.write("# counts=" + ",".join(str(int(c)) for c in graph.counts) + "\n")
        centers = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
        for c, j, g in zip(centers, graph.nbr, graph.gamma):
            fh.write(f"{c}\t{j}\t{float(g)!r}\n")


def load_graph_cache(path, spec: GridSpec) -> ATAGraph | None:
    """Parse a cached graph; returns None when the header disagrees with `spec`."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# "):
            raise ValidationError(f"bad graph cache header in {path}")
        fields = dict(kv.split("=") for kv in header[2:].split())
        n_nodes = int(fields["n_nodes"])
        threshold = float(fields["threshold"])
        cell_size = float(fields["cell_size"])
        if n_nodes != spec.n_cells or cell_size != spec.cell_size:
            return None
        counts_line = fh.readline().strip()
        counts = np.array([int(v) for v in counts_line.split("=", 1)[1].split(",")],
                          dtype=np.int64)
        centers, nbrs, gammas = [], [], []
        for line in fh:
            c, j, g = line.rstrip("\n").split("\t")
            centers.append(int(c))
            nbrs.append(int(j))
            gammas.append(float(g))
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, np.asarray(centers, dtype=np.int64) + 1, 1)
    indptr = np.cumsum(indptr)
    return ATAGraph(n_nodes=n_nodes, indptr=indptr,
                    nbr=np.asarray(nbrs, dtype=np.int64),
                    gamma=np.asarray(gammas, dtype=np.float64),
                    threshold=threshold, counts=counts)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def opt_gat_attention(w: np.ndarray, h_center: np.ndarray,
                      neighbor_feats: np.ndarray, j: int) -> float:
    """Attention coefficient of neighbor `j` under a single shared transform.

    Scores are (W h_i . W h_m) / sqrt(d) softmaxed over the neighbor set,
    with d the transformed dimension.
    """
    if j < 0 or j >= neighbor_feats.shape[0]:
        raise IndexError(f"neighbor index {j} outside the neighbor set")
    u_i = h_center @ w
    u_m = neighbor_feats @ w
    scores = (u_m @ u_i) / math.sqrt(w.shape[1])
    scores -= scores.max()
    e = np.exp(scores)
    return float(e[j] / e.sum())


def edge_attention(u: Tensor, graph: ATAGraph) -> Tensor:
    """Sparse per-node softmax attention over CSR neighborhoods (tape op)."""
    inv_sqrt_d = 1.0 / math.sqrt(u.shape[1])
    out_data, alpha = kernels.edge_attention_forward(
        np.ascontiguousarray(u.data), graph.indptr, graph.nbr, inv_sqrt_d)

    def bwd(g):
        grad_u = kernels.edge_attention_backward(
            np.ascontiguousarray(u.data), graph.indptr, graph.nbr, alpha,
            np.ascontiguousarray(g), inv_sqrt_d)
        u.accumulate_grad(grad_u)

    return _make(out_data, (u,), bwd, "edge_attention")


def edge_alphas(u_data: np.ndarray, graph: ATAGraph) -> np.ndarray:
    """Attention coefficients per edge (no tape), for inspection and tests."""
    inv_sqrt_d = 1.0 / math.sqrt(u_data.shape[1])
    _, alpha = kernels.edge_attention_forward(
        np.ascontiguousarray(u_data), graph.indptr, graph.nbr, inv_sqrt_d)
    return alpha


def neighbor_weighted_sum(v: Tensor, graph: ATAGraph, weights: np.ndarray) -> Tensor:
    """out_i = sum over j in N_i of weights_e * v_j (tape op)."""
    centers = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
    out_data = kernels.scatter_weighted(
        np.ascontiguousarray(v.data), graph.nbr, centers, weights, graph.n_nodes)

    def bwd(g):
        grad_v = kernels.scatter_weighted(
            np.ascontiguousarray(g), centers, graph.nbr, weights, graph.n_nodes)
        v.accumulate_grad(grad_v)

    return _make(out_data, (v,), bwd, "neighbor_weighted_sum")


class OptGatLayer:
    """One graph-attention layer: K attention heads averaged, concatenated
    with the gamma-weighted neighbor sum, projected 2D -> D.

    `plain_aggregation` swaps attention for a uniform neighbor mean (the
    GCN-style ablation) while keeping the same parameter shapes.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, n_heads: int,
                 plain_aggregation: bool = False):
        scale = 1.0 / math.sqrt(d_in)
        self.n_heads = n_heads
        self.plain_aggregation = plain_aggregation
        self.w_heads = [Tensor(rng.normal(0.0, scale, (d_in, d_out)), requires_grad=True)
                        for _ in range(n_heads)]
        self.w_l = Tensor(rng.normal(0.0, scale, (d_in, d_out)), requires_grad=True)
        self.out_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(2 * d_out), (2 * d_out, d_out)),
                               requires_grad=True)

    @property
    def w(self) -> Tensor:
        """Shared attention transform; identical to the single head when K=1."""
        return self.w_heads[0]

    def named_parameters(self, prefix: str = "gat") -> dict[str, Tensor]:
        out = {f"{prefix}.w_head{k}": w for k, w in enumerate(self.w_heads)}
        out[f"{prefix}.w_l"] = self.w_l
        out[f"{prefix}.out_proj"] = self.out_proj
        return out

    def __call__(self, graph: ATAGraph, h: Tensor) -> Tensor:
        if h.shape[0] != graph.n_nodes:
            raise DimensionError(
                f"feature rows {h.shape[0]} != graph nodes {graph.n_nodes}")
        if self.plain_aggregation:
            deg = np.diff(graph.indptr).astype(np.float64)
            centers = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
            uniform = 1.0 / deg[centers]
        term1 = None
        for w_k in self.w_heads:
            u = matmul(h, w_k)
            head = (neighbor_weighted_sum(u, graph, uniform)
                    if self.plain_aggregation else edge_attention(u, graph))
            term1 = head if term1 is None else term1 + head
        term1 = term1 * (1.0 / self.n_heads)
        term2 = neighbor_weighted_sum(matmul(h, self.w_l), graph, graph.gamma)
        return matmul(concat([term1, term2], axis=1), self.out_proj)


class OptGatStack:
    """`n_layers` attention layers applied in sequence (D -> D each)."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int,
                 n_layers: int = 1, plain_aggregation: bool = False):
        self.layers = [OptGatLayer(rng, d_model, d_model, n_heads, plain_aggregation)
                       for _ in range(n_layers)]

    def named_parameters(self, prefix: str = "gat") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out

    def __call__(self, graph: ATAGraph, h: Tensor) -> Tensor:
        for layer in self.layers:
            h = layer(graph, h)
        return h
