"""Hot numeric kernels: numba-jitted inner loops with a pure-numpy fallback.

The active backend is chosen once at import time. Setting HSTG_NUMBA=0
(or numba being unavailable) selects the numpy path; anything else uses
@njit kernels. Both backends compute identical values — tests and
benchmarks/bench_kernels.py compare them directly.

Graphs arrive in CSR form: `indptr` [N+1] and `nbr` [E], edges sorted by
their center node, so edges of node i live in indptr[i]:indptr[i+1].
"""

from __future__ import annotations

import os

import numpy as np


def numba_requested() -> bool:
    return os.environ.get("HSTG_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _centers_from_indptr(indptr: np.ndarray) -> np.ndarray:
    counts = np.diff(indptr)
    return np.repeat(np.arange(indptr.shape[0] - 1), counts)


def _edge_attention_forward_np(u, indptr, nbr, inv_sqrt_d):
    n = indptr.shape[0] - 1
    ctr = _centers_from_indptr(indptr)
    scores = (u[ctr] * u[nbr]).sum(axis=1) * inv_sqrt_d
    seg_max = np.maximum.reduceat(scores, indptr[:-1])
    e = np.exp(scores - seg_max[ctr])
    denom = np.add.reduceat(e, indptr[:-1])
    alpha = e / denom[ctr]
    out = np.zeros_like(u)
    np.add.at(out, ctr, alpha[:, None] * u[nbr])
    return out, alpha


def _edge_attention_backward_np(u, indptr, nbr, alpha, grad_out, inv_sqrt_d):
    ctr = _centers_from_indptr(indptr)
    grad_u = np.zeros_like(u)
    # value path: out_i += alpha_e * u[nbr_e]
    np.add.at(grad_u, nbr, alpha[:, None] * grad_out[ctr])
    # score path through the per-segment softmax
    dalpha = (grad_out[ctr] * u[nbr]).sum(axis=1)
    seg_dot = np.add.reduceat(alpha * dalpha, indptr[:-1])
    dscore = alpha * (dalpha - seg_dot[ctr]) * inv_sqrt_d
    np.add.at(grad_u, ctr, dscore[:, None] * u[nbr])
    np.add.at(grad_u, nbr, dscore[:, None] * u[ctr])
    return grad_u


def _scatter_weighted_np(values, src, dst, weights, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    np.add.at(out, dst, weights[:, None] * values[src])
    return out


def _nearest_segments_np(px, py, seg_xyxy):
    # chunked over points to bound the S x chunk distance matrix
    x1, y1, x2, y2 = (seg_xyxy[:, k] for k in range(4))
    dx, dy = x2 - x1, y2 - y1
    seg_len2 = dx * dx + dy * dy
    seg_len2 = np.where(seg_len2 == 0.0, 1.0, seg_len2)
    best_idx = np.empty(px.shape[0], dtype=np.int64)
    best_dist = np.empty(px.shape[0], dtype=np.float64)
    chunk = max(1, int(2_000_000 / max(1, seg_xyxy.shape[0])))
    for lo in range(0, px.shape[0], chunk):
        hi = min(lo + chunk, px.shape[0])
        rx = px[lo:hi, None] - x1[None, :]
        ry = py[lo:hi, None] - y1[None, :]
        t = np.clip((rx * dx[None, :] + ry * dy[None, :]) / seg_len2[None, :], 0.0, 1.0)
        ex = rx - t * dx[None, :]
        ey = ry - t * dy[None, :]
        d2 = ex * ex + ey * ey
        idx = d2.argmin(axis=1)
        best_idx[lo:hi] = idx
        best_dist[lo:hi] = np.sqrt(d2[np.arange(hi - lo), idx])
    return best_idx, best_dist


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_HAS_NUMBA = False
if numba_requested():
    try:
        from numba import njit

        @njit(cache=True)
        def _edge_attention_forward_nb(u, indptr, nbr, inv_sqrt_d):  # pragma: no cover
            n, d = u.shape
            e_total = nbr.shape[0]
            alpha = np.empty(e_total, dtype=np.float64)
            out = np.zeros((n, d), dtype=np.float64)
            for i in range(n):
                lo, hi = indptr[i], indptr[i + 1]
                if hi == lo:
                    continue
                m = -1e300
                for e in range(lo, hi):
                    s = 0.0
                    j = nbr[e]
                    for k in range(d):
                        s += u[i, k] * u[j, k]
                    s *= inv_sqrt_d
                    alpha[e] = s
                    if s > m:
                        m = s
                denom = 0.0
                for e in range(lo, hi):
                    v = np.exp(alpha[e] - m)
                    alpha[e] = v
                    denom += v
                for e in range(lo, hi):
                    alpha[e] /= denom
                    j = nbr[e]
                    a = alpha[e]
                    for k in range(d):
                        out[i, k] += a * u[j, k]
            return out, alpha

        @njit(cache=True)
        def _edge_attention_backward_nb(u, indptr, nbr, alpha, grad_out, inv_sqrt_d):  # pragma: no cover
            n, d = u.shape
            grad_u = np.zeros((n, d), dtype=np.float64)
            for i in range(n):
                lo, hi = indptr[i], indptr[i + 1]
                if hi == lo:
                    continue
                seg_dot = 0.0
                for e in range(lo, hi):
                    j = nbr[e]
                    da = 0.0
                    for k in range(d):
                        da += grad_out[i, k] * u[j, k]
                        grad_u[j, k] += alpha[e] * grad_out[i, k]
                    seg_dot += alpha[e] * da
                for e in range(lo, hi):
                    j = nbr[e]
                    da = 0.0
                    for k in range(d):
                        da += grad_out[i, k] * u[j, k]
                    ds = alpha[e] * (da - seg_dot) * inv_sqrt_d
                    for k in range(d):
                        grad_u[i, k] += ds * u[j, k]
                        grad_u[j, k] += ds * u[i, k]
            return grad_u

        @njit(cache=True)
        def _scatter_weighted_nb(values, src, dst, weights, n_out):  # pragma: no cover
            d = values.shape[1]
            out = np.zeros((n_out, d), dtype=np.float64)
            for e in range(src.shape[0]):
                s, t, w = src[e], dst[e], weights[e]
                for k in range(d):
                    out[t, k] += w * values[s, k]
            return out

        @njit(cache=True)
        def _nearest_segments_nb(px, py, seg_xyxy):  # pragma: no cover
            m = px.shape[0]
            s = seg_xyxy.shape[0]
            best_idx = np.empty(m, dtype=np.int64)
            best_dist = np.empty(m, dtype=np.float64)
            for p in range(m):
                bd = 1e300
                bi = -1
                for q in range(s):
                    x1, y1, x2, y2 = seg_xyxy[q, 0], seg_xyxy[q, 1], seg_xyxy[q, 2], seg_xyxy[q, 3]
                    dx, dy = x2 - x1, y2 - y1
                    ln2 = dx * dx + dy * dy
                    if ln2 == 0.0:
                        ln2 = 1.0
                    t = ((px[p] - x1) * dx + (py[p] - y1) * dy) / ln2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    ex = px[p] - x1 - t * dx
                    ey = py[p] - y1 - t * dy
                    d2 = ex * ex + ey * ey
                    if d2 < bd:
                        bd = d2
                        bi = q
                best_idx[p] = bi
                best_dist[p] = np.sqrt(bd)
            return best_idx, best_dist

        _HAS_NUMBA = True
    except ImportError:  # pragma: no cover
        _HAS_NUMBA = False


def backend() -> str:
    return "numba" if _HAS_NUMBA else "numpy"


if _HAS_NUMBA:
    edge_attention_forward = _edge_attention_forward_nb
    edge_attention_backward = _edge_attention_backward_nb
    scatter_weighted = _scatter_weighted_nb
    nearest_segments = _nearest_segments_nb
else:
    edge_attention_forward = _edge_attention_forward_np
    edge_attention_backward = _edge_attention_backward_np
    scatter_weighted = _scatter_weighted_np
    nearest_segments = _nearest_segments_np

# always-available references, used by tests and the benchmark
numpy_impls = {
    "edge_attention_forward": _edge_attention_forward_np,
    "edge_attention_backward": _edge_attention_backward_np,
    "scatter_weighted": _scatter_weighted_np,
    "nearest_segments": _nearest_segments_np,
}
active_impls = {
    "edge_attention_forward": edge_attention_forward,
    "edge_attention_backward": edge_attention_backward,
    "scatter_weighted": scatter_weighted,
    "nearest_segments": nearest_segments,
}
