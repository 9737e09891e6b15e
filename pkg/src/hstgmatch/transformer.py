"""Transformer encoder/decoder blocks on the gradient tape.

Pre-norm residual blocks; additive attention masks use a large negative
constant (not -inf) so the fail-fast finite checks stay meaningful.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, concat, layernorm, matmul, relu, reshape, softmax, transpose

NEG_MASK = -1e30


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.w = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class LayerNorm:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MultiHeadAttention:
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if d_model % n_heads != 0:
            raise DimensionError(f"n_heads {n_heads} must divide d_model {d_model}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.named_parameters(f"{prefix}.{name}"))
        return out

    def _split(self, x: Tensor, b: int, length: int) -> Tensor:
        # [B, L, D] -> [B, K, L, hd]
        return transpose(reshape(x, (b, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None,
                 return_attn: bool = False):
        b, lq, d = x_q.shape
        lk = x_kv.shape[1]
        q = self._split(self.wq(x_q), b, lq)
        k = self._split(self.wk(x_kv), b, lk)
        v = self._split(self.wv(x_kv), b, lk)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = add(scores, mask)
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)  # [B, K, Lq, hd]
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
        out = self.wo(merged)
        return (out, attn) if return_attn else out


class FeedForward:
    def __init__(self, rng: np.random.Generator, d_model: int, d_hidden: int):
        self.l1 = Linear(rng, d_model, d_hidden)
        self.l2 = Linear(rng, d_hidden, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(relu(self.l1(x)))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.l1.named_parameters(f"{prefix}.l1"),
                **self.l2.named_parameters(f"{prefix}.l2")}


class EncoderLayer:
    def __init__(self, rng, d_model: int, n_heads: int, d_hidden: int):
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ffn = FeedForward(rng, d_model, d_hidden)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.attn.named_parameters(f"{prefix}.attn"),
                **self.ffn.named_parameters(f"{prefix}.ffn"),
                **self.ln1.named_parameters(f"{prefix}.ln1"),
                **self.ln2.named_parameters(f"{prefix}.ln2")}


class DecoderLayer:
    def __init__(self, rng, d_model: int, n_heads: int, d_hidden: int):
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ffn = FeedForward(rng, d_model, d_hidden)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)
        self.ln3 = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor,
                 self_mask: np.ndarray | None, cross_mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.ln2(x), memory, cross_mask)
        return x + self.ffn(self.ln3(x))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.self_attn.named_parameters(f"{prefix}.self_attn"),
                **self.cross_attn.named_parameters(f"{prefix}.cross_attn"),
                **self.ffn.named_parameters(f"{prefix}.ffn"),
                **self.ln1.named_parameters(f"{prefix}.ln1"),
                **self.ln2.named_parameters(f"{prefix}.ln2"),
                **self.ln3.named_parameters(f"{prefix}.ln3")}


class Encoder:
    def __init__(self, rng, d_model: int, n_heads: int, n_layers: int, d_hidden: int):
        self.layers = [EncoderLayer(rng, d_model, n_heads, d_hidden) for _ in range(n_layers)]
        self.ln_final = LayerNorm(d_model)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_final(x)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        out.update(self.ln_final.named_parameters(f"{prefix}.ln_final"))
        return out


class Decoder:
    def __init__(self, rng, d_model: int, n_heads: int, n_layers: int, d_hidden: int):
        self.layers = [DecoderLayer(rng, d_model, n_heads, d_hidden) for _ in range(n_layers)]
        self.ln_final = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor,
                 self_mask: np.ndarray | None = None,
                 cross_mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask)
        return self.ln_final(x)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        out.update(self.ln_final.named_parameters(f"{prefix}.ln_final"))
        return out


@lru_cache(maxsize=32)
def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    """Standard sin/cos position table, cached per (length, width)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(d_model // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def padding_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """[B, 1, 1, L] additive mask blocking padded key positions."""
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, NEG_MASK)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    """[1, 1, L, L] additive mask blocking future key positions."""
    m = np.triu(np.full((length, length), NEG_MASK), k=1)
    return m[None, None, :, :]
