"""Transformer building blocks shared by the query encoder, the fusion
stack, the rank re-encoder, and the answer decoder.

Attention masks are additive arrays: 0 for visible positions, MASKED for
blocked ones. MASKED is large enough that exp() underflows to exactly 0 in
double precision, so blocked keys contribute nothing, bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .optim import Parameter, Rng
from .tensor import Tensor, concat, layer_norm, matmul, softmax

MASKED = -1e30


def init_param(name: str, shape, rng: Rng, std: float = 0.02,
               frozen: bool = False) -> Parameter:
    return Parameter(name, rng.normal(shape, std=std), frozen=frozen)


def ones_param(name: str, n: int) -> Parameter:
    return Parameter(name, np.ones(n))


def zeros_param(name: str, n: int) -> Parameter:
    return Parameter(name, np.zeros(n))


def linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    out = matmul(x, w.tensor)
    if b is not None:
        out = out + b.tensor
    return out


def attention(x_q: Tensor, x_kv: Tensor, wq: Parameter, wk: Parameter,
              wv: Parameter, wo: Parameter, n_heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention. x_q (Lq, D), x_kv (Lk, D) -> (Lq, D).

    Heads run as one stacked (H, ., .) matmul chain. ``mask`` is an
    additive (Lq, Lk) array applied to every head's scores.
    """
    lq, d = x_q.shape
    lk = x_kv.shape[0]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    q = matmul(x_q, wq.tensor).reshape(lq, n_heads, dh).transpose(1, 0, 2)
    k = matmul(x_kv, wk.tensor).reshape(lk, n_heads, dh).transpose(1, 2, 0)
    v = matmul(x_kv, wv.tensor).reshape(lk, n_heads, dh).transpose(1, 0, 2)
    scores = matmul(q, k) * scale                      # (H, Lq, Lk)
    if mask is not None:
        scores = scores + Tensor(mask)
    ctx = matmul(softmax(scores, axis=-1), v)          # (H, Lq, dh)
    ctx = ctx.transpose(1, 0, 2).reshape(lq, d)
    return matmul(ctx, wo.tensor)


class TransformerLayer:
    """Pre-norm block: self-attention, optional cross-attention (applied to
    a leading prefix of rows only when ``cross_rows`` is given), then FFN."""

    def __init__(self, prefix: str, d: int, n_heads: int, rng: Rng,
                 with_cross: bool = False, ffn_mult: int = 4):
        self.n_heads = n_heads
        self.with_cross = with_cross
        p = prefix
        self.wq = init_param(f"{p}.wq", (d, d), rng)
        self.wk = init_param(f"{p}.wk", (d, d), rng)
        self.wv = init_param(f"{p}.wv", (d, d), rng)
        self.wo = init_param(f"{p}.wo", (d, d), rng)
        self.ln1_g = ones_param(f"{p}.ln1.g", d)
        self.ln1_b = zeros_param(f"{p}.ln1.b", d)
        if with_cross:
            self.cq = init_param(f"{p}.cq", (d, d), rng)
            self.ck = init_param(f"{p}.ck", (d, d), rng)
            self.cv = init_param(f"{p}.cv", (d, d), rng)
            self.co = init_param(f"{p}.co", (d, d), rng)
            self.lnc_g = ones_param(f"{p}.lnc.g", d)
            self.lnc_b = zeros_param(f"{p}.lnc.b", d)
        self.w1 = init_param(f"{p}.ffn.w1", (d, ffn_mult * d), rng)
        self.b1 = zeros_param(f"{p}.ffn.b1", ffn_mult * d)
        self.w2 = init_param(f"{p}.ffn.w2", (ffn_mult * d, d), rng)
        self.b2 = zeros_param(f"{p}.ffn.b2", d)
        self.ln2_g = ones_param(f"{p}.ln2.g", d)
        self.ln2_b = zeros_param(f"{p}.ln2.b", d)

    def params(self) -> list[Parameter]:
        out = [self.wq, self.wk, self.wv, self.wo, self.ln1_g, self.ln1_b]
        if self.with_cross:
            out += [self.cq, self.ck, self.cv, self.co, self.lnc_g, self.lnc_b]
        out += [self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b]
        return out

    def forward(self, x: Tensor, self_mask: np.ndarray | None = None,
                cross_kv: Tensor | None = None,
                cross_rows: int | None = None) -> Tensor:
        h = layer_norm(x, self.ln1_g.tensor, self.ln1_b.tensor)
        x = x + attention(h, h, self.wq, self.wk, self.wv, self.wo,
                          self.n_heads, mask=self_mask)
        if self.with_cross and cross_kv is not None:
            n = x.shape[0] if cross_rows is None else cross_rows
            xq = x[:n]
            h = layer_norm(xq, self.lnc_g.tensor, self.lnc_b.tensor)
            attended = attention(h, cross_kv, self.cq, self.ck, self.cv,
                                 self.co, self.n_heads)
            xq = xq + attended
            x = xq if n == x.shape[0] else concat([xq, x[n:]], axis=0)
        h = layer_norm(x, self.ln2_g.tensor, self.ln2_b.tensor)
        h = linear(h, self.w1, self.b1).gelu()
        return x + linear(h, self.w2, self.b2)


class FinalNorm:
    def __init__(self, prefix: str, d: int):
        self.g = ones_param(f"{prefix}.lnf.g", d)
        self.b = zeros_param(f"{prefix}.lnf.b", d)

    def params(self) -> list[Parameter]:
        return [self.g, self.b]

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g.tensor, self.b.tensor)


# -- mask builders ------------------------------------------------------------


def pad_mask(valid: np.ndarray) -> np.ndarray:
    """Keys at invalid positions are blocked for every query row."""
    l = valid.shape[0]
    m = np.zeros((l, l))
    m[:, ~valid] = MASKED
    return m


def causal_mask(length: int) -> np.ndarray:
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = MASKED
    return m


def prefix_causal_mask(n_prefix: int, n_suffix: int) -> np.ndarray:
    """Prefix rows see only prefix columns; suffix row t sees the whole
    prefix plus suffix columns <= t."""
    total = n_prefix + n_suffix
    m = np.full((total, total), MASKED)
    m[:n_prefix, :n_prefix] = 0.0
    m[n_prefix:, :n_prefix] = 0.0
    for t in range(n_suffix):
        m[n_prefix + t, n_prefix:n_prefix + t + 1] = 0.0
    return m


def key_pad_mask(n_query: int, valid_keys: np.ndarray) -> np.ndarray:
    m = np.zeros((n_query, valid_keys.shape[0]))
    m[:, ~valid_keys] = MASKED
    return m
