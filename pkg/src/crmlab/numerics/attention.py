"""Multi-head causal self-attention and pre-norm transformer blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crmlab.errors import ConfigError, ShapeError
from crmlab.numerics.layers import (
    Dense,
    LayerNorm,
    Param,
    layer_norm_backward,
    layer_norm_forward,
    mlp_backward,
    mlp_forward,
)


@dataclass(eq=False)
class CausalSelfAttention:
    wq: Param
    wk: Param
    wv: Param
    wo: Param
    n_heads: int

    def __post_init__(self):
        d = self.wq.value.shape[0]
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"model dim {d} not divisible by n_heads={self.n_heads}")

    @property
    def dim(self) -> int:
        return self.wq.value.shape[0]

    @classmethod
    def init(cls, name, dim, n_heads, rng, dtype=np.float32):
        if n_heads < 1 or dim % n_heads:
            raise ConfigError(f"model dim {dim} not divisible by n_heads={n_heads}")
        scale = 1.0 / np.sqrt(dim)

        def w(tag):
            return Param(f"{name}.{tag}", (rng.standard_normal((dim, dim)) * scale).astype(dtype))

        return cls(w("wq"), w("wk"), w("wv"), w("wo"), n_heads)

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_mask(t: int, key_mask=None) -> np.ndarray:
    """Boolean (B|1, 1, T, T) mask: query i may see key j iff j <= i and key j is real.

    The diagonal is always open so rows of padding tokens stay finite.
    """
    causal = np.tril(np.ones((t, t), dtype=bool))
    if key_mask is None:
        return causal[None, None]
    km = np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return (causal[None, None] & km) | np.eye(t, dtype=bool)[None, None]


def masked_softmax(scores, mask):
    """Softmax over the last axis with masked entries at exactly zero probability."""
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(scores.dtype)


def causal_attention_forward(x, attn: CausalSelfAttention, key_mask=None, cache: list | None = None,
                             last_only: bool = False):
    """Causal multi-head self-attention over ``x`` of shape (T, d) or (B, T, d).

    With ``last_only`` only the final query row is computed and the output has
    a time axis of length 1.
    """
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != attn.dim:
        raise ShapeError(f"attention expects (..., T, {attn.dim}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("attention needs at least one token")
    h = attn.n_heads
    dh = attn.dim // h
    xq = x[:, -1:] if last_only else x
    q = _split_heads(xq @ attn.wq.value, h)
    k = _split_heads(x @ attn.wk.value, h)
    v = _split_heads(x @ attn.wv.value, h)
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=x.dtype)
    mask = attention_mask(x.shape[1], key_mask)
    if last_only:
        mask = mask[..., -1:, :]
    p = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, mask)
    o = _merge_heads(p @ v)
    y = o @ attn.wo.value
    if cache is not None:
        cache.append((x, q, k, v, p, o, scale, last_only))
    return y[0] if single else y


def causal_attention_backward(dy, attn: CausalSelfAttention, cache: list):
    x, q, k, v, p, o, scale, last_only = cache.pop()
    single = dy.ndim == 2
    if single:
        dy = dy[None]
    d = attn.dim
    h = attn.n_heads
    attn.wo.grad += o.reshape(-1, d).T @ dy.reshape(-1, d)
    do = _split_heads(dy @ attn.wo.value.T, h)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = _merge_heads(ds @ k)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    xq = x[:, -1:] if last_only else x
    x2 = x.reshape(-1, d)
    attn.wq.grad += xq.reshape(-1, d).T @ dq.reshape(-1, d)
    attn.wk.grad += x2.T @ dk.reshape(-1, d)
    attn.wv.grad += x2.T @ dv.reshape(-1, d)
    dx = dk @ attn.wk.value.T + dv @ attn.wv.value.T
    if last_only:
        dx[:, -1:] += dq @ attn.wq.value.T
    else:
        dx += dq @ attn.wq.value.T
    return dx[0] if single else dx


@dataclass(eq=False)
class TransformerBlock:
    """Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(.))."""

    ln1: LayerNorm
    attn: CausalSelfAttention
    ln2: LayerNorm
    mlp: list[Dense]

    @classmethod
    def init(cls, name, dim, n_heads, rng, mlp_ratio=4, dtype=np.float32):
        return cls(
            LayerNorm.init(f"{name}.ln1", dim, dtype),
            CausalSelfAttention.init(f"{name}.attn", dim, n_heads, rng, dtype),
            LayerNorm.init(f"{name}.ln2", dim, dtype),
            [
                Dense.init(f"{name}.mlp0", dim, mlp_ratio * dim, "relu", rng, dtype),
                Dense.init(f"{name}.mlp1", mlp_ratio * dim, dim, "identity", rng, dtype),
            ],
        )

    def params(self) -> list[Param]:
        out = self.ln1.params() + self.attn.params() + self.ln2.params()
        for layer in self.mlp:
            out += layer.params()
        return out


def block_forward(x, block: TransformerBlock, key_mask=None, cache: dict | None = None, last_only: bool = False):
    """Apply one block to (B, T, d). ``last_only`` returns just the final position, (B, 1, d)."""
    c = None if cache is None else {"ln1": [], "attn": [], "ln2": [], "mlp": [], "last_only": last_only}
    a = layer_norm_forward(x, block.ln1, None if c is None else c["ln1"])
    resid = x[:, -1:] if last_only else x
    att = causal_attention_forward(a, block.attn, key_mask, None if c is None else c["attn"], last_only=last_only)
    hid = resid + att
    m = layer_norm_forward(hid, block.ln2, None if c is None else c["ln2"])
    out = hid + mlp_forward(m, block.mlp, None if c is None else c["mlp"])
    if cache is not None:
        cache.update(c)
    return out


def block_backward(dy, block: TransformerBlock, cache: dict):
    dm = mlp_backward(dy, block.mlp, cache["mlp"])
    dhid = dy + layer_norm_backward(dm, block.ln2, cache["ln2"])
    da = causal_attention_backward(dhid, block.attn, cache["attn"])
    dx = layer_norm_backward(da, block.ln1, cache["ln1"])
    if cache["last_only"]:
        dx[:, -1:] += dhid
        return dx
    return dx + dhid
