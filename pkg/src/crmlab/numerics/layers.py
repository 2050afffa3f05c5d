"""Dense layers, layer norm, embedding tables and L2 normalisation.

Every layer has an explicit forward and a hand-written backward. Forward
functions take an optional ``cache`` list; when given, whatever the backward
pass needs is appended to it. Backward functions accumulate parameter
gradients into ``Param.grad`` and return the gradient w.r.t. the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crmlab.errors import ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass(eq=False)
class Param:
    """A named trainable tensor together with its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(
                f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def _init_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(eq=False)
class Dense:
    weight: Param  # (in_dim, out_dim)
    bias: Param  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[1]

    @classmethod
    def init(cls, name, in_dim, out_dim, activation, rng, dtype=np.float32):
        # He-uniform for relu, Glorot-ish otherwise.
        fan = in_dim / 2 if activation == "relu" else (in_dim + out_dim) / 2
        w = _init_uniform(rng, (in_dim, out_dim), fan, dtype)
        return cls(Param(f"{name}.weight", w), Param(f"{name}.bias", np.zeros(out_dim, dtype)), activation)

    @classmethod
    def from_arrays(cls, weight, bias, activation="identity", name="dense"):
        weight = np.asarray(weight)
        bias = np.asarray(bias, dtype=weight.dtype)
        return cls(Param(f"{name}.weight", weight), Param(f"{name}.bias", bias), activation)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def mlp_forward(x: np.ndarray, layers, cache: list | None = None) -> np.ndarray:
    """Apply a chain of dense layers to the last axis of ``x``."""
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.in_dim:
            raise ShapeError(
                f"layer {i} ({layer.weight.name}) expects input dim {layer.in_dim}, got {h.shape[-1]}"
            )
        if layer.bias.value.shape != (layer.out_dim,):
            raise ShapeError(f"layer {i} ({layer.bias.name}) bias shape {layer.bias.value.shape}")
        pre = h @ layer.weight.value + layer.bias.value
        out = np.maximum(pre, 0) if layer.activation == "relu" else pre
        if cache is not None:
            cache.append((h, pre))
        h = out
    return h


def mlp_backward(grad_out: np.ndarray, layers, cache: list) -> np.ndarray:
    g = grad_out
    for layer, (h_in, pre) in zip(reversed(layers), reversed(cache)):
        if layer.activation == "relu":
            g = g * (pre > 0)
        g2 = g.reshape(-1, layer.out_dim)
        layer.weight.grad += h_in.reshape(-1, layer.in_dim).T @ g2
        layer.bias.grad += g2.sum(axis=0)
        g = g @ layer.weight.value.T
    return g


def mlp_params(layers) -> list[Param]:
    return [p for layer in layers for p in layer.params()]


@dataclass(eq=False)
class LayerNorm:
    gamma: Param
    beta: Param
    eps: float = 1e-5

    @classmethod
    def init(cls, name, dim, dtype=np.float32):
        return cls(Param(f"{name}.gamma", np.ones(dim, dtype)), Param(f"{name}.beta", np.zeros(dim, dtype)))

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]


def layer_norm_forward(x, ln: LayerNorm, cache: list | None = None):
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + ln.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv
    if cache is not None:
        cache.append((xhat, inv))
    return xhat * ln.gamma.value + ln.beta.value


def layer_norm_backward(dy, ln: LayerNorm, cache: list):
    xhat, inv = cache.pop()
    d = xhat.shape[-1]
    ln.gamma.grad += (dy * xhat).reshape(-1, d).sum(axis=0)
    ln.beta.grad += dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * ln.gamma.value
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


@dataclass(eq=False)
class Embedding:
    """Lookup table with scatter-add backward. Row ``pad_index`` is never a valid lookup
    unless ``allow_pad`` is passed."""

    table: Param
    pad_index: int | None = None

    @property
    def vocab_size(self) -> int:
        return self.table.value.shape[0]

    @property
    def dim(self) -> int:
        return self.table.value.shape[1]

    @classmethod
    def init(cls, name, vocab_size, dim, rng, scale=0.1, pad_index=None, dtype=np.float32):
        if dim <= 0 or vocab_size <= 0:
            raise ShapeError(f"{name}: vocab_size and dim must be positive")
        w = (rng.standard_normal((vocab_size, dim)) * scale).astype(dtype)
        if pad_index is not None:
            w[pad_index] = 0
        return cls(Param(name, w), pad_index)

    def lookup(self, ids, allow_pad=False) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"{self.table.name}: id out of range [0, {self.vocab_size})")
        if not allow_pad and self.pad_index is not None and np.any(ids == self.pad_index):
            raise IndexError(f"{self.table.name}: pad id {self.pad_index} looked up")
        return self.table.value[ids]

    def backward(self, ids, grad):
        ids = np.asarray(ids).reshape(-1)
        np.add.at(self.table.grad, ids, grad.reshape(ids.size, self.dim))
        if self.pad_index is not None:
            self.table.grad[self.pad_index] = 0

    def params(self) -> list[Param]:
        return [self.table]


def l2_normalize(x, eps=1e-12):
    norm = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1, keepdims=True)).astype(x.dtype)
    norm = np.maximum(norm, eps)
    return x / norm, norm


def l2_normalize_backward(dy, y, norm):
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


@dataclass(eq=False)
class ParamSet:
    """Ordered name -> Param mapping shared by the model classes."""

    items: dict = field(default_factory=dict)

    def add(self, *params: Param):
        for p in params:
            if p.name in self.items:
                raise ValueError(f"duplicate parameter name {p.name}")
            self.items[p.name] = p

    def __iter__(self):
        return iter(self.items.values())

    def __len__(self):
        return len(self.items)

    def __getitem__(self, name):
        return self.items[name]

    def zero_grad(self):
        for p in self.items.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.items.items()}

    def load_state(self, tensors: dict[str, np.ndarray]):
        missing = [n for n in self.items if n not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, p in self.items.items():
            arr = tensors[name]
            if arr.size != p.value.size:
                raise ShapeError(f"{name}: checkpoint size {arr.size} != {p.value.size}")
            p.value[...] = arr.reshape(p.value.shape)
