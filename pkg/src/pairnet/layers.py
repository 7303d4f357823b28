"""Parameterised building blocks on top of :mod:`pairnet.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor that also carries AdamW moment state."""

    __slots__ = ("exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Module:
    """Container that discovers Parameters and sub-Modules by attribute."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} "
                           f"unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint extent {value.shape} != {p.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def embedding_init(rng, shape):
    return rng.standard_normal(shape)


class Linear(Module):
    def __init__(self, rng, in_features, out_features):
        self.weight = Parameter(uniform_fan_in(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of Linear layers with ReLU between (not after) them."""

    def __init__(self, rng, sizes):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size):
        if kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel_size}")
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(uniform_fan_in(rng, shape, in_channels * kernel_size ** 2))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, eps=self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention split across ``heads``.

    Positional encodings, when given, are added to the query/key/value
    inputs before their projections.  The last call's per-head weights are
    kept on ``self.last_weights`` with extent (heads, L_q, L_kv).
    """

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ShapeError(f"model width {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)
        self.last_weights = None

    def _split(self, x):
        n = x.shape[0]
        return T.transpose(x.reshape(n, self.heads, self.dim // self.heads), (1, 0, 2))

    def forward(self, queries, keys, values, q_pos=None, k_pos=None, v_pos=None):
        if q_pos is not None:
            queries = queries + q_pos
        if k_pos is not None:
            keys = keys + k_pos
        if v_pos is not None:
            values = values + v_pos
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(values))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * scale
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data.copy()
        attended = T.matmul(weights, v)  # (heads, L_q, dh)
        merged = T.transpose(attended, (1, 0, 2)).reshape(queries.shape[0], self.dim)
        return self.out_proj(merged), weights
