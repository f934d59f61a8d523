"""Parameter containers and the layers the model is assembled from."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    conv_transpose2d,
    get_default_dtype,
    layer_norm,
    softmax,
    where,
)


class ConfigError(ValueError):
    """Raised for inconsistent hyper-parameters."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
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

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def to(self, dtype) -> "Module":
        """Cast every parameter (and float buffer) to ``dtype`` in place."""
        for m in self.modules():
            for key, value in vars(m).items():
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
                    setattr(m, key, value.astype(dtype))
        return self


def _fan_in_init(rng, shape, fan_in):
    # fan-in scaled so stacked layers keep unit-order activations at narrow widths
    return trunc_normal(rng, shape, std=1.0 / math.sqrt(fan_in))


def _bias_init(rng, n, fan_in):
    # non-zero so a constant input (e.g. an empty mask) still varies across channels
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, n)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        dt = get_default_dtype()
        self.weight = Parameter(_fan_in_init(rng, (d_in, d_out), d_in).astype(dt))
        self.bias = Parameter(np.zeros(d_out, dtype=dt)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        dt = get_default_dtype()
        self.gain = Parameter(np.ones(dim, dtype=dt))
        self.bias = Parameter(np.zeros(dim, dtype=dt))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class LayerNorm2d(LayerNorm):
    """Layer norm over the channel axis of a (..., C, H, W) map."""

    def forward(self, x: Tensor) -> Tensor:
        n = x.ndim
        to_last = tuple(range(n - 3)) + (n - 2, n - 1, n - 3)
        back = tuple(range(n - 3)) + (n - 1, n - 3, n - 2)
        return layer_norm(x.transpose(to_last), self.gain, self.bias, self.eps).transpose(back)


class MLP(Module):
    """Stack of linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.gelu()
        return x




class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        dt = get_default_dtype()
        self.weight = Parameter(_fan_in_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel).astype(dt))
        self.bias = Parameter(_bias_init(rng, c_out, c_in * kernel * kernel).astype(dt))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 2):
        dt = get_default_dtype()
        self.weight = Parameter(_fan_in_init(rng, (c_in, c_out, kernel, kernel), c_in).astype(dt))
        self.bias = Parameter(_bias_init(rng, c_out, c_in).astype(dt))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int = 8
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_heads <= 0:
            raise ConfigError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    nd = len(lead)
    x = x.reshape(*lead, n, heads, d // heads)
    return x.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = x.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return x.reshape(*lead, n, h * dh)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned input and output projections.

    ``mask`` may be given per key (``[..., Lk]``) or per query/key pair
    (``[..., Lq, Lk]``); ``False`` entries are excluded.  A query row with no
    admissible key yields a zero output vector.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if q.shape[-1] != self.cfg.embed_dim or k.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"attention: expected width {self.cfg.embed_dim}, got {q.shape} and {k.shape}")
        h = self.cfg.num_heads
        qh = _split_heads(self.q_proj(q), h)
        kh = _split_heads(self.k_proj(k), h)
        vh = _split_heads(self.v_proj(v), h)
        scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.cfg.head_dim))
        row_ok = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == k.ndim - 1:  # per-key mask [..., Lk]
                mask = mask[..., None, :]
            row_ok = mask.any(axis=-1)  # [..., Lq] or [..., 1]
            mask = np.expand_dims(mask, -3)  # broadcast over heads
        attn = softmax(scores, axis=-1, mask=mask)
        out = self.out_proj(_merge_heads(attn @ vh))
        if row_ok is not None and not row_ok.all():
            out = where(row_ok[..., None], out, 0.0)
        return out
