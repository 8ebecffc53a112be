"""Transformer building blocks on top of :mod:`seqdensity.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container, in the style of torch.nn."""

    training = False

    def named_parameters(self, prefix: str = "", _seen: set | None = None
                         ) -> Iterator[tuple[str, Tensor]]:
        # shared submodules (e.g. one embedding table) are listed once, first name wins
        seen = set() if _seen is None else _seen
        for name, value in _walk(vars(self).items(), prefix):
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            else:
                yield from value.named_parameters(name + ".", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in _walk(vars(self).items(), ""):
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(items, prefix: str):
    """Yield (dotted name, Tensor | Module) pairs, descending into (nested) lists."""
    for name, value in items:
        full = f"{prefix}{name}"
        if isinstance(value, (Tensor, Module)):
            yield full, value
        elif isinstance(value, (list, tuple)):
            yield from _walk(((str(i), v) for i, v in enumerate(value)), full + ".")


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(glorot(rng, d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class WeightNormLinear(Module):
    """Linear layer with weight = direction * (scale / ||direction||) per output unit."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init_scale: float = 0.1):
        self.direction = param(rng.normal(0.0, 0.05, size=(d_in, d_out)))
        self.scale = param(np.full(d_out, init_scale))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        norm = T.sqrt((self.direction * self.direction).sum(axis=0))
        w = self.direction * (self.scale / norm)
        return x @ w + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator):
        self.table = param(rng.normal(0.0, d ** -0.5, size=(vocab, d)))
        self.d = d

    def __call__(self, ids) -> Tensor:
        return T.embed(self.table, ids) * math.sqrt(self.d)


def sinusoid_positions(length: int, d: int) -> np.ndarray:
    """Sinusoidal position table of shape (length, d)."""
    pos = np.arange(length)[:, None]
    half = d // 2
    inv = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = pos * inv[None, :]
    table = np.zeros((length, d))
    table[:, :half] = np.sin(ang)
    table[:, half:2 * half] = np.cos(ang)
    return table


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor, key_pad: np.ndarray | None = None,
                 causal: bool = False) -> Tensor:
        b, t, d = x.shape
        s = memory.shape[1]
        q = self._split(self.q(x))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        blocked = None
        if key_pad is not None:
            blocked = key_pad[:, None, None, :]
        if causal:
            future = np.triu(np.ones((t, s), dtype=bool), k=1)[None, None]
            blocked = future if blocked is None else (blocked | future)
        if blocked is not None:
            scores = T.masked_fill(scores, np.broadcast_to(blocked, scores.shape))
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d_model: int, d_filter: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_filter, rng)
        self.outer = Linear(d_filter, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class TransformerLayer(Module):
    """Pre-norm Transformer layer: self-attention, optional cross-attention, FFN."""

    def __init__(self, d_model: int, heads: int, d_filter: int, rng: np.random.Generator,
                 cross: bool = False, dropout: float = 0.0):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        if cross:
            self.norm_cross = LayerNorm(d_model)
            self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        else:
            self.norm_cross = self.cross_attn = None
        self.norm_ffn = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_filter, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, self_pad=None, memory: Tensor | None = None, memory_pad=None,
                 causal: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        def drop(h):
            return T.dropout(h, self.dropout, rng, self.training)

        h = self.norm_self(x)
        x = x + drop(self.self_attn(h, h, self_pad, causal))
        if self.cross_attn is not None:
            x = x + drop(self.cross_attn(self.norm_cross(x), memory, memory_pad))
        return x + drop(self.ffn(self.norm_ffn(x)))


class Stack(Module):
    """A run of Transformer layers closed by a layer norm (omitted when empty)."""

    def __init__(self, n_layers: int, d_model: int, heads: int, d_filter: int,
                 rng: np.random.Generator, cross: bool, dropout: float):
        self.layers = [TransformerLayer(d_model, heads, d_filter, rng, cross, dropout)
                       for _ in range(n_layers)]
        self.norm = LayerNorm(d_model) if n_layers else None

    def __call__(self, x: Tensor, self_pad=None, memory=None, memory_pad=None,
                 causal=False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, self_pad, memory, memory_pad, causal, rng)
        return self.norm(x) if self.norm is not None else x
