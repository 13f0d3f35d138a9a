"""Building blocks shared by the diffusion UNet, the autoencoder and the classifier."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core import tensor as T
from core.params import ParamStore
from core.tensor import Tensor


@dataclass(frozen=True)
class Placement:
    """Where a layer lives inside its model; copied onto every parameter it registers."""

    group: str
    location: str = ""
    block: str = ""
    component: str = ""
    attn_index: Optional[int] = None

    def meta(self) -> dict:
        return {
            "group": self.group,
            "location": self.location,
            "block": self.block,
            "component": self.component,
            "attn_index": self.attn_index,
        }


def norm_groups(channels: int) -> int:
    return math.gcd(channels, 8)


@dataclass
class LoRAAdapter:
    """Low-rank update W + scale * B @ A on top of a frozen base weight."""

    a: Tensor
    b: Tensor
    rank: int
    scale: float

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, place: Placement, bias: bool = True):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.place = place
        self.weight = store.add(f"{name}.weight",
                                rng.standard_normal((d_out, d_in)) / math.sqrt(d_in),
                                **place.meta())
        self.bias = store.add(f"{name}.bias", np.zeros(d_out), **place.meta()) if bias else None
        self.adapter: Optional[LoRAAdapter] = None

    def effective_weight(self) -> Tensor:
        if self.adapter is None:
            return self.weight
        delta = T.scale(T.matmul(self.adapter.b, self.adapter.a), self.adapter.scale)
        return T.add(self.weight, delta)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        y = T.matmul(flat, T.transpose(self.effective_weight()))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return T.reshape(y, lead + (self.d_out,)) if x.ndim != 2 else y


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, place: Placement, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = store.add(f"{name}.weight",
                                rng.standard_normal((c_out, c_in, kernel, kernel)) / math.sqrt(fan_in),
                                **place.meta())
        self.bias = store.add(f"{name}.bias", np.zeros(c_out), **place.meta())

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def channel_broadcast(vec: Tensor, like: Tensor) -> Tensor:
    """(C,) or (B, C) -> the (B, C, H, W) shape of `like`."""
    if vec.ndim == 1:
        vec = T.reshape(vec, (1, vec.shape[0], 1, 1))
    else:
        vec = T.reshape(vec, vec.shape + (1, 1))
    return T.expand(vec, like.shape)


class GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, place: Placement):
        self.groups = norm_groups(channels)
        self.gamma = store.add(f"{name}.gamma", np.ones(channels), **place.meta())
        self.beta = store.add(f"{name}.beta", np.zeros(channels), **place.meta())

    def __call__(self, x: Tensor) -> Tensor:
        y = T.group_norm(x, self.groups)
        return T.add(T.mul(y, channel_broadcast(self.gamma, y)), channel_broadcast(self.beta, y))


class Embedding:
    def __init__(self, store: ParamStore, name: str, rows: int, dim: int,
                 rng: np.random.Generator, place: Placement):
        self.rows = rows
        self.table = store.add(f"{name}.table", rng.standard_normal((rows, dim)), **place.meta())

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)


def to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def from_tokens(x: Tensor, height: int, width: int) -> Tensor:
    b, n, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, height, width))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
