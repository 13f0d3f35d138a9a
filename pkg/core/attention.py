"""
Attention modules of the denoising UNet.

`Attention` is the projection unit softmax(Q K^T / sqrt(d_k)) V, split over heads.
`AttentionBlock` wraps one self-attention unit over the pixel tokens (unconditional
models); `SpatialTransformer` adds a cross-attention unit over the class tokens
(conditional models). Each block is one indexed attention module.
"""

import math
from typing import List, Optional

import numpy as np

from core import tensor as T
from core.layers import GroupNorm, Linear, Placement, from_tokens, to_tokens
from core.params import ParamStore
from core.tensor import Tensor
from utils.errors import ContractError, DimensionError

SELF = "self"
CROSS = "cross"


class Attention:
    def __init__(self, store: ParamStore, name: str, query_dim: int, rng: np.random.Generator,
                 place: Placement, context_dim: Optional[int] = None, heads: int = 1,
                 head_dim: Optional[int] = None):
        self.name = name
        self.kind = CROSS if context_dim is not None else SELF
        self.heads = heads
        self.head_dim = head_dim or max(1, query_dim // heads)
        inner = self.heads * self.head_dim
        kv_dim = context_dim if context_dim is not None else query_dim
        self.query_dim, self.context_dim = query_dim, kv_dim
        self.to_q = Linear(store, f"{name}.to_q", query_dim, inner, rng, place, bias=False)
        self.to_k = Linear(store, f"{name}.to_k", kv_dim, inner, rng, place, bias=False)
        self.to_v = Linear(store, f"{name}.to_v", kv_dim, inner, rng, place, bias=False)

    @property
    def projections(self) -> List[Linear]:
        return [self.to_q, self.to_k, self.to_v]

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = T.reshape(x, (b, n, self.heads, self.head_dim))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * self.heads, n, self.head_dim))

    def _merge(self, x: Tensor, batch: int) -> Tensor:
        _, n, d = x.shape
        x = T.reshape(x, (batch, self.heads, n, d))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (batch, n, self.heads * d))

    def weights(self, psi: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        """Row-stochastic attention matrix, shape (B*heads, N, M)."""
        context = self._context(psi, cond)
        q = self._split(self.to_q(psi))
        k = self._split(self.to_k(context))
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(self.head_dim))
        return T.softmax(scores, axis=-1)

    def _context(self, psi: Tensor, cond: Optional[Tensor]) -> Tensor:
        if self.kind == SELF and cond is not None:
            raise ContractError(f"{self.name} is a self-attention unit; it takes no conditioning")
        if self.kind == CROSS and cond is None:
            raise ContractError(f"{self.name} is a cross-attention unit; conditioning is required")
        context = psi if cond is None else cond
        if psi.shape[-1] != self.query_dim or context.shape[-1] != self.context_dim:
            raise DimensionError(
                f"{self.name}: expected feature dims ({self.query_dim}, {self.context_dim}), "
                f"got ({psi.shape[-1]}, {context.shape[-1]})"
            )
        if cond is not None and cond.shape[0] != psi.shape[0]:
            raise DimensionError(f"{self.name}: batch of cond {cond.shape[0]} != {psi.shape[0]}")
        return context

    def __call__(self, psi: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        """psi: (B, N, d_i) or (N, d_i); cond: (B, M, d_c) or (M, d_c). Returns (.., N, heads*d_k)."""
        unbatched = psi.ndim == 2
        if unbatched:
            psi = T.reshape(psi, (1,) + psi.shape)
            if cond is not None:
                cond = T.reshape(cond, (1,) + cond.shape)
        context = self._context(psi, cond)
        attn = self.weights(psi, cond)
        v = self._split(self.to_v(context))
        out = self._merge(T.matmul(attn, v), psi.shape[0])
        return T.reshape(out, out.shape[1:]) if unbatched else out


def attention_forward(module: Attention, psi: Tensor, cond: Optional[Tensor] = None) -> Tensor:
    return module(psi, cond)


class AttentionBlock:
    """Residual self-attention over spatial positions."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator,
                 place: Placement, heads: int = 1):
        self.index = place.attn_index
        self.location = place.location
        self.kind = SELF
        self.norm = GroupNorm(store, f"{name}.norm", channels, place)
        self.attn = Attention(store, f"{name}.attn", channels, rng, place, heads=heads)
        self.proj_out = Linear(store, f"{name}.proj_out", self.attn.heads * self.attn.head_dim,
                               channels, rng, place)

    @property
    def units(self) -> List[Attention]:
        return [self.attn]

    def __call__(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        _, _, h, w = x.shape
        tokens = to_tokens(self.norm(x))
        out = self.proj_out(self.attn(tokens))
        return T.add(x, from_tokens(out, h, w))


class SpatialTransformer:
    """Self-attention then cross-attention to the conditioning tokens, with in/out projections."""

    def __init__(self, store: ParamStore, name: str, channels: int, context_dim: int,
                 rng: np.random.Generator, place: Placement, heads: int = 1):
        self.index = place.attn_index
        self.location = place.location
        self.kind = CROSS
        inner = channels
        self.norm = GroupNorm(store, f"{name}.norm", channels, place)
        self.proj_in = Linear(store, f"{name}.proj_in", channels, inner, rng, place)
        self.attn1 = Attention(store, f"{name}.attn1", inner, rng, place, heads=heads)
        self.attn2 = Attention(store, f"{name}.attn2", inner, rng, place,
                               context_dim=context_dim, heads=heads)
        self.proj_out = Linear(store, f"{name}.proj_out", inner, channels, rng, place)

    @property
    def units(self) -> List[Attention]:
        return [self.attn1, self.attn2]

    def __call__(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        if cond is None:
            raise ContractError("SpatialTransformer needs conditioning tokens")
        _, _, h, w = x.shape
        tokens = self.proj_in(to_tokens(self.norm(x)))
        tokens = T.add(tokens, self.attn1(tokens))
        tokens = T.add(tokens, self.attn2(tokens, cond))
        return T.add(x, from_tokens(self.proj_out(tokens), h, w))
