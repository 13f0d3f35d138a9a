"""
UNet-lite noise predictor with indexed attention modules and a class embedder.

Layout per resolution level (LDM style): `num_res_blocks` residual blocks each
followed by an attention module on the way down, a middle block of
Res + Attention + Res, and `num_res_blocks + 1` residual blocks with skip
concatenation and attention on the way up. With two levels and one residual
block per level this gives 7 attention modules (2 input, 1 middle, 4 out).
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import tensor as T
from core.attention import AttentionBlock, SpatialTransformer
from core.layers import (
    Conv2d,
    Embedding,
    GroupNorm,
    Linear,
    Placement,
    channel_broadcast,
    timestep_embedding,
)
from core.params import ParamStore
from core.tensor import Tensor, get_default_dtype
from utils.config import AppConfig
from utils.errors import ConfigError, ContractError, DimensionError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 3
    latent_size: int = 8
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    heads: int = 1
    conditional: bool = True
    num_classes: int = 2
    cond_dim: int = 16
    null_class: bool = False
    seed: int = 0

    def to_meta(self) -> dict:
        meta = asdict(self)
        meta["channel_mult"] = list(self.channel_mult)
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "UNetConfig":
        values = dict(meta)
        values["channel_mult"] = tuple(values["channel_mult"])
        return cls(**values)

    def validate(self) -> None:
        if not self.channel_mult or self.num_res_blocks < 1:
            raise ConfigError("UNet needs at least one level and one residual block per level")
        if self.latent_size % (2 ** (len(self.channel_mult) - 1)):
            raise ConfigError(f"latent size {self.latent_size} not divisible by "
                              f"2^{len(self.channel_mult) - 1} downsampling")
        widths = [self.base_channels * m for m in self.channel_mult]
        if any(w % self.heads for w in widths):
            raise ConfigError(f"channel widths {widths} must be divisible by heads={self.heads}")
        if self.conditional and self.num_classes < 1:
            raise ConfigError("a conditional UNet needs num_classes >= 1")


class ConditionEmbedder:
    """Class-label embedder phi(y): one d_c row per class, plus an optional null row."""

    def __init__(self, store: ParamStore, num_classes: int, dim: int, rng: np.random.Generator,
                 null_class: bool = False):
        self.num_classes = num_classes
        self.null_class = null_class
        self.dim = dim
        rows = num_classes + (1 if null_class else 0)
        self.embedding = Embedding(store, "cond.embed", rows, dim, rng,
                                   Placement("cond", location="cond", block="cond", component="embed"))

    @property
    def rows(self) -> int:
        return self.embedding.rows

    def resolve(self, y, batch: int) -> np.ndarray:
        if y is None:
            if not self.null_class:
                raise ContractError("conditional model without a null class needs labels")
            return np.full(batch, self.num_classes, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != batch:
            raise ContractError(f"got {y.shape[0]} labels for a batch of {batch}")
        unlabeled = y == AppConfig.UNLABELED
        if unlabeled.any():
            if not self.null_class:
                raise ContractError("unlabeled samples need a null class")
            y = np.where(unlabeled, self.num_classes, y)
        if y.min() < 0 or y.max() >= self.rows:
            raise ContractError(f"class ids must lie in [0, {self.num_classes})")
        return y

    def __call__(self, y, batch: int) -> Tensor:
        ids = self.resolve(y, batch)
        return T.reshape(self.embedding(ids), (batch, 1, self.dim))


class ResBlock:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, temb_dim: int,
                 rng: np.random.Generator, place: Placement):
        self.norm1 = GroupNorm(store, f"{name}.norm1", c_in, place)
        self.conv1 = Conv2d(store, f"{name}.conv1", c_in, c_out, 3, rng, place, padding=1)
        self.temb = Linear(store, f"{name}.temb", temb_dim, c_out, rng, place)
        self.norm2 = GroupNorm(store, f"{name}.norm2", c_out, place)
        self.conv2 = Conv2d(store, f"{name}.conv2", c_out, c_out, 3, rng, place, padding=1)
        self.skip = Conv2d(store, f"{name}.skip", c_in, c_out, 1, rng, place) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = T.add(h, channel_broadcast(self.temb(T.silu(temb)), h))
        h = self.conv2(T.silu(self.norm2(h)))
        return T.add(h, self.skip(x) if self.skip is not None else x)


class Downsample:
    def __init__(self, store: ParamStore, name: str, channels: int, rng, place: Placement):
        self.conv = Conv2d(store, f"{name}.conv", channels, channels, 3, rng, place, stride=2, padding=1)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        return self.conv(x)


class Upsample:
    def __init__(self, store: ParamStore, name: str, channels: int, rng, place: Placement):
        self.conv = Conv2d(store, f"{name}.conv", channels, channels, 3, rng, place, padding=1)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))


class UNetLite:
    def __init__(self, config: UNetConfig):
        config.validate()
        self.config = config
        self.store = ParamStore()
        self.attention_modules: List = []
        rng = make_rng(config.seed)
        base = config.base_channels
        temb_dim = 4 * base
        self.temb_dim = temb_dim

        place = Placement("unet", location="time", block="time_embed", component="time")
        self.time_in = Linear(self.store, "time_embed.0", base, temb_dim, rng, place)
        self.time_out = Linear(self.store, "time_embed.2", temb_dim, temb_dim, rng, place)

        self.embedder = None
        if config.conditional:
            self.embedder = ConditionEmbedder(self.store, config.num_classes, config.cond_dim, rng,
                                              null_class=config.null_class)

        # input blocks
        self.input_blocks: List[List] = []
        place = Placement("unet", location="input", block="input_blocks.0", component="conv_in")
        self.input_blocks.append([Conv2d(self.store, "input_blocks.0.conv", config.latent_channels,
                                         base, 3, rng, place, padding=1)])
        skip_channels = [base]
        ch = base
        for level, mult in enumerate(config.channel_mult):
            for _ in range(config.num_res_blocks):
                out_ch = base * mult
                block = f"input_blocks.{len(self.input_blocks)}"
                layers = [ResBlock(self.store, f"{block}.res", ch, out_ch, temb_dim, rng,
                                   Placement("unet", "input", block, "res"))]
                ch = out_ch
                layers.append(self._attention(f"{block}.attn", ch, "input", block, rng))
                self.input_blocks.append(layers)
                skip_channels.append(ch)
            if level != len(config.channel_mult) - 1:
                block = f"input_blocks.{len(self.input_blocks)}"
                self.input_blocks.append([Downsample(self.store, f"{block}.down", ch, rng,
                                                     Placement("unet", "input", block, "down"))])
                skip_channels.append(ch)

        # middle block
        block = "middle_block"
        self.middle_block = [
            ResBlock(self.store, f"{block}.res0", ch, ch, temb_dim, rng,
                     Placement("unet", "middle", block, "res")),
            self._attention(f"{block}.attn", ch, "middle", block, rng),
            ResBlock(self.store, f"{block}.res1", ch, ch, temb_dim, rng,
                     Placement("unet", "middle", block, "res")),
        ]

        # out blocks
        self.out_blocks: List[List] = []
        for level, mult in reversed(list(enumerate(config.channel_mult))):
            for i in range(config.num_res_blocks + 1):
                block = f"out_blocks.{len(self.out_blocks)}"
                out_ch = base * mult
                layers = [ResBlock(self.store, f"{block}.res", ch + skip_channels.pop(), out_ch,
                                   temb_dim, rng, Placement("unet", "out", block, "res"))]
                ch = out_ch
                layers.append(self._attention(f"{block}.attn", ch, "out", block, rng))
                if level and i == config.num_res_blocks:
                    layers.append(Upsample(self.store, f"{block}.up", ch, rng,
                                           Placement("unet", "out", block, "up")))
                self.out_blocks.append(layers)

        place = Placement("unet", location="head", block="head", component="head")
        self.norm_out = GroupNorm(self.store, "head.norm", ch, place)
        self.conv_out = Conv2d(self.store, "head.conv", ch, config.latent_channels, 3, rng, place,
                               padding=1)
        logger.debug("built UNetLite with %d parameters and %d attention modules",
                     self.store.count(), len(self.attention_modules))

    def _attention(self, name: str, channels: int, location: str, block: str, rng):
        index = len(self.attention_modules)
        place = Placement("attn", location, block, "attn", attn_index=index)
        if self.config.conditional:
            module = SpatialTransformer(self.store, name, channels, self.config.cond_dim, rng, place,
                                        heads=self.config.heads)
        else:
            module = AttentionBlock(self.store, name, channels, rng, place, heads=self.config.heads)
        self.attention_modules.append(module)
        return module

    @property
    def attention_units(self):
        return [unit for module in self.attention_modules for unit in module.units]

    def _apply(self, layers, h: Tensor, temb: Tensor, cond: Optional[Tensor]) -> Tensor:
        for layer in layers:
            if isinstance(layer, (AttentionBlock, SpatialTransformer)):
                h = layer(h, cond)
            elif isinstance(layer, Conv2d):
                h = layer(h)
            else:
                h = layer(h, temb)
        return h

    def __call__(self, z_t: Tensor, t, y=None) -> Tensor:
        """Predict the injected noise; output has the shape of z_t."""
        z_t = T.as_tensor(z_t)
        cfg = self.config
        expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if z_t.ndim != 4 or z_t.shape[1:] != expected:
            raise DimensionError(f"UNet expects (B, {expected}) latents, got {z_t.shape}")
        batch = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (batch,))

        cond = None
        if self.embedder is not None:
            cond = self.embedder(y, batch)
        elif y is not None:
            raise ContractError("unconditional model does not take labels")

        emb = Tensor(timestep_embedding(t, cfg.base_channels), dtype=get_default_dtype())
        temb = self.time_out(T.silu(self.time_in(emb)))

        skips = []
        h = z_t
        for layers in self.input_blocks:
            h = self._apply(layers, h, temb, cond)
            skips.append(h)
        h = self._apply(self.middle_block, h, temb, cond)
        for layers in self.out_blocks:
            h = T.concat([h, skips.pop()], axis=1)
            h = self._apply(layers, h, temb, cond)
        return self.conv_out(T.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# Trainable subsets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainableSelection:
    spec: str
    names: Tuple[str, ...]
    trainable: int
    total: int

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


_LOCATION_TERMS = {"input-attn": "input", "middle-attn": "middle", "out-attn": "out"}
_BLOCK_TERMS = {"input_blocks": "input", "middle_block": "middle", "out_blocks": "out"}


def _parse_indices(text: str, count: int) -> List[int]:
    try:
        indices = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad attention index list {text!r}") from e
    bad = [i for i in indices if not 0 <= i < count]
    if bad or not indices:
        raise ConfigError(f"attention indices {bad or text!r} outside [0, {count})")
    return indices


def resolve_trainable(store: ParamStore, spec: str, attn_count: int) -> List[str]:
    """Names selected by a '+'-joined trainable spec."""
    chosen = set()
    infos = store.infos()
    for term in (t.strip() for t in spec.split("+")):
        if not term or term == "{}":
            continue
        if term == "all-attn":
            picked = [i for i in infos if i.group == "attn"]
        elif term == "cond":
            picked = [i for i in infos if i.group == "cond"]
        elif term == "lora":
            picked = [i for i in infos if i.group == "lora"]
        elif term in _LOCATION_TERMS:
            picked = [i for i in infos if i.group == "attn" and i.location == _LOCATION_TERMS[term]]
        elif term in _BLOCK_TERMS:
            picked = [i for i in infos if i.location == _BLOCK_TERMS[term] and i.group != "lora"]
        elif term == "resblocks":
            picked = [i for i in infos if i.component == "res"]
        elif term.startswith("attn:"):
            wanted = set(_parse_indices(term[5:], attn_count))
            picked = [i for i in infos if i.group == "attn" and i.attn_index in wanted]
        elif term.startswith("ablation:"):
            try:
                first = int(term[9:])
            except ValueError as e:
                raise ConfigError(f"bad ablation term {term!r}") from e
            if first == -1:
                first = 1
            if not 1 <= first <= attn_count:
                raise ConfigError(f"ablation start {first} outside [1, {attn_count}]")
            picked = [i for i in infos if i.group == "attn" and i.attn_index >= first - 1]
        else:
            raise ConfigError(f"unknown trainable term {term!r}")
        if term != "lora" and store_has_lora(store):
            # base weights under an adapter stay frozen
            picked = [i for i in picked if not _adapted(store, i.name)]
        chosen.update(i.name for i in picked)
    return sorted(chosen)


def store_has_lora(store: ParamStore) -> bool:
    return any(i.group == "lora" for i in store.infos())


def _adapted(store: ParamStore, name: str) -> bool:
    return name.endswith(".weight") and f"{name[:-len('.weight')]}.lora_A" in store


def select_trainable(model, spec: str) -> TrainableSelection:
    """Flag exactly the parameters named by `spec` as trainable and report the counts."""
    store = model.store
    names = resolve_trainable(store, spec, len(model.attention_modules))
    store.set_trainable(names)
    summary = store.summary()
    selection = TrainableSelection(spec=spec, names=tuple(names),
                                   trainable=summary["trainable"], total=summary["total"])
    logger.info("trainable spec %r: %d / %d parameters (%.1f%%)", spec or "{}",
                selection.trainable, selection.total, 100 * selection.fraction)
    return selection


def attention_layout(model) -> List[Dict[str, object]]:
    return [{"index": m.index, "location": m.location, "kind": m.kind}
            for m in model.attention_modules]
