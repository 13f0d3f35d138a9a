"""
Convolutional autoencoder: pixels (B, ch, H, W) in [-1, 1] to latents
(B, c, H/f, W/f) and back. Trained non-privately on the public split.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from core import tensor as T
from core.layers import Conv2d, Placement
from core.optim import SGD
from core.params import ParamStore
from core.tensor import Tape, Tensor, get_default_dtype
from utils.errors import ConfigError, DataError
from utils.helpers import MetricsWriter, make_rng, progress_disabled

logger = logging.getLogger(__name__)

LATENT_PENALTY = 1e-6


@dataclass(frozen=True)
class AutoencoderConfig:
    f: int = 2
    image_channels: int = 1
    latent_channels: int = 3
    base_channels: int = 16
    channel_mult: Tuple[int, ...] = ()
    seed: int = 0

    @property
    def levels(self) -> int:
        return self.f.bit_length() - 1

    def widths(self) -> Tuple[int, ...]:
        mult = self.channel_mult or (1,) * self.levels
        return tuple(self.base_channels * m for m in mult)

    def validate(self) -> None:
        if self.f < 2 or self.f & (self.f - 1):
            raise ConfigError(f"downsampling factor must be a power of two >= 2, got {self.f}")
        if self.channel_mult and len(self.channel_mult) != self.levels:
            raise ConfigError(f"channel_mult needs {self.levels} entries for f={self.f}")

    def to_meta(self) -> dict:
        meta = asdict(self)
        meta["channel_mult"] = list(self.channel_mult)
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "AutoencoderConfig":
        values = dict(meta)
        values["channel_mult"] = tuple(values.get("channel_mult", ()))
        return cls(**values)


class Autoencoder:
    def __init__(self, config: AutoencoderConfig):
        config.validate()
        self.config = config
        self.store = ParamStore()
        rng = make_rng(config.seed)
        widths = config.widths()
        enc = Placement("autoencoder", location="encoder", block="encoder", component="conv")
        dec = Placement("autoencoder", location="decoder", block="decoder", component="conv")

        self.enc_in = Conv2d(self.store, "encoder.conv_in", config.image_channels, config.base_channels,
                             3, rng, enc, padding=1)
        self.enc_down = []
        ch = config.base_channels
        for i, width in enumerate(widths):
            self.enc_down.append(Conv2d(self.store, f"encoder.down{i}", ch, width, 3, rng, enc,
                                        stride=2, padding=1))
            ch = width
        self.enc_out = Conv2d(self.store, "encoder.conv_out", ch, config.latent_channels, 3, rng, enc,
                              padding=1)

        self.dec_in = Conv2d(self.store, "decoder.conv_in", config.latent_channels, ch, 3, rng, dec,
                             padding=1)
        self.dec_up = []
        for i, width in enumerate(reversed((config.base_channels,) + widths[:-1])):
            self.dec_up.append(Conv2d(self.store, f"decoder.up{i}", ch, width, 3, rng, dec, padding=1))
            ch = width
        self.dec_out = Conv2d(self.store, "decoder.conv_out", ch, config.image_channels, 3, rng, dec,
                              padding=1)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.image_channels:
            raise ConfigError(f"expected (B, {self.config.image_channels}, H, W) images, got {x.shape}")
        h, w = x.shape[2:]
        if h % self.config.f or w % self.config.f:
            raise ConfigError(f"image extents {h}x{w} not divisible by f={self.config.f}")

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        self._check(x)
        h = T.relu(self.enc_in(x))
        for conv in self.enc_down:
            h = T.relu(conv(h))
        return self.enc_out(h)

    def decode(self, z) -> Tensor:
        h = T.relu(self.dec_in(T.as_tensor(z)))
        for conv in self.dec_up:
            h = T.relu(conv(T.upsample_nearest(h, 2)))
        return T.tanh(self.dec_out(h))

    def loss(self, x) -> Tensor:
        x = T.as_tensor(x)
        z = self.encode(x)
        rec = T.mse(self.decode(z), x)
        return T.add(rec, T.scale(T.mean(T.mul(z, z)), LATENT_PENALTY))


def encode_dataset(model: Autoencoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [model.encode(Tensor(images[i:i + batch_size], dtype=get_default_dtype())).data
           for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def decode_latents(model: Autoencoder, latents: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [model.decode(Tensor(latents[i:i + batch_size], dtype=get_default_dtype())).data
           for i in range(0, latents.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def reconstruction_error(model: Autoencoder, images: np.ndarray, batch_size: int = 128) -> float:
    """Mean squared error of decode(encode(x)) over the whole set."""
    total = 0.0
    for i in range(0, images.shape[0], batch_size):
        x = images[i:i + batch_size]
        rec = model.decode(model.encode(Tensor(x, dtype=get_default_dtype()))).data
        total += float(np.sum((rec - x) ** 2))
    return total / images.size


def train_autoencoder(images: np.ndarray, config: AutoencoderConfig, epochs: int,
                      batch_size: int = 32, lr: float = 0.01, momentum: float = 0.9,
                      metrics: Optional[MetricsWriter] = None) -> Tuple[Autoencoder, List[float]]:
    """SGD with momentum on reconstruction MSE plus a small latent L2 penalty."""
    if images.shape[0] == 0:
        raise DataError("autoencoder training needs a non-empty public dataset")
    model = Autoencoder(config)
    rng = make_rng(config.seed + 1)
    opt = SGD(model.store, lr=lr, momentum=momentum)
    history = []
    n = images.shape[0]
    for epoch in tqdm(range(epochs), desc="train-ae", disable=progress_disabled()):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            x = Tensor(images[order[start:start + batch_size]], dtype=get_default_dtype())
            with Tape() as tape:
                loss = model.loss(x)
                grads = tape.backward(loss, model.store.trainable())
            opt.step(grads)
            total += loss.item()
            batches += 1
        mean_loss = total / batches
        history.append(mean_loss)
        logger.info("autoencoder epoch %d/%d loss %.5f", epoch + 1, epochs, mean_loss)
        if metrics:
            metrics.write({"stage": "train-ae", "epoch": epoch + 1, "loss": mean_loss})
    return model, history
