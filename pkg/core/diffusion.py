"""
DDPM noise schedule, forward noising, the epsilon-prediction loss, ancestral
sampling and the non-private pre-training loop over public latents.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from core import tensor as T
from core.optim import SGD
from core.tensor import Tape, Tensor, get_default_dtype
from core.unet import UNetConfig, UNetLite
from utils.errors import ConfigError, ContractError, DataError
from utils.helpers import MetricsWriter, make_rng, progress_disabled

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.beta.shape[0])

    def to_meta(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta ramp; alpha_bar by running product."""
    if T_steps < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_steps(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 1 or t.max() > schedule.T):
        raise ContractError(f"timesteps must lie in [1, {schedule.T}]")
    return t


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; t scalar or one per leading row."""
    z0 = np.asarray(z0)
    noise = np.asarray(noise)
    if noise.shape != z0.shape:
        raise ContractError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    t = _check_steps(schedule, t)
    abar = schedule.alpha_bar[t - 1]
    if abar.ndim:
        abar = abar.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * noise


class LatentDiffusion:
    """A UNet noise predictor bound to its schedule."""

    def __init__(self, unet: UNetLite, schedule: NoiseSchedule, pretrained_from: Optional[str] = None):
        self.unet = unet
        self.schedule = schedule
        self.pretrained_from = pretrained_from
        self.lora: Optional[dict] = None

    @classmethod
    def build(cls, config: UNetConfig, T_steps: int, beta_start: float, beta_end: float):
        return cls(UNetLite(config), make_schedule(T_steps, beta_start, beta_end))

    @property
    def store(self):
        return self.unet.store

    @property
    def attention_modules(self):
        return self.unet.attention_modules

    @property
    def attention_units(self):
        return self.unet.attention_units

    @property
    def conditional(self) -> bool:
        return self.unet.config.conditional

    @property
    def latent_shape(self):
        cfg = self.unet.config
        return (cfg.latent_channels, cfg.latent_size, cfg.latent_size)

    def validate_labels(self, y, batch: int) -> None:
        if self.unet.embedder is None:
            if y is not None:
                raise ContractError("unconditional model does not take labels")
            return
        self.unet.embedder.resolve(y, batch)

    def predict_noise(self, z_t: Tensor, t, y=None) -> Tensor:
        return self.unet(z_t, t, y)


def draw_noise_and_steps(schedule: NoiseSchedule, shape, rng: np.random.Generator):
    """t ~ U{1..T} per row, then tau ~ N(0, I); always in this order."""
    t = rng.integers(1, schedule.T + 1, size=shape[0])
    noise = rng.standard_normal(shape)
    return t, noise


def ldm_loss(model, z0, y=None, rng: Optional[np.random.Generator] = None,
             t=None, noise=None) -> Tensor:
    """
    Mean over elements of (tau - model(z_t, t, y))^2. Draws t and tau from `rng`
    unless both are given.
    """
    z0 = z0.data if isinstance(z0, Tensor) else np.asarray(z0, dtype=get_default_dtype())
    batch = z0.shape[0]
    model.validate_labels(y, batch)
    if t is None or noise is None:
        if rng is None:
            raise ContractError("ldm_loss needs an rng when t and noise are not supplied")
        t, noise = draw_noise_and_steps(model.schedule, z0.shape, rng)
    z_t = q_sample(model.schedule, z0, t, noise)
    pred = model.predict_noise(Tensor(z_t, dtype=z0.dtype), t, y)
    return T.mse(pred, Tensor(noise, dtype=z0.dtype))


def ddpm_sample(model, count: int, y=None, rng: Optional[np.random.Generator] = None,
                progress: bool = False) -> np.ndarray:
    """Ancestral reverse chain from z_T ~ N(0, I) using the epsilon-prediction posterior mean."""
    if rng is None:
        raise ContractError("ddpm_sample needs an rng")
    if y is not None:
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (count,)).copy()
    model.validate_labels(y, count)
    s = model.schedule
    z = rng.standard_normal((count,) + tuple(model.latent_shape))
    steps = range(s.T, 0, -1)
    for t in tqdm(steps, desc="sampling", disable=not progress or progress_disabled(), leave=False):
        i = t - 1
        eps = model.predict_noise(Tensor(z), np.full(count, t), y).data
        mean = (z - s.beta[i] / np.sqrt(1.0 - s.alpha_bar[i]) * eps) / np.sqrt(s.alpha[i])
        if t > 1:
            var = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i])
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
        else:
            z = mean
    return z


def pretrain(model: LatentDiffusion, latents: np.ndarray, labels: Optional[np.ndarray],
             epochs: int, batch_size: int, lr: float, momentum: float, seed: int,
             metrics: Optional[MetricsWriter] = None,
             on_epoch: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Non-private training of every parameter on public latents."""
    n = latents.shape[0]
    if n == 0:
        raise DataError("pre-training needs at least one public latent")
    model.store.set_trainable(name for name, _ in model.store.items() if model.store.info(name).group != "lora")
    rng = make_rng(seed)
    opt = SGD(model.store, lr=lr, momentum=momentum)
    history = []
    for epoch in tqdm(range(epochs), desc="pretrain-dm", disable=progress_disabled()):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            y = labels[idx] if labels is not None and model.conditional else None
            with Tape() as tape:
                loss = ldm_loss(model, latents[idx], y, rng)
                grads = tape.backward(loss, model.store.trainable())
            opt.step(grads)
            total += loss.item()
            batches += 1
        mean_loss = total / max(batches, 1)
        history.append(mean_loss)
        logger.info("pretrain epoch %d/%d loss %.5f", epoch + 1, epochs, mean_loss)
        if metrics:
            metrics.write({"stage": "pretrain-dm", "epoch": epoch + 1, "loss": mean_loss})
        if on_epoch:
            on_epoch(epoch + 1, mean_loss)
    return history
