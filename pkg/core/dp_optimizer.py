"""
DP-SGD over the trainable subset of a latent diffusion model: Poisson-sampled
logical batches, per-sample clipping to one global norm, a single Gaussian
noise draw per logical batch, fixed 1/B normalization and a plain SGD update.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from core.accountant import PrivacyLedger
from core.diffusion import draw_noise_and_steps, ldm_loss
from core.tensor import GradMap, per_sample_grads
from core.unet import TrainableSelection, select_trainable
from utils.errors import ContractError, StateError
from utils.helpers import MetricsWriter, ceil_div, make_rng, progress_disabled

logger = logging.getLogger(__name__)

UNBOUNDED = math.inf


@dataclass(frozen=True)
class DPConfig:
    batch_size: int
    clip_norm: float
    noise_multiplier: float
    learning_rate: float
    steps: int
    seed: int = 0
    physical_batch_size: int = 64
    delta: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("expected batch size must be >= 1")
        if not self.clip_norm > 0:
            raise ContractError("clipping norm must be > 0")
        if self.noise_multiplier < 0:
            raise ContractError("noise multiplier must be >= 0")
        if self.noise_multiplier > 0 and math.isinf(self.clip_norm):
            raise ContractError("an unbounded clipping norm only makes sense without noise")
        if self.steps < 0 or self.physical_batch_size < 1:
            raise ContractError("steps must be >= 0 and physical batch size >= 1")

    def sampling_rate(self, n: int) -> float:
        q = self.batch_size / n
        if not 0 < q <= 1:
            raise ContractError(f"sampling rate B/N = {self.batch_size}/{n} outside (0, 1]")
        return q


def steps_for_epochs(epochs: int, n: int, batch_size: int) -> int:
    """P = epochs * ceil(N / B)."""
    return epochs * ceil_div(n, batch_size)


@dataclass
class StepReport:
    step: int
    batch_size: int
    microbatches: int
    norm_min: float
    norm_median: float
    norm_max: float
    clipped_fraction: float
    noise_norm: float
    trainable: int

    def to_record(self) -> dict:
        record = asdict(self)
        record["stage"] = "finetune-dp"
        return record


@dataclass
class DPRunResult:
    reports: List[StepReport]
    ledger: PrivacyLedger
    selection: Optional[TrainableSelection]
    rng: np.random.Generator
    clip_violations: int = 0
    steps_done: int = 0


def poisson_subsample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Each index kept independently with probability q; may be empty."""
    if not 0 < q <= 1:
        raise ContractError(f"sampling rate must lie in (0, 1], got {q}")
    if q == 1.0:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


def clip_gradient(grads: GradMap, clip_norm: float) -> GradMap:
    """g / max(1, ||g|| / C) over all parameters jointly."""
    if not clip_norm > 0:
        raise ContractError("clipping norm must be > 0")
    factor = max(1.0, grads.norm / clip_norm)
    if factor == 1.0:
        return grads
    return grads.scaled(1.0 / factor)


def noisy_aggregate(clipped: Sequence[GradMap], sigma: float, clip_norm: float, batch_size: int,
                    rng: np.random.Generator, template: Mapping[str, np.ndarray]):
    """
    (1/B) (sum of clipped grads + N(0, sigma^2 C^2 I)). The noise vector spans all
    parameters in sorted-name order and is drawn once. Returns (GradMap, noise norm).
    """
    if sigma > 0 and math.isinf(clip_norm):
        raise ContractError("noise with an unbounded clipping norm is undefined")
    names = sorted(template)
    total: Dict[str, np.ndarray] = {k: np.zeros_like(template[k]) for k in names}
    for g in clipped:
        for k in names:
            np.add(total[k], g[k], out=total[k])

    noise_norm = 0.0
    if sigma > 0 and names:
        sizes = [template[k].size for k in names]
        noise = rng.standard_normal(int(np.sum(sizes))) * (sigma * clip_norm)
        noise_norm = float(np.linalg.norm(noise))
        offset = 0
        for k, size in zip(names, sizes):
            total[k] = total[k] + noise[offset:offset + size].reshape(template[k].shape)
            offset += size
    return GradMap({k: v / batch_size for k, v in total.items()}), noise_norm


def _latent_loss(model, latents: np.ndarray, labels: Optional[np.ndarray]):
    def loss_fn(sample):
        i, t, noise = sample
        y = labels[i:i + 1] if labels is not None else None
        return ldm_loss(model, latents[i:i + 1], y, t=t, noise=noise)

    return loss_fn


def dp_sgd_run(
    model,
    latents: np.ndarray,
    labels: Optional[np.ndarray],
    config: DPConfig,
    trainable: Optional[str] = None,
    workers: int = 1,
    metrics: Optional[MetricsWriter] = None,
    start_step: int = 0,
    rng: Optional[np.random.Generator] = None,
    ledger: Optional[PrivacyLedger] = None,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable[[int, np.random.Generator, PrivacyLedger], None]] = None,
) -> DPRunResult:
    """
    Run `config.steps` DP-SGD iterations. Frozen parameters are never touched.
    Resuming passes the saved rng, ledger and step index of an interrupted run.
    """
    if getattr(model, "pretrained_from", None) is None:
        raise StateError("DP fine-tuning needs a pre-trained diffusion checkpoint")
    n = latents.shape[0]
    q = config.sampling_rate(n)
    labels = labels if getattr(model, "conditional", False) else None
    selection = select_trainable(model, trainable) if trainable is not None else None
    params = model.store.trainable()
    template = {k: p.data for k, p in params.items()}
    trainable_count = model.store.count(trainable_only=True)

    rng = rng if rng is not None else make_rng(config.seed)
    if ledger is None:
        ledger = PrivacyLedger(q=q, sigma=config.noise_multiplier, steps=0, delta=config.delta)
    if ledger.steps != start_step:
        raise StateError(f"ledger has {ledger.steps} steps but the run resumes at {start_step}")
    loss_fn = _latent_loss(model, latents, labels)
    latent_shape = (1,) + latents.shape[1:]

    reports: List[StepReport] = []
    violations = 0
    bar = tqdm(range(start_step, config.steps), desc="finetune-dp", disable=progress_disabled())
    for step in bar:
        idx = poisson_subsample(n, q, rng)
        samples = []
        for i in idx:
            t, noise = draw_noise_and_steps(model.schedule, latent_shape, rng)
            samples.append((int(i), t, noise))

        norms, clipped = [], []
        microbatches = ceil_div(len(samples), config.physical_batch_size) if samples else 0
        for start in range(0, len(samples), config.physical_batch_size):
            chunk = samples[start:start + config.physical_batch_size]
            if params:
                grads = per_sample_grads(loss_fn, chunk, params, workers=workers)
            else:
                grads = [GradMap({}) for _ in chunk]
            for g in grads:
                norms.append(g.norm)
                c = clip_gradient(g, config.clip_norm)
                if c.norm > config.clip_norm * (1 + 1e-9):
                    violations += 1
                clipped.append(c)
        if violations:
            raise ContractError(f"step {step}: {violations} clipped gradients exceed C={config.clip_norm}")

        update, noise_norm = noisy_aggregate(clipped, config.noise_multiplier, config.clip_norm,
                                             config.batch_size, rng, template)
        if config.learning_rate:
            for name in update:
                params[name].sub_(config.learning_rate * update[name])
        ledger.record_step()

        arr = np.asarray(norms) if norms else np.zeros(1)
        report = StepReport(
            step=step + 1,
            batch_size=len(samples),
            microbatches=microbatches,
            norm_min=float(arr.min()),
            norm_median=float(np.median(arr)),
            norm_max=float(arr.max()),
            clipped_fraction=float(np.mean(arr > config.clip_norm)) if norms else 0.0,
            noise_norm=noise_norm,
            trainable=trainable_count,
        )
        reports.append(report)
        if metrics:
            metrics.write(report.to_record())
        if checkpoint_every and on_checkpoint and (step + 1) % checkpoint_every == 0 \
                and step + 1 < config.steps:
            on_checkpoint(step + 1, rng, ledger)

    logger.info("DP-SGD finished %d steps (q=%.5f, sigma=%.4g, C=%s)", ledger.steps, q,
                config.noise_multiplier, config.clip_norm)
    return DPRunResult(reports=reports, ledger=ledger, selection=selection, rng=rng,
                       clip_violations=violations, steps_done=ledger.steps)
