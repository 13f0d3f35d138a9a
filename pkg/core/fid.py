"""
Frechet distance between feature distributions, and its privatized variant.

Features come from a fixed, seeded conv net whose outputs are L2-normalized, so
every feature vector has norm <= 1 and the mean and second moment of n vectors
have sensitivity 1/n (add/remove) or 2/n (replace).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from core import tensor as T
from core.accountant import gaussian_mech_sigma
from core.tensor import Tensor
from utils.caching import SECTION_STATS, CheckpointSection
from utils.config import AppConfig
from utils.errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)

NEIGHBORING = ("add_remove", "replace")


class FeatureExtractor:
    """Three stride-2 conv layers with relu, global average pool, L2 normalization."""

    def __init__(self, channels: int, dim: int = AppConfig.FEATURE_DIM, seed: int = 1234):
        self.channels, self.dim, self.seed = channels, dim, seed
        rng = make_rng(seed)
        widths = (channels, 16, 32, dim)
        self.kernels = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            w = rng.standard_normal((c_out, c_in, 3, 3)) * math.sqrt(2.0 / (c_in * 9))
            self.kernels.append(Tensor(w, dtype=np.float64))

    def _embed(self, image: np.ndarray) -> np.ndarray:
        # one image per call: a fixed operand shape keeps the BLAS reduction order
        # identical no matter how the caller chunks the batch
        h = Tensor(image[None], dtype=np.float64)
        for kernel in self.kernels:
            h = T.relu(T.conv2d(h, kernel, stride=2, padding=1))
        pooled = h.data[0].mean(axis=(1, 2))
        return pooled / max(float(np.linalg.norm(pooled)), 1e-12)

    def _features(self, images: np.ndarray) -> np.ndarray:
        return np.stack([self._embed(image) for image in images])

    def __call__(self, images: np.ndarray, batch_size: int = 256, workers: int = 1) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise DimensionError(f"expected (N, {self.channels}, H, W) images, got {images.shape}")
        chunks = [images[i:i + batch_size] for i in range(0, images.shape[0], batch_size)]
        if not chunks:
            return np.zeros((0, self.dim))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(self._features, chunks))
        else:
            parts = [self._features(c) for c in chunks]
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class FeatureStats:
    n: int
    mu: np.ndarray
    m_sec: np.ndarray
    privatized: bool = False
    budget: Optional[Tuple[float, float, float, float]] = None

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if n < 1:
            raise ContractError("feature statistics need at least one sample")
        m = features.T @ features / n
        return cls(n=n, mu=features.mean(axis=0), m_sec=(m + m.T) / 2)

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        cov = self.m_sec - np.outer(self.mu, self.mu)
        return (cov + cov.T) / 2

    def to_section(self, name: str = "stats") -> CheckpointSection:
        meta = {"name": name, "n": self.n, "privatized": self.privatized,
                "budget": list(self.budget) if self.budget else None}
        return CheckpointSection(kind=SECTION_STATS, meta=meta,
                                 tensors={"mu": self.mu, "m_sec": self.m_sec})

    @classmethod
    def from_section(cls, section: CheckpointSection) -> "FeatureStats":
        if section.kind != SECTION_STATS or not {"mu", "m_sec"} <= set(section.tensors):
            raise FormatError("checkpoint section does not hold feature statistics")
        budget = section.meta.get("budget")
        return cls(n=int(section.meta["n"]), mu=section.tensors["mu"], m_sec=section.tensors["m_sec"],
                   privatized=bool(section.meta.get("privatized")),
                   budget=tuple(budget) if budget else None)


def sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix through its eigendecomposition."""
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) / 2


def psd_repair(cov: np.ndarray, floor: float = AppConfig.PSD_FLOOR) -> np.ndarray:
    """Clamp eigenvalues below `floor` up to `floor`; untouched when already above it."""
    if not np.all(np.isfinite(cov)):
        raise NumericError("covariance has non-finite entries")
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= floor:
        return cov
    repaired = (vecs * np.maximum(vals, floor)) @ vecs.T
    return (repaired + repaired.T) / 2


def _frechet(mu0: np.ndarray, sigma0: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """||mu0 - mu||^2 + tr(S0 + S - 2 (S0^1/2 S S0^1/2)^1/2)."""
    root0 = sqrtm_psd(sigma0)
    inner = root0 @ sigma @ root0
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -1e-6 * max(1.0, float(np.abs(vals).max())):
        raise NumericError(f"covariance product is not PSD (min eigenvalue {vals.min():.3g})")
    trace_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu0 - mu
    value = float(diff @ diff) + float(np.trace(sigma0)) + float(np.trace(sigma)) - 2.0 * trace_sqrt
    return max(0.0, value)


def fid(stats_a: FeatureStats, stats_b: FeatureStats, floor: float = AppConfig.PSD_FLOOR) -> float:
    if stats_a.dim != stats_b.dim:
        raise DimensionError(f"feature dims differ: {stats_a.dim} vs {stats_b.dim}")
    return _frechet(stats_a.mu, psd_repair(stats_a.covariance, floor),
                    stats_b.mu, psd_repair(stats_b.covariance, floor))


# ---------------------------------------------------------------------------
# Privatization
# ---------------------------------------------------------------------------

def sensitivity(n: int, neighboring: str = "add_remove") -> float:
    if n < 1:
        raise ContractError("sensitivity needs n >= 1")
    if neighboring == "add_remove":
        return 1.0 / n
    if neighboring == "replace":
        return 2.0 / n
    raise ConfigError(f"neighboring must be one of {NEIGHBORING}, got {neighboring!r}")


def privatize_mean(mu: np.ndarray, n: int, epsilon: float, delta: float,
                   neighboring: str = "add_remove",
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    sigma = gaussian_mech_sigma(sensitivity(n, neighboring), epsilon, delta)
    if sigma == 0.0:
        return np.array(mu, dtype=np.float64)
    if rng is None:
        raise ContractError("privatize_mean needs an rng when the noise scale is positive")
    return mu + rng.standard_normal(mu.shape) * sigma


def privatize_second_moment(m_sec: np.ndarray, n: int, epsilon: float, delta: float,
                            neighboring: str = "add_remove",
                            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Noise on the upper triangle (diagonal included), mirrored to the lower triangle."""
    if m_sec.ndim != 2 or m_sec.shape[0] != m_sec.shape[1]:
        raise DimensionError(f"second moment must be square, got {m_sec.shape}")
    if not np.allclose(m_sec, m_sec.T, rtol=0.0, atol=1e-12):
        raise ContractError("second moment matrix is not symmetric")
    m_sec = (m_sec + m_sec.T) / 2
    sigma = gaussian_mech_sigma(sensitivity(n, neighboring), epsilon, delta)
    if sigma == 0.0:
        return m_sec.copy()
    if rng is None:
        raise ContractError("privatize_second_moment needs an rng when the noise scale is positive")
    d = m_sec.shape[0]
    upper = np.triu_indices(d)
    noise = np.zeros((d, d))
    noise[upper] = rng.standard_normal(upper[0].shape[0]) * sigma
    noise = noise + np.triu(noise, 1).T
    return m_sec + noise


def privatize_stats(stats: FeatureStats, eps1: float, delta1: float, eps2: float, delta2: float,
                    rng: Optional[np.random.Generator], neighboring: str = "add_remove",
                    mean_only: bool = False, zero_noise: bool = False) -> FeatureStats:
    if min(eps1, delta1) <= 0 or (not mean_only and min(eps2, delta2) <= 0):
        raise ContractError("DP-FID budgets must be positive")
    if zero_noise:
        mu, m_sec = stats.mu.copy(), stats.m_sec.copy()
    else:
        mu = privatize_mean(stats.mu, stats.n, eps1, delta1, neighboring, rng)
        m_sec = stats.m_sec.copy() if mean_only else \
            privatize_second_moment(stats.m_sec, stats.n, eps2, delta2, neighboring, rng)
    budget = (eps1, delta1, 0.0, 0.0) if mean_only else (eps1, delta1, eps2, delta2)
    return FeatureStats(n=stats.n, mu=mu, m_sec=m_sec, privatized=True, budget=budget)


@dataclass(frozen=True)
class DPFIDResult:
    value: float
    epsilon: float
    delta: float
    mean_only: bool = False


def _score(private: FeatureStats, public: FeatureStats, mean_only: bool, floor: float) -> float:
    if public.dim != private.dim:
        raise DimensionError(f"feature dims differ: {public.dim} vs {private.dim}")
    if mean_only:
        diff = public.mu - private.mu
        return float(diff @ diff)
    return _frechet(public.mu, psd_repair(public.covariance, floor),
                    private.mu, psd_repair(private.covariance, floor))


def dp_fid(private: FeatureStats, public: FeatureStats, eps1: float, delta1: float,
           eps2: float, delta2: float, rng: Optional[np.random.Generator],
           neighboring: str = "add_remove", mean_only: bool = False, zero_noise: bool = False,
           floor: float = AppConfig.PSD_FLOOR) -> DPFIDResult:
    """
    FID between public statistics and privatized private statistics. The composed
    budget is (eps1 + eps2, delta1 + delta2), or (eps1, delta1) with mean_only.
    """
    noisy = privatize_stats(private, eps1, delta1, eps2, delta2, rng, neighboring,
                            mean_only=mean_only, zero_noise=zero_noise)
    value = _score(noisy, public, mean_only, floor)
    if mean_only:
        return DPFIDResult(value=value, epsilon=eps1, delta=delta1, mean_only=True)
    return DPFIDResult(value=value, epsilon=eps1 + eps2, delta=delta1 + delta2)


@dataclass(frozen=True)
class PublicSelection:
    best: str
    scores: Dict[str, float]
    epsilon: float
    delta: float


def select_public(candidates: Mapping[str, FeatureStats], private: FeatureStats, epsilon: float,
                  delta: float, rng: np.random.Generator, neighboring: str = "add_remove",
                  mean_only: bool = False, floor: float = AppConfig.PSD_FLOOR) -> PublicSelection:
    """Privatize the private statistics once and rank every public candidate against them."""
    if not candidates:
        raise ContractError("select_public needs at least one candidate")
    if mean_only:
        noisy = privatize_stats(private, epsilon, delta, 0.0, 0.0, rng, neighboring, mean_only=True)
    else:
        noisy = privatize_stats(private, epsilon / 2, delta / 2, epsilon / 2, delta / 2, rng,
                                neighboring)
    scores = {name: _score(noisy, stats, mean_only, floor) for name, stats in sorted(candidates.items())}
    best = min(scores, key=scores.get)
    logger.info("public candidate ranking: %s", ", ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    return PublicSelection(best=best, scores=scores, epsilon=epsilon, delta=delta)
