"""
Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism, noise
calibration for a target epsilon, and the analytic Gaussian mechanism.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special, stats

from utils.config import AppConfig
from utils.errors import CalibrationError, ContractError

logger = logging.getLogger(__name__)

CLASSIC = "classic"
IMPROVED = "improved"
CONVERSIONS = (CLASSIC, IMPROVED)


def default_orders() -> Tuple[float, ...]:
    return tuple(AppConfig.RDP_FRACTIONAL_ORDERS) + tuple(
        float(a) for a in range(2, AppConfig.RDP_MAX_ORDER + 1)
    )


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(mu(z)/mu0(z))^alpha] by binomial expansion, summed in log space."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_comb = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_comb + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma ** 2)
    return float(special.logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """
    Per-step RDP at order alpha. Integer orders and q = 1 are exact; otherwise a
    fractional order is bounded above by the next integer order (RDP is
    non-decreasing in alpha).
    """
    if alpha <= 1:
        raise ContractError(f"RDP order must exceed 1, got {alpha}")
    if not 0 < q <= 1:
        raise ContractError(f"sampling rate must lie in (0, 1], got {q}")
    if sigma <= 0:
        raise ContractError(f"noise multiplier must be > 0, got {sigma}")
    if q == 1.0:
        return alpha / (2 * sigma ** 2)
    order = int(math.ceil(alpha))
    return _log_a_int(q, sigma, order) / (order - 1)


@dataclass(frozen=True)
class RDPCurve:
    orders: Tuple[float, ...]
    values: Tuple[float, ...]

    @classmethod
    def for_mechanism(cls, q: float, sigma: float,
                      orders: Optional[Sequence[float]] = None) -> "RDPCurve":
        orders = tuple(orders or default_orders())
        cache = {}
        values = []
        for alpha in orders:
            key = alpha if q == 1.0 else int(math.ceil(alpha))
            if key not in cache:
                cache[key] = rdp_subsampled_gaussian(q, sigma, alpha)
            values.append(cache[key])
        return cls(orders=orders, values=tuple(values))

    def compose(self, steps: int) -> "RDPCurve":
        if steps < 0:
            raise ContractError("step count must be >= 0")
        return RDPCurve(self.orders, tuple(v * steps for v in self.values))


def _conversion_terms(orders: np.ndarray, delta: float, conversion: str) -> np.ndarray:
    if conversion == CLASSIC:
        return math.log(1.0 / delta) / (orders - 1)
    if conversion == IMPROVED:
        return np.log1p(-1.0 / orders) - np.log(delta * orders) / (orders - 1)
    raise ContractError(f"unknown RDP conversion {conversion!r}")


def epsilon_at_delta(curve: RDPCurve, delta: float, conversion: str = IMPROVED) -> float:
    """Smallest epsilon over the order grid for the composed curve."""
    if not 0 < delta < 1:
        raise ContractError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = np.asarray(curve.values) + _conversion_terms(orders, delta, conversion)
    return float(max(0.0, np.min(eps)))


def best_order(curve: RDPCurve, delta: float, conversion: str = IMPROVED) -> float:
    orders = np.asarray(curve.orders, dtype=np.float64)
    eps = np.asarray(curve.values) + _conversion_terms(orders, delta, conversion)
    return float(orders[int(np.argmin(eps))])


def compute_epsilon(q: float, sigma: float, steps: int, delta: float,
                    conversion: str = IMPROVED) -> float:
    if steps == 0:
        return conversion_floor(delta, conversion)
    if sigma == 0:
        return math.inf
    curve = RDPCurve.for_mechanism(q, sigma).compose(steps)
    return epsilon_at_delta(curve, delta, conversion)


def conversion_floor(delta: float, conversion: str = IMPROVED) -> float:
    """Epsilon at zero steps: the part of the conversion no amount of noise removes."""
    orders = default_orders()
    return epsilon_at_delta(RDPCurve(orders, (0.0,) * len(orders)), delta, conversion)


def calibrate_sigma(q: float, steps: int, delta: float, target_epsilon: float,
                    conversion: str = IMPROVED, rtol: float = AppConfig.CALIBRATION_RTOL,
                    max_iter: int = 200) -> float:
    """Bisection for the sigma whose epsilon is within `rtol` of the target."""
    if target_epsilon <= 0:
        raise CalibrationError(f"target epsilon must be > 0, got {target_epsilon}")
    if steps <= 0:
        raise CalibrationError("cannot calibrate noise for zero steps")
    floor = conversion_floor(delta, conversion)
    if target_epsilon <= floor:
        raise CalibrationError(f"target epsilon {target_epsilon} is at or below the conversion "
                               f"floor {floor:.4f} for delta={delta}")

    def eps(sigma: float) -> float:
        return compute_epsilon(q, sigma, steps, delta, conversion)

    lo, hi = 0.5, 1.0
    eps_lo = eps(lo)
    while eps_lo <= target_epsilon:
        lo /= 2
        if lo < 1e-4:
            raise CalibrationError("target epsilon reachable without noise at this resolution")
        eps_lo = eps(lo)
    eps_hi = eps(hi)
    while eps_hi > target_epsilon:
        lo, eps_lo = hi, eps_hi
        hi *= 2
        if hi > 1e6:
            raise CalibrationError(f"no sigma below 1e6 reaches epsilon {target_epsilon}")
        eps_hi = eps(hi)

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        eps_mid = eps(mid)
        if not eps_hi <= eps_mid <= eps_lo:
            raise CalibrationError(f"epsilon is not monotone in sigma near {mid:.6g}")
        if abs(eps_mid - target_epsilon) / target_epsilon < rtol:
            logger.debug("calibrated sigma=%.6g (eps=%.6g)", mid, eps_mid)
            return mid
        if eps_mid > target_epsilon:
            lo, eps_lo = mid, eps_mid
        else:
            hi, eps_hi = mid, eps_mid
    raise CalibrationError(f"bisection did not converge to epsilon {target_epsilon}")


# ---------------------------------------------------------------------------
# Analytic Gaussian mechanism
# ---------------------------------------------------------------------------

def gaussian_delta(sigma: float, epsilon: float, sensitivity: float = 1.0) -> float:
    """Exact delta of the Gaussian mechanism with noise std sigma at a given epsilon."""
    a = sensitivity / (2 * sigma) - epsilon * sigma / sensitivity
    b = -sensitivity / (2 * sigma) - epsilon * sigma / sensitivity
    return float(stats.norm.cdf(a) - math.exp(epsilon) * stats.norm.cdf(b))


def gaussian_mech_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest noise std making the Gaussian mechanism (epsilon, delta)-DP."""
    if sensitivity <= 0:
        raise ContractError(f"sensitivity must be > 0, got {sensitivity}")
    if not 0 < delta < 1:
        raise ContractError(f"delta must lie in (0, 1), got {delta}")
    if epsilon <= 0:
        raise ContractError(f"epsilon must be > 0, got {epsilon}")
    if math.isinf(epsilon):
        return 0.0

    def excess(sigma: float) -> float:
        return gaussian_delta(sigma, epsilon) - delta

    lo, hi = 1.0, 1.0
    while excess(lo) <= 0:
        lo /= 2
    while excess(hi) > 0:
        hi *= 2
    sigma = optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=1e-13, maxiter=500)
    return sigma * sensitivity


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

@dataclass
class PrivacyLedger:
    """Parameters of one DP-SGD run, enough to recompute its epsilon."""

    q: float
    sigma: float
    steps: int = 0
    delta: float = 1e-5
    conversion: str = IMPROVED

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ContractError(f"sampling rate must lie in (0, 1], got {self.q}")
        if self.sigma < 0 or self.steps < 0:
            raise ContractError("ledger needs sigma >= 0 and steps >= 0")

    def record_step(self) -> None:
        self.steps += 1

    def epsilon(self) -> float:
        return compute_epsilon(self.q, self.sigma, self.steps, self.delta, self.conversion)

    def to_meta(self) -> dict:
        meta = asdict(self)
        eps = self.epsilon()
        meta["epsilon"] = None if math.isinf(eps) else eps
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "PrivacyLedger":
        return cls(q=meta["q"], sigma=meta["sigma"], steps=meta["steps"], delta=meta["delta"],
                   conversion=meta.get("conversion", IMPROVED))
