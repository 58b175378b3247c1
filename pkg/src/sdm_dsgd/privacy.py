"""Renyi-DP accounting for the masked, sparsified decentralized updates.

The accountant works at a fixed Renyi order alpha = 2 log(1/delta)/eps + 1
(switchable to the "- 1" form), composes additively across iterations, and
converts to (eps, delta)-DP via eps = rho + log(1/delta)/(alpha - 1).

Two closed forms are exposed for T iterations with sensitivity scale G,
local sample count m, subsampling rate tau, and transmit probability p:

* mask-then-sparsify (the default ordering):
      eps_total = 4 alpha p T (tau G / (m sigma))^2 + eps/2
* sparsify-then-mask (the reversed ordering):
      eps_total = 4 alpha T (tau G)^2 / (m^2 sigma^2 p) + eps/2

Their leading terms differ by exactly 1/p^2: sparsifying first amplifies the
l2-sensitivity of the released message, so masking before sparsifying wins.

"Expected" accounting uses the mean active-set size (factor p, respectively
1/p); "worst_case" accounting assumes every coordinate is released.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import DomainError, SigmaFloorViolation

# Subsampling amplification is only valid above this variance floor.
SIGMA2_FLOOR = 1 / 1.25

ACCOUNTING_MODES = ("expected", "worst_case")
ALPHA_MODES = ("plus", "minus")


def renyi_order(epsilon: float, delta: float, mode: str = "plus") -> float:
    """Fixed Renyi order 2 log(1/delta)/epsilon +/- 1 for a target (epsilon, delta)."""
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    if mode not in ALPHA_MODES:
        raise DomainError(f"alpha mode must be one of {ALPHA_MODES}")
    shift = 1.0 if mode == "plus" else -1.0
    alpha = 2.0 * math.log(1.0 / delta) / epsilon + shift
    if alpha <= 1.0:
        raise DomainError("derived Renyi order must exceed 1; lower epsilon or delta")
    return alpha


def gaussian_rdp(alpha: float, sensitivity: float, sigma2: float) -> float:
    """RDP of the Gaussian mechanism: alpha * sensitivity^2 / (2 sigma2)."""
    if alpha <= 1.0:
        raise DomainError("alpha must exceed 1")
    if sigma2 <= 0.0:
        raise DomainError("sigma2 must be positive")
    if sensitivity < 0.0:
        raise DomainError("sensitivity must be nonnegative")
    return alpha * sensitivity**2 / (2.0 * sigma2)


def subsampled_gaussian_rdp(alpha: float, sensitivity: float, sigma2: float, tau: float) -> float:
    """RDP of the subsampled Gaussian mechanism: alpha * tau^2 * sensitivity^2 / sigma2."""
    if alpha <= 1.0:
        raise DomainError("alpha must exceed 1")
    if sensitivity < 0.0:
        raise DomainError("sensitivity must be nonnegative")
    if not 0.0 < tau <= 1.0:
        raise DomainError("tau must lie in (0, 1]")
    if sigma2 < SIGMA2_FLOOR:
        raise SigmaFloorViolation(
            f"sigma2={sigma2} is below the amplification floor {SIGMA2_FLOOR}"
        )
    return alpha * tau**2 * sensitivity**2 / sigma2


def rdp_to_dp(alpha: float, rho: float, delta: float) -> float:
    """Convert an (alpha, rho)-RDP guarantee to epsilon at the given delta."""
    if alpha <= 1.0:
        raise DomainError("alpha must exceed 1")
    if rho < 0.0:
        raise DomainError("rho must be nonnegative")
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    return rho + math.log(1.0 / delta) / (alpha - 1.0)


@dataclass(frozen=True)
class PrivacyParams:
    """Inputs of the per-run accounting.

    sensitivity_g is the l2 bound on a single per-sample gradient; with
    per-coordinate clipping at C it equals sqrt(d) * C.
    """

    sigma2: float
    tau: float
    sensitivity_g: float
    local_samples_m: int
    transmit_prob_p: float
    delta: float
    epsilon_target: float
    accounting: str = "expected"
    alpha_mode: str = "plus"

    def __post_init__(self) -> None:
        if self.sigma2 <= 0.0:
            raise DomainError("sigma2 must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise DomainError("tau must lie in (0, 1]")
        if self.sensitivity_g < 0.0:
            raise DomainError("sensitivity_g must be nonnegative")
        if self.local_samples_m < 1:
            raise DomainError("local_samples_m must be positive")
        if not 0.0 < self.transmit_prob_p <= 1.0:
            raise DomainError("transmit_prob_p must lie in (0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("delta must lie in (0, 1)")
        if self.epsilon_target <= 0.0:
            raise DomainError("epsilon_target must be positive")
        if self.accounting not in ACCOUNTING_MODES:
            raise DomainError(f"accounting must be one of {ACCOUNTING_MODES}")

    def renyi_order(self) -> float:
        return renyi_order(self.epsilon_target, self.delta, self.alpha_mode)

    def with_sigma2(self, sigma2: float) -> "PrivacyParams":
        return replace(self, sigma2=sigma2)


def _released_sensitivity(params: PrivacyParams, reversed_order: bool) -> float:
    """Effective sensitivity of one released update under each ordering.

    The worst case releases every coordinate; the expected case scales the
    active-set size by p. Sparsifying before masking divides the released
    values by p, inflating the sensitivity by the same factor.
    """
    base = 2.0 * params.sensitivity_g / params.local_samples_m
    p = params.transmit_prob_p
    size_factor = 1.0 if params.accounting == "worst_case" else math.sqrt(p)
    if reversed_order:
        return base * size_factor / p
    return base * size_factor


def per_iteration_rho(params: PrivacyParams, alpha: float, reversed_order: bool = False) -> float:
    """RDP cost of one iteration's released messages at order alpha."""
    sensitivity = _released_sensitivity(params, reversed_order)
    return subsampled_gaussian_rdp(alpha, sensitivity, params.sigma2, params.tau)


def sdm_dsgd_epsilon(params: PrivacyParams, iterations: int) -> tuple[float, float]:
    """(epsilon_total, delta) after T iterations of the mask-then-sparsify design."""
    if iterations < 0:
        raise DomainError("iterations must be nonnegative")
    alpha = params.renyi_order()
    rho = iterations * per_iteration_rho(params, alpha)
    return rdp_to_dp(alpha, rho, params.delta), params.delta


def alternative_design_epsilon(params: PrivacyParams, iterations: int) -> tuple[float, float]:
    """(epsilon_total, delta) after T iterations of the sparsify-then-mask design."""
    if iterations < 0:
        raise DomainError("iterations must be nonnegative")
    alpha = params.renyi_order()
    rho = iterations * per_iteration_rho(params, alpha, reversed_order=True)
    return rdp_to_dp(alpha, rho, params.delta), params.delta


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated variance plus whether it clears the amplification floor."""

    sigma2: float
    valid: bool
    floor: float = SIGMA2_FLOOR

    @property
    def status(self) -> str:
        return "ok" if self.valid else "sigma_below_floor"


def calibrate_sigma(params: PrivacyParams, iterations: int) -> CalibrationResult:
    """Variance making T iterations (epsilon_target, delta)-DP in expectation.

    sigma2 = 8 p T G^2 (2 log(1/delta) + eps) / (m^4 eps^2), assuming the
    subsampling rate is 1/m. An invalid result (below the floor) signals that
    epsilon_target is too large or T too small for the guarantee to apply.
    """
    if iterations < 1:
        raise DomainError("iterations must be positive")
    eps = params.epsilon_target
    sigma2 = (
        8.0
        * params.transmit_prob_p
        * iterations
        * params.sensitivity_g**2
        * (2.0 * math.log(1.0 / params.delta) + eps)
        / (params.local_samples_m**4 * eps**2)
    )
    return CalibrationResult(sigma2, sigma2 >= SIGMA2_FLOOR)


def max_iterations(params: PrivacyParams) -> int:
    """Largest iteration budget of the training-privacy trade-off.

    T = floor(m^4 eps^2 / (20 G^2 log(1/delta) p)), with the subsampling rate
    fixed at 1/m as in the calibration rule.
    """
    if params.sensitivity_g <= 0.0:
        raise DomainError("sensitivity_g must be positive here")
    return math.floor(
        params.local_samples_m**4
        * params.epsilon_target**2
        / (
            20.0
            * params.sensitivity_g**2
            * math.log(1.0 / params.delta)
            * params.transmit_prob_p
        )
    )


@dataclass(frozen=True)
class SensitivityBound:
    """Worst-case released-update sensitivity and its expected-case value."""

    worst_case: float
    expected: float


def per_iteration_sensitivity(
    gamma: float, grad_bound: float, local_samples_m: int, transmit_prob: float = 1.0
) -> SensitivityBound:
    """l2-sensitivity of one node's released update.

    Worst case (every coordinate active) is 2 gamma G / m; in expectation the
    active set shrinks it by sqrt(p).
    """
    if gamma < 0.0 or grad_bound < 0.0:
        raise DomainError("gamma and grad_bound must be nonnegative")
    if local_samples_m < 1:
        raise DomainError("local_samples_m must be positive")
    if not 0.0 < transmit_prob <= 1.0:
        raise DomainError("transmit_prob must lie in (0, 1]")
    worst = 2.0 * gamma * grad_bound / local_samples_m
    return SensitivityBound(worst, worst * math.sqrt(transmit_prob))


class PrivacyLedger:
    """Additive RDP accumulator at a fixed order.

    Identical mechanisms are aggregated as (rho, count) pairs so that
    composing T copies yields exactly T * rho. Instances are single-writer,
    many-reader.
    """

    def __init__(self, alpha: float):
        if alpha <= 1.0:
            raise DomainError("alpha must exceed 1")
        self.alpha = alpha
        self._terms: dict[float, int] = {}

    def compose(self, rho: float, times: int = 1) -> None:
        if rho < 0.0:
            raise DomainError("rho must be nonnegative")
        if times < 1:
            raise DomainError("times must be positive")
        self._terms[rho] = self._terms.get(rho, 0) + times

    @property
    def rho_accumulated(self) -> float:
        return sum(rho * count for rho, count in self._terms.items())

    @property
    def iterations_composed(self) -> int:
        return sum(self._terms.values())

    def epsilon(self, delta: float) -> float:
        return rdp_to_dp(self.alpha, self.rho_accumulated, delta)
