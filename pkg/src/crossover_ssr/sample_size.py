"""Critical values, per-patient information and the sample size function."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import numerics as nm
from .design import DesignError, HypothesisSpec, TrialDesign
from .mixed_model import BlockCovariance, PatientAllocation, build_design_matrix, gls_fit

ROUNDING_RULES = ("sequence", "block", "integer")


@dataclass(frozen=True, eq=False)
class DesignInformation:
    unit_info: np.ndarray
    """Per-patient information for each tau_d under equal allocation."""
    q_corr: np.ndarray
    e: Optional[float] = None
    alpha_star: Optional[float] = None


def _corr(V):
    s = np.sqrt(np.diag(V))
    C = V / np.outer(s, s)
    np.fill_diagonal(C, 1.0)
    return C


def tau_covariance(design: TrialDesign, sigma_e2, sigma_b2) -> np.ndarray:
    """Var(tau_hat) for one patient on each sequence."""
    if not sigma_e2 > 0:
        raise DesignError("sigma_e2 must be positive")
    alloc = PatientAllocation(np.arange(design.K))
    X = build_design_matrix(design, alloc)
    _, V = gls_fit(np.zeros(X.shape[0]), X, BlockCovariance(float(sigma_e2), float(sigma_b2), design.P))
    return V[design.P:, design.P:]


def unit_information(design: TrialDesign, sigma_e2, sigma_b2, alpha=None, direction="greater"):
    V = tau_covariance(design, sigma_e2, sigma_b2)
    info = 1.0 / (design.K * np.diag(V))
    C = _corr(V)
    if alpha is None:
        return DesignInformation(info, C)
    e, a_star = design_critical_value(C, alpha, direction)
    return DesignInformation(info, C, e, a_star)


def _key(C):
    return tuple(np.round(np.asarray(C, dtype=float), 12).ravel().tolist()), np.shape(C)[0]


@lru_cache(maxsize=4096)
def _equi(prob, key, M, nu):
    C = np.array(key, dtype=float).reshape(M, M)
    return nm.equicoordinate_quantile(prob, C, nu=nu)


def design_critical_value(q_corr, alpha, direction="greater"):
    """Equicoordinate normal critical value e and the implied per-test level."""
    if not 0 < alpha < 1:
        raise DesignError("alpha must lie in (0, 1)")
    C = np.atleast_2d(np.asarray(q_corr, dtype=float))
    prob = 1.0 - alpha / 2.0 if direction == "two_sided" else 1.0 - alpha
    key, M = _key(C)
    e = _equi(prob, key, M, None)
    return e, float(nm.std_normal_cdf(-e))


def _abs_delta(hyp):
    if hyp.delta == 0:
        raise DesignError("delta must be nonzero")
    return abs(hyp.delta)


def required_n_pairwise(design, sigma_e2, sigma_b2, hyp: HypothesisSpec, info=None) -> float:
    """Real-valued N giving power 1 - beta for the first comparison.

    A nonpositive sigma_e2 estimate means no further patients are needed,
    so 0 is returned and the clamp takes over.
    """
    delta = _abs_delta(hyp)
    if not sigma_e2 > 0:
        return 0.0
    if info is None or info.e is None:
        info = unit_information(design, sigma_e2, sigma_b2, hyp.alpha, hyp.direction)
    z = info.e + nm.std_normal_quantile(1.0 - hyp.beta)
    return z * z / (delta * delta * info.unit_info[0])


def familywise_power(N, info: DesignInformation, delta):
    """P(reject at least one null) when every tau_d equals delta."""
    shift = abs(delta) * np.sqrt(N * info.unit_info)
    return 1.0 - nm.mvn_cdf(info.e - shift, info.q_corr).value


def pairwise_power(N, info: DesignInformation, delta):
    return float(nm.std_normal_cdf(abs(delta) * math.sqrt(N * info.unit_info[0]) - info.e))


def required_n_familywise(design, sigma_e2, sigma_b2, hyp: HypothesisSpec, info=None) -> int:
    delta = _abs_delta(hyp)
    if not sigma_e2 > 0:
        return 0
    if info is None or info.e is None:
        info = unit_information(design, sigma_e2, sigma_b2, hyp.alpha, hyp.direction)
    n_pair = required_n_pairwise(design, sigma_e2, sigma_b2, hyp, info)
    upper = max(10 * math.ceil(n_pair), 2)
    target = 1.0 - hyp.beta
    return nm.min_integer_satisfying(lambda n: familywise_power(n, info, delta) >= target, 1, upper)


def required_n(design, sigma_e2, sigma_b2, hyp: HypothesisSpec, info=None) -> float:
    if hyp.power_kind == "familywise":
        return float(required_n_familywise(design, sigma_e2, sigma_b2, hyp, info))
    return required_n_pairwise(design, sigma_e2, sigma_b2, hyp, info)


def inflation_factor(alpha, beta, nu) -> float:
    if not (0 < alpha < 1 and 0 < beta < 1):
        raise DesignError("alpha and beta must lie in (0, 1)")
    if not nu >= 1:
        raise DesignError("degrees of freedom must be >= 1")
    t = nm.student_t_quantile(1 - alpha, nu) + nm.student_t_quantile(1 - beta, nu)
    z = nm.std_normal_quantile(1 - alpha) + nm.std_normal_quantile(1 - beta)
    return float((t / z) ** 2)


def analysis_df(N, P, D) -> int:
    return (N - 1) * (P - 1) - (D - 1)


@dataclass(frozen=True)
class ReestimationPolicy:
    n_int: int
    n_max: int
    method: str = "unblinded"
    rounding: str = "sequence"
    """'sequence': multiple of K; 'block': multiple of n_B; 'integer': plain ceiling."""
    n_B: Optional[int] = None
    use_inflation_factor: bool = False
    inflation_alpha: str = "alpha"
    """Level plugged into the inflation factor: 'alpha' (as printed) or 'alpha_star'."""

    def __post_init__(self):
        if not 0 < self.n_int <= self.n_max:
            raise DesignError("need 0 < n_int <= n_max")
        if self.rounding not in ROUNDING_RULES:
            raise DesignError(f"rounding must be one of {ROUNDING_RULES}")
        if self.inflation_alpha not in ("alpha", "alpha_star"):
            raise DesignError("inflation_alpha must be 'alpha' or 'alpha_star'")
        if self.method == "block" or self.rounding == "block":
            if not self.n_B or self.n_B < 2:
                raise DesignError("block randomisation needs n_B >= 2")
            if self.n_int % self.n_B:
                raise DesignError(f"n_int={self.n_int} is not a multiple of n_B={self.n_B}")

    def step(self, design: TrialDesign) -> int:
        if self.rounding == "sequence":
            return design.K
        if self.rounding == "block":
            return int(self.n_B)
        return 1

    def check_against(self, design: TrialDesign):
        if self.rounding == "sequence" and self.n_int % design.K:
            raise DesignError(f"n_int={self.n_int} is not a multiple of K={design.K}")


def round_up(n, step):
    return int(-(-n // step) * step)


def reestimate(policy: ReestimationPolicy, sigma_e2_hat, sigma_b2_trunc, design: TrialDesign,
               hyp: HypothesisSpec, info=None) -> int:
    """Clamp the re-estimated sample size to [n_int, n_max] and round it up."""
    if not (np.isfinite(sigma_e2_hat) and np.isfinite(sigma_b2_trunc)) or sigma_b2_trunc < 0:
        raise DesignError("estimates must be finite with a nonnegative sigma_b2")
    if sigma_e2_hat > 0 and (info is None or info.e is None):
        info = unit_information(design, sigma_e2_hat, sigma_b2_trunc, hyp.alpha, hyp.direction)
    N = required_n(design, sigma_e2_hat, sigma_b2_trunc, hyp, info)
    if policy.use_inflation_factor and N > 0:
        level = hyp.alpha if policy.inflation_alpha == "alpha" else info.alpha_star
        nu = analysis_df(policy.n_int, design.P, design.D)
        N *= inflation_factor(level, hyp.beta, nu)
    return finalise_n(N, policy, design)


def finalise_n(N, policy: ReestimationPolicy, design: TrialDesign) -> int:
    n = math.ceil(N - 1e-9) if np.isfinite(N) else policy.n_max
    n = min(max(n, policy.n_int), policy.n_max)
    return round_up(n, policy.step(design))


def analysis_critical_value(var_beta, N, D, P, alpha, direction="greater"):
    """Equicoordinate multivariate-t critical value for the final Dunnett tests."""
    nu = analysis_df(N, P, D)
    if nu < 1:
        raise DesignError(f"N={N} leaves {nu} residual degrees of freedom")
    V = np.asarray(var_beta, dtype=float)
    V = V[-(D - 1):, -(D - 1):]
    prob = 1.0 - alpha / 2.0 if direction == "two_sided" else 1.0 - alpha
    if D == 2:
        return nm.student_t_quantile(prob, nu)
    key, M = _key(_corr(V))
    return _equi(prob, key, M, float(nu))
