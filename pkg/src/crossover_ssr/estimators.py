"""Interim estimators of the within- and between-patient variances.

Three procedures are provided: an unblinded REML fit, a blinded estimator
built from period-to-period differences and sums with an adjustment for an
assumed treatment effect vector, and a blinded estimator that uses the block
structure of the randomisation so that treatment effects cancel.

The blinded functions also accept a stack of replicates, ``Y`` of shape
(R, n, P), and then return arrays of length R.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .design import TrialDesign, check_period_balance
from .mixed_model import FitResult, PatientAllocation, fit_design

METHODS = ("unblinded", "adjusted_null", "adjusted_alternative", "adjusted_custom", "block")


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InterimData:
    responses: np.ndarray
    """(n_int, P) responses, or (R, n_int, P) for a stack of replicates."""
    allocation: PatientAllocation
    design: TrialDesign

    def __post_init__(self):
        Y = np.asarray(self.responses, dtype=float)
        object.__setattr__(self, "responses", Y)
        if Y.ndim not in (2, 3) or Y.shape[-1] != self.design.P:
            raise EstimatorError(f"responses must have shape (n, {self.design.P})")
        if Y.shape[-2] != self.allocation.N:
            raise EstimatorError("responses and allocation disagree on the number of patients")
        if not np.all(np.isfinite(Y)):
            raise EstimatorError("all periods must be observed for every interim patient")

    @property
    def n(self) -> int:
        return self.responses.shape[-2]


@dataclass(frozen=True, eq=False)
class AdjustmentSpec:
    tau_star: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        t = np.asarray(self.tau_star, dtype=float).reshape(-1)
        object.__setattr__(self, "tau_star", t)
        if self.kind not in ("null", "alternative", "custom"):
            raise EstimatorError(f"unknown adjustment kind {self.kind!r}")
        if t.size < 2 or t[0] != 0.0:
            raise EstimatorError("tau_star needs at least two entries with tau_star[0] = 0")
        if self.kind == "null" and np.any(t != 0):
            raise EstimatorError("a null adjustment must have tau_star = 0")
        if self.kind == "alternative" and np.any(t[1:] != t[1]):
            raise EstimatorError("an alternative adjustment sets every tau_star_d to delta")

    @classmethod
    def null(cls, D):
        return cls(np.zeros(D), "null")

    @classmethod
    def alternative(cls, D, delta):
        return cls(np.r_[0.0, np.full(D - 1, float(delta))], "alternative")


@dataclass(frozen=True)
class VarianceEstimate:
    sigma_e2_hat: float
    sigma_b2_raw: float
    method: str
    converged: bool = True
    n_blocks: int = 0

    @property
    def sigma_b2_trunc(self) -> float:
        return max(0.0, self.sigma_b2_raw)


def unblinded_estimate(data: InterimData) -> VarianceEstimate:
    fit = unblinded_fit(data)
    return VarianceEstimate(fit.sigma_e2_hat, fit.sigma_b2_hat, "unblinded", fit.converged)


def unblinded_fit(data: InterimData) -> FitResult:
    if data.responses.ndim != 2:
        raise EstimatorError("the unblinded estimator takes one replicate at a time")
    return fit_design(data.design, data.responses, data.allocation)


def adjustment_terms(design: TrialDesign, tau_star, n):
    """(within, between, first-period) correction terms for a given tau_star."""
    Td, Ts, first = _tau_sums(design, tau_star)
    K, P = design.K, design.P
    # n / (2K(P-1)(n-1)), arranged as in adjusted_blinded_raw
    m, den = n * n / K, n * 2.0 * (P - 1) * (n - 1)
    # the divisor is K**2: it comes from the squared mean of the first-period column
    return m * Td / den, m * Ts / den, 2.0 * n / (K * K * (n - 1)) * first ** 2


def _tau_sums(design, tau_star):
    tau_star = np.asarray(tau_star, dtype=float)
    if tau_star.shape != (design.D,):
        raise EstimatorError(f"tau_star must have {design.D} entries")
    T = tau_star[design.array]  # (K, P)
    return (float(((T[:, 1:] - T[:, :-1]) ** 2).sum()), float(((T[:, 1:] + T[:, :-1]) ** 2).sum()),
            float(T[:, 0].sum()))


def _diff_sum(Y):
    return Y[..., 1:] - Y[..., :-1], Y[..., 1:] + Y[..., :-1]


def _scaled_ss(x):
    """n * sum((x - mean)**2) over the patient axis, summed over periods.

    Uses the first patient as a shift, so identical rows give exactly zero
    and exactly representable data give exact sums.
    """
    n = x.shape[-2]
    d = x - x[..., :1, :]
    s1 = d.sum(axis=-2)
    s2 = (d * d).sum(axis=-2)
    return (n * s2 - s1 * s1).sum(axis=-1)


def adjusted_blinded_raw(Y, design: TrialDesign, tau_star):
    """Vectorised core: returns (sigma_e2_hat, sigma_b2_raw), arrays if Y is 3-d.

    Both estimates are written over the common denominator
    n * 2(P-1)(n-1), so every correction is subtracted before the single
    final division. With equal allocation n**2/K and (n/K)**2 are integers,
    which keeps the numerators exact for exactly representable data.
    """
    n, P, K = Y.shape[-2], Y.shape[-1], design.K
    p, q = _diff_sum(Y)
    den = n * 2.0 * (P - 1) * (n - 1)
    Td, Ts, first = _tau_sums(design, tau_star)
    m = n * n / K
    num_e = _scaled_ss(p) - m * Td
    # add-back 2n/(K^2(n-1)) * first^2, times den
    c = 4.0 * (P - 1) * (n / K) ** 2
    se2 = num_e / den
    sb2 = 0.5 * ((_scaled_ss(q) - m * Ts) - num_e + c * first ** 2) / den
    return se2, sb2


def _check_adjusted(data: InterimData):
    design = data.design
    if not check_period_balance(design).balanced:
        raise EstimatorError("the adjusted estimator needs a period-balanced sequence set")
    counts = data.allocation.counts(design.K)
    if np.any(counts != counts[0]):
        raise EstimatorError(f"the adjusted estimator needs equal allocation, got counts {counts.tolist()}")
    if data.n < 2:
        raise EstimatorError("need at least two interim patients")


def adjusted_blinded_estimate(data: InterimData, spec: AdjustmentSpec):
    _check_adjusted(data)
    se2, sb2 = adjusted_blinded_raw(data.responses, data.design, spec.tau_star)
    if data.responses.ndim == 3:
        return se2, sb2
    return VarianceEstimate(float(se2), float(sb2), f"adjusted_{spec.kind}")


def block_blinded_raw(Y, block, n_blocks):
    """Vectorised core over block labels 0..n_blocks-1 (blocks may differ in size)."""
    n, P = Y.shape[-2], Y.shape[-1]
    p, q = _diff_sum(Y)
    sizes = np.bincount(block, minlength=n_blocks).astype(float)
    first = np.zeros(n_blocks, dtype=np.int64)
    first[block[::-1]] = np.arange(n)[::-1]
    member = np.zeros((n, n_blocks))
    member[np.arange(n), block] = 1.0

    def within(x):
        # shift by each block's first patient, then n_B * SS = n_B * sum(d^2) - sum(d)^2
        d = x - x[..., first[block], :]
        s1 = np.einsum("ib,...ij->...bj", member, d)
        s2 = np.einsum("ib,...ij->...bj", member, d * d)
        return ((sizes[:, None] * s2 - s1 * s1) / sizes[:, None]).sum(axis=(-2, -1))

    den = 2.0 * (P - 1) * (n - n_blocks)
    se2 = within(p) / den
    sb2 = 0.5 * (within(q) / den - se2)
    return se2, sb2


def block_blinded_estimate(data: InterimData):
    block = data.allocation.block
    if block is None:
        raise EstimatorError("block labels are required for the block estimator")
    labels, block = np.unique(block, return_inverse=True)
    sizes = np.bincount(block)
    if np.any(sizes < 2):
        raise EstimatorError("every block needs at least two patients")
    se2, sb2 = block_blinded_raw(data.responses, block, labels.size)
    if data.responses.ndim == 3:
        return se2, sb2
    return VarianceEstimate(float(se2), float(sb2), "block", True, int(labels.size))


def interim_estimate(data: InterimData, method: str, spec: Optional[AdjustmentSpec] = None):
    """Dispatch on the method names accepted in scenario configs."""
    if method == "unblinded":
        return unblinded_estimate(data)
    if method == "block":
        return block_blinded_estimate(data)
    if method.startswith("adjusted_"):
        if spec is None:
            raise EstimatorError(f"{method} needs an AdjustmentSpec")
        return adjusted_blinded_estimate(data, spec)
    raise EstimatorError(f"unknown method {method!r}; choose from {METHODS}")
