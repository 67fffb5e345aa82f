"""Linear mixed model for crossover data with a random patient intercept.

Fixed effects are ordered (mu0, pi_2..pi_P, tau_1..tau_{D-1}). Each patient
contributes a P x P covariance block sigma_e2 * I + sigma_b2 * J. All
computations work patient by patient; no NP x NP matrix is ever formed.

REML fitting rotates each patient's responses by an orthonormal Helmert
matrix, which diagonalises the block into one between-patient component with
variance sigma_e2 + P * sigma_b2 and P - 1 within-patient components with
variance sigma_e2. The restricted likelihood then depends on the data only
through a handful of additive sums, and sigma_e2 can be profiled out, leaving
a one-dimensional search over v = P * sigma_b2 / sigma_e2 >= 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import kernels
from .design import TrialDesign


class MixedModelError(ValueError):
    pass


class SingularInformationError(MixedModelError):
    pass


@dataclass(frozen=True, eq=False)
class PatientAllocation:
    """Sequence index (0-based) of every patient, plus optional block labels."""

    sequence: np.ndarray
    block: Optional[np.ndarray] = None
    uneven: bool = False
    """True when a block scheme could not give every sequence the same count."""

    def __post_init__(self):
        seq = np.asarray(self.sequence, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "sequence", seq)
        if self.block is not None:
            blk = np.asarray(self.block, dtype=np.int64).reshape(-1)
            if blk.shape != seq.shape:
                raise MixedModelError("block labels must match the number of patients")
            object.__setattr__(self, "block", blk)

    @property
    def N(self) -> int:
        return int(self.sequence.shape[0])

    def counts(self, K: int) -> np.ndarray:
        return np.bincount(self.sequence, minlength=K)

    def check(self, design: TrialDesign):
        if self.N and (self.sequence.min() < 0 or self.sequence.max() >= design.K):
            raise MixedModelError(f"sequence indices must lie in 0..{design.K - 1}")

    def concat(self, other: "PatientAllocation") -> "PatientAllocation":
        if (self.block is None) != (other.block is None):
            raise MixedModelError("cannot join allocations with and without block labels")
        block = None
        if self.block is not None:
            shift = int(self.block.max()) + 1 if self.N else 0
            block = np.concatenate([self.block, other.block + shift])
        return PatientAllocation(np.concatenate([self.sequence, other.sequence]), block,
                                 self.uneven or other.uneven)


@dataclass(frozen=True)
class BlockCovariance:
    sigma_e2: float
    sigma_b2: float
    P: int

    def matrix(self) -> np.ndarray:
        return self.sigma_e2 * np.eye(self.P) + self.sigma_b2 * np.ones((self.P, self.P))

    def logdet(self) -> float:
        return (self.P - 1) * math.log(self.sigma_e2) + math.log(self.sigma_e2 + self.P * self.sigma_b2)


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    var_beta: np.ndarray
    sigma_e2_hat: float
    sigma_b2_hat: float
    reml_loglik: float
    converged: bool
    iterations: int
    P: int = 0
    D: int = 0

    @property
    def tau_hat(self) -> np.ndarray:
        return self.beta_hat[self.P:]

    @property
    def var_tau(self) -> np.ndarray:
        return self.var_beta[self.P:, self.P:]


def n_fixed(P: int, D: int) -> int:
    return 1 + (P - 1) + (D - 1)


def _sequence_rows(seq, P, D):
    q = n_fixed(P, D)
    X = np.zeros((P, q))
    X[:, 0] = 1.0
    for j, d in enumerate(seq):
        if j > 0:
            X[j, j] = 1.0
        if d > 0:
            X[j, P - 1 + d] = 1.0
    return X


def build_design_matrix(design: TrialDesign, alloc: PatientAllocation) -> np.ndarray:
    """Fixed-effects matrix, patient-major then period (NP rows)."""
    alloc.check(design)
    per_seq = np.stack([_sequence_rows(s, design.P, design.D) for s in design.sequences])
    return per_seq[alloc.sequence].reshape(alloc.N * design.P, -1)


def block_sigma_inverse(cov: BlockCovariance) -> np.ndarray:
    if not cov.sigma_e2 > 0:
        raise MixedModelError("sigma_e2 must be positive")
    P = cov.P
    c = cov.sigma_b2 / (cov.sigma_e2 + P * cov.sigma_b2)
    return (np.eye(P) - c * np.ones((P, P))) / cov.sigma_e2


def _split(y, X, P):
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if y.ndim != 1 or y.shape[0] % P or X.shape[0] != y.shape[0]:
        raise MixedModelError("y and X must have N*P rows")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise MixedModelError("non-finite input")
    N = y.shape[0] // P
    return y.reshape(N, P), X.reshape(N, P, X.shape[1])


def _chol_inverse(M):
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularInformationError("information matrix is singular; a parameter is not estimable")
    d = np.diag(L)
    if d.min() <= 1e-10 * d.max():
        raise SingularInformationError("information matrix is singular; a parameter is not estimable")
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, 2.0 * np.log(d).sum()


def gls_fit(y, X, cov: BlockCovariance):
    """GLS estimate and its covariance for known variance components."""
    Y, Xr = _split(y, X, cov.P)
    Si = block_sigma_inverse(cov)
    SX = np.einsum("jk,nkq->njq", Si, Xr)
    info = np.einsum("njp,njq->pq", Xr, SX)
    score = np.einsum("njq,nj->q", SX, Y)
    var_beta, _ = _chol_inverse(info)
    beta = var_beta @ score
    return beta, var_beta


def reml_loglik(y, X, sigma_e2, sigma_b2, P) -> float:
    """-1/2 log|S| - 1/2 r' S^-1 r - 1/2 log|X' S^-1 X| (additive constant omitted)."""
    if not (np.isfinite(sigma_e2) and np.isfinite(sigma_b2)):
        raise MixedModelError("non-finite variance components")
    if not sigma_e2 > 0 or sigma_b2 < 0:
        raise MixedModelError("need sigma_e2 > 0 and sigma_b2 >= 0")
    cov = BlockCovariance(float(sigma_e2), float(sigma_b2), int(P))
    Y, Xr = _split(y, X, P)
    Si = block_sigma_inverse(cov)
    info = np.einsum("njp,jk,nkq->pq", Xr, Si, Xr)
    inv, logdet_info = _chol_inverse(info)
    beta = inv @ np.einsum("njq,jk,nk->q", Xr, Si, Y)
    r = Y - Xr @ beta
    quad = np.einsum("nj,jk,nk->", r, Si, r)
    return -0.5 * (Y.shape[0] * cov.logdet() + quad + logdet_info)


# ---------------------------------------------------------------------------
# REML via sufficient statistics

@lru_cache(maxsize=32)
def helmert(P: int) -> np.ndarray:
    """Orthonormal P x P matrix whose first row is constant."""
    H = np.zeros((P, P))
    H[0] = 1.0 / math.sqrt(P)
    for j in range(1, P):
        H[j, :j] = 1.0
        H[j, j] = -j
        H[j] /= math.sqrt(j * (j + 1))
    return H


_GRID = np.concatenate([[0.0], np.logspace(-6, 6, 49)])
_XTOL = 1e-10
_MAXITER = 200


@dataclass(frozen=True, eq=False)
class SufficientStats:
    A: np.ndarray
    W: np.ndarray
    cb: np.ndarray
    cw: np.ndarray
    Sb: float
    Sw: float
    n_pat: int
    P: int

    @property
    def n_obs(self) -> int:
        return self.n_pat * self.P

    @classmethod
    def from_matrix(cls, y, X, P):
        Y, Xr = _split(y, X, P)
        H = helmert(P)
        Z = Y @ H.T
        Xt = np.einsum("jk,nkq->njq", H, Xr)
        xb, Xw = Xt[:, 0, :], Xt[:, 1:, :]
        return cls(xb.T @ xb, np.einsum("njp,njq->pq", Xw, Xw), xb.T @ Z[:, 0],
                   np.einsum("njq,nj->q", Xw, Z[:, 1:]), float(Z[:, 0] @ Z[:, 0]),
                   float((Z[:, 1:] ** 2).sum()), Y.shape[0], P)

    def __add__(self, other):
        return SufficientStats(self.A + other.A, self.W + other.W, self.cb + other.cb,
                               self.cw + other.cw, self.Sb + other.Sb, self.Sw + other.Sw,
                               self.n_pat + other.n_pat, self.P)


class ModelFrame:
    """Per-sequence pieces of the Helmert-rotated design, built once per design."""

    def __init__(self, design: TrialDesign):
        self.design = design
        P, D = design.P, design.D
        self.P, self.D, self.K = P, D, design.K
        self.q = n_fixed(P, D)
        self.H = helmert(P)
        rows = np.stack([_sequence_rows(s, P, D) for s in design.sequences])  # (K, P, q)
        Xt = np.einsum("jk,skq->sjq", self.H, rows)
        self.xb = Xt[:, 0, :]
        self.Xw = Xt[:, 1:, :]
        self.AA = np.einsum("sp,sq->spq", self.xb, self.xb)
        self.WW = np.einsum("sjp,sjq->spq", self.Xw, self.Xw)

    def stats(self, Y, sequence) -> SufficientStats:
        Y = np.asarray(Y, dtype=float)
        sequence = np.asarray(sequence, dtype=np.int64)
        Z = Y @ self.H.T
        n_k = np.bincount(sequence, minlength=self.K).astype(float)
        zsum = np.zeros((self.K, self.P))
        np.add.at(zsum, sequence, Z)
        A = np.tensordot(n_k, self.AA, axes=1)
        W = np.tensordot(n_k, self.WW, axes=1)
        cb = self.xb.T @ zsum[:, 0]
        cw = np.einsum("sjq,sj->q", self.Xw, zsum[:, 1:])
        return SufficientStats(A, W, cb, cw, float(Z[:, 0] @ Z[:, 0]), float((Z[:, 1:] ** 2).sum()),
                               Y.shape[0], self.P)


_FRAMES: dict = {}


def model_frame(design: TrialDesign) -> ModelFrame:
    frame = _FRAMES.get(design)
    if frame is None:
        frame = _FRAMES[design] = ModelFrame(design)
    return frame


def fit_stats(st: SufficientStats, D: int = 0) -> FitResult:
    """Maximise the restricted likelihood given sufficient statistics."""
    q = st.cb.shape[0]
    dfr = st.n_obs - q
    if dfr <= 0 or st.n_pat < 2:
        raise MixedModelError("too few observations to fit the model")
    v, ll, conv, nev = kernels.reml_profile_fit(st.A, st.W, st.cb, st.cw, st.Sb, st.Sw,
                                                 float(st.n_pat), float(st.n_obs), _GRID, _XTOL, _MAXITER)
    if not np.isfinite(ll):
        raise SingularInformationError("information matrix is singular; a parameter is not estimable")
    g = 1.0 + v
    M = st.A / g + st.W
    Minv, _ = _chol_inverse(M)
    r = st.cb / g + st.cw
    beta = Minv @ r
    Q = max(st.Sb / g + st.Sw - r @ beta, 0.0)
    se2 = Q / dfr
    return FitResult(beta, se2 * Minv, se2, v * se2 / st.P, float(ll), bool(conv), int(nev), st.P, D)


def reml_fit(y, X, P, D=None) -> FitResult:
    """REML fit of the crossover model to stacked responses ``y`` and matrix ``X``."""
    st = SufficientStats.from_matrix(y, X, P)
    if D is None:
        D = st.cb.shape[0] - P + 1
    return fit_stats(st, D)


def fit_design(design: TrialDesign, Y, alloc: PatientAllocation) -> FitResult:
    """Fast REML fit for responses ``Y`` of shape (N, P) under a known design."""
    frame = model_frame(design)
    return fit_stats(frame.stats(Y, alloc.sequence), design.D)
