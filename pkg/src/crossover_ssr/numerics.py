"""Normal and t distribution functions, rectangle probabilities and searches.

Univariate functions wrap ``scipy.special``. Multivariate rectangle
probabilities P(X <= upper) use either a one-factor quadrature (exact
structure, used whenever the correlation is of the form lam_i * lam_j) or
randomised quasi-Monte Carlo over the separation-of-variables transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from . import kernels

_PRIMES = np.array([2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
                    73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157,
                    163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239])
_NORMAL_NU = 1e10


class NumericsError(ValueError):
    pass


class NotPSDError(NumericsError):
    pass


class NoSignChangeError(NumericsError):
    pass


@dataclass(frozen=True)
class IntegrationSettings:
    qmc_points: int = 2048
    randomisations: int = 8
    target_abs_error: float = 1e-4
    seed: int = 0x5EED5EED
    max_points: int = 2 ** 20

    def __post_init__(self):
        if self.qmc_points < 128:
            raise NumericsError("qmc_points must be at least 128")
        if self.randomisations < 8:
            raise NumericsError("randomisations must be at least 8")
        if not 0 < self.target_abs_error <= 1e-2:
            raise NumericsError("target_abs_error must lie in (0, 1e-2]")


DEFAULT_SETTINGS = IntegrationSettings()


@dataclass(frozen=True)
class MVResult:
    value: float
    error: float
    """Approximate 99% bound on |value - truth| (3 standard errors for QMC)."""
    method: str
    points: int = 0

    def __float__(self):
        return self.value


# ---------------------------------------------------------------------------
# univariate

def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise NumericsError("p must lie strictly between 0 and 1")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def _check_nu(nu):
    if not np.all(np.asarray(nu) >= 1):
        raise NumericsError("degrees of freedom must be >= 1")


def student_t_cdf(x, nu):
    _check_nu(nu)
    return special.stdtr(nu, x)


def student_t_quantile(p, nu):
    _check_nu(nu)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise NumericsError("p must lie strictly between 0 and 1")
    out = special.stdtrit(nu, p)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# searches

def solve_root(f, bracket, tol=1e-12, maxiter=200):
    """Root of a monotone scalar function inside ``bracket``.

    Brent's method; it keeps a sign-changing bracket at every step so it
    cannot fail to converge once the endpoints straddle zero.
    """
    a, b = map(float, bracket)
    fa, fb = f(a), f(b)
    if fa == 0:
        return a
    if fb == 0:
        return b
    if np.sign(fa) == np.sign(fb):
        raise NoSignChangeError(f"f({a})={fa:.3g} and f({b})={fb:.3g} do not straddle zero")
    return optimize.brentq(f, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=maxiter)


def min_integer_satisfying(pred, lower, upper):
    """Smallest integer N in [lower, upper] with pred(N) true (pred monotone)."""
    lower, upper = int(lower), int(upper)
    if lower > upper:
        raise NumericsError("empty search range")
    if not pred(upper):
        raise NumericsError(f"predicate false at the upper search bound {upper}")
    lo, hi = lower, upper
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# correlation helpers

def _validate_corr(corr, M):
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (M, M):
        raise NumericsError(f"correlation must be {M}x{M}, got {corr.shape}")
    if not np.allclose(corr, corr.T, atol=1e-10):
        raise NotPSDError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-10):
        raise NotPSDError("correlation matrix must have a unit diagonal")
    if M > 1 and np.linalg.eigvalsh(corr).min() < -1e-10:
        raise NotPSDError("correlation matrix is not positive semi-definite")
    return 0.5 * (corr + corr.T)


def factor_loadings(corr, tol=1e-10, max_loading=0.995):
    """Loadings lam with corr[i, j] == lam[i] * lam[j] (i != j), or None."""
    corr = np.asarray(corr, dtype=float)
    M = corr.shape[0]
    if M == 1:
        return np.zeros(1)
    if M == 2:
        r = corr[0, 1]
        lam = np.array([math.sqrt(abs(r)), math.copysign(math.sqrt(abs(r)), r)])
    else:
        off = corr[~np.eye(M, dtype=bool)]
        if np.all(np.abs(off - off[0]) <= tol) and off[0] >= 0:
            lam = np.full(M, math.sqrt(off[0]))
        else:
            lam = np.zeros(M)
            for i in range(M):
                best = 0.0
                for j in range(M):
                    for k in range(j + 1, M):
                        if i in (j, k) or abs(corr[j, k]) <= best:
                            continue
                        best = abs(corr[j, k])
                        sq = corr[i, j] * corr[i, k] / corr[j, k]
                        if sq < -tol:
                            return None
                        lam[i] = math.sqrt(max(sq, 0.0))
                if best == 0.0:
                    return None
            # signs: follow the first row
            ref = int(np.argmax(lam))
            for i in range(M):
                if i != ref and corr[ref, i] < 0:
                    lam[i] = -lam[i]
    if np.any(np.abs(lam) > max_loading):
        return None
    recon = np.outer(lam, lam)
    mask = ~np.eye(M, dtype=bool)
    if np.max(np.abs(recon[mask] - corr[mask])) > tol:
        return None
    return lam


def _psd_cholesky(corr):
    M = corr.shape[0]
    L = np.zeros((M, M))
    for j in range(M):
        d = corr[j, j] - L[j, :j] @ L[j, :j]
        if d < 1e-12:
            continue
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, M):
            L[i, j] = (corr[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return L


# ---------------------------------------------------------------------------
# quadrature nodes

@lru_cache(maxsize=None)
def _gl(n):
    return np.polynomial.legendre.leggauss(n)


def _composite(a, b, panels, order):
    x, w = _gl(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


@lru_cache(maxsize=64)
def _factor_nodes(panels):
    z, w = _composite(-9.0, 9.0, panels, 16)
    return z, w * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


@lru_cache(maxsize=4096)
def _scale_nodes(nu):
    """Nodes over s = sqrt(W / nu), W ~ chi-square(nu), weights normalised to 1."""
    if nu >= _NORMAL_NU:
        return np.ones(1), np.ones(1)
    lo = math.sqrt(stats.chi2.ppf(1e-15, nu) / nu)
    hi = math.sqrt(stats.chi2.isf(1e-15, nu) / nu)
    mode = math.sqrt(max(nu - 1.0, 0.0) / nu)
    # panels split at the mode so the peak is resolved for large nu
    left_n, left_w = _composite(lo, max(mode, lo), 3, 16) if mode > lo else (np.empty(0), np.empty(0))
    right_n, right_w = _composite(max(mode, lo), hi, 4, 16)
    s = np.concatenate([left_n, right_n])
    w = np.concatenate([left_w, right_w])
    logpdf = math.log(2 * nu) + np.log(s) + stats.chi2.logpdf(nu * s * s, nu)
    w = w * np.exp(logpdf)
    return s, w / w.sum()


def _factor_eval(upper, lam, nu):
    sd_min = float(np.min(np.sqrt(1 - lam * lam)))
    panels = int(min(max(math.ceil(5.0 / sd_min), 8), 96))
    z, wz = _factor_nodes(panels)
    s, ws = _scale_nodes(float(nu))
    return kernels.factor_cdf(np.asarray(upper, dtype=float), lam, z, wz, s, ws)


# ---------------------------------------------------------------------------
# rectangle probabilities

def _qmc(upper, corr, nu, settings):
    M = upper.shape[0]
    order = np.argsort(upper)
    b = upper[order]
    L = _psd_cholesky(corr[np.ix_(order, order)])
    t_case = nu < _NORMAL_NU
    dim = (M - 1) + (1 if t_case else 0)
    if dim == 0:
        v = float(special.ndtr(b[0]))
        return MVResult(v, 0.0, "exact", 0)
    rng = np.random.default_rng(settings.seed)
    gen = np.sqrt(_PRIMES[:dim])
    n = settings.qmc_points
    R = settings.randomisations
    total = 0
    while True:
        k = np.arange(1, n + 1)[:, None]
        means = np.empty(R)
        for r in range(R):
            x = np.abs(2.0 * ((k * gen + rng.random(dim)) % 1.0) - 1.0)
            vals = 0.0
            for pts in (x, 1.0 - x):
                pts = np.clip(pts, 1e-16, 1 - 1e-16)
                if t_case:
                    s = np.sqrt(special.chdtri(nu, 1.0 - pts[:, 0]) / nu)
                    u = np.ascontiguousarray(pts[:, 1:])
                else:
                    s = np.ones(n)
                    u = np.ascontiguousarray(pts)
                if u.shape[1] == 0:
                    u = np.zeros((n, 1))
                vals = vals + kernels.genz_integrand(b, L, u, s).mean()
            means[r] = 0.5 * vals
        total += 2 * n * R
        value = float(means.mean())
        err = 3.0 * float(means.std(ddof=1)) / math.sqrt(R)
        if err <= settings.target_abs_error or 2 * n * R * 2 > settings.max_points:
            return MVResult(min(max(value, 0.0), 1.0), err, "qmc", total)
        n *= 2


def _mv_cdf(upper, corr, nu, settings, method):
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    M = upper.shape[0]
    corr = _validate_corr(corr, M)
    settings = settings or DEFAULT_SETTINGS
    if np.any(upper == -np.inf):
        return MVResult(0.0, 0.0, "exact")
    if M == 1:
        v = float(special.ndtr(upper[0]) if nu >= _NORMAL_NU else special.stdtr(nu, upper[0]))
        return MVResult(v, 0.0, "exact")
    if method not in ("auto", "factor", "qmc"):
        raise NumericsError(f"unknown method {method!r}")
    lam = factor_loadings(corr) if method in ("auto", "factor") else None
    if method == "factor" and lam is None:
        raise NumericsError("correlation has no one-factor structure")
    if lam is not None:
        finite = np.where(np.isinf(upper), 1e3, upper)
        v, _ = _factor_eval(finite, lam, nu)
        return MVResult(min(max(v, 0.0), 1.0), 1e-10, "factor")
    return _qmc(upper, corr, nu, settings)


def mvn_cdf(upper, corr, settings=None, method="auto") -> MVResult:
    """P(X <= upper) for X ~ N(0, corr)."""
    return _mv_cdf(upper, corr, _NORMAL_NU, settings, method)


def mvt_cdf(upper, corr, nu, settings=None, method="auto") -> MVResult:
    """P(T <= upper) for a central multivariate t with ``nu`` degrees of freedom."""
    _check_nu(nu)
    return _mv_cdf(upper, corr, float(nu), settings, method)


def equicoordinate_quantile(prob, corr, nu=None, settings=None, hi=15.0):
    """Solve P(X_i <= e for all i) = prob for e (normal when ``nu`` is None)."""
    if not 0 < prob < 1:
        raise NumericsError("prob must lie in (0, 1)")
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    M = corr.shape[0]
    nu_eff = _NORMAL_NU if nu is None else float(nu)
    if nu is not None:
        _check_nu(nu)
    if M == 1:
        return float(special.ndtri(prob) if nu is None else special.stdtrit(nu_eff, prob))
    corr = _validate_corr(corr, M)
    lam = factor_loadings(corr)
    if lam is None:
        settings = settings or DEFAULT_SETTINGS

        def g(e):
            return _mv_cdf(np.full(M, e), corr, nu_eff, settings, "qmc").value - prob
        return _expanding_root(g, hi)

    def g(e):
        return _factor_eval(np.full(M, e), lam, nu_eff)

    # safeguarded Newton on a bracket
    lo_b, hi_b = -hi, hi
    bonf = 1.0 - (1.0 - prob) / M
    e = float(special.ndtri(bonf) if nu is None else special.stdtrit(nu_eff, bonf))
    e = min(max(e, lo_b), hi_b)
    for _ in range(100):
        F, dF = g(e)
        r = F - prob
        if abs(r) < 1e-13:
            return e
        if r > 0:
            hi_b = e
        else:
            lo_b = e
        step = e - r / dF if dF > 0 else None
        if step is None or not lo_b < step < hi_b:
            step = 0.5 * (lo_b + hi_b)
        if abs(step - e) < 1e-13:
            return step
        e = step
    if g(hi)[0] - prob < 0:
        raise NoSignChangeError(f"no critical value below {hi}")
    return e


def _expanding_root(g, hi):
    a, b = 0.0, 1.0
    while g(b) < 0:
        a, b = b, b * 2
        if b > hi:
            if g(hi) < 0:
                raise NoSignChangeError(f"no critical value below {hi}")
            b = hi
            break
    while g(a) > 0:
        a -= 1.0
        if a < -hi:
            raise NoSignChangeError(f"no critical value above {-hi}")
    return solve_root(g, (a, b), tol=1e-9)
