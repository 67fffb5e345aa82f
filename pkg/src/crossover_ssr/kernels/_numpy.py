"""Pure-numpy twins of the kernels in ``_numba`` (same signatures)."""
import math

import numpy as np
from scipy import optimize, special


def genz_integrand(b, L, u, s):
    n = u.shape[0]
    M = b.shape[0]
    f = np.ones(n)
    y = np.zeros((n, M))
    for i in range(M):
        lim = b[i] * s - y[:, :i] @ L[i, :i]
        if L[i, i] < 1e-12:
            e = (lim >= 0.0).astype(float)
        else:
            e = special.ndtr(lim / L[i, i])
            if i < M - 1:
                w = np.clip(u[:, i] * e, 1e-300, 1.0 - 1e-16)
                y[:, i] = special.ndtri(w)
        f *= e
    return f


def factor_cdf(b, lam, z, wz, s, ws):
    sd = np.sqrt(1.0 - lam * lam)
    # axes: (scale node, factor node, dimension)
    a = (b[None, None, :] * s[:, None, None] - lam[None, None, :] * z[None, :, None]) / sd
    cdf = special.ndtr(a)
    pdf = np.exp(-0.5 * a * a) / (math.sqrt(2.0 * math.pi) * sd)
    prod = cdf.prod(axis=2)
    M = b.shape[0]
    der = np.zeros(prod.shape)
    for i in range(M):
        others = np.delete(cdf, i, axis=2).prod(axis=2) if M > 1 else 1.0
        der += pdf[:, :, i] * others
    F = ws @ (prod @ wz)
    dF = (ws * s) @ (der @ wz)
    return float(F), float(dF)


def reml_profile_eval(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v):
    v = np.asarray(v, dtype=float)
    g = 1.0 + v
    p = cb.shape[0]
    Mt = A[None] / g[:, None, None] + W[None]
    rt = cb[None] / g[:, None] + cw[None]
    out = np.full(v.shape[0], -np.inf)
    try:
        Lc = np.linalg.cholesky(Mt)
    except np.linalg.LinAlgError:
        if v.shape[0] == 1:
            return out
        # fall back to one-at-a-time so a single bad point does not poison the rest
        for i in range(v.shape[0]):
            out[i] = reml_profile_eval(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v[i:i + 1])[0]
        return out
    logdet = 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(axis=1)
    sol = np.linalg.solve(Lc, rt[:, :, None])[:, :, 0]
    quad = (sol * sol).sum(axis=1)
    dfr = n_obs - p
    Q = np.maximum(Sb / g + Sw - quad, 1e-300)
    return -0.5 * (n_pat * np.log(g) + dfr * np.log(Q / dfr) + dfr + logdet)


def reml_profile_fit(A, W, cb, cw, Sb, Sw, n_pat, n_obs, grid, xtol, maxiter):
    ll = reml_profile_eval(A, W, cb, cw, Sb, Sw, n_pat, n_obs, grid)
    G = grid.shape[0]
    best = int(np.argmax(ll))
    nev = G
    if not np.isfinite(ll[best]):
        return 0.0, -np.inf, False, nev
    if best == G - 1:
        return float(grid[-1]), float(ll[-1]), False, nev

    def one(v):
        return float(reml_profile_eval(A, W, cb, cw, Sb, Sw, n_pat, n_obs, np.array([v]))[0])

    if best <= 1:
        res = optimize.minimize_scalar(lambda x: -one(x), bounds=(0.0, float(grid[best + 1])),
                                       method="bounded",
                                       options={"xatol": xtol * (1.0 + grid[best + 1]), "maxiter": maxiter})
        vhat = float(res.x)
    else:
        lo, hi = math.log(grid[best - 1]), math.log(grid[best + 1])
        res = optimize.minimize_scalar(lambda x: -one(math.exp(x)), bounds=(lo, hi), method="bounded",
                                       options={"xatol": xtol * (1.0 + max(abs(lo), abs(hi))), "maxiter": maxiter})
        vhat = math.exp(res.x)
    nev += res.nfev
    llhat = -float(res.fun)
    ll0 = one(0.0)
    nev += 1
    if ll0 >= llhat:
        vhat, llhat = 0.0, ll0
    return vhat, llhat, bool(res.success), nev
