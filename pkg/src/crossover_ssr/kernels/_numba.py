"""numba implementations of the hot kernels.

Every function here has a twin with the same signature in ``_numpy``.
"""
import math

import numpy as np
from numba import njit

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _phi(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit(cache=True)
def _ndtri(p):
    # Wichura AS241 (PPND16), relative accuracy ~1e-16
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    if r <= 0.0:
        return -np.inf if q < 0.0 else np.inf
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(cache=True)
def genz_integrand(b, L, u, s):
    """Separation-of-variables integrand at each row of ``u``.

    ``b`` are the upper limits, ``L`` the lower Cholesky factor of the
    correlation, ``u`` an (n, M-1) array of points in the unit cube and ``s``
    per-point multipliers of the limits (all ones for the normal case).
    """
    n = u.shape[0]
    M = b.shape[0]
    out = np.empty(n)
    y = np.zeros(M)
    for k in range(n):
        f = 1.0
        sk = s[k]
        for i in range(M):
            acc = 0.0
            for j in range(i):
                acc += L[i, j] * y[j]
            lim = b[i] * sk - acc
            if L[i, i] < 1e-12:
                e = 1.0 if lim >= 0.0 else 0.0
                y[i] = 0.0
            else:
                e = _phi(lim / L[i, i])
                if i < M - 1:
                    w = u[k, i] * e
                    if w < 1e-300:
                        w = 1e-300
                    elif w > 1.0 - 1e-16:
                        w = 1.0 - 1e-16
                    y[i] = _ndtri(w)
            f *= e
            if f == 0.0:
                break
        out[k] = f
    return out


@njit(cache=True)
def factor_cdf(b, lam, z, wz, s, ws):
    """One-factor quadrature of P(X_i <= b_i s) and its common-shift derivative.

    Correlation is lam_i * lam_j off the diagonal. ``z``/``wz`` are nodes and
    weights over the common standard-normal factor (density folded into the
    weights), ``s``/``ws`` the same over the scale variable.
    """
    M = b.shape[0]
    sd = np.empty(M)
    for i in range(M):
        sd[i] = math.sqrt(1.0 - lam[i] * lam[i])
    F = 0.0
    dF = 0.0
    cdf = np.empty(M)
    pdf = np.empty(M)
    for l in range(s.shape[0]):
        sl = s[l]
        Fl = 0.0
        dFl = 0.0
        for k in range(z.shape[0]):
            prod = 1.0
            for i in range(M):
                a = (b[i] * sl - lam[i] * z[k]) / sd[i]
                cdf[i] = _phi(a)
                pdf[i] = _INV_SQRT2PI * math.exp(-0.5 * a * a) / sd[i]
                prod *= cdf[i]
            der = 0.0
            for i in range(M):
                other = 1.0
                for j in range(M):
                    if j != i:
                        other *= cdf[j]
                der += pdf[i] * other
            Fl += wz[k] * prod
            dFl += wz[k] * der
        F += ws[l] * Fl
        dF += ws[l] * sl * dFl
    return F, dF


@njit(cache=True)
def _profile_ll(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v, Mt, rt):
    p = cb.shape[0]
    g = 1.0 + v
    for i in range(p):
        rt[i] = cb[i] / g + cw[i]
        for j in range(p):
            Mt[i, j] = A[i, j] / g + W[i, j]
    # in-place Cholesky
    logdet = 0.0
    for j in range(p):
        d = Mt[j, j]
        for k in range(j):
            d -= Mt[j, k] * Mt[j, k]
        if d <= 0.0:
            return -np.inf
        d = math.sqrt(d)
        Mt[j, j] = d
        logdet += 2.0 * math.log(d)
        for i in range(j + 1, p):
            t = Mt[i, j]
            for k in range(j):
                t -= Mt[i, k] * Mt[j, k]
            Mt[i, j] = t / d
    quad = 0.0
    for i in range(p):
        t = rt[i]
        for k in range(i):
            t -= Mt[i, k] * rt[k]
        rt[i] = t / Mt[i, i]
        quad += rt[i] * rt[i]
    dfr = n_obs - p
    Q = Sb / g + Sw - quad
    if Q < 1e-300:
        Q = 1e-300
    return -0.5 * (n_pat * math.log(g) + dfr * math.log(Q / dfr) + dfr + logdet)


@njit(cache=True)
def reml_profile_eval(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v):
    """Profiled restricted log-likelihood at each v = P*sigma_b2/sigma_e2."""
    p = cb.shape[0]
    Mt = np.empty((p, p))
    rt = np.empty(p)
    out = np.empty(v.shape[0])
    for i in range(v.shape[0]):
        out[i] = _profile_ll(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v[i], Mt, rt)
    return out


@njit(cache=True)
def _neg_ll_at(x, logscale, A, W, cb, cw, Sb, Sw, n_pat, n_obs, Mt, rt):
    v = math.exp(x) if logscale else x
    return -_profile_ll(A, W, cb, cw, Sb, Sw, n_pat, n_obs, v, Mt, rt)


@njit(cache=True)
def reml_profile_fit(A, W, cb, cw, Sb, Sw, n_pat, n_obs, grid, xtol, maxiter):
    """Maximise the profiled REML over v >= 0.

    ``grid`` must start at 0 and be increasing. Returns
    (v_hat, loglik, converged, evaluations).
    """
    p = cb.shape[0]
    Mt = np.empty((p, p))
    rt = np.empty(p)
    G = grid.shape[0]
    best = 0
    bestll = -np.inf
    for i in range(G):
        ll = _profile_ll(A, W, cb, cw, Sb, Sw, n_pat, n_obs, grid[i], Mt, rt)
        if ll > bestll:
            bestll = ll
            best = i
    nev = G
    if bestll == -np.inf:
        return 0.0, -np.inf, False, nev
    if best <= 1:
        logscale = False
        a = 0.0
        bb = grid[min(best + 1, G - 1)]
    elif best == G - 1:
        return grid[G - 1], bestll, False, nev
    else:
        logscale = True
        a = math.log(grid[best - 1])
        bb = math.log(grid[best + 1])

    # Brent's minimiser (golden section + parabolic steps)
    cgold = 0.3819660112501051
    x = w = v = a + cgold * (bb - a)
    fx = _neg_ll_at(x, logscale, A, W, cb, cw, Sb, Sw, n_pat, n_obs, Mt, rt)
    nev += 1
    fw = fv = fx
    d = 0.0
    e = 0.0
    converged = False
    for it in range(maxiter):
        xm = 0.5 * (a + bb)
        tol1 = xtol * (abs(x) + 1.0)
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (bb - a):
            converged = True
            break
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            pp = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                pp = -pp
            q = abs(q)
            etemp = e
            e = d
            if abs(pp) >= abs(0.5 * q * etemp) or pp <= q * (a - x) or pp >= q * (bb - x):
                e = (a - x) if x >= xm else (bb - x)
                d = cgold * e
            else:
                d = pp / q
                u = x + d
                if u - a < tol2 or bb - u < tol2:
                    d = tol1 if xm - x >= 0 else -tol1
        else:
            e = (a - x) if x >= xm else (bb - x)
            d = cgold * e
        if abs(d) >= tol1:
            u = x + d
        else:
            u = x + (tol1 if d >= 0 else -tol1)
        fu = _neg_ll_at(u, logscale, A, W, cb, cw, Sb, Sw, n_pat, n_obs, Mt, rt)
        nev += 1
        if fu <= fx:
            if u >= x:
                a = x
            else:
                bb = x
            v = w
            fv = fw
            w = x
            fw = fx
            x = u
            fx = fu
        else:
            if u < x:
                a = u
            else:
                bb = u
            if fu <= fw or w == x:
                v = w
                fv = fw
                w = u
                fw = fu
            elif fu <= fv or v == x or v == w:
                v = u
                fv = fu
    vhat = math.exp(x) if logscale else x
    llhat = -fx
    ll0 = _profile_ll(A, W, cb, cw, Sb, Sw, n_pat, n_obs, 0.0, Mt, rt)
    nev += 1
    if ll0 >= llhat:
        vhat = 0.0
        llhat = ll0
    return vhat, llhat, converged, nev
