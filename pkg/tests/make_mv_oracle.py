"""Regenerate tests/data/mv_oracle.json (slow: a few minutes of scipy quadrature).

    python3 tests/make_mv_oracle.py
"""
import json
import pathlib

import numpy as np

from oracles import mvn_cdf_quad, mvt_cdf_quad2, mvt_cdf_quad_factor

OUT = pathlib.Path(__file__).with_name("data") / "mv_oracle.json"


def random_case(rng):
    M = int(rng.integers(1, 4))
    kind = rng.choice(["normal", "t"])
    nu = float(rng.choice([1, 3, 7.5, 30, 200])) if kind == "t" else None
    upper = rng.uniform(-1.5, 2.5, M)
    if M == 1:
        C, lam = np.eye(1), None
    elif M == 2:
        r = rng.uniform(-0.95, 0.95)
        C, lam = np.array([[1, r], [r, 1]]), None
    elif nu is None:
        G = rng.normal(size=(3, 5))
        S = G @ G.T
        d = np.sqrt(np.diag(S))
        C, lam = S / np.outer(d, d), None
    else:
        lam = rng.uniform(-0.9, 0.9, 3)
        C = np.outer(lam, lam)
        np.fill_diagonal(C, 1.0)
    return upper, C, nu, lam


def oracle(upper, C, nu, lam):
    from scipy import stats
    if nu is None:
        return float(mvn_cdf_quad(upper, C))
    if upper.size == 1:
        return float(stats.t.cdf(upper[0], nu))
    if upper.size == 2:
        return float(mvt_cdf_quad2(upper, C[0, 1], nu))
    return float(mvt_cdf_quad_factor(upper, lam, nu))


def main(n=200):
    cases = []
    for i in range(n):
        upper, C, nu, lam = random_case(np.random.default_rng(1000 + i))
        cases.append({"upper": upper.tolist(), "corr": C.tolist(), "nu": nu,
                      "value": oracle(upper, C, nu, lam)})
    OUT.write_text(json.dumps(cases, indent=1))


if __name__ == "__main__":
    main()
