import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossover_ssr.design import TrialDesign, builtin_design
from crossover_ssr.mixed_model import (
    BlockCovariance, MixedModelError, PatientAllocation, SingularInformationError, SufficientStats,
    block_sigma_inverse, build_design_matrix, fit_design, fit_stats, gls_fit, helmert, model_frame,
    reml_fit, reml_loglik,
)
from oracles import dense_gls, dense_reml_loglik


def _data(design, n_per, se2=1.0, sb2=0.5, tau=None, seed=0):
    rng = np.random.default_rng(seed)
    seq = np.repeat(np.arange(design.K), n_per)
    alloc = PatientAllocation(seq)
    tau = np.zeros(design.D) if tau is None else np.asarray(tau)
    pi = np.arange(design.P) * 0.3
    Y = (2.0 + pi[None, :] + tau[design.array[seq]] + rng.normal(scale=np.sqrt(sb2), size=(seq.size, 1))
         + rng.normal(scale=np.sqrt(se2), size=(seq.size, design.P)))
    return Y, alloc


def test_design_matrix_ab_ba():
    d = TrialDesign.from_strings(["01", "10"])
    X = build_design_matrix(d, PatientAllocation(np.array([0, 1])))
    expected = np.array([[1, 0, 0],
                         [1, 1, 1],
                         [1, 0, 1],
                         [1, 1, 0]], dtype=float)
    np.testing.assert_array_equal(X, expected)


def test_design_matrix_shape_and_rank():
    d = builtin_design("example1")[0]
    X = build_design_matrix(d, PatientAllocation(np.arange(d.K)))
    assert X.shape == (d.K * d.P, 1 + (d.P - 1) + (d.D - 1))
    assert np.linalg.matrix_rank(X) == X.shape[1]


def test_allocation_checks():
    d = builtin_design("example1")[0]
    with pytest.raises(MixedModelError):
        build_design_matrix(d, PatientAllocation(np.array([0, 9])))
    a = PatientAllocation(np.array([0, 1]), np.array([0, 0]))
    b = PatientAllocation(np.array([2, 3]), np.array([0, 0]))
    c = a.concat(b)
    assert c.N == 4 and c.block.tolist() == [0, 0, 1, 1]


@given(st.floats(0.05, 10), st.floats(0, 10), st.integers(2, 5))
def test_sigma_inverse(se2, sb2, P):
    cov = BlockCovariance(se2, sb2, P)
    np.testing.assert_allclose(cov.matrix() @ block_sigma_inverse(cov), np.eye(P), atol=1e-10)
    assert abs(cov.logdet() - np.linalg.slogdet(cov.matrix())[1]) < 1e-10


def test_gls_noise_free_recovery():
    d = builtin_design("example1")[0]
    tau = np.array([0.0, 1.0, -0.5, 2.0])
    seq = np.repeat(np.arange(d.K), 3)
    alloc = PatientAllocation(seq)
    X = build_design_matrix(d, alloc)
    beta = np.r_[5.0, 0.3, -0.2, 0.1, tau[1:]]
    beta_hat, _ = gls_fit(X @ beta, X, BlockCovariance(1.0, 2.0, d.P))
    np.testing.assert_allclose(beta_hat, beta, atol=1e-10)


def test_gls_matches_dense_and_ols():
    d = builtin_design("example2")[0]
    Y, alloc = _data(d, 2, seed=3)
    X = build_design_matrix(d, alloc)
    y = Y.ravel()
    b, V = gls_fit(y, X, BlockCovariance(1.3, 0.7, d.P))
    b2, V2 = dense_gls(y, X, 1.3, 0.7, d.P)
    np.testing.assert_allclose(b, b2, atol=1e-10)
    np.testing.assert_allclose(V, V2, atol=1e-10)
    b0, V0 = gls_fit(y, X, BlockCovariance(2.0, 0.0, d.P))
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(b0, ols, atol=1e-10)
    np.testing.assert_allclose(V0, 2.0 * np.linalg.inv(X.T @ X), atol=1e-10)


def test_singular_information_raises():
    d = TrialDesign.from_strings(["01", "10"])
    alloc = PatientAllocation(np.array([0, 0, 0]))  # B only ever in period 2
    X = build_design_matrix(d, alloc)
    y = np.arange(6.0)
    with pytest.raises(SingularInformationError):
        gls_fit(y, X, BlockCovariance(1.0, 1.0, 2))
    with pytest.raises(SingularInformationError):
        reml_fit(y, X, 2)


def test_loglik_matches_dense():
    d = builtin_design("example1")[0]
    Y, alloc = _data(d, 2, seed=1)
    X = build_design_matrix(d, alloc)
    for se2, sb2 in [(1.0, 0.0), (0.7, 1.4), (3.0, 0.2)]:
        assert abs(reml_loglik(Y.ravel(), X, se2, sb2, d.P) - dense_reml_loglik(Y.ravel(), X, se2, sb2, d.P)) < 1e-9


@given(st.floats(-50, 50), st.integers(0, 20))
def test_loglik_translation_invariant(shift, seed):
    d = builtin_design("example1")[0]
    Y, alloc = _data(d, 1, seed=seed)
    X = build_design_matrix(d, alloc)
    a = reml_loglik(Y.ravel(), X, 1.1, 0.4, d.P)
    b = reml_loglik(Y.ravel() + shift, X, 1.1, 0.4, d.P)
    assert abs(a - b) < 1e-7


def test_reml_fit_matches_grid_oracle():
    d = builtin_design("example1")[0]
    Y, alloc = _data(d, 3, se2=1.0, sb2=1.0, seed=11)
    X = build_design_matrix(d, alloc)
    fit = reml_fit(Y.ravel(), X, d.P)
    # brute-force: 400 x 400 grid then local refinement around the best cell
    se = np.linspace(0.2, 3.0, 400)
    sb = np.linspace(0.0, 4.0, 400)
    best = max(((reml_loglik(Y.ravel(), X, a, b, d.P), a, b) for a in se[::8] for b in sb[::8]))
    _, a0, b0 = best
    fine_a = np.linspace(a0 - 0.06, a0 + 0.06, 121)
    fine_b = np.linspace(max(b0 - 0.09, 0), b0 + 0.09, 121)
    best = max(((reml_loglik(Y.ravel(), X, a, b, d.P), a, b) for a in fine_a[::4] for b in fine_b[::4]))
    _, a1, b1 = best
    fa = np.linspace(a1 - 0.004, a1 + 0.004, 81)
    fb = np.linspace(max(b1 - 0.006, 0), b1 + 0.006, 81)
    best = max(((reml_loglik(Y.ravel(), X, a, b, d.P), a, b) for a in fa[::2] for b in fb[::2]))
    _, a2, b2 = best
    assert abs(fit.sigma_e2_hat - a2) <= 2e-4
    assert abs(fit.sigma_b2_hat - b2) <= 3e-4
    assert fit.reml_loglik >= best[0] - 1e-9
    assert fit.converged


def test_reml_fit_against_statsmodels_reference():
    d = builtin_design("example1")[0]
    Y, alloc = _data(d, 3, se2=1.0, sb2=1.0, seed=11)
    X = build_design_matrix(d, alloc)
    fit = reml_fit(Y.ravel(), X, d.P)
    st = pytest.importorskip("statsmodels.api")
    groups = np.repeat(np.arange(alloc.N), d.P)
    res = st.MixedLM(Y.ravel(), X, groups).fit(reml=True, method="lbfgs")
    assert abs(fit.sigma_e2_hat - res.scale) < 1e-4
    assert abs(fit.sigma_b2_hat - float(np.asarray(res.cov_re)[0, 0])) < 1e-4


def test_boundary_fit_is_exactly_zero():
    d = builtin_design("example1")[0]
    rng = np.random.default_rng(5)
    seq = np.repeat(np.arange(d.K), 4)
    # strong negative within-patient correlation: REML maximiser at sigma_b2 = 0
    Y = rng.normal(size=(seq.size, d.P))
    Y -= 0.9 * Y.mean(axis=1, keepdims=True)
    fit = fit_design(d, Y, PatientAllocation(seq))
    assert fit.sigma_b2_hat == 0.0
    assert fit.converged


def test_complete_block_treatment_variance():
    # balanced Latin square: Var(tau_d - tau_0) = 2 sigma_e2 / N for every d
    d = builtin_design("example1")[0]
    Y, alloc = _data(d, 5, seed=2)
    fit = fit_design(d, Y, alloc)
    N = alloc.N
    np.testing.assert_allclose(np.diag(fit.var_tau), 2 * fit.sigma_e2_hat / N, rtol=1e-10)


def test_fit_design_matches_reml_fit_and_stats_add():
    d = builtin_design("example2")[0]
    Y, alloc = _data(d, 3, seed=4, tau=[0, .2, .4])
    X = build_design_matrix(d, alloc)
    a = reml_fit(Y.ravel(), X, d.P)
    b = fit_design(d, Y, alloc)
    # same likelihood; the two paths differ only by optimiser round-off
    np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-6)
    assert abs(a.reml_loglik - b.reml_loglik) < 1e-10
    assert abs(a.sigma_e2_hat - b.sigma_e2_hat) < 1e-6
    frame = model_frame(d)
    half = alloc.N // 2
    s1 = frame.stats(Y[:half], alloc.sequence[:half])
    s2 = frame.stats(Y[half:], alloc.sequence[half:])
    c = fit_stats(s1 + s2, d.D)
    assert abs(c.sigma_b2_hat - b.sigma_b2_hat) < 1e-6
    s3 = SufficientStats.from_matrix(Y.ravel(), X, d.P)
    np.testing.assert_allclose(s3.A, (s1 + s2).A, atol=1e-9)


def test_helmert_orthonormal():
    for P in range(2, 7):
        H = helmert(P)
        np.testing.assert_allclose(H @ H.T, np.eye(P), atol=1e-12)


def test_reml_loglik_input_errors():
    d = TrialDesign.from_strings(["01", "10"])
    X = build_design_matrix(d, PatientAllocation(np.array([0, 1, 0, 1])))
    y = np.arange(8.0)
    with pytest.raises(MixedModelError):
        reml_loglik(y, X, 0.0, 1.0, 2)
    with pytest.raises(MixedModelError):
        reml_loglik(y, X, 1.0, -1.0, 2)
    with pytest.raises(MixedModelError):
        reml_loglik(np.r_[y[:-1], np.nan], X, 1.0, 1.0, 2)
