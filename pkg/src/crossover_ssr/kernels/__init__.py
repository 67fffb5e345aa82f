"""Hot numeric kernels, compiled with numba when available.

The backend is chosen once at import time from the ``CROSSOVER_SSR_BACKEND``
environment variable: ``numba`` (default) or ``numpy``. If numba cannot be
imported the numpy path is used and a warning is issued. Both paths expose the
same four functions and agree to floating-point tolerance; see
``benchmarks/bench_kernels.py`` for a timing comparison.
"""
import os
import warnings

BACKEND_ENV = "CROSSOVER_SSR_BACKEND"


class PerformanceWarning(UserWarning):
    pass


def _select_backend():
    want = os.environ.get(BACKEND_ENV, "numba").strip().lower() or "numba"
    if want not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {want!r}")
    if want == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        warnings.warn("numba is not available; using the slower numpy kernels", PerformanceWarning)
        return "numpy"
    return "numba"


BACKEND = _select_backend()

if BACKEND == "numba":
    from . import _numba as _impl
else:
    from . import _numpy as _impl

genz_integrand = _impl.genz_integrand
factor_cdf = _impl.factor_cdf
reml_profile_eval = _impl.reml_profile_eval
reml_profile_fit = _impl.reml_profile_fit

__all__ = ["BACKEND", "BACKEND_ENV", "PerformanceWarning", "genz_integrand", "factor_cdf",
           "reml_profile_eval", "reml_profile_fit"]
