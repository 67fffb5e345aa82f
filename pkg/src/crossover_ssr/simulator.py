"""Two-stage trial simulation and Monte Carlo operating characteristics.

Every replicate draws from its own generator, seeded from
(master_seed, replicate index), so results do not depend on how replicates
are split across worker processes. The same index gives the same stream in
every scenario, which makes comparisons between methods paired.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import multiprocessing as mp
import numpy as np

from . import sample_size as ss
from .design import DesignError, HypothesisSpec, ModelParams, TrialDesign
from .estimators import (AdjustmentSpec, InterimData, VarianceEstimate, adjusted_blinded_estimate,
                         block_blinded_estimate, unblinded_estimate)
from .mixed_model import PatientAllocation, fit_stats, model_frame

TAU_SCENARIOS = ("global_null", "tau1_only", "tau1_tau2", "global_alt", "observed")
THREADS_ENV = "CROSSOVER_SSR_THREADS"


class SimulationError(RuntimeError):
    pass


def scenario_tau(label, D, delta, observed=None) -> Tuple[float, ...]:
    tau = np.zeros(D)
    if label == "global_null":
        pass
    elif label == "tau1_only":
        tau[1] = delta
    elif label == "tau1_tau2":
        if D < 3:
            raise DesignError("tau1_tau2 needs at least two experimental treatments")
        tau[1:3] = delta
    elif label == "global_alt":
        tau[1:] = delta
    elif label == "observed":
        if observed is None:
            raise DesignError("the observed scenario needs fitted treatment effects")
        tau = np.asarray(observed, dtype=float)
    else:
        raise DesignError(f"unknown tau scenario {label!r}; choose from {TAU_SCENARIOS}")
    return tuple(float(t) for t in tau)


@dataclass(frozen=True)
class ScenarioConfig:
    design: TrialDesign
    true_params: ModelParams
    """Base parameters; tau is replaced according to ``tau_scenario``."""
    hyp: HypothesisSpec
    policy: ss.ReestimationPolicy
    tau_scenario: str = "global_null"
    randomisation: str = "simple"
    replications: int = 1000
    master_seed: int = 20240101
    random_period_sd: float = 0.0
    tau_star: Optional[Tuple[float, ...]] = None
    """Only used by the 'adjusted_custom' method."""
    analysis_alpha: Optional[float] = None
    """Level of the final Dunnett tests; defaults to hyp.alpha."""
    interim_only: bool = False
    label: str = ""

    def __post_init__(self):
        self.true_params.check_against(self.design)
        if self.replications < 1:
            raise DesignError("replications must be at least 1")
        if self.randomisation not in ("simple", "block"):
            raise DesignError("randomisation must be 'simple' or 'block'")
        if self.random_period_sd < 0:
            raise DesignError("random_period_sd must be nonnegative")
        if self.policy.method == "block" and self.randomisation != "block":
            raise DesignError("the block estimator needs block randomisation")
        if self.randomisation == "block":
            if not self.policy.n_B:
                raise DesignError("block randomisation needs n_B")
        elif self.policy.n_int % self.design.K:
            raise DesignError(f"n_int={self.policy.n_int} is not a multiple of K={self.design.K}")
        if self.policy.method == "adjusted_custom" and self.tau_star is None:
            raise DesignError("adjusted_custom needs tau_star")
        if self.policy.method not in ("unblinded", "adjusted_null", "adjusted_alternative",
                                      "adjusted_custom", "block"):
            raise DesignError(f"unknown method {self.policy.method!r}")
        scenario_tau(self.tau_scenario, self.design.D, self.hyp.delta, self.true_params.tau)

    @property
    def tau(self) -> np.ndarray:
        return np.array(scenario_tau(self.tau_scenario, self.design.D, self.hyp.delta,
                                     self.true_params.tau))

    @property
    def params(self) -> ModelParams:
        return self.true_params.with_(tau=tuple(self.tau))

    @property
    def true_nulls(self) -> np.ndarray:
        return self.tau[1:] == 0.0

    def adjustment(self) -> Optional[AdjustmentSpec]:
        m, D = self.policy.method, self.design.D
        if m == "adjusted_null":
            return AdjustmentSpec.null(D)
        if m == "adjusted_alternative":
            return AdjustmentSpec.alternative(D, self.hyp.delta)
        if m == "adjusted_custom":
            return AdjustmentSpec(np.asarray(self.tau_star, dtype=float), "custom")
        return None

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class TrialResult:
    N_hat: int
    N_final: int
    estimate: VarianceEstimate
    reject: np.ndarray
    T: np.ndarray
    e: float
    converged: bool
    """False if either REML fit stopped without meeting its tolerance."""
    uneven: bool = False

    @property
    def any_rejection(self) -> bool:
        return bool(self.reject.any())


# ---------------------------------------------------------------------------
# allocation and data

def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def allocate_simple(design: TrialDesign, n: int, rng, strict: bool = True) -> PatientAllocation:
    """n/K patients per sequence in random order.

    With ``strict=False`` a remainder is spread over randomly chosen
    sequences, one extra patient each.
    """
    K = design.K
    if n % K and strict:
        raise DesignError(f"{n} patients cannot be split equally over {K} sequences")
    seq = np.repeat(np.arange(K), n // K)
    if n % K:
        seq = np.concatenate([seq, rng.choice(K, n % K, replace=False)])
    return PatientAllocation(rng.permutation(seq), uneven=bool(n % K))


@dataclass
class BlockRotation:
    """Where the block-to-sequence cycle stands between stages."""

    order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    position: int = 0
    next_label: int = 0


def allocate_block(design: TrialDesign, n: int, n_B: int, rng, state: Optional[BlockRotation] = None):
    """Sequence-homogeneous blocks of n_B patients.

    Blocks take sequences in rounds; each round is a fresh random permutation
    of the K sequences. Returns (allocation, state) so a later stage can carry
    on from the same point in the current round.
    """
    if n_B < 1 or n % n_B:
        raise DesignError(f"{n} patients cannot be split into blocks of {n_B}")
    K = design.K
    st = state if state is not None else BlockRotation()
    n_blocks = n // n_B
    block_seq = np.empty(n_blocks, dtype=np.int64)
    for b in range(n_blocks):
        if st.position >= st.order.size:
            st.order = rng.permutation(K)
            st.position = 0
        block_seq[b] = st.order[st.position]
        st.position += 1
    labels = st.next_label + np.arange(n_blocks)
    st.next_label += n_blocks
    seq = np.repeat(block_seq, n_B)
    block = np.repeat(labels, n_B)
    counts = np.bincount(block_seq, minlength=K)
    return PatientAllocation(seq, block, bool(np.any(counts != counts[0]))), st


def _cell_means(design: TrialDesign, params: ModelParams, pi=None):
    pi = np.asarray(params.pi if pi is None else pi, dtype=float)
    tau = np.asarray(params.tau, dtype=float)
    return params.mu0 + pi[None, :] + tau[design.array]  # (K, P)


def draw_period_effects(params: ModelParams, rng, sd: float) -> np.ndarray:
    pi = np.asarray(params.pi, dtype=float).copy()
    if sd > 0:
        pi[1:] += sd * rng.standard_normal(pi.size - 1)
    return pi


def simulate_responses(alloc: PatientAllocation, design: TrialDesign, params: ModelParams, rng,
                       random_period_sd: float = 0.0, pi=None) -> np.ndarray:
    """(N, P) responses from the crossover model.

    ``pi`` fixes the period effects (e.g. drawn once per trial); otherwise
    they are drawn here when ``random_period_sd > 0``.
    """
    if pi is None:
        pi = draw_period_effects(params, rng, random_period_sd)
    means = _cell_means(design, params, pi)[alloc.sequence]
    N, P = means.shape
    s = math.sqrt(params.sigma_b2) * rng.standard_normal(N)
    eps = math.sqrt(params.sigma_e2) * rng.standard_normal((N, P))
    return means + s[:, None] + eps


# ---------------------------------------------------------------------------
# one trial

def _allocate(config: ScenarioConfig, n, rng, state):
    if config.randomisation == "block":
        return allocate_block(config.design, n, config.policy.n_B, rng, state)
    return allocate_simple(config.design, n, rng, strict=False), None


def _estimate(config: ScenarioConfig, Y, alloc):
    data = InterimData(Y, alloc, config.design)
    m = config.policy.method
    if m == "unblinded":
        return unblinded_estimate(data)
    if m == "block":
        return block_blinded_estimate(data)
    return adjusted_blinded_estimate(data, config.adjustment())


def run_trial(config: ScenarioConfig, rng) -> TrialResult:
    design, policy, hyp = config.design, config.policy, config.hyp
    params = config.params
    pi = draw_period_effects(params, rng, config.random_period_sd)
    alloc1, state = _allocate(config, policy.n_int, rng, None)
    Y1 = simulate_responses(alloc1, design, params, rng, pi=pi)
    est = _estimate(config, Y1, alloc1)
    N_hat = ss.reestimate(policy, est.sigma_e2_hat, est.sigma_b2_trunc, design, hyp)
    M = design.D - 1
    if config.interim_only:
        return TrialResult(N_hat, policy.n_int, est, np.zeros(M, bool), np.full(M, np.nan), np.nan,
                           est.converged, alloc1.uneven)
    frame = model_frame(design)
    stats = frame.stats(Y1, alloc1.sequence)
    alloc = alloc1
    if N_hat > policy.n_int:
        alloc2, _ = _allocate(config, N_hat - policy.n_int, rng, state)
        Y2 = simulate_responses(alloc2, design, params, rng, pi=pi)
        stats = stats + frame.stats(Y2, alloc2.sequence)
        alloc = alloc1.concat(alloc2)
    fit = fit_stats(stats, design.D)
    alpha = hyp.alpha if config.analysis_alpha is None else config.analysis_alpha
    e = ss.analysis_critical_value(fit.var_beta, alloc.N, design.D, design.P, alpha, hyp.direction)
    T = fit.tau_hat / np.sqrt(np.diag(fit.var_tau))
    if hyp.direction == "two_sided":
        reject = np.abs(T) > e
    else:
        reject = hyp.sign * T > e
    counts = alloc.counts(design.K)
    uneven = bool(np.any(counts != counts[0]))
    return TrialResult(N_hat, alloc.N, est, reject, T, float(e), est.converged and fit.converged, uneven)


# ---------------------------------------------------------------------------
# Monte Carlo

RAW_FIELDS = ("replicate", "sigma_e2_hat", "sigma_b2_raw", "N_hat", "N_final", "e", "converged",
              "uneven")


@dataclass(frozen=True, eq=False)
class ReplicateTable:
    """Per-replicate results in replicate order."""

    sigma_e2_hat: np.ndarray
    sigma_b2_raw: np.ndarray
    N_hat: np.ndarray
    N_final: np.ndarray
    e: np.ndarray
    T: np.ndarray
    reject: np.ndarray
    converged: np.ndarray
    uneven: np.ndarray

    @classmethod
    def from_results(cls, results: Sequence[TrialResult]):
        if not results:
            raise SimulationError("no results to summarise")
        return cls(np.array([r.estimate.sigma_e2_hat for r in results]),
                   np.array([r.estimate.sigma_b2_raw for r in results]),
                   np.array([r.N_hat for r in results], dtype=np.int64),
                   np.array([r.N_final for r in results], dtype=np.int64),
                   np.array([r.e for r in results]),
                   np.stack([r.T for r in results]),
                   np.stack([r.reject for r in results]),
                   np.array([r.converged for r in results]),
                   np.array([r.uneven for r in results]))

    @classmethod
    def concat(cls, parts):
        return cls(*[np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__])

    def __len__(self):
        return self.N_hat.shape[0]


@dataclass(frozen=True)
class SummaryStats:
    reps: int
    fwer: Optional[float]
    fwer_se: Optional[float]
    power_pairwise: float
    power_pairwise_se: float
    power_familywise: float
    power_familywise_se: float
    sigma_e2_q: Tuple[float, float, float]
    sigma_b2_q: Tuple[float, float, float]
    N_hat_q: Tuple[float, float, float]
    mean_realised_N: float
    nonconverged_count: int
    uneven_count: int


def _se(p, n):
    return math.sqrt(p * (1 - p) / n)


def quartiles(x) -> Tuple[float, float, float]:
    """25/50/75% points by linear interpolation between order statistics."""
    q = np.quantile(np.asarray(x, dtype=float), [0.25, 0.5, 0.75])
    return tuple(float(v) for v in q)


def summarize(results, true_nulls) -> SummaryStats:
    """Operating characteristics; FWER counts rejections of true nulls only.

    ``results`` is a ReplicateTable or a sequence of TrialResult.
    ``true_nulls`` flags which of the D-1 hypotheses are true.
    """
    tab = results if isinstance(results, ReplicateTable) else ReplicateTable.from_results(list(results))
    n = len(tab)
    if n == 0:
        raise SimulationError("no results to summarise")
    nulls = np.asarray(true_nulls, dtype=bool)
    rej = tab.reject
    fwer = fwer_se = None
    if nulls.any():
        fwer = float(rej[:, nulls].any(axis=1).mean())
        fwer_se = _se(fwer, n)
    pw = float(rej[:, 0].mean())
    fw = float(rej.any(axis=1).mean())
    return SummaryStats(n, fwer, fwer_se, pw, _se(pw, n), fw, _se(fw, n),
                        quartiles(tab.sigma_e2_hat), quartiles(tab.sigma_b2_raw), quartiles(tab.N_hat),
                        float(tab.N_final.mean()), int((~tab.converged).sum()), int(tab.uneven.sum()))


def _run_chunk(args):
    config, start, stop = args
    out = []
    for i in range(start, stop):
        try:
            out.append(run_trial(config, replicate_rng(config.master_seed, i)))
        except Exception as exc:  # noqa: BLE001 - reported with the replicate index
            raise SimulationError(f"replicate {i} failed: {exc}") from exc
    return ReplicateTable.from_results(out)


def resolve_workers(workers: Optional[int]) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        workers = int(env)
    return max(1, int(workers or 1))


def _chunks(n, workers):
    size = max(1, min(2000, math.ceil(n / (4 * workers))))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def run_replicates(config: ScenarioConfig, workers: Optional[int] = None) -> ReplicateTable:
    workers = resolve_workers(workers)
    n = config.replications
    if workers == 1:
        return _run_chunk((config, 0, n))
    jobs = [(config, a, b) for a, b in _chunks(n, workers)]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        parts = list(pool.map(_run_chunk, jobs))
    return ReplicateTable.concat(parts)


def run_monte_carlo(config: ScenarioConfig, workers: Optional[int] = None, return_raw: bool = False):
    tab = run_replicates(config, workers)
    summary = summarize(tab, config.true_nulls)
    return (summary, tab) if return_raw else summary


# ---------------------------------------------------------------------------
# alpha calibration

@dataclass(frozen=True)
class CalibrationResult:
    alpha_adj: float
    sigma_e2_max: float
    sigma_b2_max: float
    grid_fwer: Tuple[Tuple[float, float, float], ...]
    """(sigma_e2, sigma_b2, FWER) for every grid point."""
    trace: Tuple[Tuple[float, float], ...]
    """(alpha tried, FWER) for every bisection step."""


def calibrate_alpha(config: ScenarioConfig, sigma_grid, target_alpha: float, reps: int,
                    workers: Optional[int] = None, max_steps: int = 30) -> CalibrationResult:
    """Find the analysis level whose simulated FWER matches ``target_alpha``.

    Stage one finds the (sigma_e2, sigma_b2) pair with the largest FWER under
    the global null; stage two bisects on the analysis level at that pair.
    Re-estimation keeps using the design level throughout. The same seed is
    used for every run, so the simulated FWER is monotone in the level.
    """
    grid = [tuple(map(float, g)) for g in sigma_grid]
    if not grid:
        raise SimulationError("the variance grid is empty")
    base = config.with_(tau_scenario="global_null", replications=int(reps), interim_only=False)

    def fwer_at(se2, sb2, alpha):
        cfg = base.with_(true_params=base.true_params.with_(sigma_e2=se2, sigma_b2=sb2),
                         analysis_alpha=alpha)
        s = run_monte_carlo(cfg, workers)
        return s.fwer

    if len(grid) == 1:
        se2_max, sb2_max = grid[0]
        table = ()
    else:
        table = tuple((se2, sb2, fwer_at(se2, sb2, target_alpha)) for se2, sb2 in grid)
        se2_max, sb2_max, _ = max(table, key=lambda r: r[2])
    tol = math.sqrt(target_alpha * (1 - target_alpha) / reps)
    f_hi = fwer_at(se2_max, sb2_max, target_alpha)
    trace = [(target_alpha, f_hi)]
    if f_hi <= target_alpha + tol:
        return CalibrationResult(target_alpha, se2_max, sb2_max, table, tuple(trace))
    lo, hi = target_alpha / 2, target_alpha
    f_lo = fwer_at(se2_max, sb2_max, lo)
    trace.append((lo, f_lo))
    while f_lo > target_alpha and lo > 1e-6:
        hi, lo = lo, lo / 2
        f_lo = fwer_at(se2_max, sb2_max, lo)
        trace.append((lo, f_lo))
    best = lo
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        f = fwer_at(se2_max, sb2_max, mid)
        trace.append((mid, f))
        best = mid
        if abs(f - target_alpha) <= tol:
            break
        if f > target_alpha:
            hi = mid
        else:
            lo = mid
    return CalibrationResult(best, se2_max, sb2_max, table, tuple(trace))
