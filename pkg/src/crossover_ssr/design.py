"""Crossover sequence sets, model parameters and hypothesis settings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

DIRECTIONS = ("greater", "less", "two_sided")
POWER_KINDS = ("pairwise", "familywise")


class DesignError(ValueError):
    """Invalid or unsupported design request."""


@dataclass(frozen=True)
class TrialDesign:
    """K sequences of length P over treatments 0..D-1 (0 is the control)."""

    sequences: Tuple[Tuple[int, ...], ...]
    D: int

    def __post_init__(self):
        seqs = tuple(tuple(int(t) for t in s) for s in self.sequences)
        if not seqs:
            raise DesignError("a design needs at least one sequence")
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise DesignError(f"sequences have unequal lengths {sorted(lengths)}")
        if self.D < 2:
            raise DesignError("need at least two treatments")
        bad = [t for s in seqs for t in s if not 0 <= t < self.D]
        if bad:
            raise DesignError(f"treatment indices {sorted(set(bad))} outside 0..{self.D - 1}")
        object.__setattr__(self, "sequences", seqs)

    @classmethod
    def from_strings(cls, seqs, D=None):
        rows = [[int(c) for c in s] for s in seqs]
        if D is None:
            D = max(max(r) for r in rows) + 1
        return cls(tuple(map(tuple, rows)), D)

    @property
    def P(self) -> int:
        return len(self.sequences[0])

    @property
    def K(self) -> int:
        return len(self.sequences)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.sequences, dtype=np.int64)

    @property
    def period_balanced(self) -> bool:
        return check_period_balance(self).balanced

    @property
    def complete_block(self) -> bool:
        target = tuple(range(self.D))
        return self.P == self.D and all(tuple(sorted(s)) == target for s in self.sequences)

    def labels(self):
        return ["".join(str(t) for t in s) for s in self.sequences]


@dataclass(frozen=True)
class ModelParams:
    """Fixed and random effect settings of the crossover linear mixed model."""

    mu0: float
    pi: Tuple[float, ...]
    tau: Tuple[float, ...]
    sigma_e2: float
    sigma_b2: float

    def __post_init__(self):
        object.__setattr__(self, "pi", tuple(float(x) for x in self.pi))
        object.__setattr__(self, "tau", tuple(float(x) for x in self.tau))
        if not self.pi or self.pi[0] != 0.0:
            raise DesignError("pi[0] (first period) must be 0")
        if not self.tau or self.tau[0] != 0.0:
            raise DesignError("tau[0] (control) must be 0")
        if self.sigma_e2 < 0 or self.sigma_b2 < 0:
            raise DesignError("variance components must be nonnegative")

    def with_(self, **changes) -> "ModelParams":
        values = dict(mu0=self.mu0, pi=self.pi, tau=self.tau, sigma_e2=self.sigma_e2,
                      sigma_b2=self.sigma_b2)
        values.update(changes)
        return ModelParams(**values)

    def check_against(self, design: TrialDesign):
        if len(self.pi) != design.P:
            raise DesignError(f"pi has {len(self.pi)} entries but the design has {design.P} periods")
        if len(self.tau) != design.D:
            raise DesignError(f"tau has {len(self.tau)} entries but the design has {design.D} treatments")


@dataclass(frozen=True)
class HypothesisSpec:
    direction: str
    delta: float
    alpha: float
    beta: float
    power_kind: str = "pairwise"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise DesignError(f"direction must be one of {DIRECTIONS}")
        if self.power_kind not in POWER_KINDS:
            raise DesignError(f"power_kind must be one of {POWER_KINDS}")
        if not 0 < self.alpha < 1 or not 0 < self.beta < 1:
            raise DesignError("alpha and beta must lie in (0, 1)")
        ok = {"greater": self.delta > 0, "less": self.delta < 0, "two_sided": self.delta != 0}
        if not ok[self.direction]:
            raise DesignError(f"delta={self.delta} is inconsistent with direction {self.direction!r}")

    @property
    def sign(self) -> float:
        """Multiplier that turns a 'less' test into a 'greater' one."""
        return -1.0 if self.direction == "less" else 1.0

    def with_(self, **changes) -> "HypothesisSpec":
        values = dict(direction=self.direction, delta=self.delta, alpha=self.alpha, beta=self.beta,
                      power_kind=self.power_kind)
        values.update(changes)
        return HypothesisSpec(**values)


@dataclass(frozen=True)
class BalanceReport:
    balanced: bool
    counts: np.ndarray = field(repr=False)
    """(P, D) array: how often treatment d is given in period j."""
    adjacent_differences_vanish: bool = True
    """Sum over sequences of tau_d(j,k) - tau_d(j-1,k) is zero for every j and every tau."""
    period_totals_equal: bool = True
    """Sum over sequences of tau_d(j,k) is the same for every j and every tau."""


def check_period_balance(design: TrialDesign) -> BalanceReport:
    """Check that every treatment appears equally often in every period.

    Both sums used by the blinded estimators are linear in tau with
    coefficients equal to these counts, so they hold for every tau exactly
    when the count vectors of all period columns coincide.
    """
    arr = design.array
    counts = np.zeros((design.P, design.D), dtype=np.int64)
    for j in range(design.P):
        counts[j] = np.bincount(arr[:, j], minlength=design.D)
    diffs = np.diff(counts, axis=0)
    # tau_0 = 0, so only treatments 1..D-1 carry a coefficient
    adjacent = bool(np.all(diffs[:, 1:] == 0))
    totals = bool(np.all(counts[:, 1:] == counts[0, 1:]))
    balanced = bool(np.all(counts == counts[0]))
    return BalanceReport(balanced, counts, adjacent, totals)


def williams_square(D: int, single: bool = False) -> TrialDesign:
    """Williams design over D treatments.

    Even D gives a single D x D square. Odd D needs the square together with
    its mirror image (2D sequences); ``single=True`` refuses that case.
    """
    if D < 2:
        raise DesignError("Williams designs need D >= 2")
    first = [0]
    lo, hi = 1, D - 1
    take_low = True
    while len(first) < D:
        if take_low:
            first.append(lo)
            lo += 1
        else:
            first.append(hi)
            hi -= 1
        take_low = not take_low
    square = [tuple((t + r) % D for t in first) for r in range(D)]
    if D % 2 == 0:
        return TrialDesign(tuple(square), D)
    if single:
        raise DesignError(f"no single period-balanced Williams square exists for odd D={D}")
    mirror = [tuple(reversed(s)) for s in square]
    return TrialDesign(tuple(square + mirror), D)


BUILTIN_NAMES = ("example1", "example2", "example3")


def builtin_design(name: str):
    """Return (design, params, hypothesis) for one of the three motivating trials."""
    if name == "example1":
        design = williams_square(4)
        params = ModelParams(10.65, (0.0, -0.77, -0.96, -0.55), (0.0, -1.51, -2.15, -2.37), 6.51, 10.12)
        hyp = HypothesisSpec("less", -1.24, 0.05, 0.2)
    elif name == "example2":
        design = TrialDesign.from_strings(["01", "10", "02", "20", "12", "21"], D=3)
        params = ModelParams(1.51, (0.0, 0.03), (0.0, 0.50, 0.52), 0.053, 0.49)
        hyp = HypothesisSpec("greater", 0.2, 0.1, 0.2)
    elif name == "example3":
        design = TrialDesign.from_strings(["011", "100", "010", "101"], D=2)
        params = ModelParams(156.77, (0.0, -2.13, -4.90), (0.0, -7.55), 169.8, 255.0)
        hyp = HypothesisSpec("less", -5.39, 0.025, 0.1)
    else:
        raise DesignError(f"unknown built-in design {name!r}; choose from {BUILTIN_NAMES}")
    return design, params, hyp
