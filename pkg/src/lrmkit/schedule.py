"""Step-size schedules, the effective clock tau_k, and step-size validators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

KINDS = ("constant", "poly", "sqrtlog")


@dataclass
class ScheduleReport:
    """Validator verdicts for a step-size schedule.

    strange_condition_first_index is the smallest k0 such that

        gamma_{k+1}/gamma_k + P * gamma_k * gamma_{k+1} < 1 - gamma_k

    holds at every checked k in [k0, max_k); None means the suffix condition
    never holds up to max_k (rendered as NEVER).
    """

    rm_divergent: bool
    rm_square_summable: bool
    strange_condition_first_index: Optional[int]
    P_used: float

    def as_dict(self) -> dict:
        return {
            "rm_divergent": self.rm_divergent,
            "rm_square_summable": self.rm_square_summable,
            "strange_condition_first_index": self.strange_condition_first_index,
            "P_used": self.P_used,
        }

    def __str__(self) -> str:
        idx = "NEVER" if self.strange_condition_first_index is None \
            else str(self.strange_condition_first_index)
        return (f"rm_divergent={self.rm_divergent} "
                f"rm_square_summable={self.rm_square_summable} "
                f"strange_first_index={idx} P={self.P_used:g}")


class StepSchedule:
    """gamma_k for k = 1..max_k, by family.

    constant: gamma_k = c
    poly:     gamma_k = c * k**(-p)
    sqrtlog:  gamma_k = c / (sqrt(k) * log(k+1)), natural log
    """

    def __init__(self, kind: str, c: float, p: float = 1.0, max_k: int = 10_000):
        if kind not in KINDS:
            raise ValueError(f"unknown schedule kind {kind!r}")
        if c <= 0:
            raise ValueError("schedule constant c must be positive")
        # poly exponents outside (0.5, 1] are representable; the validator
        # reports whether they satisfy the Robbins-Monro conditions
        if kind == "poly" and p <= 0:
            raise ValueError("poly exponent p must be positive")
        if max_k < 1:
            raise ValueError("max_k must be a positive integer")
        self.kind = kind
        self.c = float(c)
        self.p = float(p)
        self.max_k = int(max_k)
        self.validity: Optional[ScheduleReport] = None
        self._tau: Optional[np.ndarray] = None

    @classmethod
    def constant(cls, gamma: float, max_k: int = 10_000) -> "StepSchedule":
        return cls("constant", gamma, max_k=max_k)

    @classmethod
    def poly(cls, c: float, p: float, max_k: int = 10_000) -> "StepSchedule":
        return cls("poly", c, p=p, max_k=max_k)

    @classmethod
    def sqrtlog(cls, c: float, max_k: int = 10_000) -> "StepSchedule":
        return cls("sqrtlog", c, max_k=max_k)

    def _gamma_array(self, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks, dtype=float)
        if self.kind == "constant":
            return np.full_like(ks, self.c)
        if self.kind == "poly":
            return self.c * ks ** (-self.p)
        return self.c / (np.sqrt(ks) * np.log(ks + 1.0))

    def gamma(self, k: int) -> float:
        """Step size gamma_k, 1 <= k <= max_k."""
        if not 1 <= k <= self.max_k:
            raise ValueError(f"k={k} outside [1, {self.max_k}]")
        return float(self._gamma_array(np.array([k]))[0])

    def gammas(self, lo: int, hi: int) -> np.ndarray:
        """gamma_k for k in [lo, hi), vectorized."""
        if not (1 <= lo and hi - 1 <= self.max_k):
            raise ValueError(f"range [{lo}, {hi}) outside [1, {self.max_k}]")
        return self._gamma_array(np.arange(lo, hi))

    def tau(self, k: int) -> float:
        """Effective clock tau_k = sum_{n<=k} gamma_n; tau_0 = 0."""
        if not 0 <= k <= self.max_k:
            raise ValueError(f"k={k} outside [0, {self.max_k}]")
        if self._tau is None:
            g = self._gamma_array(np.arange(1, self.max_k + 1))
            self._tau = np.concatenate([[0.0], np.cumsum(g)])
        return float(self._tau[k])

    def __repr__(self) -> str:
        extra = f", p={self.p}" if self.kind == "poly" else ""
        return f"StepSchedule({self.kind}, c={self.c}{extra}, max_k={self.max_k})"


def compute_P(L: float, C_b: float) -> float:
    """Perturbation constant P = 2 L^2 + 4 C_b + 2 sqrt(2 C_b)."""
    if L < 0 or C_b < 0:
        raise ValueError("L and C_b must be nonnegative")
    return 2.0 * L * L + 4.0 * C_b + 2.0 * np.sqrt(2.0 * C_b)


def validate(schedule: StepSchedule, P: float) -> ScheduleReport:
    """Robbins-Monro verdicts (analytic, by family) plus the numeric suffix
    scan of the step-size ratio condition up to max_k."""
    if schedule.max_k < 10:
        raise ValueError("validation needs max_k >= 10")
    if schedule.kind == "constant":
        divergent, sq_summable = True, False
    elif schedule.kind == "poly":
        divergent, sq_summable = schedule.p <= 1.0, schedule.p > 0.5
    else:  # sqrtlog: sum ~ 2 sqrt(k)/log k diverges; squares ~ 1/(k log^2 k) summable
        divergent, sq_summable = True, True

    g = schedule._gamma_array(np.arange(1, schedule.max_k + 1))
    lhs = g[1:] / g[:-1] + P * g[:-1] * g[1:]
    rhs = 1.0 - g[:-1]
    ok = lhs < rhs  # ok[i] is the condition at k = i + 1
    if ok.all():
        first: Optional[int] = 1
    elif not ok[-1]:
        first = None
    else:
        first = int(np.nonzero(~ok)[0][-1]) + 2  # one past the last failing k

    report = ScheduleReport(divergent, sq_summable, first, float(P))
    schedule.validity = report
    return report
