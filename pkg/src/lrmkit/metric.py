"""Distribution distances and diagnostic fits used by the harness.

Wasserstein-2 comes in four flavours: closed-form Gaussian (Bures), exact 1-d
quantile coupling, exact small-n assignment, and sliced projections for
larger ensembles.  The diagnostics quantify moment stabilization and the
step-size scaling of the bias term b.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import rng
from .rng import Substream

ASSIGNMENT_CAP = 512


@dataclass
class Ensemble:
    samples: np.ndarray  # (n, d)
    checkpoint_k: int
    tau: float


@dataclass
class W2Report:
    method: str
    value: float
    n_used: int


def _psd_sqrt(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def w2_gaussian(mean_a, cov_a, mean_b, cov_b) -> float:
    """Exact W2 between Gaussians: ||m_a - m_b||^2 + tr(Ca + Cb - 2(Ca^1/2 Cb Ca^1/2)^1/2),
    square-rooted."""
    ma = np.atleast_1d(np.asarray(mean_a, dtype=float))
    mb = np.atleast_1d(np.asarray(mean_b, dtype=float))
    Ca = np.atleast_2d(np.asarray(cov_a, dtype=float))
    Cb = np.atleast_2d(np.asarray(cov_b, dtype=float))
    root = _psd_sqrt(Ca)
    cross = _psd_sqrt(root @ Cb @ root)
    val = ((ma - mb) ** 2).sum() + np.trace(Ca) + np.trace(Cb) - 2.0 * np.trace(cross)
    return float(np.sqrt(max(val, 0.0)))


def _stride_subsample(x: np.ndarray, n: int) -> np.ndarray:
    """Deterministic subsample: every (N // n)-th element of the given order."""
    N = x.shape[0]
    if N == n:
        return x
    idx = np.arange(n) * (N // n)
    return x[idx]


def w2_1d(samples_a, samples_b, p: float = 2.0) -> W2Report:
    """Exact 1-d transport through sorted quantile coupling; the longer sample
    is stride-subsampled to the shorter length."""
    a = np.asarray(samples_a, dtype=float).reshape(-1)
    b = np.asarray(samples_b, dtype=float).reshape(-1)
    n = min(a.shape[0], b.shape[0])
    if n == 0:
        raise ValueError("empty sample")
    a = np.sort(_stride_subsample(np.sort(a), n))
    b = np.sort(_stride_subsample(np.sort(b), n))
    val = float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))
    return W2Report(method="sorted_1d", value=val, n_used=n)


def w2_assignment(samples_a, samples_b, cap: int = ASSIGNMENT_CAP,
                  p: float = 2.0) -> W2Report:
    """Exact optimal assignment on at most `cap` points per side (cubic cost);
    order p in (1, 2]."""
    if not 1.0 < p <= 2.0:
        raise ValueError("order p must lie in (1, 2]")
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    n = min(a.shape[0], b.shape[0], cap)
    a = _stride_subsample(a, n)
    b = _stride_subsample(b, n)
    cost = cdist(a, b) ** p
    r, c = linear_sum_assignment(cost)
    val = float(np.mean(cost[r, c]) ** (1.0 / p))
    return W2Report(method="assignment", value=val, n_used=n)


def sliced_w2(samples_a, samples_b, n_directions: int = 64, seed: int = 0,
              p: float = 2.0) -> W2Report:
    """Monte-Carlo sliced W2: average of 1-d transports along shared random
    unit directions (deterministic in the seed); at least 32 directions."""
    if n_directions < 32:
        raise ValueError("need at least 32 directions")
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    d = a.shape[1]
    u = rng.normals(seed, 0, Substream.METRIC, (d,), 0, n_directions)
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    pa = a @ u.T  # (n, P)
    pb = b @ u.T
    n = min(a.shape[0], b.shape[0])
    vals = np.empty(n_directions)
    for j in range(n_directions):
        vals[j] = w2_1d(pa[:, j], pb[:, j], p=p).value
    return W2Report(method="sliced", value=float(np.mean(vals ** p) ** (1.0 / p)),
                    n_used=n)


def w2_between(samples_a, samples_b, method: str = "auto", seed: int = 0,
               p: float = 2.0, cap: int = ASSIGNMENT_CAP,
               n_directions: int = 64) -> W2Report:
    """Dispatch: 1-d ensembles use the quantile coupling, small ones the exact
    assignment, anything else the sliced estimate."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if method == "auto":
        if a.shape[1] == 1:
            method = "sorted_1d"
        elif min(a.shape[0], b.shape[0]) <= cap:
            method = "assignment"
        else:
            method = "sliced"
    if method == "sorted_1d":
        if a.shape[1] != 1:
            raise ValueError("sorted_1d requires 1-d samples")
        return w2_1d(a, b, p=p)
    if method == "assignment":
        return w2_assignment(a, b, cap=cap, p=p)
    if method == "sliced":
        return sliced_w2(a, b, n_directions=n_directions, seed=seed, p=p)
    raise ValueError(f"unknown method {method!r}")


def reference_generator(seed: int) -> np.random.Generator:
    """Generator for reference-law draws, on the metric substream and a draw
    index no scheme uses, so it never collides with trajectory noise."""
    return rng.StreamKey(seed=seed, substream=Substream.METRIC).generator(1)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class MomentReport:
    stabilized: bool
    first_half_max: float
    second_half_max: float
    overall_max: float
    argmax: int


def moment_track(series) -> MomentReport:
    """Stabilization rule for a per-iteration second-moment series: the max of
    the second half must not exceed the first-half max by more than 10%."""
    s = np.asarray(series, dtype=float)
    if s.ndim != 1 or s.shape[0] < 2:
        raise ValueError("need a 1-d series with at least 2 entries")
    half = s.shape[0] // 2
    m1 = float(s[:half].max())
    m2 = float(s[half:].max())
    return MomentReport(stabilized=bool(m2 <= 1.10 * m1),
                        first_half_max=m1, second_half_max=m2,
                        overall_max=float(s.max()), argmax=int(s.argmax()))


@dataclass
class BiasFitReport:
    c_hat: float
    ratios: np.ndarray
    trend_slope: float
    trend_se: float
    not_increasing: bool


def bias_scaling_fit(gammas, mean_b_sq, mean_v_sq, burn_in: int = 0) -> BiasFitReport:
    """Per-iteration envelope ratio E||b||^2 / (gamma^2 E||v||^2 + gamma).

    c_hat is the max ratio after burn-in; the least-squares trend over
    iteration index must not be positive beyond twice its standard error.
    """
    g = np.asarray(gammas, dtype=float)[burn_in:]
    bb = np.asarray(mean_b_sq, dtype=float)[burn_in:]
    vv = np.asarray(mean_v_sq, dtype=float)[burn_in:]
    ratios = bb / (g * g * vv + g)
    if ratios.shape[0] < 3:
        return BiasFitReport(c_hat=float(ratios.max()), ratios=ratios,
                             trend_slope=0.0, trend_se=0.0,
                             not_increasing=True)
    x = np.arange(ratios.shape[0], dtype=float)
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    slope = float((xc * (ratios - ratios.mean())).sum() / sxx)
    resid = ratios - (ratios.mean() + slope * xc)
    dof = max(ratios.shape[0] - 2, 1)
    se = float(np.sqrt((resid * resid).sum() / dof / sxx))
    return BiasFitReport(c_hat=float(ratios.max()), ratios=ratios,
                         trend_slope=slope, trend_se=se,
                         not_increasing=bool(slope <= 2.0 * se))


def bias_envelope_constant(records) -> float:
    """Tightest per-step constant c with ||b||^2 <= c (gamma^2(||v||^2 + ||U'||^2)
    + gamma(||xi'||^2 + ||xi||^2)), from a list of step records."""
    best = 0.0
    for r in records:
        g = r.gamma

        def sq(a):
            return 0.0 if a is None else float((np.asarray(a) ** 2).sum())

        denom = (g * g * (sq(r.drift) + sq(r.noise_U_prime))
                 + g * (sq(r.xi_prime) + sq(r.xi)))
        if denom > 0:
            best = max(best, sq(r.bias_b) / denom)
    return best
