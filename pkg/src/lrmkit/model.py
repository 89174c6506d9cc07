"""Target potentials, diffusion coefficients, mirror maps, and estimators
for the regularity constants the step-size theory consumes.

All potential callables are batched: f maps (..., d) -> (...) and grad_f maps
(..., d) -> (..., d).  Matrix applications use row-wise broadcasting sums
rather than BLAS matmul so a replica's value never depends on batch shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rng import StreamKey


def matvec(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise M @ x_r for x of shape (..., d)."""
    return (x[..., None, :] * M).sum(axis=-1)


@dataclass(frozen=True)
class Dissipativity:
    alpha: float
    beta: float
    kappa: float = 1.0


@dataclass(frozen=True)
class ReferenceMoments:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class PotentialModel:
    """Target density pi ~ exp(-f) with its drift field v = -grad f."""

    dim: int
    f: Callable[[np.ndarray], np.ndarray]
    grad_f: Callable[[np.ndarray], np.ndarray]
    lipschitz_L: Optional[float] = None
    growth_Cv: Optional[float] = None
    dissipativity: Optional[Dissipativity] = None
    reference_moments: Optional[ReferenceMoments] = None
    reference_sampler: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None
    name: str = "custom"

    def drift(self, x: np.ndarray) -> np.ndarray:
        return -self.grad_f(x)


# ---------------------------------------------------------------------------
# target zoo


def _check_spd(M: np.ndarray, what: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be a square matrix")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{what} must be symmetric")
    w = np.linalg.eigvalsh(M)
    if w[0] <= 0:
        raise ValueError(f"{what} must be positive definite (min eigenvalue {w[0]:g})")
    return M


def build_gaussian(mean, precision) -> PotentialModel:
    """Gaussian target: f(x) = (x-m)' P (x-m) / 2."""
    P = _check_spd(precision, "precision")
    m = np.asarray(mean, dtype=float).reshape(-1)
    d = m.shape[0]
    if P.shape[0] != d:
        raise ValueError("mean and precision dimensions disagree")
    w, V = np.linalg.eigh(P)
    cov = (V / w) @ V.T
    lam_min, lam_max = float(w[0]), float(w[-1])

    def f(x):
        dx = np.asarray(x, dtype=float) - m
        return 0.5 * (dx * matvec(P, dx)).sum(axis=-1)

    def grad_f(x):
        dx = np.asarray(x, dtype=float) - m
        return matvec(P, dx)

    # <x, -grad f(x)> = -x'Px + x'Pm <= -(lam_min - eps) ||x||^2 + ||Pm||^2/(4 eps)
    if np.allclose(m, 0.0):
        diss = Dissipativity(alpha=lam_min, beta=0.0)
    else:
        eps = 0.05 * lam_min
        pm = P @ m
        diss = Dissipativity(alpha=lam_min - eps, beta=float(pm @ pm) / (4.0 * eps))

    chol = np.linalg.cholesky(cov)

    def sample(n, gen):
        return m + gen.standard_normal((n, d)) @ chol.T

    return PotentialModel(
        dim=d, f=f, grad_f=grad_f, lipschitz_L=lam_max,
        growth_Cv=float(np.linalg.norm(P @ m)),
        dissipativity=diss,
        reference_moments=ReferenceMoments(mean=m, covariance=cov),
        reference_sampler=sample, name="gaussian",
    )


def build_gaussian_mixture(weights, means) -> PotentialModel:
    """Mixture of unit-covariance Gaussians: f = -log sum_i w_i exp(-||x-mu_i||^2/2).

    Gradients use max-shifted log-sum-exp.  hess f = I - Cov_r(mu) with r the
    posterior component weights, and Popoviciu bounds the posterior variance
    along any direction by (diam/4)^2 * 4, giving the Lipschitz constant
    max(1, diam^2/4 - 1) (tight for a symmetric pair).  Dissipativity is left
    for the estimator.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    mus = np.atleast_2d(np.asarray(means, dtype=float))
    if w.size == 0 or mus.shape[0] == 0:
        raise ValueError("empty mixture")
    if mus.shape[0] != w.size:
        raise ValueError("weights and means count disagree")
    if (w <= 0).any():
        raise ValueError("mixture weights must be positive (underflow?)")
    if not math.isclose(float(w.sum()), 1.0, rel_tol=1e-9):
        raise ValueError("mixture weights must sum to 1")
    d = mus.shape[1]
    logw = np.log(w)

    def _logits(x):
        x = np.asarray(x, dtype=float)
        dx = x[..., None, :] - mus  # (..., n_comp, d)
        return logw - 0.5 * (dx * dx).sum(axis=-1)

    def f(x):
        l = _logits(x)
        m = l.max(axis=-1, keepdims=True)
        return -(m[..., 0] + np.log(np.exp(l - m).sum(axis=-1)))

    def grad_f(x):
        x = np.asarray(x, dtype=float)
        l = _logits(x)
        l = l - l.max(axis=-1, keepdims=True)
        r = np.exp(l)
        r = r / r.sum(axis=-1, keepdims=True)
        return x - (r[..., :, None] * mus).sum(axis=-2)

    mbar = w @ mus
    cov = np.eye(d) + (w[:, None] * mus).T @ mus - np.outer(mbar, mbar)
    diff = mus[:, None, :] - mus[None, :, :]
    diam_sq = float((diff * diff).sum(axis=-1).max())
    L = max(1.0, diam_sq / 4.0 - 1.0)

    def sample(n, gen):
        comp = gen.choice(w.size, size=n, p=w)
        return mus[comp] + gen.standard_normal((n, d))

    return PotentialModel(
        dim=d, f=f, grad_f=grad_f, lipschitz_L=L,
        reference_moments=ReferenceMoments(mean=mbar, covariance=cov),
        reference_sampler=sample, name="mixture",
    )


def build_repulsive(dim: int = 1) -> PotentialModel:
    """Repulsive fixture with drift v(x) = +x (so grad_f = -x); not dissipative."""

    def f(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * (x * x).sum(axis=-1)

    def grad_f(x):
        return -np.asarray(x, dtype=float)

    return PotentialModel(dim=dim, f=f, grad_f=grad_f, lipschitz_L=1.0,
                          name="repulsive")


# ---------------------------------------------------------------------------
# diffusion coefficients and mirror maps


@dataclass
class DiffusionCoeff:
    """Diffusion sigma(x), bounded in Hilbert-Schmidt norm by hs_bound_Csigma."""

    kind: str  # "identity" | "matrix" | "state"
    hs_bound_Csigma: float
    matrix: Optional[np.ndarray] = None
    sigma_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lipschitz_L_sigma: Optional[float] = None

    @classmethod
    def identity(cls, dim: int) -> "DiffusionCoeff":
        return cls(kind="identity", hs_bound_Csigma=math.sqrt(dim),
                   lipschitz_L_sigma=0.0)

    @classmethod
    def constant_matrix(cls, M) -> "DiffusionCoeff":
        M = np.asarray(M, dtype=float)
        return cls(kind="matrix", hs_bound_Csigma=float(np.linalg.norm(M)),
                   matrix=M, lipschitz_L_sigma=0.0)

    @classmethod
    def state_dependent(cls, sigma_fn, hs_bound, lipschitz=None) -> "DiffusionCoeff":
        return cls(kind="state", hs_bound_Csigma=float(hs_bound),
                   sigma_fn=sigma_fn, lipschitz_L_sigma=lipschitz)

    def apply(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """sigma(x) xi; for identity this returns xi itself, exactly."""
        if self.kind == "identity":
            return xi
        if self.kind == "matrix":
            return matvec(self.matrix, xi)
        sig = self.sigma_fn(x)
        if sig.ndim == 2:
            return matvec(sig, xi)
        return np.einsum("...ij,...j->...i", sig, xi)


@dataclass
class MirrorMap:
    """Dual geometry (grad phi*, hess phi*) of a strongly convex mirror phi."""

    dim: int
    grad_phi_star: Callable[[np.ndarray], np.ndarray]
    hess_phi_star: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"  # "quadratic" | "custom"
    A: Optional[np.ndarray] = None
    factor: Optional[np.ndarray] = None  # (hess phi*)^{-1/2}, cached when constant

    @classmethod
    def quadratic(cls, A) -> "MirrorMap":
        A = _check_spd(A, "mirror matrix A")
        d = A.shape[0]
        w, V = np.linalg.eigh(A)
        A_inv = (V / w) @ V.T
        factor = (V * np.sqrt(w)) @ V.T  # ((A^{-1})^{-1})^{1/2} = A^{1/2}

        def grad(x):
            return matvec(A_inv, np.asarray(x, dtype=float))

        def hess(x):
            return A_inv

        return cls(dim=d, grad_phi_star=grad, hess_phi_star=hess,
                   kind="quadratic", A=A, factor=factor)

    @classmethod
    def custom(cls, dim, grad_phi_star, hess_phi_star) -> "MirrorMap":
        return cls(dim=dim, grad_phi_star=grad_phi_star,
                   hess_phi_star=hess_phi_star, kind="custom")


# ---------------------------------------------------------------------------
# estimators


@dataclass
class DissipativityEstimate:
    alpha_hat: float
    beta_hat: float
    violations: int
    dissipative: bool
    probes: int = 0


def _sphere_directions(d: int, count: int, gen: np.random.Generator) -> np.ndarray:
    """count random unit directions plus the +/- coordinate axes."""
    u = gen.standard_normal((count, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    axes = np.concatenate([np.eye(d), -np.eye(d)])
    return np.concatenate([u, axes])


def dissipativity_estimate(model: PotentialModel, radius_grid,
                           directions_per_radius: int,
                           rng_stream: StreamKey) -> DissipativityEstimate:
    """Probe <x, v(x)> <= -alpha ||x||^2 + beta on a radial grid.

    alpha_hat is the smallest per-direction slope of s(r) = <r u, v(r u)>
    across the two outermost radii; beta_hat is the envelope max(0,
    max_probes s + alpha_hat r^2), which makes violations 0 by construction.
    alpha_hat <= 0 reports NOT_DISSIPATIVE.
    """
    radii = np.sort(np.asarray(radius_grid, dtype=float))
    if radii.size < 2 or radii[0] < 0:
        raise ValueError("radius grid needs >= 2 nonnegative radii")
    gen = rng_stream.with_substream(rng_stream.substream).generator(0)
    u = _sphere_directions(model.dim, directions_per_radius, gen)
    # s[i, j] = <x, v(x)> at x = radii[i] * u[j]
    X = radii[:, None, None] * u[None, :, :]
    s = -(X * model.grad_f(X)).sum(axis=-1)
    ra, rb = radii[-2], radii[-1]
    slopes = -(s[-1] - s[-2]) / (rb * rb - ra * ra)
    alpha_hat = float(slopes.min())
    n_probes = s.size
    if alpha_hat <= 0:
        return DissipativityEstimate(alpha_hat, float("nan"), n_probes, False, n_probes)
    beta_hat = max(0.0, float((s + alpha_hat * (radii ** 2)[:, None]).max()))
    viol = int((s > -alpha_hat * (radii ** 2)[:, None] + beta_hat + 1e-12).sum())
    return DissipativityEstimate(alpha_hat, beta_hat, viol, True, n_probes)


def lipschitz_estimate(model: PotentialModel, pair_count: int,
                       rng_stream: StreamKey) -> float:
    """Max gradient difference quotient over local pairs, global pairs, and a
    structured sweep along the reference-covariance principal axes.

    The structured sweep is what catches interior curvature peaks (mixture
    saddles between modes) that random pairs miss at realistic pair counts.
    """
    if pair_count < 100:
        raise ValueError("pair_count must be >= 100")
    gen = rng_stream.generator(1)
    d = model.dim
    if model.reference_moments is not None:
        center = model.reference_moments.mean
        scale = float(np.sqrt(np.trace(model.reference_moments.covariance)))
    else:
        center, scale = np.zeros(d), 1.0
    scale = max(scale, 1.0)

    def quotient(x, y):
        num = np.linalg.norm(model.grad_f(x) - model.grad_f(y), axis=-1)
        den = np.linalg.norm(x - y, axis=-1)
        return num / den

    n_loc = pair_count // 2
    x = center + 2.0 * scale * gen.standard_normal((n_loc, d))
    step = gen.standard_normal((n_loc, d))
    step *= 1e-3 / np.linalg.norm(step, axis=1, keepdims=True)
    best = float(quotient(x, x + step).max())

    n_glob = pair_count - n_loc
    x = center + 2.0 * scale * gen.standard_normal((n_glob, d))
    y = center + 2.0 * scale * gen.standard_normal((n_glob, d))
    keep = np.linalg.norm(x - y, axis=1) > 1e-9
    if keep.any():
        best = max(best, float(quotient(x[keep], y[keep]).max()))

    if model.reference_moments is not None:
        _, axes = np.linalg.eigh(model.reference_moments.covariance)
        ts = np.linspace(-3.0 * scale, 3.0 * scale, 401)
        for j in range(d):
            pts = center + ts[:, None] * axes[:, j]
            best = max(best, float(quotient(pts[1:], pts[:-1]).max()))
    return best


def grad_check(model: PotentialModel, probes: int, rng_stream: StreamKey,
               h: float = 1e-5) -> tuple[float, bool]:
    """Central finite differences of f against grad_f at random probe points.

    Returns (max relative error, pass at 1e-5).
    """
    gen = rng_stream.generator(2)
    d = model.dim
    if model.reference_moments is not None:
        center = model.reference_moments.mean
        scale = max(1.0, float(np.sqrt(np.trace(model.reference_moments.covariance))))
    else:
        center, scale = np.zeros(d), 1.0
    X = center + scale * gen.standard_normal((probes, d))
    E = np.eye(d)
    fd = np.empty((probes, d))
    for i in range(d):
        fd[:, i] = (model.f(X + h * E[i]) - model.f(X - h * E[i])) / (2.0 * h)
    g = model.grad_f(X)
    rel = np.linalg.norm(fd - g, axis=1) / (1.0 + np.linalg.norm(g, axis=1))
    worst = float(rel.max())
    return worst, worst < 1e-5
