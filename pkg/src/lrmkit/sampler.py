"""The LRM engine: one-step updates for the six schemes, step records
exposing the perturbation decomposition Z = U + b, and trajectory/ensemble
runners.

Every scheme computes its update through the canonical form

    x_{k+1} = x_k - gamma_{k+1} * ((drift + U) + b) + sqrt(2 gamma_{k+1}) * sigma(x_k) xi

so the StepRecord reconstruction identity holds bit-exactly for identity
diffusion.  Kernels are batched over a leading replica axis; the scalar and
ensemble runners share them, and all randomness comes from the counter-based
streams in :mod:`lrmkit.rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .model import DiffusionCoeff, MirrorMap, PotentialModel
from .noise import NoiseModel
from .rng import Substream
from .schedule import StepSchedule

SCHEMES = ("sgld", "rmm", "ormm", "srk", "ml", "pla")

# stochastic Runge-Kutta stage constants; C1 + C3 = 1 and C1 - C3 = 2/sqrt(6)
SRK_C1 = 0.5 + 1.0 / math.sqrt(6.0)
SRK_C2 = 1.0 / math.sqrt(12.0)
SRK_C3 = 0.5 - 1.0 / math.sqrt(6.0)


class SamplerError(Exception):
    code = "FAIL"


class FailDiverged(SamplerError):
    """A non-finite coordinate appeared; carries the failing iteration."""

    code = "FAIL_DIVERGED"

    def __init__(self, k: int, last_state=None):
        super().__init__(f"non-finite state at iteration {k}")
        self.k = k
        self.last_state = last_state

    def __reduce__(self):
        return (FailDiverged, (self.k,))


class FailImplicit(SamplerError):
    code = "FAIL_IMPLICIT"

    def __init__(self, k: int, residual: float):
        super().__init__(f"fixed-point solve did not converge at iteration {k} "
                         f"(residual {residual:.3e})")
        self.k = k
        self.residual = residual

    def __reduce__(self):
        return (FailImplicit, (self.k, self.residual))


class FailGeometry(SamplerError):
    code = "FAIL_GEOMETRY"

    def __init__(self, k: int):
        super().__init__(f"mirror Hessian not positive definite at iteration {k}")
        self.k = k

    def __reduce__(self):
        return (FailGeometry, (self.k,))


@dataclass
class SchemeConfig:
    scheme: str
    model: PotentialModel
    diffusion: DiffusionCoeff
    noise: NoiseModel
    schedule: StepSchedule
    x0: np.ndarray
    mirror: Optional[MirrorMap] = None
    pla_tol: float = 1e-10
    pla_max_iter: int = 200
    allow_general_diffusion: bool = False

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.x0.shape[0] != self.model.dim:
            raise ValueError("x0 dimension does not match the model")
        if self.scheme == "ml":
            if self.mirror is None:
                raise ValueError("ml requires a mirror map")
            if self.mirror.dim != self.model.dim:
                raise ValueError("mirror dimension does not match the model")
            if self.diffusion.kind != "identity":
                raise ValueError("ml derives its diffusion from the mirror map; "
                                 "pass an identity DiffusionCoeff")
        elif self.diffusion.kind != "identity" and not self.allow_general_diffusion:
            raise ValueError(f"{self.scheme} requires identity diffusion "
                             "(set allow_general_diffusion to override)")
        if self.scheme == "pla":
            L = self.model.lipschitz_L
            if L is None:
                raise ValueError("pla needs lipschitz_L on the model "
                                 "(run lipschitz_estimate first)")
            g1 = self.schedule.gamma(1)
            if g1 * L >= 1.0:
                raise ValueError(f"pla contraction requires gamma_1 * L < 1 "
                                 f"(got {g1:g} * {L:g})")
        if self.pla_tol <= 0 or self.pla_max_iter < 1:
            raise ValueError("pla_tol must be positive and pla_max_iter >= 1")


@dataclass
class StepRecord:
    """Per-iteration decomposition of one LRM update.

    The defining identity (checked by tests and used verbatim by the engine):
    x_next = x_k - gamma*((drift + noise_U) + bias_b) + sqrt(2*gamma)*sigma(x_k) xi.
    """

    k: int
    gamma: float
    drift: np.ndarray
    noise_U: np.ndarray
    bias_b: np.ndarray
    xi: np.ndarray
    x_next: np.ndarray
    grad_calls: int
    xi_prime: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    noise_U_prime: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    replica_id: int
    states: np.ndarray  # (K+1, d)
    records: list
    schedule: StepSchedule
    stream: rng.StreamKey
    checkpoints: list = field(default_factory=list)  # (k, state copy)
    grad_calls_total: int = 0


def reconstruct(x, gamma, drift, noise_U, bias_b, sigma_xi):
    """The LRM identity; kernels and reconstruction checks share this code."""
    return x - gamma * ((drift + noise_U) + bias_b) + np.sqrt(2.0 * gamma) * sigma_xi


def compose_xi(alpha, xi_prime, zeta):
    """Correlated pair construction: xi = sqrt(a) xi' + sqrt(1-a) zeta,
    giving standard marginals with cross-covariance sqrt(a) I."""
    a = np.asarray(alpha, dtype=float)[..., None]
    return np.sqrt(a) * xi_prime + np.sqrt(1.0 - a) * zeta


def gaussian_increment_xi(scheme: str, seed: int, kk: int, d: int,
                          lo: int, hi: int) -> np.ndarray:
    """The xi multiplying sqrt(2 gamma) at draw index kk, for replicas
    [lo, hi); reproduces the engine's composition bit-for-bit (used by the
    Brownian coupling)."""
    if scheme in ("rmm", "ormm"):
        alpha = rng.uniforms(seed, kk, Substream.ALPHA, lo, hi)
        xi_p = rng.normals(seed, kk, Substream.SCHEME_XI_PRIME, (d,), lo, hi)
        zeta = rng.normals(seed, kk, Substream.SCHEME_XI, (d,), lo, hi)
        return compose_xi(alpha, xi_p, zeta)
    if scheme == "ml":
        raise ValueError("ml injects noise through the mirror factor; "
                         "no scalar Brownian coupling is defined")
    return rng.normals(seed, kk, Substream.SCHEME_XI, (d,), lo, hi)


# ---------------------------------------------------------------------------
# kernels (pure: state + draws in, update decomposition out)


def _zeros_like(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _sgld_kernel(model, noise_model, diffusion, gamma, x, xi, zu):
    g = model.grad_f(x)
    U = noise_model.apply(x, zu) if zu is not None else _zeros_like(x)
    b = _zeros_like(x)
    x1 = reconstruct(x, gamma, g, U, b, diffusion.apply(x, xi))
    return dict(x_next=x1, drift=g, noise_U=U, bias_b=b, xi=xi, grad_calls=1)


def _rmm_kernel(model, noise_model, diffusion, gamma, x, alpha, xi_p, zeta,
                zu_prime, zu_mid):
    a = np.asarray(alpha, dtype=float)[..., None]
    xi = compose_xi(alpha, xi_p, zeta)
    g0 = model.grad_f(x)
    Up = noise_model.apply(x, zu_prime) if zu_prime is not None else _zeros_like(x)
    mid = x - (gamma * a) * (g0 + Up) + np.sqrt(2.0 * gamma * a) * xi_p
    gm = model.grad_f(mid)
    U = noise_model.apply(mid, zu_mid) if zu_mid is not None else _zeros_like(x)
    b = gm - g0
    x1 = reconstruct(x, gamma, g0, U, b, diffusion.apply(x, xi))
    return dict(x_next=x1, drift=g0, noise_U=U, bias_b=b, xi=xi, xi_prime=xi_p,
                alpha=alpha, noise_U_prime=Up, grad_calls=2)


def _ormm_kernel(model, noise_model, diffusion, gamma, x, cache, alpha, xi_p,
                 zeta, zu_mid):
    a = np.asarray(alpha, dtype=float)[..., None]
    xi = compose_xi(alpha, xi_p, zeta)
    # mid-point reuses the cached noisy gradient from the previous half-step
    mid = x - (gamma * a) * cache + np.sqrt(2.0 * gamma * a) * xi_p
    gm = model.grad_f(mid)
    U = noise_model.apply(mid, zu_mid) if zu_mid is not None else _zeros_like(x)
    new_cache = gm + U
    g0 = model.grad_f(x)  # record bookkeeping; the scheme spends one oracle call
    b = gm - g0
    x1 = reconstruct(x, gamma, g0, U, b, diffusion.apply(x, xi))
    return dict(x_next=x1, drift=g0, noise_U=U, bias_b=b, xi=xi, xi_prime=xi_p,
                alpha=alpha, new_cache=new_cache, grad_calls=1)


def _srk_kernel(model, noise_model, diffusion, gamma, x, xi, xi_p,
                zu_prime, zu_h1, zu_h2):
    g0 = model.grad_f(x)
    Up = noise_model.apply(x, zu_prime) if zu_prime is not None else _zeros_like(x)
    root = np.sqrt(2.0 * gamma)
    h1 = x + root * (SRK_C1 * xi + SRK_C2 * xi_p)
    h2 = x - gamma * (g0 + Up) + root * (SRK_C3 * xi + SRK_C2 * xi_p)
    g1 = model.grad_f(h1)
    g2 = model.grad_f(h2)
    if zu_h1 is not None:
        U = 0.5 * (noise_model.apply(h1, zu_h1) + noise_model.apply(h2, zu_h2))
    else:
        U = _zeros_like(x)
    b = 0.5 * (g1 + g2) - g0
    x1 = reconstruct(x, gamma, g0, U, b, diffusion.apply(x, xi))
    return dict(x_next=x1, drift=g0, noise_U=U, bias_b=b, xi=xi, xi_prime=xi_p,
                noise_U_prime=Up, grad_calls=3)


def _mirror_factor_apply(mirror: MirrorMap, x, xi, k: int):
    """(hess phi*(x))^{-1/2} xi; FAIL_GEOMETRY if the Hessian is not SPD."""
    if mirror.factor is not None:
        return np.asarray((xi[..., None, :] * mirror.factor).sum(axis=-1))
    X = np.atleast_2d(x)
    XI = np.atleast_2d(xi)
    out = np.empty_like(XI)
    for i in range(X.shape[0]):
        H = np.asarray(mirror.hess_phi_star(X[i]), dtype=float)
        w, V = np.linalg.eigh(H)
        if w[0] <= 0 or not np.isfinite(w).all():
            raise FailGeometry(k)
        out[i] = (V / np.sqrt(w)) @ V.T @ XI[i]
    return out.reshape(np.shape(xi))


def _ml_kernel(model, noise_model, mirror, gamma, x, xi, zu, k):
    y = mirror.grad_phi_star(x)  # primal mirror point
    g = model.grad_f(y)
    U = noise_model.apply(y, zu) if zu is not None else _zeros_like(x)
    b = _zeros_like(x)
    x1 = reconstruct(x, gamma, g, U, b, _mirror_factor_apply(mirror, x, xi, k))
    return dict(x_next=x1, drift=g, noise_U=U, bias_b=b, xi=xi, grad_calls=1)


def _pla_kernel(model, noise_model, diffusion, gamma, x, xi, zu, tol,
                max_iter, k):
    """Implicit step solved by Picard iteration from x (contraction gamma*L<1).

    The noise draw is held fixed during the solve; with noise none this is
    the plain proximal step.  Per-row iteration counts keep every replica's
    value independent of its batch.
    """
    squeeze = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    XI = np.atleast_2d(xi)
    g0 = model.grad_f(X)
    U = noise_model.apply(X, np.atleast_2d(zu)) if zu is not None else _zeros_like(X)
    sxi = diffusion.apply(X, XI)
    const = X - gamma * U + np.sqrt(2.0 * gamma) * sxi
    calls = np.zeros(X.shape[0], dtype=np.int64)
    if gamma == 0.0:
        y = const
    else:
        y = X.copy()
        active = np.ones(X.shape[0], dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            y_new = const[idx] - gamma * model.grad_f(y[idx])
            delta = np.linalg.norm(y_new - y[idx], axis=-1)
            y[idx] = y_new
            calls[idx] += 1
            active[idx] = delta >= tol
            if not active.any():
                break
        else:
            raise FailImplicit(k, float(delta.max()))
    b = model.grad_f(y) - g0  # bias at the converged point (bookkeeping eval)
    x1 = reconstruct(X, gamma, g0, U, b, sxi)
    out = dict(x_next=x1, drift=g0, noise_U=U, bias_b=b, xi=np.atleast_2d(xi),
               grad_calls=calls)
    if squeeze:
        out = {key: (v[0] if isinstance(v, np.ndarray) and v.ndim > 1 else v)
               for key, v in out.items()}
        out["grad_calls"] = int(calls[0])
    return out


# ---------------------------------------------------------------------------
# draw plumbing shared by the scalar and ensemble runners


def _make_draws(cfg: SchemeConfig, seed: int, kk: int, *, lo=None, hi=None,
                replica=None):
    d = cfg.model.dim
    noisy = cfg.noise.kind != "none"
    if replica is None:
        def nrm(sub, tail=(d,)):
            return rng.normals(seed, kk, sub, tail, lo, hi)

        def uni(sub):
            return rng.uniforms(seed, kk, sub, lo, hi)
    else:
        def nrm(sub, tail=(d,)):
            return rng.normal_row(seed, kk, sub, replica, tail)

        def uni(sub):
            return rng.uniform_row(seed, kk, sub, replica)

    s = cfg.scheme
    draws = {}
    if s in ("rmm", "ormm"):
        draws["alpha"] = uni(Substream.ALPHA)
        draws["xi_p"] = nrm(Substream.SCHEME_XI_PRIME)
        draws["zeta"] = nrm(Substream.SCHEME_XI)
    else:
        draws["xi"] = nrm(Substream.SCHEME_XI)
        if s == "srk":
            draws["xi_p"] = nrm(Substream.SCHEME_XI_PRIME)
    if noisy:
        if s in ("sgld", "ml", "pla", "rmm", "ormm"):
            draws["zu"] = nrm(Substream.NOISE_U)
        if s == "rmm":
            draws["zu_prime"] = nrm(Substream.NOISE_U_PRIME)
        if s == "srk":
            draws["zu_prime"] = nrm(Substream.NOISE_U_PRIME)
            zu2 = nrm(Substream.NOISE_U, (2, d))
            draws["zu_h1"], draws["zu_h2"] = zu2[..., 0, :], zu2[..., 1, :]
    return draws


def _apply_step(cfg: SchemeConfig, x, kk: int, gamma: float, draws: dict,
                ormm_cache=None):
    s = cfg.scheme
    m, nm, dc = cfg.model, cfg.noise, cfg.diffusion
    if s == "sgld":
        return _sgld_kernel(m, nm, dc, gamma, x, draws["xi"], draws.get("zu"))
    if s == "rmm":
        return _rmm_kernel(m, nm, dc, gamma, x, draws["alpha"], draws["xi_p"],
                           draws["zeta"], draws.get("zu_prime"), draws.get("zu"))
    if s == "ormm":
        return _ormm_kernel(m, nm, dc, gamma, x, ormm_cache, draws["alpha"],
                            draws["xi_p"], draws["zeta"], draws.get("zu"))
    if s == "srk":
        return _srk_kernel(m, nm, dc, gamma, x, draws["xi"], draws["xi_p"],
                           draws.get("zu_prime"), draws.get("zu_h1"),
                           draws.get("zu_h2"))
    if s == "ml":
        return _ml_kernel(m, nm, cfg.mirror, gamma, x, draws["xi"],
                          draws.get("zu"), kk)
    return _pla_kernel(m, nm, dc, gamma, x, draws["xi"], draws.get("zu"),
                       cfg.pla_tol, cfg.pla_max_iter, kk)


def init_ormm_cache(cfg: SchemeConfig, seed: int, *, lo=None, hi=None,
                    replica=None):
    """Noisy gradient at x0 (draw index 0), the cache seeding the recursion;
    costs the one extra oracle call."""
    x0 = cfg.x0
    if replica is None:
        x = np.broadcast_to(x0, (hi - lo, x0.shape[0]))
    else:
        x = x0
    g = cfg.model.grad_f(x)
    if cfg.noise.kind == "none":
        return g
    if replica is None:
        z = rng.normals(seed, 0, Substream.NOISE_U, (cfg.model.dim,), lo, hi)
    else:
        z = rng.normal_row(seed, 0, Substream.NOISE_U, replica, (cfg.model.dim,))
    return g + cfg.noise.apply(x, z)


# ---------------------------------------------------------------------------
# public one-step operations (scalar)


def _record_from(out: dict, k: int, gamma: float) -> StepRecord:
    return StepRecord(
        k=k, gamma=gamma, drift=out["drift"], noise_U=out["noise_U"],
        bias_b=out["bias_b"], xi=out["xi"], x_next=out["x_next"],
        grad_calls=int(np.asarray(out["grad_calls"]).sum()),
        xi_prime=out.get("xi_prime"),
        alpha=(None if out.get("alpha") is None else float(out["alpha"])),
        noise_U_prime=out.get("noise_U_prime"),
    )


def _scalar_step(cfg, x_k, k, stream, ormm_cache=None):
    kk = k + 1
    gamma = cfg.schedule.gamma(kk)
    draws = _make_draws(cfg, stream.seed, kk, replica=stream.replica_id)
    out = _apply_step(cfg, np.asarray(x_k, dtype=float), kk, gamma, draws,
                      ormm_cache=ormm_cache)
    if not np.isfinite(out["x_next"]).all():
        raise FailDiverged(kk, np.asarray(x_k, dtype=float))
    return out, _record_from(out, k, gamma)


def sgld_step(cfg, x_k, k, stream) -> StepRecord:
    assert cfg.scheme == "sgld"
    return _scalar_step(cfg, x_k, k, stream)[1]


def rmm_step(cfg, x_k, k, stream) -> StepRecord:
    assert cfg.scheme == "rmm"
    return _scalar_step(cfg, x_k, k, stream)[1]


def ormm_step(cfg, x_k, prev_mid_grad, k, stream):
    assert cfg.scheme == "ormm"
    out, rec = _scalar_step(cfg, x_k, k, stream, ormm_cache=prev_mid_grad)
    return rec, out["new_cache"]


def srk_step(cfg, x_k, k, stream) -> StepRecord:
    assert cfg.scheme == "srk"
    return _scalar_step(cfg, x_k, k, stream)[1]


def ml_step(cfg, x_k, k, stream) -> StepRecord:
    assert cfg.scheme == "ml"
    return _scalar_step(cfg, x_k, k, stream)[1]


def pla_step(cfg, x_k, k, stream) -> StepRecord:
    assert cfg.scheme == "pla"
    return _scalar_step(cfg, x_k, k, stream)[1]


def run(cfg: SchemeConfig, iterations: int, stream: rng.StreamKey,
        checkpoint_every: int = 0) -> Trajectory:
    """One replica, K step records; deterministic given (cfg, stream)."""
    if iterations > cfg.schedule.max_k:
        raise ValueError("iterations exceed the schedule's max_k")
    x = cfg.x0.copy()
    states = [x.copy()]
    records = []
    checkpoints = []
    total = 0
    cache = None
    if cfg.scheme == "ormm":
        cache = init_ormm_cache(cfg, stream.seed, replica=stream.replica_id)
        total += 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(iterations):
            out, rec = _scalar_step(cfg, x, k, stream, ormm_cache=cache)
            if cfg.scheme == "ormm":
                cache = out["new_cache"]
            x = out["x_next"]
            states.append(x.copy())
            records.append(rec)
            total += rec.grad_calls
            if checkpoint_every and (k + 1) % checkpoint_every == 0:
                checkpoints.append((k + 1, x.copy()))
    return Trajectory(replica_id=stream.replica_id, states=np.asarray(states),
                      records=records, schedule=cfg.schedule, stream=stream,
                      checkpoints=checkpoints, grad_calls_total=total)


# ---------------------------------------------------------------------------
# vectorized ensemble runner


@dataclass
class EnsembleResult:
    scheme: str
    lo: int
    hi: int
    iterations: int
    final_states: np.ndarray               # (R, d)
    gammas: np.ndarray                     # (K,)
    block_sq: dict                         # name -> (K, n_blocks) block sums
    grad_calls: np.ndarray                 # (R,) per-replica totals
    checkpoints: list = field(default_factory=list)  # (k, tau, samples)
    kept_states: dict = field(default_factory=dict)  # k -> (R, d)

    def series_mean(self, name: str) -> np.ndarray:
        """Per-iteration ensemble means of the squared-norm series."""
        return self.block_sq[name].sum(axis=1) / (self.hi - self.lo)


def _block_sums(sq: np.ndarray) -> np.ndarray:
    """Sum a per-replica vector in fixed blocks of rng.BLOCK rows, so chunked
    runs reassemble bit-identical aggregates."""
    R = sq.shape[0]
    nb = R // rng.BLOCK
    parts = sq[: nb * rng.BLOCK].reshape(nb, rng.BLOCK).sum(axis=1)
    if R % rng.BLOCK:
        parts = np.concatenate([parts, [sq[nb * rng.BLOCK:].sum()]])
    return parts


def run_ensemble(cfg: SchemeConfig, iterations: int, seed: int,
                 replica_lo: int, replica_hi: int,
                 checkpoint_iters=(), keep_states=()) -> EnsembleResult:
    """Replicas [replica_lo, replica_hi) advanced in lockstep.

    replica_lo must sit on a block boundary so that partial aggregates merge
    bit-identically across any chunking of the replica range.
    """
    if iterations > cfg.schedule.max_k:
        raise ValueError("iterations exceed the schedule's max_k")
    if replica_lo % rng.BLOCK != 0:
        raise ValueError(f"replica_lo must be a multiple of {rng.BLOCK}")
    R = replica_hi - replica_lo
    d = cfg.model.dim
    x = np.broadcast_to(cfg.x0, (R, d)).copy()
    check = set(int(c) for c in checkpoint_iters)
    keep = set(int(c) for c in keep_states)
    res = EnsembleResult(
        scheme=cfg.scheme, lo=replica_lo, hi=replica_hi, iterations=iterations,
        final_states=x, gammas=cfg.schedule.gammas(1, iterations + 1),
        block_sq={name: np.zeros((iterations, (R + rng.BLOCK - 1) // rng.BLOCK))
                  for name in ("x", "v", "b", "U")},
        grad_calls=np.zeros(R, dtype=np.int64),
    )
    if 0 in check:
        res.checkpoints.append((0, 0.0, x.copy()))
    if 0 in keep:
        res.kept_states[0] = x.copy()
    cache = None
    if cfg.scheme == "ormm":
        cache = init_ormm_cache(cfg, seed, lo=replica_lo, hi=replica_hi)
        res.grad_calls += 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(iterations):
            kk = k + 1
            gamma = float(res.gammas[k])
            draws = _make_draws(cfg, seed, kk, lo=replica_lo, hi=replica_hi)
            out = _apply_step(cfg, x, kk, gamma, draws, ormm_cache=cache)
            x_new = out["x_next"]
            if not np.isfinite(x_new).all():
                raise FailDiverged(kk, x)
            if cfg.scheme == "ormm":
                cache = out["new_cache"]
            res.block_sq["x"][k] = _block_sums((x_new * x_new).sum(axis=-1))
            g, b, U = out["drift"], out["bias_b"], out["noise_U"]
            res.block_sq["v"][k] = _block_sums((g * g).sum(axis=-1))
            res.block_sq["b"][k] = _block_sums((b * b).sum(axis=-1))
            res.block_sq["U"][k] = _block_sums((U * U).sum(axis=-1))
            res.grad_calls += out["grad_calls"]
            x = x_new
            if kk in check:
                res.checkpoints.append((kk, cfg.schedule.tau(kk), x.copy()))
            if kk in keep:
                res.kept_states[kk] = x.copy()
    res.final_states = x
    return res
