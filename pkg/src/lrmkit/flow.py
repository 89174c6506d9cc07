"""Continuous-time side of the verification harness.

Couples the discrete iterates to the Langevin flow dPhi = v(Phi) dt +
sqrt(2) sigma(Phi) dB driven by the *same* Brownian path the algorithm
consumed: the coarse increment over [tau_k, tau_{k+1}) is
sqrt(gamma_{k+1}) xi_{k+1}, and Brownian-bridge refinement fills in fine
increments consistent with it.  On top of the coupled pair sit the windowed
deviation statistic, the Picard interpolation of the iterate path, and the
deviation decomposition bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng, sampler
from .model import DiffusionCoeff, PotentialModel
from .rng import Substream
from .schedule import StepSchedule


@dataclass
class BrownianStore:
    """Coarse Brownian increments for a window of coarse steps, with cached
    bridge refinements; batched over replicas [lo, hi)."""

    seed: int
    scheme: str
    schedule: StepSchedule
    dim: int
    lo: int
    hi: int
    start_k: int
    n_coarse: int
    coarse: np.ndarray  # (R, n_coarse, d); [:, j] spans [tau(start+j), tau(start+j+1))
    cache_fines: bool = True  # draws are pure in (seed, k); caching is a speed knob
    _fine: dict = field(default_factory=dict, repr=False)

    def delta(self, k: int) -> np.ndarray:
        j = k - self.start_k
        if not 0 <= j < self.n_coarse:
            raise IndexError(f"coarse step {k} outside window")
        return self.coarse[:, j]


def brownian_store(scheme: str, seed: int, schedule: StepSchedule, dim: int,
                   lo: int, hi: int, start_k: int, n_coarse: int,
                   cache_fines: bool = True) -> BrownianStore:
    """Regenerates the xi draws the scheme consumed (composition included for
    the midpoint schemes) and scales them into Brownian increments."""
    if scheme == "ml":
        raise ValueError("ml has no scalar Brownian coupling")
    R = hi - lo
    coarse = np.empty((R, n_coarse, dim))
    for j in range(n_coarse):
        kk = start_k + j + 1
        xi = sampler.gaussian_increment_xi(scheme, seed, kk, dim, lo, hi)
        coarse[:, j] = np.sqrt(schedule.gamma(kk)) * xi
    return BrownianStore(seed=seed, scheme=scheme, schedule=schedule, dim=dim,
                         lo=lo, hi=hi, start_k=start_k, n_coarse=n_coarse,
                         coarse=coarse, cache_fines=cache_fines)


def refine_bridge(store: BrownianStore, k: int, m: int) -> np.ndarray:
    """Fine increments f_1..f_m summing exactly to the coarse increment.

    f_i = e_i - mean(e) + dB/m with e_i iid N(0, gamma/m I), so conditionally
    Cov(f_i, f_j) = (gamma/m)(delta_ij - 1/m) and m = 1 returns dB itself.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    key = (int(k), int(m))
    if key in store._fine:
        return store._fine[key]
    kk = k + 1
    gamma = store.schedule.gamma(kk)
    dB = store.delta(k)
    e = np.sqrt(gamma / m) * rng.normals(store.seed, kk, Substream.BRIDGE,
                                         (m, store.dim), store.lo, store.hi)
    fine = e - e.mean(axis=-2, keepdims=True) + dB[:, None, :] / m
    if store.cache_fines:
        store._fine[key] = fine
    return fine


def window_offsets(schedule: StepSchedule, anchor_k: int,
                   horizon_T: float) -> np.ndarray:
    """Offsets tau(anchor+j) - tau(anchor) of the coarse grid points lying in
    [0, horizon_T] (truncated at the schedule's max_k)."""
    t0 = schedule.tau(anchor_k)
    offs = [0.0]
    j = anchor_k
    while j < schedule.max_k:
        j += 1
        s = schedule.tau(j) - t0
        if s > horizon_T * (1.0 + 1e-12):
            break
        offs.append(s)
    return np.asarray(offs)


def flow_oracle(model: PotentialModel, diffusion: DiffusionCoeff, x_anchor,
                horizon_T: float, m_per_coarse: int, store: BrownianStore,
                anchor_k: int):
    """Euler-Maruyama solve of the flow on the bridge-refined grid.

    Returns (states, offsets): states[(r,) j] is Phi at coarse point
    anchor_k + j, states[..., 0, :] = x_anchor.
    """
    offsets = window_offsets(store.schedule, anchor_k, horizon_T)
    n = len(offsets) - 1
    squeeze = np.asarray(x_anchor).ndim == 1
    phi = np.atleast_2d(np.asarray(x_anchor, dtype=float)).copy()
    out = np.empty((phi.shape[0], n + 1, phi.shape[1]))
    out[:, 0] = phi
    root2 = np.sqrt(2.0)
    for j in range(n):
        k = anchor_k + j
        f = refine_bridge(store, k, m_per_coarse)
        dt = store.schedule.gamma(k + 1) / m_per_coarse
        for i in range(m_per_coarse):
            phi = phi + dt * model.drift(phi) + root2 * diffusion.apply(phi, f[:, i])
        out[:, j + 1] = phi
    if squeeze and out.shape[0] == 1 and store.hi - store.lo == 1:
        return out[0], offsets
    return out, offsets


@dataclass
class CoupledPair:
    """Iterates and flow driven by one Brownian path over a window."""

    anchor_k: int
    t_anchor: float
    horizon_T: float
    m: int
    offsets: np.ndarray          # (n+1,)
    iterate_states: np.ndarray   # (R, n+1, d)
    flow_states: np.ndarray      # (R, n+1, d)
    store: BrownianStore
    model: PotentialModel
    diffusion: DiffusionCoeff
    schedule: StepSchedule


def couple(cfg: sampler.SchemeConfig, anchor_k: int, horizon_T: float,
           replicas: int, m_per_coarse: int, seed: int,
           lo: int = 0, hi: Optional[int] = None) -> CoupledPair:
    if cfg.scheme == "ml":
        raise ValueError("ml has no scalar Brownian coupling")
    hi = replicas if hi is None else hi
    offsets = window_offsets(cfg.schedule, anchor_k, horizon_T)
    n = len(offsets) - 1
    keep = range(anchor_k, anchor_k + n + 1)
    ens = sampler.run_ensemble(cfg, anchor_k + n, seed, lo, hi,
                               keep_states=keep)
    store = brownian_store(cfg.scheme, seed, cfg.schedule, cfg.model.dim,
                           lo, hi, anchor_k, n)
    flow, _ = flow_oracle(cfg.model, cfg.diffusion, ens.kept_states[anchor_k],
                          horizon_T, m_per_coarse, store, anchor_k)
    iters = np.stack([ens.kept_states[anchor_k + j] for j in range(n + 1)],
                     axis=1)
    return CoupledPair(anchor_k=anchor_k, t_anchor=cfg.schedule.tau(anchor_k),
                       horizon_T=horizon_T, m=m_per_coarse, offsets=offsets,
                       iterate_states=iters, flow_states=flow, store=store,
                       model=cfg.model, diffusion=cfg.diffusion,
                       schedule=cfg.schedule)


# ---------------------------------------------------------------------------
# windowed deviation


@dataclass
class WaptReport:
    anchors: list
    horizon_T: float
    m: int
    replicas: int
    rows: list          # (anchor_k, tau_anchor, offset_s, mean_sq_dev, replicas)
    D: dict             # anchor_k -> max mean-square deviation over the window


def wapt_chunk(cfg: sampler.SchemeConfig, anchors, horizon_T: float,
               m_per_coarse: int, seed: int, lo: int, hi: int):
    """Block-partial sums of the squared deviation for replicas [lo, hi);
    chunks merge bit-identically (see sampler.run_ensemble)."""
    anchors = sorted(int(a) for a in anchors)
    windows = {n: window_offsets(cfg.schedule, n, horizon_T) for n in anchors}
    keep = set()
    for n, offs in windows.items():
        keep.update(range(n, n + len(offs)))
    iters = max(n + len(offs) - 1 for n, offs in windows.items())
    ens = sampler.run_ensemble(cfg, iters, seed, lo, hi,
                               keep_states=sorted(keep))
    out = {}
    for n, offs in windows.items():
        n_c = len(offs) - 1
        store = brownian_store(cfg.scheme, seed, cfg.schedule, cfg.model.dim,
                               lo, hi, n, n_c, cache_fines=False)
        flow, _ = flow_oracle(cfg.model, cfg.diffusion, ens.kept_states[n],
                              horizon_T, m_per_coarse, store, n)
        blocks = []
        for j in range(n_c + 1):
            diff = ens.kept_states[n + j] - flow[:, j]
            blocks.append(sampler._block_sums((diff * diff).sum(axis=-1)))
        out[n] = (offs, np.asarray(blocks))  # (n_c+1, n_blocks)
    return out


def wapt_deviation(cfg: sampler.SchemeConfig, anchors, horizon_T: float,
                   replicas: int, m_per_coarse: int, seed: int) -> WaptReport:
    """Max over the window of the ensemble mean-square deviation between the
    iterates and the coupled flow, per anchor."""
    if cfg.scheme == "ml":
        raise ValueError("ml has no scalar Brownian coupling; exclude it here")
    chunk = wapt_chunk(cfg, anchors, horizon_T, m_per_coarse, seed,
                       0, replicas)
    rows = []
    D = {}
    anchors = sorted(int(a) for a in anchors)
    for n in anchors:
        offs, blocks = chunk[n]
        msd = blocks.sum(axis=1) / replicas
        D[n] = float(msd.max())
        tau_n = cfg.schedule.tau(n)
        for j, s in enumerate(offs):
            rows.append((n, tau_n, float(s), float(msd[j]), replicas))
    return WaptReport(anchors=anchors, horizon_T=horizon_T, m=m_per_coarse,
                      replicas=replicas, rows=rows, D=D)


def merge_wapt_chunks(chunks, replicas: int):
    """Combine per-chunk block sums (ordered by replica range) into per-anchor
    (offsets, mean-square deviation) curves."""
    anchors = sorted(chunks[0].keys())
    merged = {}
    for n in anchors:
        offs = chunks[0][n][0]
        blocks = np.hstack([c[n][1] for c in chunks])
        merged[n] = (offs, blocks.sum(axis=1) / replicas)
    return merged


# ---------------------------------------------------------------------------
# Picard interpolation and the deviation decomposition


def _fine_grid(pair: CoupledPair):
    """Fine offsets u_0..u_{n_c m}, their cell/sub indices, and dt per cell."""
    gammas = np.array([pair.schedule.gamma(pair.anchor_k + j + 1)
                       for j in range(len(pair.offsets) - 1)])
    dts = np.repeat(gammas / pair.m, pair.m)
    u = np.concatenate([[0.0], np.cumsum(dts)])
    return u, dts, gammas


def picard_process(pair: CoupledPair, s_grid=None):
    """One Picard pass of the flow map through the interpolated iterate path.

    The iterate path X is the drift-linear interpolation consistent with the
    coupled Brownian motion: on [tau_j, tau_{j+1})

        X(u) = x_j - (u - tau_j) slope_j + sqrt(2) sigma(x_j) (B(u) - B(tau_j)),
        slope_j = (x_j - x_{j+1} + sqrt(2) sigma(x_j) dB_j) / gamma_{j+1},

    which passes through every iterate.  The Picard process integrates the
    true drift and diffusion along X with left-endpoint quadrature on the
    fine lattice:  Xp(s) = x_n + int v(X) du + sqrt(2) int sigma(X) dB.

    Returns (offsets, X, Xp) evaluated at the fine lattice points nearest the
    requested s_grid (default: the coarse grid points).
    """
    u, dts, gammas = _fine_grid(pair)
    R, n_p1, d = pair.iterate_states.shape
    n_c = n_p1 - 1
    m = pair.m
    root2 = np.sqrt(2.0)
    X = np.empty((R, len(u), d))
    Xp = np.empty_like(X)
    X[:, 0] = pair.iterate_states[:, 0]
    Xp[:, 0] = pair.iterate_states[:, 0]
    pos = 0
    for j in range(n_c):
        xj = pair.iterate_states[:, j]
        xj1 = pair.iterate_states[:, j + 1]
        dB = pair.store.delta(pair.anchor_k + j)
        f = refine_bridge(pair.store, pair.anchor_k + j, m)
        sdB = root2 * pair.diffusion.apply(xj, dB)
        slope = (xj - xj1 + sdB) / gammas[j]
        bpart = np.cumsum(f, axis=1)
        tloc = np.cumsum(dts[pos:pos + m])
        for i in range(m):
            xu = (xj - tloc[i] * slope
                  + root2 * pair.diffusion.apply(xj, bpart[:, i]))
            X[:, pos + i + 1] = xu
            # left endpoint of the sub-interval
            xl = X[:, pos + i]
            Xp[:, pos + i + 1] = (Xp[:, pos + i]
                                  + dts[pos + i] * pair.model.drift(xl)
                                  + root2 * pair.diffusion.apply(xl, f[:, i]))
        pos += m
    if s_grid is None:
        idx = np.arange(0, len(u), m)
    else:
        idx = np.array([int(np.argmin(np.abs(u - s))) for s in np.asarray(s_grid)])
    return u[idx], X[:, idx], Xp[:, idx]


@dataclass
class DecompositionReport:
    offsets: np.ndarray
    total: np.ndarray        # mean ||X - Phi||^2
    picard: np.ndarray       # mean ||Xp - Phi||^2
    interp: np.ndarray       # mean ||X - Xp||^2
    bound_ok: np.ndarray     # 0.5 total <= picard + interp, per offset
    all_ok: bool


def decomposition_report(pair: CoupledPair, s_grid=None) -> DecompositionReport:
    """Splits the deviation from the flow at the coarse grid points into the
    Picard-defect and interpolation terms; by Young's inequality
    0.5 ||X - Phi||^2 <= ||Xp - Phi||^2 + ||X - Xp||^2 pathwise."""
    offs, X, Xp = picard_process(pair, s_grid=s_grid)
    if s_grid is None:
        phi = pair.flow_states
    else:
        # flow states live on the coarse grid; snap each request to it
        cidx = np.array([int(np.argmin(np.abs(pair.offsets - s))) for s in offs])
        phi = pair.flow_states[:, cidx]

    def msq(a):
        return (a * a).sum(axis=-1).mean(axis=0)

    total = msq(X - phi)
    picard = msq(Xp - phi)
    interp = msq(X - Xp)
    ok = 0.5 * total <= picard + interp + 1e-9
    return DecompositionReport(offsets=offs, total=total, picard=picard,
                               interp=interp, bound_ok=ok, all_ok=bool(ok.all()))


# ---------------------------------------------------------------------------
# exact transition for the linear-drift benchmark


def ou_transition(mean, precision, x0, s: float):
    """Exact law of the flow for the quadratic potential: with v(x) =
    -P (x - m) and unit diffusion,

        X(s) | x0  ~  N(m + e^{-Ps}(x0 - m),  P^{-1}(I - e^{-2Ps})).

    Returns (mean vector, covariance matrix).
    """
    m = np.asarray(mean, dtype=float)
    P = np.atleast_2d(np.asarray(precision, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    w, V = np.linalg.eigh(P)
    if w[0] <= 0:
        raise ValueError("precision must be positive definite")
    e = np.exp(-w * s)
    mu = m + V @ (e * (V.T @ (x0 - m)))
    cov = (V * ((1.0 - np.exp(-2.0 * w * s)) / w)) @ V.T
    return mu, cov
