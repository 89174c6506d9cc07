"""Gradient-noise models (martingale difference sequences) and the
windowed-mean diagnostic for the zero-conditional-mean property."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .rng import StreamKey


@dataclass
class NoiseModel:
    """Additive gradient noise U with E[U | history] = 0 by construction.

    kinds:
      none:         U = 0
      gaussian:     U = scale * zeta
      state_scaled: U = scale * min(1, cap/||x||) * zeta
    second_moment_bound is an upper bound on E||U||^2 over all states.
    """

    kind: str
    scale: float = 0.0
    cap: float = math.inf
    second_moment_bound: float = 0.0

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(kind="none")

    @classmethod
    def gaussian(cls, scale: float, dim: int) -> "NoiseModel":
        if scale < 0:
            raise ValueError("scale must be nonnegative")
        return cls(kind="gaussian", scale=scale,
                   second_moment_bound=scale * scale * dim)

    @classmethod
    def state_scaled(cls, scale: float, cap: float, dim: int) -> "NoiseModel":
        if scale < 0 or cap <= 0:
            raise ValueError("scale must be >= 0 and cap > 0")
        return cls(kind="state_scaled", scale=scale, cap=cap,
                   second_moment_bound=scale * scale * dim)

    def apply(self, x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        """Shape the standard-normal draws zeta into U at state x."""
        if self.kind == "none":
            return np.zeros_like(np.asarray(x, dtype=float))
        if self.kind == "gaussian":
            return self.scale * zeta
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1, keepdims=True)
        factor = np.minimum(1.0, self.cap / np.maximum(r, 1e-300))
        return self.scale * factor * zeta


def sample_noise(model: NoiseModel, x: np.ndarray, stream: StreamKey, k: int) -> np.ndarray:
    """One noise draw for the stream's replica at draw index k."""
    x = np.asarray(x, dtype=float)
    if model.kind == "none":
        return np.zeros_like(x)
    zeta = rng.normal_row(stream.seed, k, stream.substream, stream.replica_id,
                          (x.shape[-1],))
    return model.apply(x, zeta)


@dataclass
class MdsReport:
    max_abs_running_mean: float
    passed: bool
    threshold: float
    windows: int


def mds_check(records, window: int, sigma_comp: Optional[float] = None) -> MdsReport:
    """Windowed means of the recorded noise components against a 4-sigma rule.

    Partitions the record sequence into windows of the given length and
    passes iff every window's per-component mean stays within
    4 * sigma_comp / sqrt(window length).  sigma_comp defaults to the sample
    standard deviation of the recorded components.
    """
    if not records:
        raise ValueError("records must be nonempty")
    if window < 1:
        raise ValueError("window must be positive")
    U = np.asarray([r.noise_U for r in records], dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    n = U.shape[0]
    if sigma_comp is None:
        sigma_comp = float(U.std())
    bounds = [(i, min(i + window, n)) for i in range(0, n, window)]
    worst, limit, ok = 0.0, 0.0, True
    for lo, hi in bounds:
        means = U[lo:hi].mean(axis=0)
        thr = 4.0 * sigma_comp / math.sqrt(hi - lo)
        worst = max(worst, float(np.abs(means).max()))
        limit = max(limit, thr)
        if (np.abs(means) > thr).any():
            ok = False
    return MdsReport(worst, ok, limit, len(bounds))
