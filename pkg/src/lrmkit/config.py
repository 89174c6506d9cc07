"""Experiment configuration: TOML/JSON loading, defaults, validation, and
construction of the engine objects from plain dicts.

Everything the workers need crosses process boundaries as the normalized
config dict (model closures do not pickle), so builders must be deterministic
functions of it.
"""

from __future__ import annotations

import copy
import json
import sys
from pathlib import Path

import numpy as np

from .model import (DiffusionCoeff, MirrorMap, build_gaussian,
                    build_gaussian_mixture, build_repulsive)
from .noise import NoiseModel
from .sampler import SCHEMES, SchemeConfig
from .schedule import StepSchedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TARGETS = ("gaussian", "gaussian_aniso", "mixture2", "repulsive")

DEFAULTS = {
    "model": {"target": "gaussian"},
    "scheme": {"name": "sgld", "pla_tol": 1e-10, "pla_max_iter": 200},
    "schedule": {"kind": "constant", "c": 0.05, "max_k": 1_000_000},
    "noise": {"kind": "gaussian", "scale": 1.0},
    "diffusion": {"kind": "identity"},
    "run": {"iterations": 1000, "replicas": 256, "checkpoints": [],
            "record_replicas": 8, "seed": 0},
    "metric": {"method": "auto", "directions": 64, "order": 2.0},
    "wapt": {"anchors": [100], "horizon": 1.0, "m_per_coarse": 4,
             "replicas": 256},
    "compare": {"schemes": []},
    "validate": {"pilot_iterations": 200, "pilot_replicas": 256,
                 "mds_window": 50},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path) -> dict:
    """Reads TOML or JSON by extension and fills in defaults."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix.lower() == ".toml":
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    elif p.suffix.lower() == ".json":
        with open(p) as fh:
            raw = json.load(fh)
    else:
        raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    return normalize(raw)


def normalize(raw: dict) -> dict:
    cfg = _merge(DEFAULTS, raw)
    _validate(cfg)
    return cfg


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def _validate(cfg: dict):
    m = cfg["model"]
    _require(m["target"] in TARGETS, "model.target",
             f"must be one of {TARGETS}")
    s = cfg["scheme"]
    _require(s["name"] in SCHEMES, "scheme.name",
             f"must be one of {SCHEMES}")
    sc = cfg["schedule"]
    _require(sc["kind"] in ("constant", "poly", "sqrtlog"), "schedule.kind",
             "must be constant, poly, or sqrtlog")
    _require(float(sc["c"]) > 0, "schedule.c", "must be positive")
    if sc["kind"] == "poly":
        _require("p" in sc and float(sc["p"]) > 0, "schedule.p",
                 "poly needs a positive exponent")
    _require(int(sc["max_k"]) >= 1, "schedule.max_k", "must be >= 1")
    n = cfg["noise"]
    _require(n["kind"] in ("none", "gaussian", "state_scaled"), "noise.kind",
             "must be none, gaussian, or state_scaled")
    if n["kind"] != "none":
        _require(float(n.get("scale", 1.0)) >= 0, "noise.scale",
                 "must be nonnegative")
    if n["kind"] == "state_scaled":
        _require(float(n.get("cap", 0)) > 0, "noise.cap", "must be positive")
    r = cfg["run"]
    _require(int(r["iterations"]) >= 1, "run.iterations", "must be >= 1")
    _require(int(r["iterations"]) <= int(sc["max_k"]), "run.iterations",
             "exceeds schedule.max_k")
    _require(int(r["replicas"]) >= 1, "run.replicas", "must be >= 1")
    for c in r["checkpoints"]:
        _require(0 <= int(c) <= int(r["iterations"]), "run.checkpoints",
                 f"checkpoint {c} outside [0, iterations]")
    mt = cfg["metric"]
    _require(mt["method"] in ("auto", "sorted_1d", "assignment", "sliced"),
             "metric.method", "unknown method")
    _require(1.0 < float(mt["order"]) <= 2.0, "metric.order",
             "order must lie in (1, 2]")
    w = cfg["wapt"]
    _require(int(w["m_per_coarse"]) >= 1, "wapt.m_per_coarse", "must be >= 1")
    _require(float(w["horizon"]) > 0, "wapt.horizon", "must be positive")
    for a in w["anchors"]:
        _require(int(a) >= 0, "wapt.anchors", "anchors must be >= 0")
    for name in cfg["compare"]["schemes"]:
        _require(name in SCHEMES, "compare.schemes",
                 f"unknown scheme {name!r}")


# ---------------------------------------------------------------------------
# builders


def build_model(cfg: dict):
    m = cfg["model"]
    target = m["target"]
    if target == "gaussian":
        dim = int(m.get("dim", 1))
        mean = np.asarray(m.get("mean", np.zeros(dim)), dtype=float)
        prec = m.get("precision")
        if prec is None:
            prec = np.eye(mean.shape[0])
        else:
            prec = np.asarray(prec, dtype=float)
            if prec.ndim == 0:
                prec = float(prec) * np.eye(mean.shape[0])
            elif prec.ndim == 1:
                prec = np.diag(prec)
        return build_gaussian(mean, prec)
    if target == "gaussian_aniso":
        return build_gaussian(np.zeros(2), np.diag([4.0, 1.0]))
    if target == "mixture2":
        weights = np.asarray(m.get("weights", [0.5, 0.5]), dtype=float)
        means = np.asarray(m.get("means", [[-2.0, 0.0], [2.0, 0.0]]),
                           dtype=float)
        return build_gaussian_mixture(weights, means)
    return build_repulsive(int(m.get("dim", 1)))


def build_schedule(cfg: dict) -> StepSchedule:
    sc = cfg["schedule"]
    kind, c, max_k = sc["kind"], float(sc["c"]), int(sc["max_k"])
    if kind == "constant":
        return StepSchedule.constant(c, max_k=max_k)
    if kind == "poly":
        return StepSchedule.poly(c, float(sc["p"]), max_k=max_k)
    return StepSchedule.sqrtlog(c, max_k=max_k)


def build_noise(cfg: dict, dim: int) -> NoiseModel:
    n = cfg["noise"]
    if n["kind"] == "none":
        return NoiseModel.none()
    if n["kind"] == "gaussian":
        return NoiseModel.gaussian(float(n.get("scale", 1.0)), dim)
    return NoiseModel.state_scaled(float(n.get("scale", 1.0)),
                                   float(n["cap"]), dim)


def build_diffusion(cfg: dict, dim: int) -> DiffusionCoeff:
    d = cfg["diffusion"]
    if d["kind"] == "identity":
        return DiffusionCoeff.identity(dim)
    if d["kind"] == "matrix":
        return DiffusionCoeff.constant_matrix(np.asarray(d["matrix"],
                                                         dtype=float))
    raise ConfigError(f"diffusion.kind: unsupported {d['kind']!r}")


def build_scheme_config(cfg: dict, scheme: str | None = None) -> SchemeConfig:
    model = build_model(cfg)
    s = cfg["scheme"]
    name = (scheme or s["name"]).lower()
    mirror = None
    if name == "ml":
        A = np.asarray(s.get("mirror_matrix", np.eye(model.dim)), dtype=float)
        if A.ndim == 1:
            A = np.diag(A)
        mirror = MirrorMap.quadratic(A)
    x0 = np.asarray(s.get("x0", np.zeros(model.dim)), dtype=float)
    diffusion = build_diffusion(cfg, model.dim)
    return SchemeConfig(
        scheme=name, model=model, diffusion=diffusion,
        noise=build_noise(cfg, model.dim), schedule=build_schedule(cfg),
        x0=x0, mirror=mirror, pla_tol=float(s["pla_tol"]),
        pla_max_iter=int(s["pla_max_iter"]),
        allow_general_diffusion=cfg["diffusion"]["kind"] != "identity",
    )


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))
