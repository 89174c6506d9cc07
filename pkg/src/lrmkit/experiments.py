"""Pipelines behind the CLI commands.

Parallelism model: replica ranges are split on rng.BLOCK boundaries and each
worker rebuilds the engine objects from the plain config dict (closures do
not pickle).  All aggregates are merged from per-block partial sums in replica
order, so every artifact is byte-identical for any --jobs value.
"""

from __future__ import annotations

import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import flow, manifest, metric, rng, sampler
from .model import dissipativity_estimate, grad_check, lipschitz_estimate
from .noise import mds_check
from .rng import StreamKey, Substream
from .schedule import compute_P, validate as validate_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SAMPLER = 3
EXIT_EXISTS = 4


def replica_chunks(replicas: int, jobs: int):
    """Block-aligned [lo, hi) ranges covering [0, replicas)."""
    jobs = max(1, int(jobs))
    blocks = math.ceil(replicas / rng.BLOCK)
    per = math.ceil(blocks / jobs)
    chunks = []
    lo = 0
    while lo < replicas:
        hi = min(replicas, lo + per * rng.BLOCK)
        chunks.append((lo, hi))
        lo = hi
    return chunks


def _ensemble_worker(payload: dict) -> dict:
    cfg = cfgmod.build_scheme_config(payload["config"], payload.get("scheme"))
    try:
        res = sampler.run_ensemble(
            cfg, payload["iterations"], payload["seed"],
            payload["lo"], payload["hi"],
            checkpoint_iters=payload["checkpoints"],
            keep_states=payload["keep"])
    except sampler.SamplerError as e:
        return {"failed": {"code": e.code, "k": int(getattr(e, "k", -1))}}
    return {"final": res.final_states, "gammas": res.gammas,
            "block_sq": res.block_sq, "grad_calls": res.grad_calls,
            "checkpoints": res.checkpoints, "kept": res.kept_states}


@dataclass
class MergedRun:
    replicas: int
    gammas: np.ndarray
    final_states: np.ndarray
    block_sq: dict
    grad_calls: np.ndarray
    checkpoints: list = field(default_factory=list)  # (k, tau, samples)
    kept_states: dict = field(default_factory=dict)

    def series_mean(self, name: str) -> np.ndarray:
        return self.block_sq[name].sum(axis=1) / self.replicas


def run_scheme_ensemble(cfg_dict: dict, scheme, iterations: int, seed: int,
                        replicas: int, checkpoints=(), keep=(),
                        jobs: int = 1) -> MergedRun:
    payloads = [dict(config=cfg_dict, scheme=scheme, iterations=iterations,
                     seed=seed, lo=lo, hi=hi,
                     checkpoints=tuple(checkpoints), keep=tuple(keep))
                for lo, hi in replica_chunks(replicas, jobs)]
    if jobs <= 1 or len(payloads) == 1:
        results = [_ensemble_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_ensemble_worker, payloads))
    for r in results:
        if "failed" in r:
            raise sampler.FailDiverged(r["failed"]["k"])
    merged = MergedRun(
        replicas=replicas,
        gammas=results[0]["gammas"],
        final_states=np.vstack([r["final"] for r in results]),
        block_sq={name: np.hstack([r["block_sq"][name] for r in results])
                  for name in results[0]["block_sq"]},
        grad_calls=np.concatenate([r["grad_calls"] for r in results]),
    )
    for entries in zip(*(r["checkpoints"] for r in results)):
        k, tau = entries[0][0], entries[0][1]
        merged.checkpoints.append((k, tau, np.vstack([e[2] for e in entries])))
    for k in results[0]["kept"]:
        merged.kept_states[k] = np.vstack([r["kept"][k] for r in results])
    return merged


# ---------------------------------------------------------------------------
# shared pieces


def _pilot_bias_constant(cfg_dict: dict, scheme, seed: int) -> float:
    """Short ensemble to fit the bias-envelope constant feeding compute_P."""
    v = cfg_dict["validate"]
    r = cfg_dict["run"]
    iters = min(int(v["pilot_iterations"]), int(r["iterations"]))
    reps = min(int(v["pilot_replicas"]), int(r["replicas"]))
    try:
        merged = run_scheme_ensemble(cfg_dict, scheme, iters, seed, reps)
    except sampler.SamplerError:
        return 0.0
    fit = metric.bias_scaling_fit(merged.gammas, merged.series_mean("b"),
                                  merged.series_mean("v"),
                                  burn_in=min(20, iters // 4))
    return fit.c_hat


def _schedule_report(cfg_dict: dict, scheme_cfg: sampler.SchemeConfig,
                     seed: int, scheme=None):
    model = scheme_cfg.model
    L = model.lipschitz_L
    if L is None:
        L = lipschitz_estimate(model, 200, StreamKey(seed=seed))
    c_b = _pilot_bias_constant(cfg_dict, scheme, seed)
    P = compute_P(L, c_b)
    report = validate_schedule(scheme_cfg.schedule, P)
    return report, c_b, L


def _metrics_rows(model, checkpoints, mcfg: dict, seed: int):
    ref = None
    if model.reference_sampler is not None and checkpoints:
        n_ref = max(c[2].shape[0] for c in checkpoints)
        ref = model.reference_sampler(n_ref, metric.reference_generator(seed))
    rows = []
    for k, tau, samples in checkpoints:
        msq = float((samples * samples).sum(axis=1).mean())
        if ref is None:
            rows.append((k, tau, "none", None, msq))
        else:
            rep = metric.w2_between(samples, ref, method=mcfg["method"],
                                    seed=seed, p=float(mcfg["order"]),
                                    n_directions=int(mcfg["directions"]))
            rows.append((k, tau, rep.method, rep.value, msq))
    return rows


def _write_records(cfg_dict, scheme, run_dir: Path, seed: int, count: int,
                   iterations: int):
    cfg = cfgmod.build_scheme_config(cfg_dict, scheme)
    written = []
    for r in range(count):
        stream = StreamKey(seed=seed, replica_id=r)
        try:
            traj = sampler.run(cfg, iterations, stream)
        except sampler.SamplerError:
            break
        written.append(manifest.write_records_csv(run_dir, r, traj.records))
    return written


def _checkpoint_list(run_cfg: dict, iterations: int):
    ks = sorted({int(c) for c in run_cfg["checkpoints"]} | {iterations})
    return [k for k in ks if 0 <= k <= iterations]


def _print(msg: str, quiet: bool):
    if not quiet:
        print(msg)


def _warn(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# run / compare


def run_pipeline(cfg_dict: dict, seed: int, jobs: int = 1, out=None,
                 force: bool = False, records=None, quiet: bool = False,
                 command: str = "run") -> int:
    scheme = cfg_dict["scheme"]["name"]
    try:
        scheme_cfg = cfgmod.build_scheme_config(cfg_dict)
    except (ValueError, cfgmod.ConfigError) as e:
        _warn(f"config error: {e}")
        return EXIT_CONFIG
    report, c_b, L = _schedule_report(cfg_dict, scheme_cfg, seed)
    if not report.rm_divergent:
        _warn(f"schedule rejected: step sizes are summable "
              f"(sum gamma_k converges); {report}")
        return EXIT_CONFIG
    if report.strange_condition_first_index is None:
        _warn(f"warning: contraction condition never satisfied up to "
              f"k={scheme_cfg.schedule.max_k} (P={report.P_used:.4g})")

    rid = manifest.run_id(cfg_dict, seed, command)
    try:
        run_dir = manifest.prepare_run_dir(manifest.out_root(out), rid, force)
    except FileExistsError as e:
        _warn(str(e))
        return EXIT_EXISTS

    run_cfg = cfg_dict["run"]
    iterations = int(run_cfg["iterations"])
    replicas = int(run_cfg["replicas"])
    man = manifest.RunManifest(run_id=rid, command=command, seed=seed,
                               config=cfg_dict,
                               schedule_report=report.as_dict())
    man.totals = {"scheme": scheme, "iterations": iterations,
                  "replicas": replicas, "lipschitz_L": L,
                  "bias_constant_c_hat": c_b}
    _print(f"run {rid}: scheme={scheme} target={cfg_dict['model']['target']} "
           f"iterations={iterations} replicas={replicas}", quiet)
    try:
        merged = run_scheme_ensemble(cfg_dict, None, iterations, seed,
                                     replicas,
                                     checkpoints=_checkpoint_list(run_cfg,
                                                                  iterations),
                                     jobs=jobs)
    except sampler.SamplerError as e:
        man.status = e.code
        man.failure = {"code": e.code, "k": int(getattr(e, "k", -1))}
        man.write(run_dir)
        _warn(f"{e.code} at iteration {getattr(e, 'k', '?')}; "
              f"manifest written to {run_dir}")
        return EXIT_SAMPLER

    rows = _metrics_rows(scheme_cfg.model, merged.checkpoints,
                         cfg_dict["metric"], seed)
    manifest.write_csv(run_dir / "metrics.csv",
                       ("k", "tau", "w2_method", "w2_value", "mean_sq_norm"),
                       rows)
    man.outputs.append("metrics.csv")
    track = metric.moment_track(merged.series_mean("x"))
    man.totals.update({
        "grad_calls_total": int(merged.grad_calls.sum()),
        "stabilized": track.stabilized,
        "final_mean_sq_norm": float(rows[-1][4]) if rows else None,
    })
    n_rec = int(run_cfg["record_replicas"] if records is None else records)
    n_rec = min(n_rec, replicas)
    if n_rec > 0:
        written = _write_records(cfg_dict, None, run_dir, seed, n_rec,
                                 iterations)
        man.outputs.extend(str(p.relative_to(run_dir)) for p in written)
    man.write(run_dir)
    for k, tau, method, value, msq in rows:
        w2s = "n/a" if value is None else f"{value:.6g}"
        _print(f"  k={k} tau={tau:.6g} w2[{method}]={w2s} "
               f"mean_sq_norm={msq:.6g}", quiet)
    _print(f"  grad_calls={man.totals['grad_calls_total']} "
           f"stabilized={track.stabilized}", quiet)
    _print(f"  wrote {run_dir}", quiet)
    return EXIT_OK


def compare_pipeline(cfg_dict: dict, seed: int, jobs: int = 1, out=None,
                     force: bool = False, quiet: bool = False) -> int:
    schemes = list(cfg_dict["compare"]["schemes"]) or [cfg_dict["scheme"]["name"]]
    try:
        scheme_cfgs = {s: cfgmod.build_scheme_config(cfg_dict, s)
                       for s in schemes}
    except (ValueError, cfgmod.ConfigError) as e:
        _warn(f"config error: {e}")
        return EXIT_CONFIG
    first = scheme_cfgs[schemes[0]]
    report, c_b, L = _schedule_report(cfg_dict, first, seed,
                                      scheme=schemes[0])
    if not report.rm_divergent:
        _warn(f"schedule rejected: {report}")
        return EXIT_CONFIG

    rid = manifest.run_id(cfg_dict, seed, "compare")
    try:
        run_dir = manifest.prepare_run_dir(manifest.out_root(out), rid, force)
    except FileExistsError as e:
        _warn(str(e))
        return EXIT_EXISTS

    run_cfg = cfg_dict["run"]
    iterations = int(run_cfg["iterations"])
    replicas = int(run_cfg["replicas"])
    man = manifest.RunManifest(run_id=rid, command="compare", seed=seed,
                               config=cfg_dict,
                               schedule_report=report.as_dict())
    _print(f"compare {rid}: schemes={','.join(schemes)} "
           f"target={cfg_dict['model']['target']}", quiet)
    all_rows = []
    summary = []
    for s in schemes:
        try:
            merged = run_scheme_ensemble(
                cfg_dict, s, iterations, seed, replicas,
                checkpoints=_checkpoint_list(run_cfg, iterations), jobs=jobs)
        except sampler.SamplerError as e:
            summary.append((s, None, None, None, e.code))
            _warn(f"  {s}: {e.code} at k={getattr(e, 'k', '?')}")
            continue
        rows = _metrics_rows(scheme_cfgs[s].model, merged.checkpoints,
                             cfg_dict["metric"], seed)
        all_rows.extend((s,) + r for r in rows)
        track = metric.moment_track(merged.series_mean("x"))
        final = rows[-1]
        summary.append((s, int(merged.grad_calls.sum()), final[3], final[4],
                        "OK" if track.stabilized else "NOT_STABILIZED"))
        w2s = "n/a" if final[3] is None else f"{final[3]:.6g}"
        _print(f"  {s}: grad_calls={merged.grad_calls.sum()} "
               f"final_w2={w2s} mean_sq_norm={final[4]:.6g}", quiet)
    manifest.write_csv(run_dir / "metrics.csv",
                       ("scheme", "k", "tau", "w2_method", "w2_value",
                        "mean_sq_norm"), all_rows)
    manifest.write_csv(run_dir / "summary.csv",
                       ("scheme", "grad_calls_total", "final_w2",
                        "final_mean_sq_norm", "status"), summary)
    man.outputs.extend(["metrics.csv", "summary.csv"])
    man.totals = {"schemes": schemes, "iterations": iterations,
                  "replicas": replicas}
    man.write(run_dir)
    _print(f"  wrote {run_dir}", quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wapt


def _wapt_worker(payload: dict) -> dict:
    cfg = cfgmod.build_scheme_config(payload["config"])
    try:
        chunk = flow.wapt_chunk(cfg, payload["anchors"], payload["horizon"],
                                payload["m"], payload["seed"],
                                payload["lo"], payload["hi"])
    except sampler.SamplerError as e:
        return {"failed": {"code": e.code, "k": int(getattr(e, "k", -1))}}
    return {"chunk": chunk}


def wapt_pipeline(cfg_dict: dict, seed: int, jobs: int = 1, out=None,
                  force: bool = False, quiet: bool = False) -> int:
    if cfg_dict["scheme"]["name"] == "ml":
        _warn("config error: ml has no scalar Brownian coupling; "
              "windowed deviation is undefined for it")
        return EXIT_CONFIG
    try:
        scheme_cfg = cfgmod.build_scheme_config(cfg_dict)
    except (ValueError, cfgmod.ConfigError) as e:
        _warn(f"config error: {e}")
        return EXIT_CONFIG
    w = cfg_dict["wapt"]
    anchors = sorted(int(a) for a in w["anchors"])
    horizon = float(w["horizon"])
    m = int(w["m_per_coarse"])
    replicas = int(w["replicas"])

    rid = manifest.run_id(cfg_dict, seed, "wapt")
    try:
        run_dir = manifest.prepare_run_dir(manifest.out_root(out), rid, force)
    except FileExistsError as e:
        _warn(str(e))
        return EXIT_EXISTS

    payloads = [dict(config=cfg_dict, anchors=anchors, horizon=horizon, m=m,
                     seed=seed, lo=lo, hi=hi)
                for lo, hi in replica_chunks(replicas, jobs)]
    if jobs <= 1 or len(payloads) == 1:
        results = [_wapt_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_wapt_worker, payloads))
    man = manifest.RunManifest(run_id=rid, command="wapt", seed=seed,
                               config=cfg_dict)
    for r in results:
        if "failed" in r:
            man.status = r["failed"]["code"]
            man.failure = r["failed"]
            man.write(run_dir)
            _warn(f"{man.status} at iteration {man.failure['k']}")
            return EXIT_SAMPLER
    merged = flow.merge_wapt_chunks([r["chunk"] for r in results], replicas)
    rows = []
    D = {}
    for n in anchors:
        offs, msd = merged[n]
        D[str(n)] = float(msd.max())
        tau_n = scheme_cfg.schedule.tau(n)
        rows.extend((n, tau_n, float(s), float(v), replicas)
                    for s, v in zip(offs, msd))
    manifest.write_csv(run_dir / "wapt.csv",
                       ("anchor_k", "tau", "offset_s", "mean_sq_dev",
                        "replicas"), rows)
    man.outputs.append("wapt.csv")

    # deviation decomposition at a capped replica count (single process)
    dec_rows = []
    dec_reps = min(replicas, 256)
    for n in anchors:
        pair = flow.couple(scheme_cfg, n, horizon, dec_reps, m, seed)
        rep = flow.decomposition_report(pair)
        dec_rows.extend(
            (n, float(s), float(t), float(p), float(i), bool(ok))
            for s, t, p, i, ok in zip(rep.offsets, rep.total, rep.picard,
                                      rep.interp, rep.bound_ok))
    manifest.write_csv(run_dir / "decomposition.csv",
                       ("anchor_k", "offset_s", "mean_sq_dev", "picard_term",
                        "interp_term", "bound_ok"), dec_rows)
    man.outputs.append("decomposition.csv")
    man.totals = {"anchors": anchors, "horizon": horizon,
                  "m_per_coarse": m, "replicas": replicas,
                  "max_deviation": D}
    man.write(run_dir)
    _print(f"wapt {rid}: anchors={anchors} horizon={horizon} "
           f"replicas={replicas}", quiet)
    for n in anchors:
        _print(f"  anchor k={n}: D={D[str(n)]:.6g}", quiet)
    _print(f"  wrote {run_dir}", quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def validate_pipeline(cfg_dict: dict, seed: int, out=None, force: bool = False,
                      quiet: bool = False) -> int:
    try:
        scheme_cfg = cfgmod.build_scheme_config(cfg_dict)
    except (ValueError, cfgmod.ConfigError) as e:
        _warn(f"config error: {e}")
        return EXIT_CONFIG
    model = scheme_cfg.model
    stream = StreamKey(seed=seed)
    worst, grad_ok = grad_check(model, 16, stream)
    diss = dissipativity_estimate(model, [1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
                                  16, stream)
    L_hat = lipschitz_estimate(model, 200, stream)
    report, c_b, L = _schedule_report(cfg_dict, scheme_cfg, seed)

    v = cfg_dict["validate"]
    iters = min(int(v["pilot_iterations"]), int(cfg_dict["run"]["iterations"]))
    mds_ok, mds_stat = True, 0.0
    try:
        traj = sampler.run(scheme_cfg, iters, StreamKey(seed=seed))
        rep = mds_check(traj.records, int(v["mds_window"]),
                        sigma_comp=scheme_cfg.noise.scale or None)
        mds_ok, mds_stat = rep.passed, rep.max_abs_running_mean
    except sampler.SamplerError as e:
        mds_ok, mds_stat = False, float("nan")
        _warn(f"pilot trajectory failed: {e.code} at k={getattr(e, 'k', '?')}")

    passed = bool(grad_ok and diss.dissipative and report.rm_divergent
                  and mds_ok)
    doc = {
        "grad_check": {"max_rel_error": worst, "passed": grad_ok},
        "dissipativity": {"alpha_hat": diss.alpha_hat,
                          "beta_hat": diss.beta_hat,
                          "violations": diss.violations,
                          "dissipative": diss.dissipative},
        "lipschitz": {"declared": model.lipschitz_L, "estimated": L_hat},
        "schedule_report": report.as_dict(),
        "bias_constant_c_hat": c_b,
        "noise_mds": {"passed": mds_ok, "max_abs_running_mean": mds_stat},
        "passed": passed,
    }
    rid = manifest.run_id(cfg_dict, seed, "validate")
    try:
        run_dir = manifest.prepare_run_dir(manifest.out_root(out), rid, force)
    except FileExistsError as e:
        _warn(str(e))
        return EXIT_EXISTS
    man = manifest.RunManifest(run_id=rid, command="validate", seed=seed,
                               config=cfg_dict, status="OK" if passed
                               else "VALIDATION_FAILED",
                               schedule_report=report.as_dict(),
                               totals=doc)
    man.outputs.append("validation.json")
    man.write(run_dir)
    import json
    with open(run_dir / "validation.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _print(f"validate {rid}: target={cfg_dict['model']['target']} "
           f"scheme={cfg_dict['scheme']['name']}", quiet)
    _print(f"  grad_check: {'pass' if grad_ok else 'FAIL'} "
           f"(max rel err {worst:.3g})", quiet)
    _print(f"  dissipativity: "
           f"{'pass' if diss.dissipative else 'FAIL'} "
           f"(alpha={diss.alpha_hat:.4g} beta={diss.beta_hat:.4g} "
           f"violations={diss.violations})", quiet)
    _print(f"  lipschitz: declared={model.lipschitz_L} "
           f"estimated={L_hat:.4g}", quiet)
    _print(f"  schedule: {report}", quiet)
    _print(f"  noise zero-mean check: {'pass' if mds_ok else 'FAIL'} "
           f"(max |running mean| {mds_stat:.4g})", quiet)
    _print(f"  overall: {'PASS' if passed else 'FAIL'}", quiet)
    _print(f"  wrote {run_dir}", quiet)
    return EXIT_OK if passed else 1
