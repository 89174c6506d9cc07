"""Langevin-type stochastic-approximation sampling toolkit.

Six one-step schemes sharing a common update template, counter-based
replica streams, step-size schedules with Robbins-Monro checks, a coupled
continuous-flow oracle, Wasserstein metrics, and a CLI harness that turns
configs into reproducible run artifacts.
"""

from .flow import (BrownianStore, CoupledPair, DecompositionReport, WaptReport,
                   brownian_store, couple, decomposition_report, flow_oracle,
                   ou_transition, picard_process, refine_bridge,
                   wapt_deviation, window_offsets)
from .metric import (Ensemble, W2Report, bias_envelope_constant,
                     bias_scaling_fit, moment_track, sliced_w2, w2_1d,
                     w2_assignment, w2_between, w2_gaussian)
from .model import (DiffusionCoeff, Dissipativity, MirrorMap, PotentialModel,
                    ReferenceMoments, build_gaussian, build_gaussian_mixture,
                    build_repulsive, dissipativity_estimate, grad_check,
                    lipschitz_estimate)
from .noise import MdsReport, NoiseModel, mds_check, sample_noise
from .rng import BLOCK, StreamKey, Substream
from .sampler import (FailDiverged, FailGeometry, FailImplicit, SamplerError,
                      SchemeConfig, StepRecord, Trajectory, init_ormm_cache,
                      ml_step, ormm_step, pla_step, reconstruct, rmm_step,
                      run, run_ensemble, sgld_step, srk_step)
from .schedule import ScheduleReport, StepSchedule, compute_P, validate

__version__ = "0.1.0"

__all__ = [
    "BLOCK", "BrownianStore", "CoupledPair", "DecompositionReport",
    "DiffusionCoeff", "Dissipativity", "Ensemble", "FailDiverged",
    "FailGeometry", "FailImplicit", "MdsReport", "MirrorMap", "NoiseModel",
    "PotentialModel", "ReferenceMoments", "SamplerError", "SchemeConfig",
    "ScheduleReport", "StepRecord", "StepSchedule", "StreamKey", "Substream",
    "Trajectory", "W2Report", "WaptReport", "bias_envelope_constant",
    "bias_scaling_fit", "brownian_store", "build_gaussian",
    "build_gaussian_mixture", "build_repulsive", "compute_P", "couple",
    "decomposition_report", "dissipativity_estimate", "flow_oracle",
    "grad_check", "init_ormm_cache", "lipschitz_estimate", "mds_check",
    "ml_step", "moment_track", "ormm_step", "ou_transition", "picard_process",
    "pla_step", "reconstruct", "refine_bridge", "rmm_step", "run",
    "run_ensemble", "sample_noise", "sgld_step", "sliced_w2", "srk_step",
    "validate", "w2_1d", "w2_assignment", "w2_between", "w2_gaussian",
    "wapt_deviation", "window_offsets",
]
