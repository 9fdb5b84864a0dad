"""Desk-scale lab for self-normalised, clipped policy optimisation of masked diffusion models."""
import os as _os

_threads = _os.environ.get("STABLEDRL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .config import ConfigError, RunConfig  # noqa: E402
from .diagnostics import StressConfig, TailEnvelope, spike_indicator  # noqa: E402
from .estimators import OptimizerState, RolloutGroup, apply_update, compute_advantages, group_update  # noqa: E402
from .model import DenoiserParams, TokenSequence, init_params  # noqa: E402
from .ratios import LogRatioSet, clip_then_softmax  # noqa: E402
from .runner import export_plot_data, run_experiment  # noqa: E402

__all__ = [
    "ConfigError", "DenoiserParams", "LogRatioSet", "OptimizerState", "RolloutGroup", "RunConfig",
    "StressConfig", "TailEnvelope", "TokenSequence", "apply_update", "clip_then_softmax",
    "compute_advantages", "export_plot_data", "group_update", "init_params", "run_experiment",
    "spike_indicator",
]
