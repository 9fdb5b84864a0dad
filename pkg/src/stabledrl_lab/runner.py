"""Run orchestration (rollouts, advantages, inner updates, logging) and plot-data export."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diagnostics import spike_series, stress_weights
from .estimators import OptimizerState, RolloutGroup, compute_advantages, inner_update_loop
from .model import init_params, sample_rollout, save_checkpoint
from .ratios import upper_weight
from .rng import derive_rng
from .tasks import make_task

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "inner_step", "estimator", "reward_mean", "update_norm", "spike", "spike_threshold",
    "D_i", "S_i", "ratio_min", "ratio_max", "alpha_max", "rejected_step",
    # appended columns
    "group", "log_ratio_min", "log_ratio_max", "max_sample_norm", "h_max",
)
EXPORT_KINDS = ("reward_curve", "spike_rate", "threshold_curve", "ratio_norm_scatter")
OUTPUT_DIR_ENV = "STABLEDRL_OUTPUT_DIR"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _exp(x: float) -> float:
    return math.exp(x) if x < 700 else math.inf


def resolve_output_dir(config: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


def write_status(run_dir: Path, status: str, **extra) -> None:
    lines = [f"status = {status}"] + [f"{k} = {v}" for k, v in extra.items()]
    (run_dir / "status.txt").write_text("\n".join(lines) + "\n")


def read_status(run_dir) -> dict:
    out = {}
    for line in (Path(run_dir) / "status.txt").read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def _rollout_group(params_old, task, cfg: RunConfig, step: int, g: int) -> RolloutGroup:
    prompt = task.prompt(derive_rng(cfg.seed, "prompt", step, g))
    mode = "block_causal" if cfg.arch == "block" else "full"
    rollouts = [sample_rollout(params_old, prompt, cfg.response_len, cfg.block_size, cfg.steps_per_block,
                               cfg.temperature, derive_rng(cfg.seed, "rollout", step, g, j), mode)
                for j in range(cfg.group_size)]
    rewards = np.array([task.reward(x) for x in rollouts])
    adv = compute_advantages(rewards, cfg.advantage_mode)
    zeros = np.zeros(cfg.group_size)
    return RolloutGroup(adv, zeros, zeros, rollouts, rewards, prompt)


def run_experiment(config: RunConfig, run_dir=None) -> Path:
    """Execute ``config.total_steps`` outer cycles and write the run directory.

    Layout: ``config.txt``, ``checkpoint_init.bin``, ``checkpoint_final.bin``,
    ``metrics.csv`` and ``status.txt``.  Collapse ends the run early with
    ``status = collapsed``; it is an outcome, not an error.  Three triggers:
    non-finite parameters, ``collapse_rejections`` consecutive rejected
    steps, or a frozen policy: every group has zero reward spread for
    ``collapse_patience`` consecutive outer steps while the mean reward is
    below the task maximum.  Group-relative advantages are then identically
    zero, so no estimator can move the policy again.
    """
    cfg = config
    run_dir = Path(run_dir) if run_dir is not None else resolve_output_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.txt")
    task = make_task(cfg.task, cfg.prompt_len, cfg.response_len, cfg.num_symbols)
    params = init_params(cfg.vocab_size, cfg.embed_dim, cfg.seq_len, cfg.block_size,
                         seed=int(derive_rng(cfg.seed, "init").integers(2**31)), init_scale=cfg.init_scale)
    save_checkpoint(params, run_dir / "checkpoint_init.bin")
    state = OptimizerState(cfg.optimizer, cfg.lr, cfg.lr_schedule,
                           cfg.total_steps * cfg.prompts_per_step * cfg.num_inner,
                           cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.grad_clip)
    stress = cfg.stress_config()
    h_scale = upper_weight(cfg.epsilon, cfg.clip_space)
    history: list[float] = []
    frozen = 0
    status, reason, steps_done = "completed", "", 0
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for step in range(cfg.total_steps):
            params_old = params.copy()
            step_frozen = True
            for g in range(cfg.prompts_per_step):
                group = _rollout_group(params_old, task, cfg, step, g)
                sg = stress_weights(group, stress, derive_rng(cfg.seed, "elbo", step, g).integers(2**63),
                                    params_new=params, params_old=params_old, m=cfg.mc_samples, arch=cfg.arch,
                                    coupling=cfg.coupling, t_floor=cfg.t_floor)
                trace = inner_update_loop(sg.group, params, cfg.num_inner, cfg.estimator, cfg, state,
                                          seed=derive_rng(cfg.seed, "inner", step, g).integers(2**63),
                                          params_old=params_old, norm_history=history,
                                          old_patterns=sg.old_patterns, stressed=sg.stressed)
                params, state = trace.params, trace.optimizer_state
                reward_mean = float(group.rewards.mean())
                step_frozen &= bool(np.ptp(group.rewards) == 0 and reward_mean < 1.0)
                for s in trace.steps:
                    lr_min, lr_max = float(np.min(s.log_ratios)), float(np.max(s.log_ratios))
                    writer.writerow([_fmt(v) for v in (
                        step, s.inner_step, cfg.estimator, reward_mean, s.update_norm, s.spike, s.spike_threshold,
                        s.drift, s.spread, _exp(lr_min), _exp(lr_max), s.alpha_max, s.rejected,
                        g, lr_min, lr_max, s.max_sample_norm, h_scale * s.max_sample_norm)])
                if not np.isfinite(params.to_vector()).all():
                    status, reason = "collapsed", "non-finite parameters"
                elif state.consecutive_rejections >= cfg.collapse_rejections:
                    status, reason = "collapsed", f"{state.consecutive_rejections} consecutive rejected steps"
                if status == "collapsed":
                    break
            steps_done = step + 1
            frozen = frozen + 1 if step_frozen and status != "collapsed" else 0
            if cfg.collapse_patience and frozen >= cfg.collapse_patience:
                status, reason = "collapsed", f"policy frozen for {frozen} steps"
            if status == "collapsed":
                log.info("run collapsed at step %d: %s", step, reason)
                break
    save_checkpoint(params, run_dir / "checkpoint_final.bin")
    write_status(run_dir, status, steps_completed=steps_done, rejected_steps=state.rejected_total,
                 reason=reason or "none")
    return run_dir


# ---------------------------------------------------------------- export

def read_metrics(run_dir) -> list[dict]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def _float(s: str) -> float:
    return float(s) if s != "" else math.nan


def export_plot_data(run_dir, kind: str) -> str:
    """Tidy CSV text for one plot kind, computed only from files inside ``run_dir``."""
    if kind not in EXPORT_KINDS:
        raise ValueError(f"unknown export kind {kind!r}; choose from {', '.join(EXPORT_KINDS)}")
    cfg = RunConfig.load(Path(run_dir) / "config.txt")
    rows = read_metrics(run_dir)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if kind == "reward_curve":
        w.writerow(("step", "value"))
        per_step: dict[int, list[float]] = {}
        for r in rows:
            if int(r["inner_step"]) == 0:
                per_step.setdefault(int(r["step"]), []).append(_float(r["reward_mean"]))
        for step, vals in per_step.items():
            w.writerow((step, repr(float(np.mean(vals)))))
    elif kind in ("spike_rate", "threshold_curve"):
        norms = [_float(r["update_norm"]) if r["rejected_step"] == "0" else math.nan for r in rows]
        flags, thresholds = spike_series(norms, cfg.spike_window, cfg.spike_delta)
        if kind == "spike_rate":
            w.writerow(("step", "value", "series"))
            for i, f in enumerate(flags):
                w.writerow((i, int(f), "spike"))
        else:
            w.writerow(("step", "value"))
            for i, t in enumerate(thresholds):
                if np.isfinite(t):
                    w.writerow((i, repr(float(t))))
    else:
        w.writerow(("log10_ratio", "log10_update_norm"))
        for r in rows:
            norm = _float(r["update_norm"])
            lr = _float(r["log_ratio_max"])
            if np.isfinite(norm) and norm > 0 and np.isfinite(lr):
                w.writerow((repr(lr / math.log(10)), repr(math.log10(norm))))
    return out.getvalue()


def summarize_run(run_dir, window: int = 10) -> dict:
    """Status, spike rate and first/last-window mean reward of a finished run."""
    cfg = RunConfig.load(Path(run_dir) / "config.txt")
    rows = read_metrics(run_dir)
    norms = [_float(r["update_norm"]) if r["rejected_step"] == "0" else math.nan for r in rows]
    flags, thresholds = spike_series(norms, cfg.spike_window, cfg.spike_delta)
    live = np.isfinite(thresholds)
    curve = list(csv.reader(io.StringIO(export_plot_data(run_dir, "reward_curve"))))[1:]
    rewards = [float(v) for _, v in curve]
    return {
        "status": read_status(run_dir)["status"],
        "spike_rate": float(flags[live].mean()) if live.any() else 0.0,
        "reward_initial": float(np.mean(rewards[:window])) if rewards else math.nan,
        "reward_final": float(np.mean(rewards[-window:])) if rewards else math.nan,
        "updates": len(rows),
    }
