"""How one inflated ratio moves each estimator.

A group of eight samples with fixed scores; sample 0 has a negative
advantage and its log-ratio is swept upward.  GRPO's negative branch is
never capped, so its update grows with the ratio.  UC-GRPO saturates and
StableDRL stays inside the hull of the per-sample terms.
"""
import numpy as np

from stabledrl_lab import RolloutGroup, compute_advantages, group_update

rng = np.random.default_rng(0)
G = 8
adv = compute_advantages(np.array([0.0, 1, 1, 0, 1, 0, 1, 1]))
grads = rng.normal(size=(G, 16))
bound = np.linalg.norm(adv[:, None] * grads, axis=1).max()

print(f"max per-sample norm {bound:.3f}")
print(f"{'log ratio':>10} {'grpo':>12} {'uc_grpo':>10} {'stabledrl':>10}")
for log_rho in (0, 2, 5, 10, 20, 40):
    logs = np.zeros(G)
    logs[0] = log_rho
    group = RolloutGroup.from_log_ratios(adv, logs)
    norms = [group_update(group, grads, est, 0.2, "linear").norm for est in ("grpo", "uc_grpo", "stabledrl")]
    print(f"{log_rho:>10} {norms[0]:>12.4g} {norms[1]:>10.4f} {norms[2]:>10.4f}")
