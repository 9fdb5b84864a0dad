"""One GRPO / StableDRL pair on the stressed copy task, with the exported curves.

    python demos/stress_pair.py [seed]
"""
import sys
from pathlib import Path

from stabledrl_lab import RunConfig, export_plot_data, run_experiment
from stabledrl_lab.runner import read_status, summarize_run

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
base = RunConfig.load(Path(__file__).with_name("stress_copy.txt")).replace(seed=seed)

for est in ("grpo", "stabledrl"):
    run_dir = run_experiment(base.replace(estimator=est), Path("runs") / f"demo_{est}_{seed}")
    s = summarize_run(run_dir)
    st = read_status(run_dir)
    print(f"{est:10s} status={s['status']} ({st['reason']}) spike_rate={s['spike_rate']:.3f} "
          f"reward {s['reward_initial']:.3f} -> {s['reward_final']:.3f}")
    for kind in ("reward_curve", "threshold_curve"):
        (run_dir / f"{kind}.csv").write_text(export_plot_data(run_dir, kind))
    print(f"  curves written to {run_dir}")
