import csv
import io
import itertools
import subprocess
import sys

import numpy as np
import pytest

from stabledrl_lab.cli import main
from stabledrl_lab.config import ConfigError, RunConfig
from stabledrl_lab.model import TokenSequence, load_checkpoint
from stabledrl_lab.runner import (
    EXPORT_KINDS, METRIC_COLUMNS, export_plot_data, read_metrics, read_status, run_experiment, summarize_run,
)
from stabledrl_lab.tasks import builtin_tasks, copy_reward, make_task, parity_reward, sorted_reward

SMALL = dict(vocab_size=5, embed_dim=8, total_steps=3, group_size=4, num_inner=2, spike_window=2)


def test_config_round_trip():
    cfg = RunConfig(estimator="grpo", lr=0.003, seed=7, condition="exploding")
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text,msg", [
    ("task = copy\n", "version"),
    ("version = 1\nbogus = 3\n", "unknown"),
    ("version = 1\nlr = 0.1\nlr = 0.2\n", "duplicate"),
    ("version = 1\nlr = fast\n", "parse"),
    ("version = 2\n", "version"),
    ("version = 1\nestimator = ppo\n", "estimator"),
    ("version = 1\nclip_space = linear\nepsilon = 2\n", "linear"),
    ("version = 1\nresponse_len = 6\nblock_size = 4\n", "divide"),
    ("version = 1\ngroup_size = 1\n", "group_size"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig.loads(text)


def test_config_comments_and_blank_lines():
    cfg = RunConfig.loads("# header\nversion = 1\n\nlr = 0.5  # fast\n")
    assert cfg.lr == 0.5


def test_copy_and_sorted_rewards():
    p = np.array([1, 2, 3, 4])
    assert copy_reward(p, np.array([1, 2, 3])) == 1.0
    assert copy_reward(p, np.array([1, 0, 3])) == pytest.approx(2 / 3)
    assert sorted_reward(p, np.array([1, 1, 2, 0])) == pytest.approx(2 / 3)
    assert sorted_reward(p, np.array([3])) == 1.0


def test_parity_reward_exhaustive():
    for bits in itertools.product([0, 1], repeat=4):
        prompt = np.array(bits)
        want = sum(bits) % 2
        assert parity_reward(prompt, np.array([want, 0])) == 1.0
        assert parity_reward(prompt, np.array([1 - want, want])) == 0.0


def test_tasks():
    rng = np.random.default_rng(0)
    for task in builtin_tasks():
        prompt = task.prompt(rng)
        assert len(prompt) == task.prompt_len and prompt.tokens.max() < task.num_symbols
        seq = TokenSequence(np.concatenate([prompt.tokens, prompt.tokens[:task.response_len]]), task.prompt_len)
        assert 0.0 <= task.reward(seq) <= 1.0
    assert make_task("parity").prompt(rng).tokens.max() <= 1
    with pytest.raises(ValueError):
        make_task("copy", prompt_len=2, response_len=4)
    with pytest.raises(ValueError):
        make_task("maze")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    cfg = RunConfig(**SMALL, condition="exploding", drift_m=2)
    return run_experiment(cfg, tmp_path_factory.mktemp("run") / "r")


def test_run_directory_layout(run_dir):
    for name in ("config.txt", "metrics.csv", "status.txt", "checkpoint_init.bin", "checkpoint_final.bin"):
        assert (run_dir / name).exists()
    assert read_status(run_dir)["status"] == "completed"
    rows = read_metrics(run_dir)
    assert tuple(rows[0].keys()) == METRIC_COLUMNS
    assert len(rows) == 3 * 2
    assert [int(r["inner_step"]) for r in rows] == [0, 1] * 3
    init, final = load_checkpoint(run_dir / "checkpoint_init.bin"), load_checkpoint(run_dir / "checkpoint_final.bin")
    assert not np.array_equal(init.to_vector(), final.to_vector())


def test_runs_replay_byte_identically(run_dir, tmp_path):
    again = run_experiment(RunConfig.load(run_dir / "config.txt"), tmp_path / "again")
    for name in ("metrics.csv", "checkpoint_final.bin", "status.txt"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes()


def test_stabledrl_rows_respect_the_hull_bound(run_dir):
    for r in read_metrics(run_dir):
        assert float(r["update_norm"]) <= float(r["max_sample_norm"]) * (1 + 1e-12)


@pytest.mark.parametrize("kind", EXPORT_KINDS)
def test_exports_are_tidy_csv(run_dir, kind):
    rows = list(csv.reader(io.StringIO(export_plot_data(run_dir, kind))))
    assert rows[0][:2] in (["step", "value"], ["log10_ratio", "log10_update_norm"])
    assert all(len(r) == len(rows[0]) for r in rows)


def test_export_rejects_unknown_kind(run_dir):
    with pytest.raises(ValueError):
        export_plot_data(run_dir, "heatmap")


def test_summary(run_dir):
    s = summarize_run(run_dir)
    assert s["status"] == "completed" and s["updates"] == 6


def test_frozen_policy_collapses(tmp_path):
    # near-zero temperature: every rollout in a group is the same greedy decode
    cfg = RunConfig(**SMALL).replace(temperature=1e-9, collapse_patience=3, total_steps=10)
    out = run_experiment(cfg, tmp_path / "frozen")
    st = read_status(out)
    assert st["status"] == "collapsed" and "frozen" in st["reason"]
    assert st["steps_completed"] == "3"
    assert all(float(r["update_norm"]) == 0.0 for r in read_metrics(out))


def test_frozen_policy_check_can_be_disabled(tmp_path):
    cfg = RunConfig(**SMALL).replace(temperature=1e-9, collapse_patience=0, total_steps=4)
    assert read_status(run_experiment(cfg, tmp_path / "f"))["status"] == "completed"


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("STABLEDRL_OUTPUT_DIR", str(tmp_path / "env"))
    path = tmp_path / "c.txt"
    RunConfig(**SMALL).replace(total_steps=1).dump(path)
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "status.txt").exists()


def test_cli_mask_dump(capsys):
    assert main(["mask-dump", "--n", "4", "--block", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[6] == "11000011"


def test_cli_export_and_errors(run_dir, tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert main(["export", str(run_dir), "--kind", "reward_curve", "--out", str(out)]) == 0
    assert out.read_text().startswith("step,value")
    bad = tmp_path / "bad.txt"
    bad.write_text("version = 1\nestimator = ppo\n")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.txt")]) == 2


@pytest.mark.parametrize("check", ["clip_stability", "grpo_unbounded", "staircase", "gradient"])
def test_cli_verify_quick(check, capsys):
    assert main(["verify", check, "--quick"]) == 0
    assert capsys.readouterr().out.startswith(f"PASS {check}")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "stabledrl_lab", "mask-dump", "--n", "2", "--block", "1"],
                         capture_output=True, text=True, check=True)
    assert res.stdout.split() == ["1000", "1100", "0010", "1001"]
