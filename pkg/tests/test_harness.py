import csv
import math

import numpy as np
import pytest

from furuta_rt.delayrt import min_execution_horizon, run_delayed_episode
from furuta_rt.harness import cli
from furuta_rt.harness.config import ExperimentConfig, with_overrides
from furuta_rt.harness.experiments import (
    ablate_horizon, ablation_delay, bench_inference, predict_rollout, read_episode_csv,
)
from furuta_rt.harness.train import (
    Trainer, TrainingDiverged, build, confidence_half_width, evaluate, load_checkpoints, train,
)
from furuta_rt.model import DynamicsModel
from furuta_rt.planner import PolicyPlanner

SMALL = {
    "cem.iterations": 2, "cem.population": 40, "cem.policy_candidates": 5,
    "cem.elite_count": 5, "cem.baseline_horizon": 6,
    "offline_period": 100, "eval_every": 200, "eval_episodes": 2, "episode_steps": 60,
    "agent.batch_size": 32, "agent.updates_before_imagination": 10,
    "agent.updates_after_imagination": 10, "agent.imagination_rollouts": 8,
    "agent.imagination_horizon": 3, "agent.random_steps": 100,
    "model.batch_size": 32, "model.epochs_per_phase": 1, "model.max_batches": 5,
    "delay.measure_trials": 3,
}


def small_cfg(**kw):
    return with_overrides(ExperimentConfig(), **{**SMALL, **kw})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("rthcp")
    cfg = small_cfg(training_budget=300)
    return cfg, train(cfg, out), out


# -- statistics -------------------------------------------------------------------

def test_confidence_half_width():
    assert math.isnan(confidence_half_width([1.0]))
    # t(0.975, 1) = 12.7062...; sample std of (0, 2) is sqrt(2)
    assert confidence_half_width([0.0, 2.0]) == pytest.approx(12.7062047, rel=1e-6)
    assert confidence_half_width([3.0] * 5) == 0.0


# -- training -------------------------------------------------------------------------

def test_zero_budget_gives_empty_report(tmp_path):
    rep = train(small_cfg(training_budget=0), tmp_path)
    assert rep.steps == 0 and rep.curve == [] and rep.final is None
    assert read_rows(tmp_path / "learning_curve.csv") == [
        ["step", "mean_return", "ci95_half_width", "successes"]]
    assert (tmp_path / "summary.csv").exists()


def test_td3_without_delay_is_plain_td3(tmp_path):
    cfg = small_cfg(method="td3", training_budget=300, **{"delay.steps": 0})
    tr = Trainer(cfg)
    assert tr.comp.model is None and isinstance(tr.comp.planner, PolicyPlanner)
    assert tr.comp.delay.latency == 0 and tr.comp.delay.H_e == 1
    rep = tr.run(tmp_path)
    assert rep.steps == 300 and tr.real.total == 300
    assert len(tr.imagined) == 0
    assert tr.comp.agent.updates > 0
    assert not (tmp_path / "ckpt" / "model.txt").exists()


def test_offline_phases_do_not_consume_plant_ticks(trained):
    cfg, rep, out = trained
    assert rep.steps == cfg.training_budget
    assert [row[0] for row in rep.curve] == [200, 300]


def test_outputs_written(trained):
    cfg, rep, out = trained
    assert len(read_rows(out / "learning_curve.csv")) == 3
    eps = sorted((out / "episodes").glob("*.csv"))
    assert len(eps) == cfg.eval_episodes
    assert {p.name for p in (out / "ckpt").iterdir()} == {"model.txt", "agent.txt", "replay.npz"}
    summary = dict(read_rows(out / "summary.csv")[1:])
    assert summary["method"] == "rt-hcp" and summary["latency_ticks"] == "2"
    assert summary["inference_mean_ms"] == "40"


def test_fixed_delay_runs_are_reproducible(tmp_path, trained):
    cfg, _, first = trained
    train(cfg, tmp_path)
    names = ["learning_curve.csv", "summary.csv", "episodes/eval_00.csv",
             "episodes/eval_01.csv", "ckpt/model.txt", "ckpt/agent.txt"]
    for name in names:
        assert (tmp_path / name).read_bytes() == (first / name).read_bytes(), name


def test_evaluation_is_exploration_free(trained):
    cfg, _, out = trained
    model, agent = load_checkpoints(out / "ckpt")
    comp = build(cfg, model=model, agent=agent)
    a, b = evaluate(cfg, comp, 0, 2), evaluate(cfg, comp, 0, 2)
    assert a.returns == b.returns
    assert [lg.actions for lg in a.logs] == [lg.actions for lg in b.logs]


def test_divergence_aborts_with_partial_report(tmp_path):
    cfg = small_cfg(method="td3", training_budget=400, **{"agent.lr": 1e200})
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as info:
        train(cfg, tmp_path)
    assert info.value.report.diverged and info.value.report.steps > 0
    assert dict(read_rows(tmp_path / "summary.csv")[1:])["diverged"]


# -- horizon ablation ---------------------------------------------------------------

def test_ablation_single_horizon_single_trial(trained, tmp_path):
    cfg, _, out = trained
    rows = ablate_horizon(cfg, [5], out / "ckpt", trials=1, out_csv=tmp_path / "a.csv")
    assert len(rows) == 1 and math.isnan(rows[0]["ci95_half_width"])
    lines = read_rows(tmp_path / "a.csv")
    assert lines[0] == ["model", "horizon", "H_e", "mean_return", "ci95_half_width",
                        "successes", "trials"]
    assert len(lines) == 2 and lines[1][4] == ""


def test_ablation_rows_sorted(trained):
    cfg, _, out = trained
    rows = ablate_horizon(cfg, [10, 5, 7], out / "ckpt", trials=2)
    assert [r["horizon"] for r in rows] == [5, 7, 10]
    assert all(math.isfinite(r["ci95_half_width"]) for r in rows)
    assert all(r["H_e"] == ablation_delay(cfg, r["horizon"]).H_e for r in rows)


def test_ablation_delay_follows_inference_model():
    cfg = ExperimentConfig()
    # 7.2 ms per horizon step at 20 ms ticks
    assert [ablation_delay(cfg, h).H_e for h in (1, 5, 10, 15, 20)] == [1, 2, 4, 6, 8]


def test_ablation_data_driven_variant(trained):
    cfg, _, out = trained
    rows = ablate_horizon(cfg, [5], out / "ckpt", trials=1, model_kind="data-driven")
    assert rows[0]["model"] == "data-driven"


def test_ablation_needs_checkpoints(tmp_path):
    with pytest.raises(FileNotFoundError):
        ablate_horizon(ExperimentConfig(), [5], tmp_path)


# -- prediction ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def episode_csv(trained, tmp_path_factory):
    cfg, _, out = trained
    return out / "episodes" / "eval_00.csv"


def test_prediction_horizon_one(trained, episode_csv, tmp_path):
    _, _, out = trained
    model, _ = load_checkpoints(out / "ckpt")
    prior = DynamicsModel("residual", model.prior_params)
    rows = predict_rollout({"hcp": model, "prior": prior}, episode_csv, 1,
                           out_csv=tmp_path / "p.csv")
    assert len(rows) == 1
    header = read_rows(tmp_path / "p.csv")[0]
    assert header[:6] == ["step", "t_ms", "true_alpha", "true_beta", "true_alpha_dot",
                          "true_beta_dot"]
    assert "hcp_error" in header and "prior_beta" in header
    _, states, actions = read_episode_csv(episode_csv)
    assert rows[0]["prior_beta"] == prior.predict_batch(states[:1], actions[:1])[0, 1]


def test_prediction_passes_ground_truth_through(trained, episode_csv, tmp_path):
    _, _, out = trained
    model, _ = load_checkpoints(out / "ckpt")
    rows = predict_rollout({"m": model}, episode_csv, 10, out_csv=tmp_path / "p.csv")
    log = read_rows(episode_csv)
    got = read_rows(tmp_path / "p.csv")
    assert len(got) == 11
    for k in range(1, 11):
        assert got[k][2:6] == log[k + 1][1:5]
        assert rows[k - 1]["t_ms"] == float(log[k + 1][0])


def test_prediction_rejects_mismatches(episode_csv):
    with pytest.raises(ValueError):
        predict_rollout({"m": DynamicsModel("residual")}, episode_csv, 500)
    with pytest.raises(ValueError):
        predict_rollout({"m": DynamicsModel("residual", dt=0.01)}, episode_csv, 5)


# -- inference benchmark ----------------------------------------------------------------

def test_bench_rows(tmp_path):
    cfg = small_cfg()
    rows = bench_inference(cfg, trials=3, out_csv=tmp_path / "bench.csv")
    assert [r["method"] for r in rows] == ["td3", "rt-hcp", "rt-mpc-baseline"]
    assert [r["H_p"] for r in rows] == [1, 5, 6]
    for r in rows:
        assert r["H_e_min"] == min_execution_horizon(r["mean_ms"], 20.0)
        assert r["delay"] == pytest.approx(r["mean_ms"] / 20.0)
    assert read_rows(tmp_path / "bench.csv")[0] == ["method", "H_p", "mean_ms", "std_ms",
                                                    "delay", "H_e_min"]


# -- CLI ----------------------------------------------------------------------------------

def _write_cfg(path, extra=""):
    text = "\n".join(f"{k} = {v}" for k, v in SMALL.items()) + "\n" + extra
    path.write_text(text)
    return path


def test_cli_train_and_eval(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.cfg")
    assert cli.main(["train", "--config", str(cfg), "--steps", "200",
                     "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "learning_curve.csv").exists()
    assert cli.main(["eval", "--config", str(cfg), "--ckpt", str(tmp_path / "run" / "ckpt"),
                     "--trials", "1", "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "episodes" / "eval_00.csv").exists()
    assert cli.main(["predict-rollout", "--model", f"hcp={tmp_path}/run/ckpt/model.txt",
                     "--episode", str(tmp_path / "ev" / "episodes" / "eval_00.csv"),
                     "--horizon", "10", "--out", str(tmp_path / "pr")]) == 0
    assert (tmp_path / "pr" / "prediction.csv").exists()
    assert cli.main(["ablate-horizon", "--config", str(cfg), "--ckpt",
                     str(tmp_path / "run" / "ckpt"), "--horizons", "5", "--trials", "1",
                     "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab" / "ablation.csv").exists()


def test_cli_bench(tmp_path):
    cfg = _write_cfg(tmp_path / "c.cfg")
    assert cli.main(["bench-inference", "--config", str(cfg), "--trials", "2",
                     "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "bench.csv")) == 4


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.cfg", "cem.popsize = 3\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "cem.popsize" in capsys.readouterr().err


def test_cli_divergence_exit_code(tmp_path):
    cfg = _write_cfg(tmp_path / "c.cfg", "method = td3\nagent.lr = 1e200\n")
    with np.errstate(all="ignore"):
        code = cli.main(["train", "--config", str(cfg), "--steps", "400",
                         "--out", str(tmp_path / "run")])
    assert code == 3


def test_cli_missing_checkpoint(tmp_path):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none"), "--out", str(tmp_path)]) == 1


def test_delayed_loop_episode_csv_round_trip(tmp_path):
    cfg = small_cfg(method="td3")
    comp = build(cfg)
    lg = run_delayed_episode(cfg.plant, comp.planner, comp.estimator, comp.delay, 30, seed=1)
    lg.to_csv(tmp_path / "e.csv")
    t, states, actions = read_episode_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(states, lg.states())
    np.testing.assert_array_equal(actions, lg.actions)


def test_measured_mode_reports_plan_times(tmp_path):
    cfg = small_cfg(method="rt-mpc-baseline", training_budget=200,
                    **{"delay.mode": "measured", "delay.budget_check": False})
    rep = train(cfg, tmp_path)
    assert rep.inference_ms["mean_ms"] > 0 and rep.inference_ms["std_ms"] >= 0
    assert rep.latency == rep.H_e >= 1
