"""Experiment suites: inference benchmark, horizon ablation, multi-step prediction."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .. import model as model_mod
from ..delayrt import (
    DelayConfig, initial_state, measure_inference_time, min_execution_horizon,
    run_delayed_episode,
)
from ..model import DynamicsModel, ReplayBuffer
from ..neural import AdamState
from ..pendulum import PlantConfig, State, plant_step
from .config import ExperimentConfig
from .train import (
    Components, build, confidence_half_width, load_checkpoints, make_agent, make_model,
    cem_config,
)
from ..planner import HybridPlanner, MpcPlanner, PolicyPlanner

ABLATION_STREAM = 2


# -- inference benchmark -----------------------------------------------------------

def bench_inference(cfg: ExperimentConfig, trials: int = 30, out_csv=None) -> list[dict]:
    """Wall-clock plan time per method, reported like an inference-time table."""
    dt_ms = cfg.plant.dt * 1000.0
    agent = make_agent(cfg)
    planners = [
        ("td3", PolicyPlanner(agent)),
        ("rt-hcp", HybridPlanner(make_model(cfg, "residual"), agent, cem_config(cfg))),
        ("rt-mpc-baseline", MpcPlanner(make_model(cfg, "data-driven"),
                                       cem_config(cfg, cfg.cem.baseline_horizon, False))),
    ]
    rows = []
    for name, planner in planners:
        st = measure_inference_time(planner, trials, cfg.seed)
        rows.append({
            "method": name, "H_p": planner.horizon, "mean_ms": st["mean_ms"],
            "std_ms": st["std_ms"], "delay": st["mean_ms"] / dt_ms,
            "H_e_min": min_execution_horizon(st["mean_ms"], dt_ms),
        })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "H_p", "mean_ms", "std_ms", "delay", "H_e_min"])
            for r in rows:
                w.writerow([r["method"], r["H_p"], f"{r['mean_ms']:.4f}",
                            f"{r['std_ms']:.4f}", f"{r['delay']:.4f}", r["H_e_min"]])
    return rows


# -- data collection and model fitting -------------------------------------------------

class ExcitationPolicy:
    """Piecewise-constant random voltages with a weak rotor-centering term."""

    def __init__(self, a_max: float, rng: np.random.Generator, hold=(5, 20), gain=3.0):
        self.a_max, self.rng, self.hold, self.gain = a_max, rng, hold, gain
        self.left, self.u = 0, 0.0

    def __call__(self, s: State) -> float:
        if self.left == 0:
            self.u = float(self.rng.uniform(-self.a_max, self.a_max))
            self.left = int(self.rng.integers(*self.hold))
        self.left -= 1
        a = self.u + self.gain * s.alpha + 0.3 * self.gain * s.alpha_dot
        return float(np.clip(a, -self.a_max, self.a_max))


def collect_transitions(plant: PlantConfig, n_steps: int, seed, episode_steps: int = 500,
                        capacity: int | None = None) -> ReplayBuffer:
    """Fill a buffer with plant transitions under :class:`ExcitationPolicy`."""
    buf = ReplayBuffer(capacity or n_steps, seed=0)
    episode = 0
    while buf.total < n_steps:
        rng = np.random.default_rng((*np.atleast_1d(seed), episode))
        policy = ExcitationPolicy(plant.params.a_max, rng)
        s = initial_state(rng)
        for _ in range(episode_steps):
            a = policy(s)
            s_next, r, done = plant_step(s, a, plant, rng)
            buf.push(s, a, r, s_next, done)
            s = s_next
            if done or buf.total >= n_steps:
                break
        episode += 1
    return buf


def collect_episode(plant: PlantConfig, n_steps: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """States (n_steps + 1, 4) and actions (n_steps,) of one excitation episode.

    Seeds whose episode terminates early are skipped deterministically.
    """
    for attempt in range(1000):
        rng = np.random.default_rng((*np.atleast_1d(seed), attempt))
        policy = ExcitationPolicy(plant.params.a_max, rng)
        s = initial_state(rng)
        states, actions = [s.as_array()], []
        for _ in range(n_steps):
            a = policy(s)
            s, _, done = plant_step(s, a, plant, rng)
            states.append(s.as_array())
            actions.append(a)
            if done:
                break
        if len(actions) == n_steps:
            return np.array(states), np.array(actions)
    raise RuntimeError("could not collect a non-terminating episode")


def fit_model(model: DynamicsModel, buffer: ReplayBuffer, epochs: int, batch_size: int = 256,
              lr: float = 1e-3, max_batches: int | None = None) -> list[float]:
    adam = AdamState.for_params(model.net, lr=lr)
    return [model_mod.train_epoch(model, buffer, batch_size, adam, max_batches)
            for _ in range(epochs)]


def rollout_errors(model: DynamicsModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Euclidean state error after each step of an open-loop model rollout."""
    pred = model.rollout_batch(states[0], actions[None])[0]
    return np.linalg.norm(pred - states[1:len(actions) + 1], axis=1)


# -- horizon ablation ----------------------------------------------------------------

def ablation_delay(cfg: ExperimentConfig, horizon: int) -> DelayConfig:
    """Delay implied by the configured inference-time model at this horizon."""
    dt_ms = cfg.plant.dt * 1000.0
    H_e = min(min_execution_horizon(cfg.delay.ms_per_horizon_step * horizon, dt_ms), horizon)
    return DelayConfig(dt=cfg.plant.dt, H_p=horizon, H_e=H_e, delay_mode="fixed",
                       delay_steps=H_e, budget_check=True)


def data_driven_variant(cfg: ExperimentConfig, replay: ReplayBuffer) -> DynamicsModel:
    """Data-driven model given the same update budget the online model received."""
    m = cfg.model
    model = make_model(cfg, "data-driven")
    phases = max(1, replay.total // cfg.offline_period)
    fit_model(model, replay, phases * m.epochs_per_phase, m.batch_size, m.lr, m.max_batches)
    return model


def ablate_horizon(cfg: ExperimentConfig, horizons, ckpt_dir, trials: int = 10,
                   model_kind: str | None = None, out_csv=None) -> list[dict]:
    """Evaluate a trained checkpoint at several planning horizons.

    ``model_kind="data-driven"`` swaps a residual checkpoint's model for a
    data-driven one fitted on the checkpoint's replay buffer.
    """
    model, agent = load_checkpoints(ckpt_dir)
    label = model.kind if model is not None else "none"
    if model_kind is not None and model is not None and model_kind != model.kind:
        replay_path = Path(ckpt_dir) / "replay.npz"
        if not replay_path.exists():
            raise FileNotFoundError(f"{replay_path} is needed to fit a {model_kind} variant")
        model = data_driven_variant(cfg, ReplayBuffer.load(replay_path))
        label = model_kind
    rows = []
    for H in sorted(int(h) for h in horizons):
        comp = build(cfg, model=model, agent=agent, horizon=H)
        comp = Components(comp.model, comp.estimator, comp.agent, comp.planner,
                          ablation_delay(cfg, comp.planner.horizon))
        logs = [run_delayed_episode(cfg.plant, comp.planner, comp.estimator, comp.delay,
                                    cfg.episode_steps, seed=(cfg.seed, ABLATION_STREAM, i))
                for i in range(trials)]
        returns = [lg.episode_return for lg in logs]
        rows.append({"model": label, "horizon": H, "H_e": comp.delay.H_e,
                     "mean_return": float(np.mean(returns)),
                     "ci95_half_width": confidence_half_width(returns),
                     "successes": sum(lg.success for lg in logs), "trials": trials})
    if out_csv is not None:
        write_ablation(out_csv, rows)
    return rows


def write_ablation(path, rows: list[dict], append: bool = False) -> None:
    cols = ["model", "horizon", "H_e", "mean_return", "ci95_half_width", "successes",
            "trials"]
    new = not (append and Path(path).exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(cols)
        for r in rows:
            ci = r["ci95_half_width"]
            w.writerow([r["model"], r["horizon"], r["H_e"], f"{r['mean_return']:.10g}",
                        "" if math.isnan(ci) else f"{ci:.10g}", r["successes"], r["trials"]])


# -- multi-step prediction -----------------------------------------------------------

def read_episode_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(t_ms, states, actions)`` from an episode log CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty episode log")
    try:
        t = np.array([float(r["t_ms"]) for r in rows])
        states = np.array([[float(r[k]) for k in ("alpha", "beta", "alpha_dot", "beta_dot")]
                           for r in rows])
        actions = np.array([float(r["action_V"]) for r in rows])
    except KeyError as exc:
        raise ValueError(f"{path}: missing column {exc}") from None
    return t, states, actions


def predict_rollout(models: Mapping[str, DynamicsModel], episode_csv, horizon: int,
                    out_csv=None) -> list[dict]:
    """Open-loop predictions of each model against a logged plant episode."""
    t, states, actions = read_episode_csv(episode_csv)
    if horizon < 1 or horizon + 1 > len(states):
        raise ValueError(f"log has {len(states)} rows, horizon {horizon} needs {horizon + 1}")
    dts = np.diff(t)
    for name, m in models.items():
        if len(dts) and not np.allclose(dts, m.dt * 1000.0, rtol=1e-6, atol=1e-6):
            raise ValueError(f"model {name!r} has dt={m.dt * 1000} ms, log spacing differs")
    preds = {name: m.rollout_batch(states[0], actions[None, :horizon])[0]
             for name, m in models.items()}
    keys = ("alpha", "beta", "alpha_dot", "beta_dot")
    rows = []
    for k in range(1, horizon + 1):
        row = {"step": k, "t_ms": t[k]}
        row.update({f"true_{key}": states[k, j] for j, key in enumerate(keys)})
        for name, p in preds.items():
            row.update({f"{name}_{key}": p[k - 1, j] for j, key in enumerate(keys)})
            row[f"{name}_error"] = float(np.linalg.norm(p[k - 1] - states[k]))
        rows.append(row)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                            for k, v in r.items()})
    return rows
