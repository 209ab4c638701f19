"""Training orchestration: online collection, offline updates, imagination, evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .. import agent as agent_mod
from .. import model as model_mod
from ..agent import ActorCritic
from ..delayrt import (
    DelayConfig, DelayedEpisodeLog, DelayedLoop, episode_rngs, initial_state,
    measure_inference_time, min_execution_horizon, run_delayed_episode,
)
from ..model import DynamicsModel, ReplayBuffer
from ..neural import AdamState, DivergenceError
from ..planner import CemConfig, HybridPlanner, MpcPlanner, Plan, PolicyPlanner
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

TRAIN_STREAM, EVAL_STREAM = 0, 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, report: "RunReport"):
        super().__init__(msg)
        self.report = report


@dataclass
class EvalSummary:
    step: int
    returns: list[float]
    successes: int
    swing_up_times: list[float]
    rotor_deviations: list[float]
    logs: list[DelayedEpisodeLog] = field(repr=False, default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def ci_half_width(self) -> float:
        return confidence_half_width(self.returns)


@dataclass
class RunReport:
    method: str
    steps: int = 0
    curve: list[tuple[int, float, float, int]] = field(default_factory=list)
    final: EvalSummary | None = None
    H_e: int = 0
    latency: int = 0
    inference_ms: dict[str, float] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)
    diverged: str = ""

    def _times(self):
        return [t for t in (self.final.swing_up_times if self.final else []) if math.isfinite(t)]

    def _devs(self):
        return [d for d in (self.final.rotor_deviations if self.final else []) if math.isfinite(d)]

    @property
    def swing_up_mean(self) -> float:
        t = self._times()
        return float(np.mean(t)) if t else math.inf

    @property
    def swing_up_std(self) -> float:
        t = self._times()
        return float(np.std(t)) if t else math.nan

    @property
    def rotor_deviation_mean(self) -> float:
        d = self._devs()
        return float(np.mean(d)) if d else math.nan

    @property
    def rotor_deviation_std(self) -> float:
        d = self._devs()
        return float(np.std(d)) if d else math.nan

    @property
    def final_successes(self) -> int:
        return self.final.successes if self.final else 0


def confidence_half_width(values, level: float = 0.95) -> float:
    """Student-t half width of the mean; NaN with fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return math.nan
    sem = values.std(ddof=1) / math.sqrt(len(values))
    return float(stats.t.ppf(0.5 + level / 2, len(values) - 1) * sem)


# -- component construction --------------------------------------------------------

def cem_config(cfg: ExperimentConfig, horizon: int | None = None,
               hybrid: bool = True) -> CemConfig:
    c = cfg.cem
    return CemConfig(
        iterations=c.iterations, population=c.population,
        policy_candidates=c.policy_candidates if hybrid else 0,
        elite_count=c.elite_count, horizon=horizon or c.horizon,
        init_std=c.init_std, min_std=c.min_std, policy_noise=c.policy_noise,
        gamma=c.gamma, use_terminal_q=hybrid, terminal_penalty=c.terminal_penalty,
        a_max=cfg.plant.params.a_max, seed=cfg.seed)


def make_model(cfg: ExperimentConfig, kind: str, seed: int | None = None) -> DynamicsModel:
    m = cfg.model
    return DynamicsModel(kind, cfg.plant.params, cfg.plant.dt, m.prior_substeps,
                         hidden=(m.hidden,) * m.hidden_layers,
                         seed=cfg.seed if seed is None else seed)


def make_agent(cfg: ExperimentConfig) -> ActorCritic:
    a = cfg.agent
    return ActorCritic(a_max=cfg.plant.params.a_max, gamma=a.gamma, tau=a.tau,
                       policy_noise=a.policy_noise, noise_clip=a.noise_clip,
                       policy_delay=a.policy_delay, hidden=(a.hidden,) * a.hidden_layers,
                       lr=a.lr, seed=cfg.seed)


@dataclass
class Components:
    model: DynamicsModel | None       # learned model (None for td3)
    estimator: DynamicsModel           # model used to look past pending actions
    agent: ActorCritic | None
    planner: object
    delay: DelayConfig


def build(cfg: ExperimentConfig, model: DynamicsModel | None = None,
          agent: ActorCritic | None = None, horizon: int | None = None) -> Components:
    if cfg.method == "rt-hcp":
        model = model or make_model(cfg, "residual")
        agent = agent or make_agent(cfg)
        planner = HybridPlanner(model, agent, cem_config(cfg, horizon))
    elif cfg.method == "rt-mpc-baseline":
        model = model or make_model(cfg, "data-driven")
        agent = None
        planner = MpcPlanner(model, cem_config(cfg, horizon or cfg.cem.baseline_horizon,
                                               hybrid=False))
    else:
        agent = agent or make_agent(cfg)
        model = None
        planner = PolicyPlanner(agent)
    estimator = model if model is not None else make_model(cfg, "residual")
    delay = resolve_delay(cfg, planner)
    return Components(model, estimator, agent, planner, delay)


def resolve_delay(cfg: ExperimentConfig, planner) -> DelayConfig:
    """Turn the delay settings into a loop configuration for ``planner``."""
    d = cfg.delay
    H_p = planner.horizon
    dt_ms = cfg.plant.dt * 1000.0
    if d.mode == "fixed":
        steps = d.steps
        if H_p == 1 and steps > 1:
            log.warning("single-action planner: latency clamped from %d to 1 tick", steps)
            steps = 1
        H_e = d.H_e or max(steps, 1)
    else:
        T_i = measure_inference_time(planner, d.measure_trials, cfg.seed)["mean_ms"]
        H_e = d.H_e or min_execution_horizon(T_i, dt_ms)
        steps = H_e
    if H_e > H_p:
        raise ConfigError(f"execution horizon {H_e} exceeds planning horizon {H_p}")
    try:
        return DelayConfig(dt=cfg.plant.dt, H_p=H_p, H_e=H_e, delay_mode=d.mode,
                           delay_steps=steps, budget_check=d.budget_check)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


class UniformPlanner:
    """Random warm-up actions for the model-free method."""

    horizon = 1

    def __init__(self, a_max: float, seed=0):
        self.a_max = a_max
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def plan(self, s, warm_start=None) -> Plan:
        a = self.rng.uniform(-self.a_max, self.a_max, size=1)
        return Plan(a, math.nan, a, np.zeros(1))


# -- evaluation ----------------------------------------------------------------

def evaluate(cfg: ExperimentConfig, comp: Components, step: int,
             episodes: int | None = None) -> EvalSummary:
    """Exploration-free episodes on seeds disjoint from the training stream."""
    logs = []
    for i in range(episodes or cfg.eval_episodes):
        logs.append(run_delayed_episode(cfg.plant, comp.planner, comp.estimator, comp.delay,
                                        cfg.episode_steps, seed=(cfg.seed, EVAL_STREAM, i)))
    return EvalSummary(step, [lg.episode_return for lg in logs],
                       sum(lg.success for lg in logs),
                       [lg.swing_up_time for lg in logs],
                       [lg.rotor_deviation for lg in logs], logs)


# -- training --------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.comp = build(cfg)
        self.real = ReplayBuffer(cfg.model.real_capacity, seed=cfg.seed)
        self.imagined = ReplayBuffer(cfg.agent.im_capacity, seed=cfg.seed + 1)
        self.mix_rng = np.random.default_rng((cfg.seed, 7))
        self.model_adam = (AdamState.for_params(self.comp.model.net, lr=cfg.model.lr)
                           if self.comp.model is not None else None)
        self.steps = 0
        self.report = RunReport(cfg.method, H_e=self.comp.delay.H_e,
                                latency=self.comp.delay.latency)

    def offline_phase(self) -> None:
        cfg, comp = self.cfg, self.comp
        if comp.model is not None and len(self.real) >= cfg.model.batch_size:
            for _ in range(cfg.model.epochs_per_phase):
                model_mod.train_epoch(comp.model, self.real, cfg.model.batch_size,
                                      self.model_adam, cfg.model.max_batches)
        if comp.agent is None or len(self.real) < cfg.agent.batch_size:
            return
        a = cfg.agent
        self._agent_updates(a.updates_before_imagination)
        if cfg.method == "rt-hcp":
            agent_mod.imagine(comp.agent, comp.model, self.real, self.imagined,
                              a.imagination_rollouts, a.imagination_horizon,
                              a.exploration_std)
        self._agent_updates(a.updates_after_imagination)

    def _agent_updates(self, n: int) -> None:
        a = self.cfg.agent
        for _ in range(n):
            use_im = (len(self.imagined) >= a.batch_size
                      and self.mix_rng.random() >= a.real_fraction)
            buf = self.imagined if use_im else self.real
            self.comp.agent.update(buf.sample(a.batch_size))

    def _planner_for_step(self):
        if self.cfg.method == "td3" and self.steps < self.cfg.agent.random_steps:
            return UniformPlanner(self.cfg.plant.params.a_max)
        return self.comp.planner

    def run(self, out_dir=None) -> RunReport:
        cfg, comp = self.cfg, self.comp
        episode = 0
        stop = False
        try:
            while self.steps < cfg.training_budget and not stop:
                plant_rng, plan_ss, explore_rng = episode_rngs((cfg.seed, TRAIN_STREAM, episode))
                planner = self._planner_for_step()
                planner.reseed(plan_ss)
                noise = cfg.agent.exploration_std if planner is comp.planner else 0.0
                loop = DelayedLoop(cfg.plant, planner, comp.estimator, comp.delay,
                                   plant_rng, noise, explore_rng)
                loop.reset(initial_state(plant_rng))
                while (not loop.done and loop.t < cfg.episode_steps
                       and self.steps < cfg.training_budget):
                    rec, s_next = loop.step()
                    self.real.push(rec.state, rec.action, rec.reward, s_next, rec.done)
                    self.steps += 1
                    if self.steps % cfg.offline_period == 0:
                        self.offline_phase()
                    if self.steps % cfg.eval_every == 0:
                        stop = self._evaluate()
                        if stop:
                            break
                    if planner is not comp.planner and self.steps >= cfg.agent.random_steps:
                        break  # warm-up over: restart with the real planner
                episode += 1
        except DivergenceError as exc:
            self.report.diverged = str(exc)
            self.report.steps = self.steps
            if out_dir is not None:
                self.write_outputs(out_dir)
            raise TrainingDiverged(f"training diverged at step {self.steps}: {exc}",
                                   self.report) from exc
        self.report.steps = self.steps
        last_eval = self.report.curve[-1][0] if self.report.curve else 0
        if self.steps > last_eval:
            self._evaluate()
        if out_dir is not None:
            self.write_outputs(out_dir)
        return self.report

    def _evaluate(self) -> bool:
        summary = evaluate(self.cfg, self.comp, self.steps)
        self.report.curve.append((self.steps, summary.mean_return, summary.ci_half_width,
                                  summary.successes))
        self.report.final = summary
        log.info("step %d: return %.1f +- %.1f, %d/%d swing-ups", self.steps,
                 summary.mean_return, summary.ci_half_width, summary.successes,
                 len(summary.returns))
        target = self.cfg.stop_after_successes
        return bool(target) and summary.successes >= target

    def write_outputs(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "episodes").mkdir(parents=True, exist_ok=True)
        (out / "ckpt").mkdir(parents=True, exist_ok=True)
        rep = self.report
        write_curve(out / "learning_curve.csv", rep.curve)
        rep.paths["learning_curve"] = str(out / "learning_curve.csv")
        if rep.final is not None:
            for i, lg in enumerate(rep.final.logs):
                lg.to_csv(out / "episodes" / f"eval_{i:02d}.csv")
            rep.paths["episodes"] = str(out / "episodes")
        save_checkpoints(self.comp, out / "ckpt", self.cfg)
        self.real.save(out / "ckpt" / "replay.npz")
        rep.paths["ckpt"] = str(out / "ckpt")
        if self.cfg.delay.mode == "fixed":
            rep.inference_ms = {"mean_ms": rep.latency * self.cfg.plant.dt * 1000.0,
                                "std_ms": 0.0}
        elif rep.final is not None:
            # decision ticks carry the measured plan time, other ticks zero
            ms = [r.inference_ms for lg in rep.final.logs for r in lg.records
                  if r.inference_ms > 0]
            if ms:
                rep.inference_ms = {"mean_ms": float(np.mean(ms)), "std_ms": float(np.std(ms))}
        write_summary(out / "summary.csv", rep)
        rep.paths["summary"] = str(out / "summary.csv")


def train(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    return Trainer(cfg).run(out_dir)


# -- files -----------------------------------------------------------------------

def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_return", "ci95_half_width", "successes"])
        for step, mean, ci, succ in curve:
            w.writerow([step, f"{mean:.10g}", "" if math.isnan(ci) else f"{ci:.10g}", succ])


def write_summary(path, rep: RunReport) -> None:
    rows = [
        ("method", rep.method), ("steps", rep.steps), ("H_e", rep.H_e),
        ("latency_ticks", rep.latency),
        ("final_successes", rep.final_successes),
        ("final_evaluations", len(rep.final.returns) if rep.final else 0),
        ("final_mean_return", f"{rep.final.mean_return:.10g}" if rep.final else ""),
        ("swing_up_time_mean_s", f"{rep.swing_up_mean:.6g}"),
        ("swing_up_time_std_s", f"{rep.swing_up_std:.6g}"),
        ("rotor_deviation_mean_rad", f"{rep.rotor_deviation_mean:.6g}"),
        ("rotor_deviation_std_rad", f"{rep.rotor_deviation_std:.6g}"),
        ("inference_mean_ms", f"{rep.inference_ms.get('mean_ms', math.nan):.6g}"),
        ("inference_std_ms", f"{rep.inference_ms.get('std_ms', math.nan):.6g}"),
        ("diverged", rep.diverged),
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerows(rows)


def save_checkpoints(comp: Components, ckpt_dir, cfg: ExperimentConfig) -> None:
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    if comp.model is not None:
        with open(ckpt / "model.txt", "w") as fh:
            model_mod.write_model(comp.model, fh)
    if comp.agent is not None:
        with open(ckpt / "agent.txt", "w") as fh:
            agent_mod.write_agent(comp.agent, fh)


def load_checkpoints(ckpt_dir) -> tuple[DynamicsModel | None, ActorCritic | None]:
    ckpt = Path(ckpt_dir)
    model = agent = None
    if (ckpt / "model.txt").exists():
        with open(ckpt / "model.txt") as fh:
            model = model_mod.read_model(fh)
    if (ckpt / "agent.txt").exists():
        with open(ckpt / "agent.txt") as fh:
            agent = agent_mod.read_agent(fh)
    if model is None and agent is None:
        raise FileNotFoundError(f"no checkpoints under {ckpt}")
    return model, agent


__all__ = ["RunReport", "EvalSummary", "Trainer", "TrainingDiverged", "build", "evaluate",
           "train", "load_checkpoints", "save_checkpoints", "confidence_half_width",
           "make_model", "make_agent", "cem_config", "resolve_delay"]
