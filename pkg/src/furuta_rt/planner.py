"""CEM trajectory optimisation over learned dynamics.

The model-based score of an action sequence is the discounted sum of known
rewards along a model rollout, optionally closed by a discounted terminal
value ``min(Q1, Q2)(s_H, pi(s_H))``. Policy-generated candidates can be mixed
into every CEM population.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agent import ActorCritic
from .model import DynamicsModel
from .pendulum import A_MAX, State, reward_array, terminal_array

ScoreFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CemConfig:
    iterations: int = 3
    population: int = 500
    policy_candidates: int = 50
    elite_count: int = 50
    horizon: int = 5
    init_std: float = 0.5 * A_MAX
    min_std: float = 0.05 * A_MAX
    policy_noise: float = 0.1 * A_MAX
    gamma: float = 0.99
    use_terminal_q: bool = True
    terminal_penalty: float = 1.0
    a_max: float = A_MAX
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.horizon < 1:
            raise ValueError("iterations and horizon must be >= 1")
        if not 1 <= self.elite_count <= self.population:
            raise ValueError("need 1 <= elite_count <= population")
        if not 0 <= self.policy_candidates <= self.population:
            raise ValueError("need 0 <= policy_candidates <= population")
        if not self.min_std > 0 or self.init_std < self.min_std:
            raise ValueError("need 0 < min_std <= init_std")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class Plan:
    actions: np.ndarray
    predicted_return: float
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def evaluate_batch(model: DynamicsModel, s0, actions: np.ndarray, gamma: float,
                   agent: ActorCritic | None = None, use_terminal_q: bool = False,
                   terminal_penalty: float = 1.0, a_max: float = A_MAX) -> np.ndarray:
    """Score each row of ``actions`` (n, H) from the common start state ``s0``.

    A rollout that reaches a terminal state stops accruing reward and pays
    ``terminal_penalty`` once; a non-finite rollout scores ``-inf``.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    n, horizon = actions.shape
    x0 = s0.as_array() if isinstance(s0, State) else np.asarray(s0, dtype=np.float64)
    x = np.broadcast_to(x0, (n, 4)).copy()
    total = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    diverged = np.zeros(n, dtype=bool)
    disc = 1.0
    with np.errstate(all="ignore"):
        for t in range(horizon):
            a = actions[:, t]
            total = np.where(alive, total + disc * reward_array(x, a, a_max), total)
            nxt = model.predict_batch(x, a)
            bad = ~np.all(np.isfinite(nxt), axis=1)
            diverged |= alive & bad
            term = alive & ~bad & terminal_array(nxt)
            total = np.where(term, total - terminal_penalty, total)
            alive &= ~(bad | term)
            x = np.where(alive[:, None], nxt, x)
            disc *= gamma
        if use_terminal_q:
            if agent is None:
                raise ValueError("terminal value needs an agent")
            total = np.where(alive, total + disc * agent.q_batch(x), total)
    total[diverged] = -np.inf
    return total


def evaluate_sequence(model: DynamicsModel, s0: State, actions, gamma: float,
                      agent: ActorCritic | None = None, use_terminal_q: bool = False,
                      terminal_penalty: float = 1.0) -> float:
    return float(evaluate_batch(model, s0, np.asarray(actions, dtype=np.float64)[None],
                                gamma, agent, use_terminal_q, terminal_penalty)[0])


def cem_optimize(score_fn: ScoreFn, cfg: CemConfig, rng: np.random.Generator,
                 warm_start: np.ndarray | None = None,
                 candidate_fn: Callable[[np.random.Generator], np.ndarray] | None = None
                 ) -> Plan:
    """Maximise ``score_fn`` over (horizon,) action sequences with diagonal-Gaussian CEM.

    The warm start is evaluated in the first population. If the final elite
    mean scores below the best sequence ever evaluated, that sequence is
    returned instead, so the plan never scores below the warm start.
    """
    H, lim = cfg.horizon, cfg.a_max
    mean = np.zeros(H) if warm_start is None else np.clip(
        np.asarray(warm_start, dtype=np.float64).reshape(H), -lim, lim)
    std = np.full(H, cfg.init_std)
    best_seq, best_score = mean.copy(), -np.inf
    for it in range(cfg.iterations):
        cands = candidate_fn(rng) if candidate_fn is not None else np.empty((0, H))
        n_rand = cfg.population - len(cands)
        samples = np.clip(mean + std * rng.standard_normal((n_rand, H)), -lim, lim)
        if it == 0 and n_rand:
            samples[0] = mean
        pop = np.vstack([cands, samples])
        scores = score_fn(pop)
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best_score, best_seq = float(scores[order[0]]), pop[order[0]].copy()
        elites = pop[order[:cfg.elite_count]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cfg.min_std)
    final = np.clip(mean, -lim, lim)
    final_score = float(score_fn(final[None])[0])
    if final_score >= best_score:
        return Plan(final, final_score, mean, std)
    return Plan(best_seq, best_score, mean, std)


def policy_candidates(model: DynamicsModel, agent: ActorCritic, s0: State,
                      cfg: CemConfig, rng: np.random.Generator,
                      n: int | None = None) -> np.ndarray:
    """``n`` action sequences (default ``cfg.policy_candidates``) obtained by
    rolling the model under the noisy actor."""
    n = cfg.policy_candidates if n is None else n
    x = np.broadcast_to(s0.as_array(), (n, 4)).copy()
    out = np.empty((n, cfg.horizon))
    with np.errstate(all="ignore"):
        for t in range(cfg.horizon):
            a = agent.act_batch(x, cfg.policy_noise, rng)
            out[:, t] = a
            nxt = model.predict_batch(x, a)
            x = np.where(np.all(np.isfinite(nxt), axis=1)[:, None], nxt, x)
    return out


def cem_plan(model: DynamicsModel, s0: State, cfg: CemConfig,
             agent: ActorCritic | None = None, warm_start_mean=None,
             rng: np.random.Generator | None = None) -> Plan:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    use_q = cfg.use_terminal_q and agent is not None

    def score(pop):
        return evaluate_batch(model, s0, pop, cfg.gamma, agent, use_q,
                              cfg.terminal_penalty, cfg.a_max)

    if agent is None or cfg.policy_candidates == 0:
        return cem_optimize(score, cfg, rng, warm_start_mean)
    # candidates do not depend on the CEM distribution, so every iteration's
    # share is rolled out in one batch up front
    pool = policy_candidates(model, agent, s0, cfg, rng,
                             cfg.iterations * cfg.policy_candidates)
    shares = iter(np.split(pool, cfg.iterations))
    return cem_optimize(score, cfg, rng, warm_start_mean, lambda _rng: next(shares))


def pure_mpc_plan(model: DynamicsModel, s0: State, cfg: CemConfig, warm_start_mean=None,
                  rng: np.random.Generator | None = None) -> Plan:
    cfg = dataclasses.replace(cfg, policy_candidates=0, use_terminal_q=False)
    return cem_plan(model, s0, cfg, None, warm_start_mean, rng)


# -- planner objects used by the control loop ------------------------------------

class HybridPlanner:
    """CEM with policy candidates and a terminal critic value."""

    def __init__(self, model: DynamicsModel, agent: ActorCritic | None, cfg: CemConfig):
        self.model, self.agent, self.cfg = model, agent, cfg
        self.rng = np.random.default_rng(cfg.seed)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def plan(self, s: State, warm_start=None) -> Plan:
        return cem_plan(self.model, s, self.cfg, self.agent, warm_start, self.rng)


class MpcPlanner(HybridPlanner):
    """Plain CEM-MPC: no critic, no policy candidates."""

    def __init__(self, model: DynamicsModel, cfg: CemConfig):
        super().__init__(model, None, dataclasses.replace(
            cfg, policy_candidates=0, use_terminal_q=False))

    def plan(self, s: State, warm_start=None) -> Plan:
        return pure_mpc_plan(self.model, s, self.cfg, warm_start, self.rng)


class PolicyPlanner:
    """One-step "plan" straight from the actor (the model-free method)."""

    horizon = 1

    def __init__(self, agent: ActorCritic):
        self.agent = agent

    def reseed(self, seed: int) -> None:
        pass

    def plan(self, s: State, warm_start=None) -> Plan:
        a = np.array([self.agent.act(s)])
        return Plan(a, float("nan"), a, np.zeros(1))
