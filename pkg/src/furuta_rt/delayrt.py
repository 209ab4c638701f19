"""Control under inference delay: d-step MPC fed through an action buffer.

Time is simulated. A plan requested at decision tick ``k`` becomes available
``d`` ticks later (``d`` = ``delay_steps`` in fixed mode, ``H_e`` in measured
mode). Meanwhile the plant keeps consuming the ``d`` actions already queued,
so the planner plans from the model's estimate of the state at ``k + d``.
The first ``H_e`` actions of each plan are committed and the next decision is
issued ``H_e`` ticks after the previous one. With ``d <= H_e`` the buffer is
never empty when the plant asks for an action.
"""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .model import DynamicsModel
from .pendulum import A_MAX, PlantConfig, State, plant_step, wrap_angle

UPRIGHT_TOL = 0.2
UPRIGHT_HOLD_S = 1.0


class BudgetViolation(RuntimeError):
    """Inference took longer than the execution horizon can cover."""


class ExecutionGap(RuntimeError):
    """The plant asked for an action while the buffer was empty."""


class Planner(Protocol):
    horizon: int

    def reseed(self, seed) -> None: ...

    def plan(self, s: State, warm_start=None): ...


def min_execution_horizon(T_i: float, dt: float) -> int:
    """Smallest number of actions that covers an inference time ``T_i``.

    ``T_i`` and ``dt`` share a unit. The result is ``int(T_i / dt) + 1``, so an
    exact multiple of ``dt`` still gets one extra action.
    """
    if T_i < 0 or not dt > 0:
        raise ValueError("need T_i >= 0 and dt > 0")
    return int(T_i / dt) + 1


class ActionSequence(tuple):
    """Immutable run of voltages, each within +-a_max."""

    def __new__(cls, actions=(), a_max: float = A_MAX):
        vals = tuple(float(a) for a in actions)
        for a in vals:
            if not math.isfinite(a) or abs(a) > a_max * (1 + 1e-12):
                raise ValueError(f"action {a} outside +-{a_max}")
        return super().__new__(cls, vals)


@dataclass(frozen=True)
class AugmentedState:
    current: State
    missed: tuple[State, ...]
    pending: ActionSequence

    @property
    def d(self) -> int:
        return len(self.pending)

    def flatten(self) -> np.ndarray:
        """Missed states oldest-first, then the current state, then pending actions."""
        states = [s.as_array() for s in self.missed] + [self.current.as_array()]
        return np.concatenate(states + [np.asarray(self.pending, dtype=np.float64)])


def make_augmented(history: Sequence[State], pending: Sequence[float]) -> AugmentedState:
    """Build the delay-MDP observation from the last ``d`` states (oldest first).

    ``d = 0`` (no pending actions) is accepted with a single-state history.
    """
    pending = ActionSequence(pending)
    d = len(pending)
    if len(history) != max(d, 1):
        raise ValueError(f"expected {max(d, 1)} states for d={d}, got {len(history)}")
    return AugmentedState(history[-1], tuple(history[:-1]), pending)


def estimate_decision_state(aug: AugmentedState, model: DynamicsModel | None) -> State:
    """Predict the state at which the next plan will start executing."""
    if aug.d == 0:
        return aug.current
    if model is None:
        raise ValueError("a dynamics model is needed to look past pending actions")
    return model.rollout(aug.current, aug.pending)[-1]


@dataclass(frozen=True)
class DelayConfig:
    dt: float = 0.02
    H_p: int = 5
    H_e: int = 2
    delay_mode: str = "fixed"
    delay_steps: int = 2
    budget_check: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not 1 <= self.H_e <= self.H_p:
            raise ValueError(f"need 1 <= H_e <= H_p, got H_e={self.H_e}, H_p={self.H_p}")
        if self.delay_mode not in ("fixed", "measured"):
            raise ValueError(f"unknown delay mode {self.delay_mode!r}")
        if self.delay_steps < 0:
            raise ValueError("delay_steps must be >= 0")

    @property
    def latency(self) -> int:
        """Ticks between issuing a plan request and the plan being usable."""
        return self.delay_steps if self.delay_mode == "fixed" else self.H_e


@dataclass
class StepRecord:
    t: int
    state: State
    action: float
    reward: float
    done: bool
    buffer_depth: int
    inference_ms: float


@dataclass
class DelayedEpisodeLog:
    dt: float
    records: list[StepRecord] = field(default_factory=list)
    decisions: list[tuple[int, AugmentedState, np.ndarray]] = field(default_factory=list)
    budget_violations: list[tuple[int, float]] = field(default_factory=list)
    final_state: State | None = None

    @property
    def episode_return(self) -> float:
        return float(sum(r.reward for r in self.records))

    @property
    def actions(self) -> list[float]:
        return [r.action for r in self.records]

    def states(self) -> np.ndarray:
        return np.array([r.state.as_tuple() for r in self.records]).reshape(-1, 4)

    def _upright_index(self) -> int | None:
        hold = int(round(UPRIGHT_HOLD_S / self.dt))
        x = self.states()
        if len(x) < hold:
            return None
        up = np.abs(wrap_angle(x[:, 1] - np.pi)) < UPRIGHT_TOL
        run = 0
        for k, flag in enumerate(up):
            run = run + 1 if flag else 0
            if run >= hold:
                return k - hold + 1
        return None

    @property
    def swing_up_time(self) -> float:
        k = self._upright_index()
        return math.inf if k is None else k * self.dt

    @property
    def success(self) -> bool:
        return self._upright_index() is not None

    @property
    def rotor_deviation(self) -> float:
        k = self._upright_index()
        if k is None:
            return math.nan
        return float(np.max(np.abs(self.states()[k:, 0])))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "alpha", "beta", "alpha_dot", "beta_dot", "action_V",
                        "reward", "buffer_depth", "inference_ms"])
            for r in self.records:
                w.writerow([f"{r.t * self.dt * 1000:.6g}",
                            *(f"{v:.17g}" for v in r.state.as_tuple()),
                            f"{r.action:.17g}", f"{r.reward:.17g}", r.buffer_depth,
                            f"{r.inference_ms:.6g}"])


def initial_state(rng: np.random.Generator) -> State:
    """Hanging at rest with a small random pendulum offset."""
    return State(0.0, float(rng.uniform(-0.05, 0.05)), 0.0, 0.0)


def episode_rngs(seed: int) -> tuple[np.random.Generator, np.random.SeedSequence,
                                     np.random.Generator]:
    """Independent streams for the plant, the planner and exploration noise."""
    plant_ss, plan_ss, expl_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(plant_ss), plan_ss, np.random.default_rng(expl_ss)


class DelayedLoop:
    """Tick-by-tick driver of the buffered control loop.

    The trainer steps it directly so offline phases can run between ticks;
    ``run_delayed_episode`` wraps it for whole episodes.
    """

    def __init__(self, plant: PlantConfig, planner: Planner, model: DynamicsModel | None,
                 delay: DelayConfig, plant_rng: np.random.Generator,
                 exploration_std: float = 0.0, explore_rng: np.random.Generator | None = None):
        if delay.budget_check and delay.delay_mode == "fixed" and delay.latency > delay.H_e:
            raise BudgetViolation(
                f"delay of {delay.latency} ticks cannot be covered by H_e={delay.H_e}")
        self.plant, self.planner, self.model, self.delay = plant, planner, model, delay
        self.plant_rng = plant_rng
        self.exploration_std = exploration_std
        self.explore_rng = explore_rng or np.random.default_rng(0)
        self.a_max = plant.params.a_max

    def reset(self, start: State | AugmentedState, log: DelayedEpisodeLog | None = None):
        """Start at a plain state (zero-filled buffer) or resume from an augmented state."""
        d = self.delay.latency
        if isinstance(start, AugmentedState):
            if start.d != d:
                raise ValueError(f"augmented state has d={start.d}, loop latency is {d}")
            self.state = start.current
            self.history = deque(list(start.missed) + [start.current], maxlen=max(d, 1))
            self.buffer = deque(start.pending)
        else:
            self.state = start
            self.history = deque([start], maxlen=max(d, 1))
            self.buffer = deque([0.0] * d)
        self.t = 0
        self.next_decision = 0
        # committed plans still in flight, as (arrival tick, actions)
        self.incoming: deque[tuple[int, list[float]]] = deque()
        self.warm: np.ndarray | None = None
        self.log = log or DelayedEpisodeLog(self.plant.dt)
        self.done = False

    def _decide(self) -> float:
        d, H_e = self.delay.latency, self.delay.H_e
        # queued actions first, then those committed but not yet arrived
        pending = (list(self.buffer) + [a for _, acts in self.incoming for a in acts])[:d]
        if len(pending) < d:
            raise ExecutionGap(f"only {len(pending)} of {d} pending actions known at tick {self.t}")
        hist = list(self.history)[-max(d, 1):]
        if len(hist) < max(d, 1):
            # not enough real history yet: repeat the oldest known state
            hist = [hist[0]] * (max(d, 1) - len(hist)) + hist
        aug = make_augmented(hist, pending)
        t0 = time.perf_counter()
        s_hat = estimate_decision_state(aug, self.model)
        plan = self.planner.plan(s_hat, self.warm)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        actions = np.asarray(plan.actions, dtype=np.float64)
        if len(actions) < H_e:
            raise ValueError(f"plan of length {len(actions)} shorter than H_e={H_e}")
        commit = actions[:H_e].copy()
        if self.exploration_std > 0:
            commit += self.explore_rng.normal(0.0, self.exploration_std, size=H_e)
        commit = np.clip(commit, -self.a_max, self.a_max)
        self.warm = np.concatenate([actions[H_e:], np.zeros(H_e)])[:len(actions)]
        self.incoming.append((self.t + d, list(commit)))
        self.next_decision = self.t + H_e
        self.log.decisions.append((self.t, aug, commit))

        if self.delay.delay_mode == "measured":
            if elapsed_ms > H_e * self.delay.dt * 1000.0:
                self.log.budget_violations.append((self.t, elapsed_ms))
                if self.delay.budget_check:
                    raise BudgetViolation(
                        f"tick {self.t}: inference {elapsed_ms:.1f} ms exceeds "
                        f"H_e*dt = {H_e * self.delay.dt * 1000:.1f} ms")
            return elapsed_ms
        return d * self.delay.dt * 1000.0

    def _receive(self) -> None:
        while self.incoming and self.incoming[0][0] == self.t:
            self.buffer.extend(self.incoming.popleft()[1])

    def step(self) -> tuple[StepRecord, State]:
        if self.done:
            raise RuntimeError("episode already finished")
        inference_ms = 0.0
        # a plan due now joins the buffer before the next decision reads it;
        # with zero latency the fresh plan is due on the same tick
        self._receive()
        if self.t == self.next_decision:
            inference_ms = self._decide()
            self._receive()
        if not self.buffer:
            raise ExecutionGap(f"no action available at tick {self.t}")
        a = float(self.buffer.popleft())
        s = self.state
        s_next, r, done = plant_step(s, a, self.plant, self.plant_rng)
        rec = StepRecord(self.t, s, a, r, done, len(self.buffer), inference_ms)
        self.log.records.append(rec)
        self.history.append(s_next)
        self.state = s_next
        self.t += 1
        self.done = done
        return rec, s_next


def run_delayed_episode(plant: PlantConfig, planner: Planner, model: DynamicsModel | None,
                        delay: DelayConfig, max_steps: int, seed: int,
                        start: State | AugmentedState | None = None,
                        exploration_std: float = 0.0) -> DelayedEpisodeLog:
    plant_rng, plan_ss, explore_rng = episode_rngs(seed)
    planner.reseed(plan_ss)
    if start is None:
        start = initial_state(plant_rng)
    loop = DelayedLoop(plant, planner, model, delay, plant_rng, exploration_std, explore_rng)
    loop.reset(start)
    while loop.t < max_steps and not loop.done:
        loop.step()
    loop.log.final_state = loop.state
    return loop.log


def run_undelayed_episode(plant: PlantConfig, planner: Planner, max_steps: int,
                          seed: int) -> DelayedEpisodeLog:
    """Textbook receding-horizon loop: observe, plan, apply the first action."""
    plant_rng, plan_ss, _ = episode_rngs(seed)
    planner.reseed(plan_ss)
    s = initial_state(plant_rng)
    log = DelayedEpisodeLog(plant.dt)
    warm = None
    for t in range(max_steps):
        plan = planner.plan(s, warm)
        acts = np.asarray(plan.actions, dtype=np.float64)
        warm = np.concatenate([acts[1:], [0.0]])
        a = float(np.clip(acts[0], -plant.params.a_max, plant.params.a_max))
        s_next, r, done = plant_step(s, a, plant, plant_rng)
        log.records.append(StepRecord(t, s, a, r, done, 0, 0.0))
        s = s_next
        if done:
            break
    log.final_state = s
    return log


def measure_inference_time(planner: Planner, n_trials: int, seed: int = 0,
                           warmup: int = 1) -> dict[str, float]:
    """Wall-clock statistics (ms) of full plan calls from random states."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    planner.reseed(seed)

    def random_state():
        return State(float(rng.uniform(-1, 1)), float(rng.uniform(-np.pi, np.pi)),
                     float(rng.uniform(-3, 3)), float(rng.uniform(-6, 6)))

    for _ in range(warmup):
        planner.plan(random_state())
    times = []
    for _ in range(n_trials):
        s = random_state()
        t0 = time.perf_counter()
        planner.plan(s)
        times.append((time.perf_counter() - t0) * 1000.0)
    return {"mean_ms": float(np.mean(times)), "std_ms": float(np.std(times)),
            "n": n_trials}
