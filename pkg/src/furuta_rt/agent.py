"""TD3 actor-critic on the base pendulum state, plus model-based imagination."""

from __future__ import annotations

from typing import IO

import numpy as np

from . import neural
from .model import Batch, DynamicsModel, InsufficientDataError, ReplayBuffer
from .neural import AdamState, DivergenceError
from .pendulum import A_MAX, State, reward_array, terminal_array

VEL_SCALE = 10.0
N_STATE_FEATURES = 6
ROLES = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")


def state_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
    return np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0]), np.cos(x[:, 1]),
                            np.sin(x[:, 1]), x[:, 2] / VEL_SCALE, x[:, 3] / VEL_SCALE])


class ActorCritic:
    """Deterministic actor, twin critics and their Polyak-averaged targets."""

    def __init__(self, a_max: float = A_MAX, gamma: float = 0.99, tau: float = 0.005,
                 policy_noise: float | None = None, noise_clip: float | None = None,
                 policy_delay: int = 2, hidden=(64, 64), lr: float = 1e-3, seed: int = 0):
        if not 0 < gamma < 1 or not 0 < tau <= 1:
            raise ValueError("need 0 < gamma < 1 and 0 < tau <= 1")
        self.a_max = a_max
        self.gamma = gamma
        self.tau = tau
        self.policy_noise = 0.2 * a_max if policy_noise is None else policy_noise
        self.noise_clip = 0.5 * a_max if noise_clip is None else noise_clip
        self.policy_delay = int(policy_delay)
        self.lr = lr
        self.rng = np.random.default_rng(seed)
        self.actor = neural.init([N_STATE_FEATURES, *hidden, 1], seed, "tanh", a_max)
        self.critic1 = neural.init([N_STATE_FEATURES + 1, *hidden, 1], seed + 1)
        self.critic2 = neural.init([N_STATE_FEATURES + 1, *hidden, 1], seed + 2)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.adam = {name: AdamState.for_params(getattr(self, name), lr=lr)
                     for name in ("actor", "critic1", "critic2")}
        self.updates = 0

    # -- inference ----------------------------------------------------------

    def act_batch(self, x: np.ndarray, exploration_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
        a = neural.forward(self.actor, state_features(x))[:, 0]
        if exploration_std > 0:
            a = a + (rng or self.rng).normal(0.0, exploration_std, size=a.shape)
        return np.clip(a, -self.a_max, self.a_max)

    def act(self, s: State, exploration_std: float = 0.0,
            rng: np.random.Generator | None = None) -> float:
        return float(self.act_batch(s.as_array(), exploration_std, rng)[0])

    def _critic_in(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.column_stack([state_features(x), np.asarray(a).reshape(-1) / self.a_max])

    def q_pair(self, x: np.ndarray, a: np.ndarray, target: bool = False):
        inp = self._critic_in(x, a)
        c1, c2 = ((self.critic1_target, self.critic2_target) if target
                  else (self.critic1, self.critic2))
        return neural.forward(c1, inp)[:, 0], neural.forward(c2, inp)[:, 0]

    def q_batch(self, x: np.ndarray, a: np.ndarray | None = None) -> np.ndarray:
        if a is None:
            a = self.act_batch(x)
        return np.minimum(*self.q_pair(x, a))

    def q_value(self, s: State, a: float | None = None) -> float:
        x = s.as_array()
        return float(self.q_batch(x, None if a is None else np.array([a]))[0])

    # -- learning -----------------------------------------------------------

    def update(self, batch: Batch) -> tuple[float, float | None]:
        """One TD3 step. The actor and targets move every ``policy_delay`` calls."""
        n = batch.s.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        noise = np.clip(self.rng.normal(0.0, self.policy_noise, size=n),
                        -self.noise_clip, self.noise_clip)
        a_next = np.clip(neural.forward(self.actor_target, state_features(batch.s_next))[:, 0]
                         + noise, -self.a_max, self.a_max)
        q1_t, q2_t = self.q_pair(batch.s_next, a_next, target=True)
        y = batch.r + self.gamma * (1.0 - batch.done) * np.minimum(q1_t, q2_t)

        inp = self._critic_in(batch.s, batch.a)
        critic_loss = 0.0
        for name in ("critic1", "critic2"):
            net = getattr(self, name)
            err = neural.forward(net, inp)[:, 0] - y
            critic_loss += float(np.mean(err**2))
            grads, _ = neural.backward(net, inp, (2.0 * err / n)[:, None])
            neural.adam_step(net, grads, self.adam[name])
        if not np.isfinite(critic_loss):
            raise DivergenceError("critic loss is not finite")

        self.updates += 1
        actor_loss = None
        if self.updates % self.policy_delay == 0:
            feats = state_features(batch.s)
            a_pi = neural.forward(self.actor, feats)[:, 0]
            c_in = np.column_stack([feats, a_pi / self.a_max])
            q = neural.forward(self.critic1, c_in)[:, 0]
            actor_loss = -float(np.mean(q))
            _, dq_din = neural.backward(self.critic1, c_in, np.full((n, 1), -1.0 / n))
            dq_da = dq_din[:, -1:] / self.a_max
            grads, _ = neural.backward(self.actor, feats, dq_da)
            neural.adam_step(self.actor, grads, self.adam["actor"])
            self.soft_update(self.tau)
        return critic_loss, actor_loss

    def soft_update(self, tau: float) -> None:
        neural.polyak_(self.actor_target, self.actor, tau)
        neural.polyak_(self.critic1_target, self.critic1, tau)
        neural.polyak_(self.critic2_target, self.critic2, tau)


def imagine(agent: ActorCritic, model: DynamicsModel, buffer_real: ReplayBuffer,
            buffer_im: ReplayBuffer, n_rollouts: int, horizon: int,
            exploration_std: float) -> int:
    """Roll the model under the (noisy) actor from real start states into ``buffer_im``.

    Rollouts stop at terminal or non-finite predictions. Returns the number of
    transitions pushed.
    """
    if len(buffer_real) == 0:
        raise InsufficientDataError("imagination needs a non-empty real buffer")
    x = buffer_real.sample(n_rollouts).s.copy()
    alive = ~terminal_array(x)
    pushed = 0
    for _ in range(horizon):
        if not alive.any():
            break
        xs = x[alive]
        a = agent.act_batch(xs, exploration_std)
        with np.errstate(all="ignore"):
            nxt = model.predict_batch(xs, a)
        finite = np.all(np.isfinite(nxt), axis=1)
        r = reward_array(xs, a, agent.a_max)
        done = terminal_array(nxt)
        for i in np.flatnonzero(finite):
            buffer_im.push(xs[i], a[i], r[i], nxt[i], done[i])
            pushed += 1
        rows = np.flatnonzero(alive)
        x[rows[finite]] = nxt[finite]
        alive[rows[~finite | done]] = False
    return pushed


# -- checkpoints ----------------------------------------------------------------

def write_agent(agent: ActorCritic, fh: IO[str]) -> None:
    fh.write(f"agent a_max={agent.a_max!r} gamma={agent.gamma!r} tau={agent.tau!r} "
             f"policy_noise={agent.policy_noise!r} noise_clip={agent.noise_clip!r} "
             f"policy_delay={agent.policy_delay} lr={agent.lr!r} updates={agent.updates}\n")
    for role in ROLES:
        fh.write(f"role {role}\n")
        neural.write_params(getattr(agent, role), fh)


def read_agent(fh: IO[str]) -> ActorCritic:
    head = fh.readline().split()
    if not head or head[0] != "agent":
        raise ValueError("not an agent checkpoint")
    kv = dict(item.split("=", 1) for item in head[1:])
    agent = ActorCritic(a_max=float(kv["a_max"]), gamma=float(kv["gamma"]),
                        tau=float(kv["tau"]), policy_noise=float(kv["policy_noise"]),
                        noise_clip=float(kv["noise_clip"]),
                        policy_delay=int(kv["policy_delay"]), lr=float(kv["lr"]))
    agent.updates = int(kv["updates"])
    for _ in ROLES:
        tag = fh.readline().split()
        if len(tag) != 2 or tag[0] != "role" or tag[1] not in ROLES:
            raise ValueError(f"bad role tag {tag}")
        setattr(agent, tag[1], neural.read_params(fh))
    agent.adam = {name: AdamState.for_params(getattr(agent, name), lr=agent.lr)
                  for name in ("actor", "critic1", "critic2")}
    return agent
