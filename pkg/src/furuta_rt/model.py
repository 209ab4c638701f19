"""Learned one-step dynamics models and the replay buffer they train from.

Two model kinds share one class:

``residual``
    next = step_prior(s, a) + net(features(s, a)) * target_scale
``data-driven``
    next = s + net(features(s, a)) * target_scale

The network output layer starts at zero, so a fresh residual model is exactly
the physics prior and a fresh data-driven model predicts "no change".
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import IO, NamedTuple, Sequence

import numpy as np

from . import neural
from .neural import AdamState, DivergenceError
from .pendulum import PhysicalParams, State, prior_step_batch

KINDS = ("residual", "data-driven")
N_FEATURES = 7
STD_FLOOR = 0.05
_buffer_ids = itertools.count()


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: State
    a: float
    r: float
    s_next: State
    done: bool

    def __post_init__(self):
        if not -1.0 <= self.r <= 1.0:
            raise ValueError(f"reward {self.r} outside [-1, 1]")


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.uid = next(_buffer_ids)
        self.rng = np.random.default_rng(seed)
        self.s = np.zeros((capacity, 4))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, 4))
        self.done = np.zeros(capacity, dtype=bool)
        self.total = 0

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    def push(self, s, a, r, s_next, done) -> None:
        i = self.total % self.capacity
        self.s[i] = np.asarray(s.as_array() if isinstance(s, State) else s)
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = np.asarray(s_next.as_array() if isinstance(s_next, State) else s_next)
        self.done[i] = done
        self.total += 1

    def push_transition(self, t: Transition) -> None:
        self.push(t.s, t.a, t.r, t.s_next, t.done)

    def push_batch(self, s, a, r, s_next, done) -> None:
        for row in zip(s, a, r, s_next, done):
            self.push(*row)

    def _take(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def sample(self, batch_size: int) -> Batch:
        if len(self) == 0:
            raise InsufficientDataError("empty replay buffer")
        return self._take(self.rng.integers(0, len(self), size=batch_size))

    def recent(self, k: int) -> Batch:
        """The ``k`` most recently inserted transitions, oldest first."""
        k = min(k, len(self))
        idx = (np.arange(self.total - k, self.total)) % self.capacity
        return self._take(idx)

    def all(self) -> Batch:
        return self.recent(len(self))

    def save(self, path) -> None:
        b = self.all()
        np.savez(path, s=b.s, a=b.a, r=b.r, s_next=b.s_next, done=b.done,
                 capacity=self.capacity)

    @classmethod
    def load(cls, path, seed: int = 0) -> "ReplayBuffer":
        with np.load(path) as z:
            buf = cls(int(z["capacity"]), seed)
            buf.push_batch(z["s"], z["a"], z["r"], z["s_next"], z["done"])
        return buf


@dataclass
class Normalizer:
    """Running per-feature mean/std (parallel-variance update)."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n), 0)

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), STD_FLOOR) if self.count else np.sqrt(self.var)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if n == 0:
            return
        m_b, v_b = x.mean(axis=0), x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = m_b, v_b, n
            return
        tot = self.count + n
        delta = m_b - self.mean
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + v_b * n
                    + delta**2 * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def raw_features(x: np.ndarray, a) -> np.ndarray:
    """``(cos a, sin a, cos b, sin b, a_dot, b_dot, u)`` rows for states ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (x.shape[0],))
    return np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0]), np.cos(x[:, 1]),
                            np.sin(x[:, 1]), x[:, 2], x[:, 3], a])


def features(s: State, a: float, normalizer: Normalizer | None = None) -> np.ndarray:
    f = raw_features(s.as_array(), a)[0]
    return f if normalizer is None else normalizer(f)


class DynamicsModel:
    def __init__(self, kind: str, prior_params: PhysicalParams | None = None,
                 dt: float = 0.02, substeps: int = 1, hidden=(16, 16, 16),
                 seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self._kind = kind
        self.prior_params = prior_params or PhysicalParams()
        self.dt = dt
        self.substeps = substeps
        self.net = neural.init([N_FEATURES, *hidden, 4], seed)
        self.net.weights[-1][...] = 0.0
        self.net.biases[-1][...] = 0.0
        self.normalizer = Normalizer.identity(N_FEATURES)
        self.target_norm = Normalizer(np.zeros(4), np.ones(4), 0)
        self._synced: tuple[int, int] = (-1, 0)

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def target_scale(self) -> np.ndarray:
        if self.target_norm.count == 0:
            return np.ones(4)
        std = np.sqrt(self.target_norm.var)
        return np.where(std > 1e-8, std, 1.0)

    def base(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self._kind == "residual":
            return prior_step_batch(x, a, self.dt, self.prior_params, self.substeps)
        return np.asarray(x, dtype=np.float64).reshape(-1, 4)

    def predict_batch(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (x.shape[0],))
        delta = neural.forward(self.net, self.normalizer(raw_features(x, a)))
        return self.base(x, a) + delta * self.target_scale

    def predict(self, s: State, a: float) -> State:
        x = s.as_array()
        if not (np.all(np.isfinite(x)) and np.isfinite(a)):
            raise ValueError("non-finite model input")
        out = self.predict_batch(x, np.array([a]))[0]
        if not np.all(np.isfinite(out)):
            raise DivergenceError("model prediction diverged")
        return State.from_array(out)

    def rollout(self, s0: State, actions: Sequence[float]) -> list[State]:
        if len(actions) == 0:
            raise ValueError("empty action sequence")
        states, s = [], s0
        for a in actions:
            s = self.predict(s, float(a))
            states.append(s)
        return states

    def rollout_batch(self, x0: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """States after each action: shape ``(n, H, 4)`` for ``actions`` (n, H)."""
        actions = np.atleast_2d(actions)
        x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (actions.shape[0], 4))
        out = np.empty(actions.shape + (4,))
        for t in range(actions.shape[1]):
            x = self.predict_batch(x, actions[:, t])
            out[:, t] = x
        return out

    def targets(self, b: Batch) -> np.ndarray:
        return b.s_next - self.base(b.s, b.a)

    def sync_normalizer(self, buffer: ReplayBuffer) -> None:
        uid, seen = self._synced
        if uid != buffer.uid:
            seen = 0
        new = buffer.total - seen
        if new > 0:
            b = buffer.recent(new)
            self.normalizer.update(raw_features(b.s, b.a))
            self.target_norm.update(self.targets(b))
        self._synced = (buffer.uid, buffer.total)

    def loss_and_grads(self, b: Batch) -> tuple[float, list[np.ndarray]]:
        feats = self.normalizer(raw_features(b.s, b.a))
        y = self.targets(b) / self.target_scale
        err = neural.forward(self.net, feats) - y
        loss = float(np.mean(err**2))
        grads, _ = neural.backward(self.net, feats, 2.0 * err / err.size)
        return loss, grads

    def copy(self) -> "DynamicsModel":
        m = DynamicsModel.__new__(DynamicsModel)
        m.__dict__.update(self.__dict__)
        m.net = self.net.copy()
        m.normalizer = Normalizer(self.normalizer.mean.copy(), self.normalizer.var.copy(),
                                  self.normalizer.count)
        m.target_norm = Normalizer(self.target_norm.mean.copy(), self.target_norm.var.copy(),
                                   self.target_norm.count)
        return m


def train_epoch(model: DynamicsModel, buffer: ReplayBuffer, batch_size: int,
                adam_state: AdamState, max_batches: int | None = None) -> float:
    """One shuffled pass over the buffer (or ``max_batches`` minibatches).

    Returns the mean minibatch loss, measured before each update.
    """
    if len(buffer) == 0 or len(buffer) < batch_size:
        raise InsufficientDataError(
            f"need at least {batch_size} transitions, have {len(buffer)}")
    model.sync_normalizer(buffer)
    order = buffer.rng.permutation(len(buffer))
    n_batches = len(buffer) // batch_size
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)
    losses = []
    for k in range(n_batches):
        b = buffer._take(order[k * batch_size:(k + 1) * batch_size])
        loss, grads = model.loss_and_grads(b)
        if not np.isfinite(loss):
            raise DivergenceError("model loss is not finite")
        neural.adam_step(model.net, grads, adam_state)
        losses.append(loss)
    return float(np.mean(losses))


# -- checkpoints and traces ----------------------------------------------------

def write_model(model: DynamicsModel, fh: IO[str]) -> None:
    p = model.prior_params
    fh.write(f"dynamics {model.kind} {model.dt!r} {model.substeps}\n")
    fh.write("prior " + " ".join(f"{v:.17g}" for v in (*p.packed(), p.a_max)) + "\n")
    for name, norm in (("input", model.normalizer), ("target", model.target_norm)):
        fh.write(f"normalizer {name} {norm.count} "
                 + " ".join(f"{v:.17g}" for v in (*norm.mean, *norm.var)) + "\n")
    neural.write_params(model.net, fh)


def read_model(fh: IO[str]) -> DynamicsModel:
    head = fh.readline().split()
    if not head or head[0] != "dynamics":
        raise ValueError("not a dynamics model checkpoint")
    kind, dt, substeps = head[1], float(head[2]), int(head[3])
    vals = [float(v) for v in fh.readline().split()[1:]]
    names = ("m_p", "L_p", "L_r", "J1", "J2", "k_t", "k_m", "R_m", "g", "a_max")
    model = DynamicsModel(kind, PhysicalParams(**dict(zip(names, vals))), dt, substeps)
    for attr in ("normalizer", "target_norm"):
        parts = fh.readline().split()
        count, nums = int(parts[2]), np.array([float(v) for v in parts[3:]])
        half = len(nums) // 2
        setattr(model, attr, Normalizer(nums[:half], nums[half:], count))
    model.net = neural.read_params(fh)
    return model


def write_rollout_csv(path, states: Sequence[State], dt: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "alpha", "beta", "alpha_dot", "beta_dot"])
        for k, s in enumerate(states):
            w.writerow([f"{k * dt:.6g}", *(f"{v:.17g}" for v in s.as_tuple())])
