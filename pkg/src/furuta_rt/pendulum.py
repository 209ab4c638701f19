"""Furuta pendulum dynamics.

Two views of the same rotary inverted pendulum live here:

* the analytic, frictionless Euler-Lagrange *prior* (``step_prior``), which the
  learned dynamics models build on, and
* the simulated *plant* (``plant_step``), i.e. the prior plus viscous joint
  friction, an actuator dead-zone and Gaussian torque noise. The plant plays the
  role of the physical robot.

State layout everywhere is ``(alpha, beta, alpha_dot, beta_dot)`` where ``alpha``
is the rotary arm angle and ``beta`` the pendulum angle (0 = hanging down,
+-pi = upright). Angles are never wrapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from numba import njit

ALPHA_LIM = math.pi
C_ROTOR = 0.1
C_ACTION = 0.01
A_MAX = 6.0


class SingularMassMatrixError(ArithmeticError):
    """Raised when M(beta) is not positive definite."""


@dataclass(frozen=True)
class State:
    alpha: float
    beta: float
    alpha_dot: float
    beta_dot: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite state {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.alpha_dot, self.beta_dot)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> "State":
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))

    @classmethod
    def zero(cls) -> "State":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of the pendulum.

    ``J1`` and ``J2`` are the inertia terms that appear directly in the mass
    matrix: ``J1`` is the rotor inertia about the motor axis including the
    pendulum point mass at the arm tip, ``J2`` the pendulum inertia about its
    pivot.
    """

    m_p: float = 0.024
    L_p: float = 0.129
    L_r: float = 0.085
    J1: float = 4.02e-4
    J2: float = 1.33e-4
    k_t: float = 0.042
    k_m: float = 0.042
    R_m: float = 8.4
    g: float = 9.81
    a_max: float = A_MAX

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be finite and > 0, got {v}")
        if self.J1 * self.J2 <= self.coupling**2:
            raise ValueError(
                "mass matrix not positive definite: need J1*J2 > (m_p*L_r*L_p/2)**2"
            )

    @property
    def coupling(self) -> float:
        return 0.5 * self.m_p * self.L_r * self.L_p

    def packed(self) -> np.ndarray:
        """Parameters in the order the compiled kernels expect."""
        return np.array(
            [self.m_p, self.L_p, self.L_r, self.J1, self.J2,
             self.k_t, self.k_m, self.R_m, self.g],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class PlantConfig:
    params: PhysicalParams = field(default_factory=PhysicalParams)
    dt: float = 0.02
    b_r: float = 1e-4
    b_p: float = 5e-5
    dead_zone: float = 0.1
    torque_noise_std: float = 1e-4
    integrator_substeps: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.integrator_substeps < 1:
            raise ValueError("integrator_substeps must be >= 1")
        if self.torque_noise_std < 0 or self.b_r < 0 or self.b_p < 0 or self.dead_zone < 0:
            raise ValueError("friction, dead-zone and noise must be >= 0")


# -- analytic terms -----------------------------------------------------------

def mass_matrix(beta: float, params: PhysicalParams) -> np.ndarray:
    s, c = math.sin(beta), math.cos(beta)
    m12 = params.coupling * c
    return np.array([
        [params.J1 + 0.25 * params.m_p * params.L_p**2 * s * s, m12],
        [m12, params.J2],
    ])


def coriolis_vector(beta: float, alpha_dot: float, beta_dot: float,
                    params: PhysicalParams) -> np.ndarray:
    s, c = math.sin(beta), math.cos(beta)
    k = 0.5 * params.m_p * params.L_p * s
    return k * np.array([
        params.L_p * alpha_dot * beta_dot * c - params.L_r * beta_dot**2,
        -0.5 * params.L_p * alpha_dot**2 * c,
    ])


def gravity_vector(beta: float, params: PhysicalParams) -> np.ndarray:
    return np.array([0.0, 0.5 * params.m_p * params.g * params.L_p * math.sin(beta)])


def motor_torque(a: float, alpha_dot: float, params: PhysicalParams) -> float:
    """Torque produced by the DC motor at voltage ``a`` (includes back-EMF)."""
    _check_voltage(a, params.a_max)
    return params.k_t * (-a - params.k_m * alpha_dot) / params.R_m


def accelerations(state: State, a: float, params: PhysicalParams,
                  torque_override: float | None = None) -> tuple[float, float]:
    """Solve ``M(beta) qdd = (tau, 0) - N - G`` for ``(alpha_ddot, beta_ddot)``.

    ``torque_override`` replaces the motor torque (the voltage is then ignored).
    """
    M = mass_matrix(state.beta, params)
    if np.linalg.det(M) <= 0:
        raise SingularMassMatrixError(f"det M <= 0 at beta={state.beta}")
    tau = (motor_torque(a, state.alpha_dot, params)
           if torque_override is None else float(torque_override))
    rhs = (np.array([tau, 0.0])
           - coriolis_vector(state.beta, state.alpha_dot, state.beta_dot, params)
           - gravity_vector(state.beta, params))
    qdd = np.linalg.solve(M, rhs)
    return float(qdd[0]), float(qdd[1])


def total_energy(state: State, params: PhysicalParams) -> float:
    return float(total_energy_array(state.as_array(), params))


def total_energy_array(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """Kinetic plus potential energy for states stacked along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    beta, ad, bd = x[..., 1], x[..., 2], x[..., 3]
    s, c = np.sin(beta), np.cos(beta)
    m11 = params.J1 + 0.25 * params.m_p * params.L_p**2 * s * s
    m12 = params.coupling * c
    kinetic = 0.5 * (m11 * ad * ad + 2.0 * m12 * ad * bd + params.J2 * bd * bd)
    return kinetic - 0.5 * params.m_p * params.g * params.L_p * c


# -- compiled integrator ------------------------------------------------------

@njit(cache=True)
def _qdd(beta, ad, bd, tau, p, b_r, b_p):
    m_p, L_p, L_r, J1, J2 = p[0], p[1], p[2], p[3], p[4]
    g = p[8]
    s = math.sin(beta)
    c = math.cos(beta)
    m11 = J1 + 0.25 * m_p * L_p * L_p * s * s
    m12 = 0.5 * m_p * L_r * L_p * c
    k = 0.5 * m_p * L_p * s
    f1 = tau - k * (L_p * ad * bd * c - L_r * bd * bd) - b_r * ad
    f2 = k * 0.5 * L_p * ad * ad * c - 0.5 * m_p * g * L_p * s - b_p * bd
    det = m11 * J2 - m12 * m12
    return (J2 * f1 - m12 * f2) / det, (m11 * f2 - m12 * f1) / det


@njit(cache=True)
def _deriv(x1, x2, x3, u, fixed_torque, bias, p, b_r, b_p):
    if fixed_torque:
        tau = u
    else:
        tau = p[5] * (-u - p[6] * x2) / p[7]
    a1, a2 = _qdd(x1, x2, x3, tau + bias, p, b_r, b_p)
    return x2, x3, a1, a2


@njit(cache=True)
def rk4_batch(x, u, dt, substeps, p, b_r, b_p, bias, fixed_torque):
    """Integrate each row of ``x`` for ``dt`` with ``substeps`` RK4 steps.

    ``u`` is a voltage per row, or a torque when ``fixed_torque`` is set.
    ``bias`` is an extra torque added on the rotor axis (held over the step).
    """
    n = x.shape[0]
    out = np.empty_like(x)
    h = dt / substeps
    for i in range(n):
        q0, q1, q2, q3 = x[i, 0], x[i, 1], x[i, 2], x[i, 3]
        for _ in range(substeps):
            k1a, k1b, k1c, k1d = _deriv(q1, q2, q3, u[i], fixed_torque, bias[i], p, b_r, b_p)
            k2a, k2b, k2c, k2d = _deriv(q1 + 0.5 * h * k1b, q2 + 0.5 * h * k1c,
                                        q3 + 0.5 * h * k1d, u[i], fixed_torque,
                                        bias[i], p, b_r, b_p)
            k3a, k3b, k3c, k3d = _deriv(q1 + 0.5 * h * k2b, q2 + 0.5 * h * k2c,
                                        q3 + 0.5 * h * k2d, u[i], fixed_torque,
                                        bias[i], p, b_r, b_p)
            k4a, k4b, k4c, k4d = _deriv(q1 + h * k3b, q2 + h * k3c, q3 + h * k3d,
                                        u[i], fixed_torque, bias[i], p, b_r, b_p)
            q0 += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
            q1 += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
            q2 += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
            q3 += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
        out[i, 0] = q0
        out[i, 1] = q1
        out[i, 2] = q2
        out[i, 3] = q3
    return out


def prior_step_batch(x: np.ndarray, a: np.ndarray, dt: float, params: PhysicalParams,
                     substeps: int = 1, torque_override: np.ndarray | None = None
                     ) -> np.ndarray:
    """Frictionless RK4 step for a batch of states ``x`` of shape (n, 4)."""
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 4)
    n = x.shape[0]
    fixed = torque_override is not None
    u = np.broadcast_to(
        np.asarray(torque_override if fixed else a, dtype=np.float64), (n,)
    ).copy()
    return rk4_batch(x, u, dt, substeps, params.packed(), 0.0, 0.0,
                     np.zeros(n), fixed)


def step_prior(state: State, a: float, dt: float, params: PhysicalParams,
               substeps: int = 1, torque_override: float | None = None) -> State:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if torque_override is None:
        _check_voltage(a, params.a_max)
    out = prior_step_batch(state.as_array()[None], np.array([a]), dt, params, substeps,
                           None if torque_override is None else np.array([torque_override]))
    return State.from_array(out[0])


# -- plant --------------------------------------------------------------------

def apply_dead_zone(a, dead_zone: float):
    return np.where(np.abs(a) < dead_zone, 0.0, a)


def plant_step(state: State, a: float, cfg: PlantConfig, rng: np.random.Generator,
               torque_override: float | None = None) -> tuple[State, float, bool]:
    """Advance the simulated robot one control period.

    Returns ``(next_state, reward, done)`` where reward is earned in ``state``
    under action ``a`` and ``done`` flags a terminal next state.
    """
    x = state.as_array()
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    p = cfg.params
    # noise is always drawn so the rng stream does not depend on the action
    noise = rng.normal(0.0, 1.0) * cfg.torque_noise_std
    if torque_override is None:
        _check_voltage(a, p.a_max)
        u, fixed = float(apply_dead_zone(a, cfg.dead_zone)), False
    else:
        u, fixed = float(torque_override), True
    nxt = rk4_batch(x[None], np.array([u]), cfg.dt, cfg.integrator_substeps,
                    p.packed(), cfg.b_r, cfg.b_p, np.array([noise]), fixed)[0]
    if not np.all(np.isfinite(nxt)):
        raise FloatingPointError("plant integration diverged")
    s_next = State.from_array(nxt)
    r = reward(state, a if torque_override is None else 0.0, p.a_max)
    return s_next, r, is_terminal(s_next)


# -- task ---------------------------------------------------------------------

def reward_array(x: np.ndarray, a, a_max: float = A_MAX) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    alpha, beta = x[..., 0], x[..., 1]
    r = (0.5 * (1.0 + np.cos(beta - np.pi))
         - C_ROTOR * (alpha / ALPHA_LIM) ** 2
         - C_ACTION * (np.asarray(a) / a_max) ** 2)
    return np.maximum(r, -1.0)


def reward(state: State, a: float, a_max: float = A_MAX) -> float:
    return float(reward_array(state.as_array(), a, a_max))


def terminal_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.abs(x[..., 0]) > ALPHA_LIM) | ~np.all(np.isfinite(x), axis=-1)


def is_terminal(state: State) -> bool:
    return bool(terminal_array(state.as_array()))


def wrap_angle(theta):
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def _check_voltage(a: float, a_max: float) -> None:
    if not math.isfinite(a) or abs(a) > a_max * (1 + 1e-12):
        raise ValueError(f"|a|={abs(a)} exceeds a_max={a_max}")
