import io

import numpy as np
import pytest

from furuta_rt import agent as A
from furuta_rt.agent import ActorCritic, imagine
from furuta_rt.model import Batch, DynamicsModel, InsufficientDataError, ReplayBuffer
from furuta_rt.neural import DivergenceError
from furuta_rt.pendulum import A_MAX, PhysicalParams, State, prior_step_batch, reward_array


def random_x(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-6, 6, n),
                            rng.uniform(-20, 20, n), rng.uniform(-40, 40, n)])


def zeroed(agent):
    for role in A.ROLES:
        getattr(agent, role).zero_()
    return agent


def test_zero_actor_outputs_zero():
    assert zeroed(ActorCritic()).act(State(0.3, 1.0, 2.0, -1.0)) == 0.0


def test_actions_bounded():
    ag = ActorCritic(seed=1)
    for w in ag.actor.weights:
        w *= 50.0
    x = random_x(10_000)
    assert np.all(np.abs(ag.act_batch(x)) <= A_MAX)
    noisy = ag.act_batch(x, exploration_std=10.0, rng=np.random.default_rng(0))
    assert np.all(np.abs(noisy) <= A_MAX)


def test_act_deterministic_without_noise():
    ag = ActorCritic(seed=2)
    s = State(0.1, 2.0, 0.0, 1.0)
    assert ag.act(s) == ag.act(s)


def test_q_value_zero_critics():
    assert zeroed(ActorCritic()).q_value(State.zero(), 1.0) == 0.0


def test_q_value_is_twin_min():
    ag = ActorCritic(seed=3)
    x = random_x(500)
    a = np.random.default_rng(3).uniform(-A_MAX, A_MAX, 500)
    q1, q2 = ag.q_pair(x, a)
    np.testing.assert_array_equal(ag.q_batch(x, a), np.minimum(q1, q2))
    s = State.from_array(x[0])
    s1, s2 = ag.q_pair(x[:1], a[:1])
    assert ag.q_value(s, a[0]) == min(s1[0], s2[0])
    # action omitted: evaluated at the policy's action
    assert ag.q_value(s) == ag.q_value(s, ag.act(s))


def test_terminal_zero_reward_batch_gives_zero_loss():
    ag = zeroed(ActorCritic(seed=4))
    x = random_x(32)
    b = Batch(x, np.zeros(32), np.zeros(32), x, np.ones(32))
    critic_loss, _ = ag.update(b)
    assert critic_loss == 0.0


def test_targets_frozen_between_polyak_steps():
    ag = ActorCritic(seed=5, policy_delay=2)
    x = random_x(64, 5)
    b = Batch(x, np.zeros(64), np.full(64, 0.5), x, np.zeros(64))
    before = [a.copy() for a in ag.critic1_target.arrays()]
    _, actor_loss = ag.update(b)  # first call: critics only
    assert actor_loss is None
    for p, q in zip(before, ag.critic1_target.arrays()):
        np.testing.assert_array_equal(p, q)
    _, actor_loss = ag.update(b)
    assert actor_loss is not None
    assert any(not np.array_equal(p, q) for p, q in zip(before, ag.critic1_target.arrays()))


def test_soft_update_with_unit_tau_copies():
    ag = ActorCritic(seed=6)
    ag.actor.weights[0] += 1.0
    ag.soft_update(1.0)
    for role in ("actor", "critic1", "critic2"):
        for p, q in zip(getattr(ag, role).arrays(), getattr(ag, role + "_target").arrays()):
            np.testing.assert_array_equal(p, q)


def test_update_rejects_empty_batch_and_flags_divergence():
    ag = ActorCritic()
    e = np.zeros((0, 4))
    with pytest.raises(ValueError):
        ag.update(Batch(e, np.zeros(0), np.zeros(0), e, np.zeros(0)))
    x = random_x(8)
    with pytest.raises(DivergenceError):
        ag.update(Batch(x, np.zeros(8), np.full(8, np.nan), x, np.zeros(8)))


def test_constant_reward_task_matches_geometric_series():
    c, gamma = 0.5, 0.9
    ag = ActorCritic(gamma=gamma, tau=0.05, seed=7)
    s = np.array([[0.0, 0.0, 0.0, 0.0]])
    rng = np.random.default_rng(7)
    losses = []
    for _ in range(5000):
        n = 64
        x = np.repeat(s, n, axis=0)
        a = rng.uniform(-A_MAX, A_MAX, n)
        losses.append(ag.update(Batch(x, a, np.full(n, c), x, np.zeros(n)))[0])
    target = c / (1 - gamma)
    assert ag.q_value(State.zero()) == pytest.approx(target, rel=0.05)
    assert ag.q_value(State.zero(), 2.0) == pytest.approx(target, rel=0.05)
    assert np.mean(losses[-100:]) < 1e-3


# -- imagination ---------------------------------------------------------------------

def _real_buffer(n=20):
    buf = ReplayBuffer(100, seed=0)
    for row in random_x(n, 8) * [0.3, 1, 0.2, 0.2]:
        buf.push(State.from_array(row), 0.0, 0.0, State.from_array(row), False)
    return buf


def test_imagine_single_step():
    im = ReplayBuffer(10)
    assert imagine(ActorCritic(), DynamicsModel("residual"), _real_buffer(), im, 1, 1, 0.0) == 1
    assert len(im) == 1


def test_imagined_transitions_follow_the_prior():
    P = PhysicalParams()
    real, im = _real_buffer(), ReplayBuffer(1000)
    ag = ActorCritic(seed=9)
    n = imagine(ag, DynamicsModel("residual", P), real, im, 8, 5, 0.0)
    assert n == len(im) > 0
    b = im.all()
    starts = {tuple(r) for r in real.all().s}
    assert np.all((b.r >= -1) & (b.r <= 1))
    np.testing.assert_array_equal(b.s_next, prior_step_batch(b.s, b.a, 0.02, P, 1))
    # BLAS may round differently for other batch shapes
    np.testing.assert_allclose(b.a, ag.act_batch(b.s), rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(b.r, reward_array(b.s, b.a))
    # every rollout starts at a real state and chains through its own predictions
    chained = {tuple(r) for r in b.s_next}
    assert all(tuple(r) in starts or tuple(r) in chained for r in b.s)


def test_imagine_stops_at_terminal_states():
    real = ReplayBuffer(10)
    s = State(3.13, 0.0, 50.0, 0.0)  # about to cross the rotor limit
    real.push(s, 0.0, 0.0, s, False)
    im = ReplayBuffer(100)
    n = imagine(ActorCritic(), DynamicsModel("residual"), real, im, 1, 10, 0.0)
    assert n == 1 and im.all().done[0]


def test_imagine_needs_real_data():
    with pytest.raises(InsufficientDataError):
        imagine(ActorCritic(), DynamicsModel("residual"), ReplayBuffer(5), ReplayBuffer(5),
                1, 1, 0.0)


def test_agent_checkpoint_round_trip():
    ag = ActorCritic(seed=10, gamma=0.95, tau=0.01)
    x = random_x(32)
    ag.update(Batch(x, np.zeros(32), np.full(32, 0.2), x, np.zeros(32)))
    buf = io.StringIO()
    A.write_agent(ag, buf)
    buf.seek(0)
    back = A.read_agent(buf)
    assert (back.gamma, back.tau, back.updates) == (0.95, 0.01, 1)
    for role in A.ROLES:
        for p, q in zip(getattr(ag, role).arrays(), getattr(back, role).arrays()):
            np.testing.assert_array_equal(p, q)
    with pytest.raises(ValueError):
        A.read_agent(io.StringIO("model\n"))
