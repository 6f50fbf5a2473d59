import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marl_diag.errors import ConfigError
from marl_diag.numerics import Tensor, grad_check
from marl_diag.rl import (EpsilonSchedule, ReplayBuffer, RLConfig, Transition, compute_reward, epsilon_at,
                          q_values, replay_push, replay_sample, select_actions, select_actions_batch,
                          td_loss, td_target, total_loss)


def test_epsilon_examples():
    s = EpsilonSchedule(0.2, 1000)
    assert epsilon_at(0, s) == 1.0
    assert epsilon_at(1000, s) == 0.2
    assert np.isclose(epsilon_at(500, s), 0.6)
    assert epsilon_at(5000, s) == 0.2
    assert epsilon_at(10, EpsilonSchedule(0.2, 1000, mode="eval")) == 0.0
    with pytest.raises(ConfigError):
        epsilon_at(0, EpsilonSchedule(0.2, 0))


@given(st.floats(0, 1), st.integers(1, 10_000), st.integers(0, 20_000), st.integers(0, 20_000))
def test_epsilon_monotone_and_clamped(eps_min, total, s1, s2):
    sched = EpsilonSchedule(eps_min, total)
    a, b = sorted((s1, s2))
    ea, eb = epsilon_at(a, sched), epsilon_at(b, sched)
    assert eps_min <= eb <= ea <= 1.0


class _Fixed:
    """Stand-in generator returning a fixed uniform draw."""

    def __init__(self, u):
        self.u = u

    def random(self, size=None):
        return self.u if size is None else np.full(size, self.u)


def test_select_actions_examples():
    p = [0.9, 0.2, 0.7]
    assert select_actions(p, 0.5, 0.5, _Fixed(0.9)).a.tolist() == [1, 0, 1]
    assert select_actions(p, 0.5, 0.5, _Fixed(0.1)).a.tolist() == [0, 0, 1]
    assert select_actions([0.9, 0.2, 0.1], 0.5, 0.5, _Fixed(0.1)).a.tolist() == [0, 1, 0]


def test_exploit_always_includes_top_class():
    a = select_actions([0.1, 0.3, 0.2], 0.0, 0.5, np.random.default_rng(0)).a
    assert a.tolist() == [0, 1, 0]


def test_ties_go_to_lowest_index():
    assert select_actions([0.3, 0.3, 0.1], 0.0, 0.5, np.random.default_rng(0)).a.tolist() == [1, 0, 0]
    # explore removes index 0, the fallback picks index 1
    assert select_actions([0.3, 0.3, 0.1], 1.0, 0.5, np.random.default_rng(0)).a.tolist() == [0, 1, 0]


def test_single_class_explore_falls_back_to_exploit():
    act = select_actions([0.2], 1.0, 0.5, np.random.default_rng(0))
    assert act.a.tolist() == [1] and not act.explored


def test_batch_selection_matches_single_selection():
    rng = np.random.default_rng(3)
    p = rng.random((50, 4))
    a_batch, _ = select_actions_batch(p, 0.4, 0.5, np.random.default_rng(7))
    r = np.random.default_rng(7)
    singles = np.stack([select_actions(row, 0.4, 0.5, r).a for row in p])
    assert np.array_equal(a_batch, singles)


def test_explore_frequency():
    p = np.random.default_rng(0).random((100_000, 5))
    _, explored = select_actions_batch(p, 0.3, 0.5, np.random.default_rng(1))
    assert abs(explored.mean() - 0.3) < 0.01


def test_reward_examples():
    assert compute_reward([1, 0, 1], [1, 0, 0]).tolist() == [1, 1, -1]
    assert np.all(compute_reward([1, 1], [1, 1]) == 1)
    assert np.all(compute_reward([0, 1], [1, 0]) == -1)
    with pytest.raises(ValueError):
        compute_reward([1, 0], [1, 0, 0])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=8), st.data())
def test_reward_all_positive_iff_equal(a, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
    r = compute_reward(a, y)
    assert set(np.unique(r)) <= {-1.0, 1.0}
    assert np.all(r == 1) == (a == y)


def test_q_values_examples():
    assert q_values(Tensor([2.0, -1.0]), [1, 0]).data.tolist() == [2.0, 1.0]
    assert not q_values(Tensor(np.zeros(3)), [1, 0, 1]).data.any()
    z = Tensor([0.3, -0.7])
    assert np.array_equal(q_values(z, [1, 1]).data, -q_values(z, [0, 0]).data)


def test_td_target_examples():
    r = np.array([1.0, -1.0])
    assert np.array_equal(td_target(r, np.array([5.0, 3.0]), 0.0), r)
    assert np.isclose(td_target([1.0], np.array([2.0]), 0.9)[0], 2.8)
    assert np.isclose(td_target([-1.0], np.array([-3.0]), 0.9)[0], 1.7)
    assert not isinstance(td_target(r, Tensor([1.0, 1.0], requires_grad=True), 0.9), Tensor)


def test_td_loss_examples():
    q = Tensor([0.5, -1.5])
    assert td_loss(q, q.data).data == 0.0
    assert td_loss(Tensor([0.0]), np.array([2.0])).data == 2.0
    small = td_loss(Tensor([1.0]), np.array([0.0])).data
    assert td_loss(Tensor([2.0]), np.array([0.0])).data == 4 * small


def test_target_branch_carries_no_gradient(rng):
    q = Tensor(rng.normal(size=(2, 3)))
    r = np.ones((2, 3))

    def f(z_next):
        return td_loss(q, td_target(r, z_next, 0.9)) + (z_next * 0.0).sum()

    rep = grad_check(f, rng.normal(size=(2, 3)))
    assert not rep.analytic.any()
    assert np.abs(rep.numeric).max() > 0.1


def test_total_loss_examples():
    assert total_loss([0.0, 0.0], [0.0, 0.0], 0.0, 0.0) == 0.0
    assert np.isclose(total_loss([0.1, 0.2], [0.3, 0.4], 0.5, 0.6), 2.1, atol=1e-12)
    cfg = RLConfig(lambda_td=0.0)
    assert np.isclose(total_loss([0.1, 0.2], [0.3, 0.4], 0.5, 0.6, cfg), 1.6)
    with pytest.raises(ConfigError):
        RLConfig(lambda_p=-1.0)


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_total_loss_is_plain_sum(v):
    t = total_loss(v[:2], v[2:4], v[4], v[5])
    assert abs(t - sum(v)) <= 1e-12 * max(1.0, sum(abs(x) for x in v))


def test_rl_config_validation():
    with pytest.raises(ConfigError):
        RLConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        RLConfig(tau=0.0)


def _t(i):
    s = {"f": np.full(2, float(i))}
    return Transition(s, np.array([1, 0]), np.array([1.0, -1.0]), s, episode=i, step=i)


def test_replay_fifo_and_sampling():
    buf = ReplayBuffer(2, seed=0)
    for i in range(3):
        replay_push(buf, _t(i))
    assert [t.episode for t in buf.items()] == [1, 2]
    batch = replay_sample(buf, 2, np.random.default_rng(0))
    assert sorted(t.episode for t in batch) == [1, 2]
    assert replay_sample(buf, 3) is None


def test_replay_sampling_is_seeded():
    buf = ReplayBuffer(50, seed=0)
    for i in range(50):
        buf.push(_t(i))
    a = [t.episode for t in buf.sample(10, np.random.default_rng(4))]
    b = [t.episode for t in buf.sample(10, np.random.default_rng(4))]
    assert a == b and len(set(a)) == 10


@given(st.integers(1, 20), st.integers(0, 60))
def test_replay_capacity_bound(capacity, n):
    buf = ReplayBuffer(capacity)
    for i in range(n):
        buf.push(_t(i))
    assert len(buf) == min(n, capacity)
    assert [t.episode for t in buf.items()] == list(range(max(0, n - capacity), n))
    assert buf.pushes == n
