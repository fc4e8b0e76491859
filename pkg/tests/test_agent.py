import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from groundprim.agent import (AgentConfig, Batch, HybridAgent, ReplayBuffer, Transition,
                              explore_probabilities, select_eval, select_explore, td_values,
                              valid_mask)
from groundprim.primitives import K, MAX_PARAM_DIM, PARAM_DIMS

SMALL = dict(feature_dim=8, head_width=8, local_widths=(8, 16), decode_widths=(16,))


def fake_obs(rng, n=12):
    x = rng.normal(size=(n, 7)) * 0.1
    x[:, 6] = 0.0
    x[: n // 2, 6] = 1.0
    return x


def fake_batch(rng, b=6, n=12):
    items = []
    for j in range(b):
        grasped = bool(j % 2)
        k = int(rng.choice([2, 3, 4] if grasped else [0, 1, 4]))
        loc = int(rng.integers(0, n // 2)) if k in (0, 1) else int(rng.integers(n // 2, n))
        items.append(Transition(fake_obs(rng, n), grasped, k, loc,
                                np.r_[rng.uniform(-1, 1, PARAM_DIMS[k]),
                                      np.zeros(MAX_PARAM_DIM - PARAM_DIMS[k])],
                                float(-rng.random()), fake_obs(rng, n), not grasped, j == 0))
    return Batch.stack(items)


def zero_last_layers(module):
    for head in module.heads:
        if head is not None:
            head.layers[-1].weight.data[:] = 0.0
            head.layers[-1].bias.data[:] = 0.0


# -- masks -------------------------------------------------------------------

def test_mask_matches_domains():
    x = np.zeros((4, 7))
    x[:2, 6] = 1.0
    free = valid_mask(x, False)
    assert free[:, 0].tolist() == [True, True, False, False]  # poke on object only
    assert free[:, 1].tolist() == [True, True, False, False]
    assert not free[:, 2:4].any()
    assert free[:, 4].all()
    held = valid_mask(x, True)
    assert not held[:, :2].any()
    assert held[:, 2].tolist() == [False, False, True, True]
    assert held[:, 4].all()


def test_zero_critic_gives_uniform_map(rng):
    agent = HybridAgent(AgentConfig(**SMALL), seed=0)
    for c in agent.critics:
        zero_last_layers(c)
    _, qs, mask = agent.build_maps(fake_obs(rng), False)
    assert np.all(qs[0] == 0.0) and mask.shape == (12, K)


# -- selection ---------------------------------------------------------------

def brute_force_argmax(q, mask):
    best, arg = -np.inf, None
    n, k = q.shape
    for i in range(n):
        for j in range(k):
            if mask[i, j] and q[i, j] > best:
                best, arg = q[i, j], (i, j)
    return arg


def test_select_eval_matches_scan_with_ties(rng):
    for t in range(1000):
        n = int(rng.integers(1, 20))
        q = rng.integers(-3, 3, size=(n, K)).astype(float) if t % 2 else rng.normal(size=(n, K))
        mask = rng.random((n, K)) < 0.5
        mask[rng.integers(n), rng.integers(K)] = True
        assert tuple(select_eval(q, mask)) == brute_force_argmax(q, mask)


def test_select_eval_requires_valid_cell():
    with pytest.raises(ValueError, match="no valid action"):
        select_eval(np.zeros((3, K)), np.zeros((3, K), bool))


@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine"]))
def test_select_eval_invariant_to_increasing_maps(seed, kind):
    r = np.random.default_rng(seed)
    q = r.normal(size=(7, K))
    mask = r.random((7, K)) < 0.6
    mask[0, 0] = True
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 2}[kind]
    assert select_eval(q, mask) == select_eval(f(q), mask)


def test_two_cell_softmax_closed_form():
    beta = 0.1
    q = np.array([[0.0, beta * np.log(2.0)]])
    p = explore_probabilities(q, np.ones_like(q, bool), beta)
    assert np.allclose(p, [[1 / 3, 2 / 3]], atol=1e-15)


def test_explore_sampling_chi_square(rng):
    q = np.array([[0.0, 0.05, -0.1], [0.2, 0.0, 0.1]])
    mask = np.array([[True, True, False], [True, True, True]])
    p = explore_probabilities(q, mask, 0.1, 0.1)
    draws = 20_000
    counts = np.zeros(q.shape)
    for _ in range(draws):
        counts[select_explore(q, mask, 0.1, 0.1, rng)] += 1
    assert counts[~mask].sum() == 0
    assert stats.chisquare(counts[mask], draws * p[mask]).pvalue > 1e-4


def test_epsilon_one_is_uniform_over_valid():
    mask = np.array([[True, False], [True, True]])
    p = explore_probabilities(np.array([[5.0, 1.0], [0.0, -3.0]]), mask, 0.1, 1.0)
    assert np.allclose(p[mask], 1 / 3) and p[~mask].sum() == 0


def test_low_temperature_limit_is_argmax(rng):
    q = rng.normal(size=(9, K))
    mask = rng.random((9, K)) < 0.5
    mask[3, 2] = True
    p = explore_probabilities(q, mask, 1e-6)
    assert p[select_eval(q, mask)] == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_softmax_shift_invariance_and_masking(seed, shift):
    r = np.random.default_rng(seed)
    q = r.normal(size=(5, K))
    mask = r.random((5, K)) < 0.5
    mask[1, 1] = True
    p = explore_probabilities(q, mask, 0.1, 0.1)
    assert np.allclose(p, explore_probabilities(q + shift, mask, 0.1, 0.1), atol=1e-12)
    assert np.all(p[~mask] == 0) and p.sum() == pytest.approx(1.0)


def test_explore_rejects_bad_temperature():
    with pytest.raises(ValueError):
        explore_probabilities(np.zeros((1, 1)), np.ones((1, 1), bool), 0.0)
    with pytest.raises(ValueError):
        AgentConfig(beta=0)


# -- TD targets --------------------------------------------------------------

def test_td_value_examples():
    assert td_values(-0.05, False, -0.1, 0.99) == pytest.approx(-0.149)
    assert td_values(-0.05, True, -0.1, 0.99) == pytest.approx(-0.05)
    assert td_values(-0.05, False, 123.0, 0.0) == pytest.approx(-0.05)


def test_td_target_uses_min_of_twin_critics_at_greedy_cell(rng):
    agent = HybridAgent(AgentConfig(**SMALL), seed=3)
    batch = fake_batch(rng)
    y = agent.td_target(batch)
    _, qs, mask = agent.build_maps(batch.next_obs, batch.next_grasped, target=True)
    for b in range(len(batch)):
        cell = select_eval(qs[0][b], mask[b])
        q_next = min(qs[0][b][cell], qs[1][b][cell])
        expect = batch.reward[b] + 0.99 * (1 - batch.done[b]) * q_next
        assert y[b] == pytest.approx(expect, abs=1e-12)


# -- updates -----------------------------------------------------------------

def test_critic_loss_zero_when_targets_match(rng):
    agent = HybridAgent(AgentConfig(**SMALL, twin=False), seed=0)
    batch = fake_batch(rng)
    q, keep = agent.q_taken(agent.critics[0], batch)
    y = np.zeros(len(batch))
    y[keep] = q.data
    assert agent.update_critic(batch, y) == pytest.approx(0.0, abs=1e-20)


def test_critic_loss_decreases(rng):
    agent = HybridAgent(AgentConfig(**SMALL, lr=1e-3), seed=0)
    batch = fake_batch(rng, b=16)
    y = rng.uniform(-1, 0, len(batch))
    losses = [agent.update_critic(batch, y) for _ in range(100)]
    assert losses[-1] < 0.5 * losses[0]


def test_constant_critic_gives_zero_actor_gradient(rng):
    agent = HybridAgent(AgentConfig(**SMALL), seed=0)
    zero_last_layers(agent.critics[0])
    batch = fake_batch(rng)
    agent.actor_opt.zero_grad()
    agent.actor_objective(batch).backward()
    for p in agent.actor.parameters():
        assert p.grad is None or np.all(p.grad == 0)
    # inside update_actor the critic is frozen and accumulates nothing
    agent.critics[0].zero_grad()
    agent.update_actor(batch)
    assert all(p.grad is None for p in agent.critics[0].parameters())


def test_critic_increasing_in_params_pushes_actor_up(rng):
    agent = HybridAgent(AgentConfig(**SMALL, lr=1e-2), seed=0)
    critic = agent.critics[0]
    zero_last_layers(critic)
    f = SMALL["feature_dim"]
    head = critic.heads[0]
    first, last = head.layers[0], head.layers[-1]
    first.weight.data[:] = 0.0
    first.bias.data[:] = 0.0
    for j in range(PARAM_DIMS[0]):
        first.weight.data[f + j, j] = 1.0
        first.bias.data[j] = 10.0  # keeps the relu active on [-1, 1]
        last.weight.data[j, 0] = 1.0
    batch = fake_batch(rng)
    before = agent.build_maps(batch.obs, batch.grasped)[0][..., 0, :5].mean()
    for _ in range(20):
        agent.update_actor(batch)
    after = agent.build_maps(batch.obs, batch.grasped)[0][..., 0, :5].mean()
    assert after > before + 0.05


def test_actor_and_targets_update_every_fourth_step(rng):
    agent = HybridAgent(AgentConfig(**SMALL), seed=0)
    batch = fake_batch(rng)
    snap = lambda m: np.concatenate([p.ravel() for p in m.state_dict().values()])
    changed = []
    for _ in range(8):
        a0, t0 = snap(agent.actor), snap(agent.critic_targets[0])
        out = agent.update(batch)
        changed.append((not np.array_equal(a0, snap(agent.actor)),
                        not np.array_equal(t0, snap(agent.critic_targets[0])),
                        out["actor_loss"] is not None))
    expect = [(s % 4 == 0,) * 3 for s in range(1, 9)]
    assert changed == expect


def test_invalid_stored_location_is_skipped(rng, caplog):
    agent = HybridAgent(AgentConfig(**SMALL), seed=0)
    batch = fake_batch(rng)
    b = int(np.flatnonzero(batch.primitive == 0)[0]) if (batch.primitive == 0).any() else 0
    batch.grasped[b] = False
    batch.primitive[b] = 0
    batch.location[b] = 11  # background point: poke is not allowed there
    with caplog.at_level(logging.WARNING):
        _, keep = agent.q_taken(agent.critics[0], batch)
    assert b not in keep and len(keep) == len(batch) - 1
    assert "skipping 1" in caplog.text


# -- acting and replay -------------------------------------------------------

def test_act_returns_valid_grounded_action():
    from groundprim.env import EnvConfig, DoubleBinEnv
    from groundprim.objects import simple_objects

    env = DoubleBinEnv(simple_objects(), EnvConfig(n_object_points=32,
                                                      n_background_points=32))
    obs = env.reset(0)[2]
    agent = HybridAgent(AgentConfig(**SMALL), seed=0)
    for explore in (True, False):
        action, info = agent.act(obs, explore=explore)
        k, i, params = info["store"]
        assert info["mask"][i, k]
        assert np.array_equal(action.location, obs.cloud.points[i])
        assert len(action.params) == PARAM_DIMS[k] and params.shape == (MAX_PARAM_DIM,)
        assert np.all(np.abs(action.params) <= 1)
    a, _ = agent.act(obs, explore=False)
    b, _ = agent.act(obs, explore=False)
    assert a.location_index == b.location_index and a.primitive == b.primitive


def test_replay_sampling_is_uniform(rng):
    buf = ReplayBuffer(capacity=10, seed=1)
    for j in range(25):
        buf.add(Transition(np.zeros((2, 7)), False, 4, 0, np.zeros(5), float(j),
                           np.zeros((2, 7)), False, False))
    assert len(buf) == 10
    assert sorted(t.reward for t in buf.items) == list(range(15, 25))
    counts = np.bincount(buf.sample_indices(100_000), minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) < 5 * sigma)


def test_replay_state_roundtrip_keeps_sharing(rng):
    buf = ReplayBuffer(capacity=5, seed=0)
    o = [fake_obs(rng) for _ in range(4)]
    for j in range(3):
        buf.add(Transition(o[j], False, 4, 0, np.zeros(5), -1.0, o[j + 1], False, j == 2))
    arrays = buf.state_arrays()
    assert arrays["pool"].shape[0] == 4
    other = ReplayBuffer(capacity=5, seed=0)
    other.load_state_arrays(arrays, buf.cursor)
    assert other.items[0].next_obs is other.items[1].obs
    assert all(np.array_equal(x.obs, y.obs) and x.done == y.done
               for x, y in zip(buf.items, other.items))
    with pytest.raises(ValueError):
        ReplayBuffer().sample_indices(1)
