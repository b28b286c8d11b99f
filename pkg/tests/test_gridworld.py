import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cermic_lab.gridworld import (
    N_ACTIONS,
    GridConfig,
    GridWorld,
    feature_map,
    resolve_moves,
    rollout_trace,
    write_trace,
)

UP, DOWN, LEFT, RIGHT, STAY = range(5)


def test_default_config():
    c = GridConfig()
    assert (c.width, c.height, c.n_agents, c.view_radius, c.horizon, len(c.noisy_cells)) == (9, 9, 3, 2, 64, 4)


def test_reset_is_deterministic():
    w = GridWorld(GridConfig(starts=None))
    _, a = w.reset(7)
    _, b = w.reset(7)
    assert np.array_equal(a, b)


def test_placement_error():
    with pytest.raises(ValueError):
        GridWorld(GridConfig(width=2, height=1, n_agents=3, goals=((0, 0),), starts=None, noisy_cells=())).reset(0)


def test_config_validation():
    with pytest.raises(ValueError):
        GridConfig(starts=((0, 0), (0, 0), (1, 1)))
    with pytest.raises(ValueError):
        GridConfig(goals=((9, 9),))
    with pytest.raises(ValueError):
        GridConfig.from_dict({"widht": 3})


def test_success_rewards_once_and_ends():
    c = GridConfig(width=3, height=1, n_agents=1, goals=((2, 0),), starts=((0, 0),), noisy_cells=(),
                   view_radius=1)
    w = GridWorld(c)
    s, _ = w.reset()
    s, _, r, done = w.step(s, [RIGHT])
    assert (r, done) == (0.0, False)
    s, _, r, done = w.step(s, [RIGHT])
    assert (r, done, s.success) == (1.0, True, True)
    with pytest.raises(ValueError):
        w.step(s, [STAY])


def test_collision_keeps_both_in_place():
    pos = np.array([[0, 0], [2, 0]])
    np.testing.assert_array_equal(resolve_moves(pos, np.array([RIGHT, LEFT]), 3, 1), pos)
    # swapping places is also a conflict
    pos = np.array([[0, 0], [1, 0]])
    np.testing.assert_array_equal(resolve_moves(pos, np.array([RIGHT, LEFT]), 3, 1), pos)
    # walls block
    np.testing.assert_array_equal(resolve_moves(np.array([[0, 0]]), np.array([UP]), 3, 3), [[0, 0]])


@given(st.integers(0, 2**31))
def test_random_walk_invariants(seed):
    r = np.random.default_rng(seed)
    c = GridConfig(starts=None)
    w = GridWorld(c)
    s, _ = w.reset(seed)
    total = 0.0
    while not s.done:
        s, obs, rew, _ = w.step(s, r.integers(0, N_ACTIONS, c.n_agents))
        total += rew
        assert s.positions.shape == (3, 2)
        assert np.all((s.positions >= 0) & (s.positions < 9))
        assert len({tuple(p) for p in s.positions.tolist()}) == 3
        assert obs.shape == (3, c.obs_dim)
    assert total in (0.0, c.success_reward)


def test_noise_channel_isolation():
    c = GridConfig(noisy_cells=())
    w = GridWorld(c)
    s, obs = w.reset()
    sl = w.noise_slice()
    for _ in range(10):
        assert np.all(obs[:, sl] == 0.0)
        s, obs, _, _ = w.step(s, [RIGHT, DOWN, RIGHT])


def test_noise_visible_only_near_noisy_cells():
    c = GridConfig(starts=((8, 2), (0, 8), (4, 4)))
    w = GridWorld(c)
    s, obs = w.reset()
    sl = w.noise_slice()
    assert np.any(obs[0, sl] > 0)          # (8, 2) sees (8, 1) and (7, 1)
    assert np.all(obs[1:, sl] == 0.0)
    s2, obs2, _, _ = w.step(s, [STAY] * 3)
    assert not np.array_equal(obs[0, sl], obs2[0, sl])


def test_same_actions_give_identical_streams():
    w = GridWorld(GridConfig())
    acts = np.random.default_rng(0).integers(0, 5, (30, 3))
    assert rollout_trace(w, acts, 3) == rollout_trace(w, acts, 3)


def test_trace_csv(tmp_path):
    w = GridWorld(GridConfig())
    rows = rollout_trace(w, [[RIGHT, DOWN, STAY]] * 3)
    write_trace(tmp_path / "t.csv", rows)
    with open(tmp_path / "t.csv") as fh:
        out = list(csv.reader(fh))
    assert out[0] == ["step", "agent", "pos_x", "pos_y", "action", "reward"]
    assert len(out) == 1 + 3 * 3


def test_feature_map_blocks():
    s = np.array([0.3, -1.2])
    a, b = feature_map(s, 0), feature_map(s, 3)
    assert np.array_equal(feature_map(s, 3), b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-15)
    assert a @ b == 0.0
    with pytest.raises(ValueError):
        feature_map(s, N_ACTIONS)


def test_oracle_labels():
    c = GridConfig(starts=((0, 0), (1, 1), (6, 6)))
    w = GridWorld(c)
    s, _ = w.reset()
    lab, lat, off = w.oracle_labels(s)
    assert lab[0, 1] == 1 and lab[0, 2] == 0
    assert off[0, 1].tolist() == [1.0, 1.0]
    np.testing.assert_array_equal(lab, lab.T)
    np.testing.assert_array_equal(off, -np.swapaxes(off, 0, 1))
    assert lat.shape == (3, 2 + N_ACTIONS)


def test_frozen_agents_stay_on_goal():
    c = GridConfig(starts=((6, 6), (0, 0), (1, 0)))
    w = GridWorld(c)
    s, _ = w.reset()
    s, _, _, _ = w.step(s, [LEFT, RIGHT, RIGHT])
    assert s.positions[0].tolist() == [6, 6]


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_resolved_moves_are_collision_free(seed, n):
    r = np.random.default_rng(seed)
    cells = r.choice(16, size=n, replace=False)
    pos = np.stack([cells % 4, cells // 4], axis=1)
    acts = r.integers(0, N_ACTIONS, n)
    out = resolve_moves(pos, acts, 4, 4)
    assert len({tuple(p) for p in out.tolist()}) == n
    step = np.abs(out - pos).sum(axis=1)
    assert np.all(step <= 1)
    # anyone who moved followed their action
    from cermic_lab.gridworld import MOVES
    moved = step == 1
    np.testing.assert_array_equal(out[moved], (pos + MOVES[acts])[moved])
    for i in range(n):
        for j in range(n):
            if i != j:
                assert not (out[i].tolist() == pos[j].tolist() and out[j].tolist() == pos[i].tolist())
