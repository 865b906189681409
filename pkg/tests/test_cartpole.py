import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqrl.cartpole import (GRAVITY, HALF_LENGTH, NUM_BOXES, POLE_MASS, PUSH_LEFT, PUSH_RIGHT,
                           TERMINAL_INDEX, THETA_DOT_EDGES, THETA_EDGES, TOTAL_MASS, X_DOT_EDGES,
                           X_EDGES, CartPoleEnv, CartPoleState, TerminalStateError, discretize,
                           dynamics, episode_runner, is_terminal, mean_episode_length, step,
                           write_episode_csv)
from eqrl.mdp import QTable

DEG = math.pi / 180
UPRIGHT = CartPoleState(0.0, 0.0, 0.0, 0.0)


def digitize_oracle(state):
    if abs(state.x) > 2.4 or abs(state.theta) > 12 * DEG:
        return NUM_BOXES
    idx = [int(np.digitize(v, e)) for v, e in
           zip(state.as_tuple(), (X_EDGES, X_DOT_EDGES, THETA_EDGES, THETA_DOT_EDGES))]
    return int(np.ravel_multi_index(idx, (3, 3, 6, 3)))


def test_upright_rest_is_equilibrium():
    assert dynamics(UPRIGHT, 0.0) == UPRIGHT


def test_push_directions():
    nxt, reward, terminal = step(UPRIGHT, PUSH_RIGHT)
    assert nxt.x == 0.0 and nxt.theta == 0.0  # explicit Euler: positions lag one step
    assert nxt.x_dot > 0 and nxt.theta_dot < 0
    assert reward == 1.0 and not terminal
    left, _, _ = step(UPRIGHT, PUSH_LEFT)
    assert left == nxt.negated()


def test_terminal_rules():
    tipped = CartPoleState(0.0, 0.0, 13 * DEG, 0.0)
    assert is_terminal(tipped) and discretize(tipped) == TERMINAL_INDEX
    assert is_terminal(CartPoleState(2.5, 0, 0, 0)) and not is_terminal(CartPoleState(2.4, 0, 0, 0))
    with pytest.raises(TerminalStateError):
        step(tipped, PUSH_LEFT)
    with pytest.raises(ValueError):
        step(UPRIGHT, 5)
    # falling over gives reward 0 and the terminal flag
    s = CartPoleState(0.0, 0.0, 11.9 * DEG, 2.0)
    nxt, reward, terminal = step(s, PUSH_LEFT)
    assert terminal and reward == 0.0


def test_discretize_examples():
    assert discretize(UPRIGHT) == ((1 * 3 + 1) * 6 + 3) * 3 + 1
    assert discretize(CartPoleState(-2.0, -1.0, -10 * DEG, -1.0)) == 0
    assert discretize(CartPoleState(2.0, 1.0, 10 * DEG, 1.0)) == NUM_BOXES - 1
    # edges belong to the upper bin
    assert discretize(CartPoleState(0.8, 0, 0, 0)) == discretize(CartPoleState(1.0, 0, 0, 0))
    assert discretize(CartPoleState(0.0, 0, -DEG, 0)) != discretize(CartPoleState(0.0, 0, -DEG - 1e-12, 0))


@settings(max_examples=300)
@given(st.floats(-3, 3), st.floats(-5, 5), st.floats(-0.3, 0.3), st.floats(-5, 5))
def test_discretize_total_and_matches_oracle(x, v, t, w):
    state = CartPoleState(x, v, t, w)
    idx = discretize(state)
    assert 0 <= idx <= NUM_BOXES
    assert idx == digitize_oracle(state)


def test_all_boxes_reachable():
    centres = []
    for edges in (X_EDGES, X_DOT_EDGES, THETA_EDGES, THETA_DOT_EDGES):
        pts = [edges[0] - 0.01] + [(a + b) / 2 for a, b in zip(edges, edges[1:])] + [edges[-1] + 0.01]
        centres.append(pts)
    seen = {discretize(CartPoleState(*c)) for c in np.array(np.meshgrid(*centres)).reshape(4, -1).T}
    assert seen == set(range(NUM_BOXES))


def test_hanging_pendulum_period():
    # small swings about the downward position, cart free, no force
    ell = HALF_LENGTH * (4 / 3 - POLE_MASS / TOTAL_MASS)
    expected = 2 * math.pi * math.sqrt(ell / GRAVITY)
    s = CartPoleState(0.0, 0.0, math.pi + DEG, 0.0)
    crossings = []
    prev = s.theta - math.pi
    for k in range(1, 2000):
        s = dynamics(s, 0.0)
        cur = s.theta - math.pi
        if prev > 0 >= cur or prev < 0 <= cur:
            crossings.append(k * 0.02)
        prev = cur
    period = 2 * float(np.mean(np.diff(crossings[:10])))
    assert abs(period - expected) / expected < 0.1


def test_mirror_symmetry_exact():
    rng = np.random.default_rng(0)
    s = CartPoleState(0.1, -0.2, 0.03, 0.1)
    m = s.negated()
    for _ in range(30):
        a = int(rng.integers(2))
        s, r1, d1 = step(s, a)
        m, r2, d2 = step(m, 1 - a)
        assert m == s.negated() and r1 == r2 and d1 == d2
        if d1:
            break


def test_episode_runner_modes(tmp_path):
    rng = np.random.default_rng(1)
    assert episode_runner(None, None, 5, rng, mode="random").length <= 5
    q = QTable.zeros(NUM_BOXES + 1, 2)
    ep = episode_runner(q, None, 10_000, rng, record=True)
    # always pushing left falls over quickly
    assert 1 <= ep.length < 100 and len(ep.trace) == ep.length
    write_episode_csv(tmp_path / "ep.csv", ep)
    assert (tmp_path / "ep.csv").read_text().startswith("t,x,x_dot,theta")
    with pytest.raises(ValueError):
        episode_runner(q, None, 5, rng, mode="nope")


def test_max_steps_cap():
    # a bang-bang controller on the raw state would survive; the cap bounds the episode
    assert episode_runner(None, None, 3, np.random.default_rng(0), mode="random").length <= 3
    assert mean_episode_length(None, None, 20, 1, np.random.default_rng(0), mode="random") == 1.0


def test_random_policy_baseline_is_short():
    assert mean_episode_length(None, None, 200, 10_000, np.random.default_rng(3), mode="random") < 40


def test_env_interface():
    env = CartPoleEnv(np.random.default_rng(2))
    s = env.reset()
    assert 0 <= s < NUM_BOXES
    s2, r, done = env.step(PUSH_RIGHT)
    assert 0 <= s2 <= NUM_BOXES and r in (0.0, 1.0)
