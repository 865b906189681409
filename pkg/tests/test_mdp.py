import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqrl.mdp import (Constant, Mdp, MdpEnv, MdpError, PolicyConfig, QTable, RobbinsMonro,
                      chain_mdp, epsilon_greedy_select, exploration_rate, format_mdp,
                      greedy_action, load_mdp, parse_mdp, rng_streams, value_iteration)


def policy_enumeration(mdp: Mdp) -> tuple[np.ndarray, np.ndarray]:
    """Exact optimum by solving the linear system of every deterministic policy."""
    n = mdp.num_states
    best = np.full(n, -np.inf)
    for pi in itertools.product(range(mdp.num_actions), repeat=n):
        p = mdp.transition[np.arange(n), pi]
        r = mdp.reward[np.arange(n), pi]
        v = np.linalg.solve(np.eye(n) - mdp.discount * p, r)
        best = np.maximum(best, v)
    return best, mdp.reward + mdp.discount * mdp.transition @ best


def random_mdp(rng, s, a, gamma):
    p = rng.random((s, a, s)) ** 3
    p /= p.sum(axis=2, keepdims=True)
    return Mdp(s, a, p, rng.uniform(-1, 1, (s, a)), gamma)


def test_two_state_closed_form():
    # stay in state 1 forever collecting 1: V(1) = 1 / (1 - g); state 0 jumps there for 0
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = p[0, 1, 1] = p[1, :, 1] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 0.5]])
    v, q = value_iteration(Mdp(2, 2, p, r, 0.9), tol=1e-12)
    assert v == pytest.approx([9.0, 10.0], abs=1e-9)
    assert q[1] == pytest.approx([10.0, 9.5], abs=1e-9)


def test_chain_matches_enumeration():
    mdp = chain_mdp()
    v, q = value_iteration(mdp, tol=1e-12)
    v_ref, q_ref = policy_enumeration(mdp)
    assert np.max(np.abs(q - q_ref)) < 1e-9
    assert np.all(mdp.reward <= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3), st.floats(0.0, 0.95))
def test_value_iteration_property(seed, s, a, gamma):
    mdp = random_mdp(np.random.default_rng(seed), s, a, gamma)
    v, q = value_iteration(mdp, tol=1e-11)
    v_ref, q_ref = policy_enumeration(mdp)
    # residual tol bounds the distance to V* by tol * g / (1 - g)
    assert np.max(np.abs(q - q_ref)) < 1e-8


def test_validation():
    good_p = np.ones((1, 1, 1))
    with pytest.raises(MdpError):
        Mdp(1, 1, good_p, [[0.0]], 1.0)
    with pytest.raises(MdpError):
        Mdp(1, 1, good_p * 0.5, [[0.0]], 0.5)
    with pytest.raises(MdpError):
        Mdp(1, 1, good_p, [[np.inf]], 0.5)
    with pytest.raises(MdpError):
        Mdp(2, 1, good_p, [[0.0]], 0.5)
    with pytest.raises(MdpError):
        Mdp(0, 1, np.zeros((0, 1, 0)), np.zeros((0, 1)), 0.5)
    with pytest.raises(ValueError):
        value_iteration(Mdp(1, 1, good_p, [[0.0]], 0.5), tol=0)


def test_schedules_and_policy_config():
    assert Constant(0.1)(1000) == 0.1
    assert [RobbinsMonro()(n) for n in range(3)] == [1.0, 0.5, 1 / 3]
    for bad in (lambda: Constant(0.0), lambda: RobbinsMonro(1.5),
                lambda: PolicyConfig(exploration_c=1.0), lambda: PolicyConfig(exploration_c=0.0)):
        with pytest.raises(ValueError):
            bad()


def test_greedy_ties_go_to_lowest_index():
    q = QTable.zeros(1, 4)
    q.values[0] = [1.0, 3.0, 3.0, 2.0]
    assert greedy_action(q, 0) == 1
    assert greedy_action(QTable.zeros(1, 3), 0) == 0


def test_exploration_rate():
    q = QTable.zeros(1, 2)
    cfg = PolicyConfig(exploration_c=0.5)
    assert exploration_rate(q, 0, cfg) == 0.5
    q.state_visit_counts[0] = 10
    assert exploration_rate(q, 0, cfg) == 0.05


@pytest.mark.parametrize("visits", [0, 4])
def test_epsilon_frequency(visits):
    q = QTable.zeros(1, 2)
    q.values[0] = [0.0, 1.0]
    q.state_visit_counts[0] = visits
    cfg = PolicyConfig(exploration_c=0.8)
    rng = np.random.default_rng(5)
    draws = 100_000
    picks = sum(epsilon_greedy_select(q, 0, cfg, rng) == 0 for _ in range(draws))
    eps = 0.8 / max(1, visits)
    # non-greedy action is chosen with probability eps / 2
    assert abs(picks / draws - eps / 2) < 4 * np.sqrt(eps / 2 / draws)


def test_parse_format_roundtrip(tmp_path):
    mdp = random_mdp(np.random.default_rng(3), 3, 2, 0.7)
    text = format_mdp(mdp)
    back = parse_mdp(text)
    assert np.allclose(back.transition, mdp.transition, atol=1e-15)
    assert np.array_equal(back.reward, mdp.reward) and back.discount == 0.7
    path = tmp_path / "m.txt"
    path.write_text("# comment\n\n" + text)
    assert np.array_equal(load_mdp(path).reward, mdp.reward)


def test_parse_decimal_probabilities():
    text = "2 1 0.5\n0 0 1 0.1 0.9\n1 0 -1 0.3 0.7  # trailing comment\n"
    mdp = parse_mdp(text)
    assert mdp.transition[0, 0] == pytest.approx([0.1, 0.9])
    assert mdp.reward[:, 0].tolist() == [1.0, -1.0]


@pytest.mark.parametrize("text", [
    "",
    "2 1\n",
    "1 1 0.5\n0 0 1\n",
    "1 1 0.5\n0 0 1 0.5\n",
    "1 1 0.5\n0 0 x 1\n",
    "1 1 0.5\n1 0 0 1\n",
    "1 1 0.5\n0 0 0 1\n0 0 0 1\n",
    "2 1 0.5\n0 0 0 1.5 -0.5\n1 0 0 0 1\n",
    "2 1 0.5\n0 0 0 1 0\n",
    "1 1 1.5\n0 0 0 1\n",
])
def test_parse_errors(text):
    with pytest.raises(MdpError):
        parse_mdp(text)


def test_chain_is_communicating():
    mdp = chain_mdp()
    reach = (mdp.transition.sum(axis=1) > 0).astype(int)
    closure = np.linalg.matrix_power(reach + np.eye(mdp.num_states, dtype=int), mdp.num_states)
    assert np.all(closure > 0)


def test_env_samples_transition_frequencies():
    p = np.zeros((2, 1, 2))
    p[:, 0] = [0.3, 0.7]
    env = MdpEnv(Mdp(2, 1, p, np.zeros((2, 1)), 0.5), np.random.default_rng(0))
    env.reset()
    hits = sum(env.step(0)[0] for _ in range(20000))
    assert abs(hits / 20000 - 0.7) < 0.02


def test_rng_streams_independent_and_reproducible():
    a, b = rng_streams(9), rng_streams(9)
    assert a.policy.random() == b.policy.random()
    assert rng_streams(9).policy.random() != rng_streams(9).env.random()
