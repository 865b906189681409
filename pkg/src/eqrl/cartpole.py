"""Cart-pole balancing with the classical 162-box discretization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import PolicyConfig, QTable, epsilon_greedy_select, greedy_action

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12 * math.pi / 180

PUSH_LEFT, PUSH_RIGHT = 0, 1
NUM_ACTIONS = 2
NUM_BOXES = 162
TERMINAL_INDEX = NUM_BOXES
NUM_STATES = NUM_BOXES + 1

_DEG = math.pi / 180
X_EDGES = (-0.8, 0.8)
X_DOT_EDGES = (-0.5, 0.5)
THETA_EDGES = (-6 * _DEG, -1 * _DEG, 0.0, 1 * _DEG, 6 * _DEG)
THETA_DOT_EDGES = (-50 * _DEG, 50 * _DEG)

TRACE_HEADER = ("t", "x", "x_dot", "theta", "theta_dot", "action", "reward", "state_index")


class TerminalStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.x_dot, self.theta, self.theta_dot)

    def negated(self) -> "CartPoleState":
        return CartPoleState(-self.x, -self.x_dot, -self.theta, -self.theta_dot)


def is_terminal(state: CartPoleState) -> bool:
    return abs(state.x) > X_LIMIT or abs(state.theta) > THETA_LIMIT


def dynamics(state: CartPoleState, force: float) -> CartPoleState:
    """One explicit Euler step of the frictionless cart-pole equations."""
    x, x_dot, theta, theta_dot = state.as_tuple()
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t * cos_t / TOTAL_MASS))
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS
    return CartPoleState(x + TAU * x_dot, x_dot + TAU * x_acc,
                         theta + TAU * theta_dot, theta_dot + TAU * theta_acc)


def step(state: CartPoleState, action: int) -> tuple[CartPoleState, float, bool]:
    """Advance one step; reward 1 while the pole stays up, 0 on failure."""
    if is_terminal(state):
        raise TerminalStateError("cannot step from a terminal state")
    if action not in (PUSH_LEFT, PUSH_RIGHT):
        raise ValueError(f"unknown action {action}")
    force = FORCE_MAG if action == PUSH_RIGHT else -FORCE_MAG
    nxt = dynamics(state, force)
    terminal = is_terminal(nxt)
    return nxt, 0.0 if terminal else 1.0, terminal


def _bin(value: float, edges) -> int:
    # half-open [lo, hi) bins: a value equal to an edge goes up
    for i, edge in enumerate(edges):
        if value < edge:
            return i
    return len(edges)


def discretize(state: CartPoleState) -> int:
    if is_terminal(state):
        return TERMINAL_INDEX
    ix = _bin(state.x, X_EDGES)
    iv = _bin(state.x_dot, X_DOT_EDGES)
    it = _bin(state.theta, THETA_EDGES)
    iw = _bin(state.theta_dot, THETA_DOT_EDGES)
    return ((ix * 3 + iv) * 6 + it) * 3 + iw


def random_start(rng: np.random.Generator, spread: float = 0.05) -> CartPoleState:
    return CartPoleState(*(float(v) for v in rng.uniform(-spread, spread, 4)))


class CartPoleEnv:
    """Discrete-state view for the tabular learners."""

    num_states = NUM_STATES
    num_actions = NUM_ACTIONS

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.raw = random_start(rng)

    def reset(self) -> int:
        self.raw = random_start(self.rng)
        return discretize(self.raw)

    def step(self, action: int) -> tuple[int, float, bool]:
        self.raw, reward, terminal = step(self.raw, action)
        return discretize(self.raw), reward, terminal


@dataclass
class Episode:
    length: int
    trace: list[tuple]


def episode_runner(q: QTable | None, cfg: PolicyConfig | None, max_steps: int,
                   rng: np.random.Generator, *, mode: str = "greedy",
                   record: bool = False) -> Episode:
    """Run one episode from a random near-upright start.

    ``mode`` is ``"greedy"``, ``"epsilon"`` (decreasing-epsilon on ``q``) or
    ``"random"`` (uniform actions, ``q`` ignored).  Returns the number of
    steps survived, capped at ``max_steps``.
    """
    state = random_start(rng)
    trace = []
    for t in range(max_steps):
        idx = discretize(state)
        if mode == "random":
            action = int(rng.integers(NUM_ACTIONS))
        elif mode == "epsilon":
            action = epsilon_greedy_select(q, idx, cfg, rng)
        elif mode == "greedy":
            action = greedy_action(q, idx)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        nxt, reward, terminal = step(state, action)
        if record:
            trace.append((t, *state.as_tuple(), action, reward, idx))
        state = nxt
        if terminal:
            return Episode(t + 1, trace)
    return Episode(max_steps, trace)


def mean_episode_length(q, cfg, episodes: int, max_steps: int, rng: np.random.Generator,
                        mode: str = "greedy") -> float:
    return float(np.mean([episode_runner(q, cfg, max_steps, rng, mode=mode).length
                          for _ in range(episodes)]))


def write_episode_csv(path: str | Path, episode: Episode) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in episode.trace:
            w.writerow(row)
