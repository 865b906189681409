"""Finite MDPs, Q-tables, exact planning and exploration policies."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

PROB_TOL = 1e-12
FILE_PROB_TOL = Decimal("1e-9")


class MdpError(ValueError):
    """Malformed MDP definition or a divergent planning computation."""


@dataclass
class Mdp:
    num_states: int
    num_actions: int
    transition: np.ndarray  # (S, A, S) probabilities P(s'|s,a)
    reward: np.ndarray  # (S, A)
    discount: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        s, a = self.num_states, self.num_actions
        if s < 1 or a < 1:
            raise MdpError("need at least one state and one action")
        if self.transition.shape != (s, a, s):
            raise MdpError(f"transition shape {self.transition.shape} != {(s, a, s)}")
        if self.reward.shape != (s, a):
            raise MdpError(f"reward shape {self.reward.shape} != {(s, a)}")
        if not 0.0 <= self.discount < 1.0:
            raise MdpError(f"discount must lie in [0, 1), got {self.discount}")
        if not np.all(np.isfinite(self.reward)):
            raise MdpError("rewards must be finite")
        if np.any(self.transition < 0) or np.any(self.transition > 1):
            raise MdpError("transition probabilities must lie in [0, 1]")
        sums = self.transition.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROB_TOL):
            raise MdpError("transition rows must sum to 1")


@dataclass
class QTable:
    values: np.ndarray  # (S, A)
    visit_counts: np.ndarray  # n(s, a)
    accepted_counts: np.ndarray  # m(s, a)
    state_visit_counts: np.ndarray  # n(s)

    @classmethod
    def zeros(cls, num_states: int, num_actions: int, initial: float = 0.0) -> "QTable":
        return cls(np.full((num_states, num_actions), float(initial)),
                   np.zeros((num_states, num_actions), dtype=np.int64),
                   np.zeros((num_states, num_actions), dtype=np.int64),
                   np.zeros(num_states, dtype=np.int64))

    @property
    def num_states(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "QTable":
        return QTable(self.values.copy(), self.visit_counts.copy(),
                      self.accepted_counts.copy(), self.state_visit_counts.copy())


@dataclass(frozen=True)
class Constant:
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"constant learning rate must lie in (0, 1], got {self.alpha}")

    def __call__(self, n: int) -> float:
        return self.alpha


@dataclass(frozen=True)
class RobbinsMonro:
    """``alpha_n = a0 / (n + 1)``: sums diverge, squares converge."""

    a0: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.a0 <= 1.0:
            raise ValueError(f"a0 must lie in (0, 1], got {self.a0}")

    def __call__(self, n: int) -> float:
        return self.a0 / (n + 1)


@dataclass(frozen=True)
class PolicyConfig:
    exploration_c: float = 0.5
    learning_rate: Constant | RobbinsMonro = field(default_factory=RobbinsMonro)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.exploration_c < 1.0:
            raise ValueError(f"exploration constant must lie in (0, 1), got {self.exploration_c}")


@dataclass
class RngStreams:
    """Independent generators for each consumer of randomness."""

    policy: np.random.Generator
    env: np.random.Generator
    noise: np.random.Generator
    keys: np.random.Generator


def rng_streams(seed: int) -> RngStreams:
    children = np.random.SeedSequence(seed).spawn(4)
    return RngStreams(*(np.random.default_rng(c) for c in children))


def bellman_backup(mdp: Mdp, v: np.ndarray) -> np.ndarray:
    """``Q(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) V(s')``."""
    return mdp.reward + mdp.discount * (mdp.transition @ v)


def value_iteration(mdp: Mdp, tol: float = 1e-10,
                    max_sweeps: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Synchronous sweeps until the sup-norm Bellman residual of ``V`` is at most ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.num_states)
    for _ in range(max_sweeps):
        q = bellman_backup(mdp, v)
        v_new = q.max(axis=1)
        if not np.all(np.isfinite(v_new)):
            raise MdpError("value iteration produced non-finite values")
        if np.max(np.abs(v_new - v)) <= tol:
            return v, q
        v = v_new
    raise MdpError(f"value iteration did not reach tol={tol} in {max_sweeps} sweeps")


def greedy_action(q: QTable, s: int) -> int:
    # np.argmax returns the first maximum, i.e. the lowest action index
    return int(np.argmax(q.values[s]))


def exploration_rate(q: QTable, s: int, cfg: PolicyConfig) -> float:
    return min(1.0, cfg.exploration_c / max(1, int(q.state_visit_counts[s])))


def epsilon_greedy_select(q: QTable, s: int, cfg: PolicyConfig,
                          rng: np.random.Generator) -> int:
    """Uniform random action with probability ``min(1, c / max(1, n(s)))``, else greedy.

    Always draws one uniform; draws the random action only when exploring.
    """
    if rng.random() < exploration_rate(q, s, cfg):
        return int(rng.integers(q.num_actions))
    return greedy_action(q, s)


def chain_mdp(num_states: int = 5, discount: float = 0.5) -> Mdp:
    """Deterministic cyclic chain used for the convergence checks.

    Action 0 advances one state, action 1 advances two (both wrap around), so
    every state keeps being visited under any policy.  All rewards are
    non-positive, which makes a zero-initialised table optimistic, and the
    action gaps are small so that rarely chosen actions still end up close to
    their optimal values.
    """
    s_, a_ = num_states, 2
    p = np.zeros((s_, a_, s_))
    r = np.zeros((s_, a_))
    for s in range(s_):
        p[s, 0, (s + 1) % s_] = 1.0
        p[s, 1, (s + 2) % s_] = 1.0
        r[s, 0] = -0.25 + 0.01 * (s % 3)
        r[s, 1] = -0.25 + 0.02 * ((s + 1) % 2)
    return Mdp(s_, a_, p, r, discount)


def parse_mdp(text: str) -> Mdp:
    """Parse the tabular text format.

    Header ``states actions gamma``, then one line per (s, a):
    ``s a r p(0) ... p(S-1)``.  Blank lines and ``#`` comments are ignored.
    """
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise MdpError("empty MDP file")
    try:
        hs, ha, hg = lines[0].split()
        num_s, num_a = int(hs), int(ha)
        gamma = float(Decimal(hg))
    except (ValueError, InvalidOperation) as exc:
        raise MdpError(f"bad header line {lines[0]!r}") from exc
    p = np.zeros((num_s, num_a, num_s))
    r = np.zeros((num_s, num_a))
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 3 + num_s:
            raise MdpError(f"row {lineno}: expected {3 + num_s} fields, got {len(fields)}")
        try:
            s, a = int(fields[0]), int(fields[1])
            reward = Decimal(fields[2])
            probs = [Decimal(x) for x in fields[3:]]
        except (ValueError, InvalidOperation) as exc:
            raise MdpError(f"row {lineno}: unparseable number") from exc
        if not (0 <= s < num_s and 0 <= a < num_a):
            raise MdpError(f"row {lineno}: index ({s}, {a}) out of range")
        if (s, a) in seen:
            raise MdpError(f"row {lineno}: duplicate row for ({s}, {a})")
        if abs(sum(probs) - 1) > FILE_PROB_TOL:
            raise MdpError(f"row {lineno}: probabilities sum to {sum(probs)}, not 1")
        if any(x < 0 for x in probs):
            raise MdpError(f"row {lineno}: negative probability")
        seen.add((s, a))
        r[s, a] = float(reward)
        p[s, a] = [float(x) for x in probs]
    if len(seen) != num_s * num_a:
        raise MdpError(f"expected {num_s * num_a} rows, got {len(seen)}")
    # rows are exact in decimal; renormalise the float image so the 1e-12 check holds
    p /= p.sum(axis=2, keepdims=True)
    return Mdp(num_s, num_a, p, r, gamma)


def load_mdp(path: str | Path) -> Mdp:
    return parse_mdp(Path(path).read_text())


def format_mdp(mdp: Mdp) -> str:
    out = [f"{mdp.num_states} {mdp.num_actions} {mdp.discount!r}"]
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            probs = " ".join(repr(float(x)) for x in mdp.transition[s, a])
            out.append(f"{s} {a} {float(mdp.reward[s, a])!r} {probs}")
    return "\n".join(out) + "\n"


class MdpEnv:
    """Sample-based view of an :class:`Mdp` (continuing; never terminal)."""

    def __init__(self, mdp: Mdp, rng: np.random.Generator, start_state: int = 0):
        self.mdp = mdp
        self.rng = rng
        self.start_state = start_state
        self.state = start_state
        self._cdf = np.cumsum(mdp.transition, axis=2)

    @property
    def num_states(self) -> int:
        return self.mdp.num_states

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    def reset(self) -> int:
        self.state = self.start_state
        return self.state

    def step(self, action: int) -> tuple[int, float, bool]:
        s = self.state
        cdf = self._cdf[s, action]
        nxt = int(np.searchsorted(cdf, self.rng.random(), side="right"))
        nxt = min(nxt, self.mdp.num_states - 1)
        self.state = nxt
        return nxt, float(self.mdp.reward[s, action]), False
