"""Plaintext SARSA(0)/Q-learning and the blocking-state delayed-update scheduler.

Time steps start at 1.  Within step ``t`` the loop is: act, observe, pick the
next action from the current table, form the record ``z_t``, offer it to the
scheduler, then tick, which advances the clock to ``t + 1`` and applies every
job due at that time.  A job accepted at ``t`` is therefore visible to the
action choice made at step ``t + L``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import Mdp, MdpEnv, PolicyConfig, QTable, epsilon_greedy_select, rng_streams

NO_ACTION = -1
SNAPSHOT_EVERY = 1000
TRACE_HEADER = ("step", "s", "a", "reward", "accepted", "entry_updated", "q_value")


@dataclass(frozen=True)
class TransitionRecord:
    """What the client communicates for one update: ``(Q(s,a), r, Q(s',a'), alpha, gamma)``."""

    q_sa: float
    reward: float
    q_next: float
    alpha: float
    gamma: float
    origin: tuple[int, int, int, int]  # (s, a, s', a'); a' = NO_ACTION after termination

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not all(math.isfinite(x) for x in (self.q_sa, self.reward, self.q_next)):
            raise ValueError("record values must be finite")


def sarsa_update(q_sa: float, r: float, q_next: float, alpha: float, gamma: float) -> float:
    return (1.0 - alpha) * q_sa + alpha * (r + gamma * q_next)


def q_learning_step(q: QTable, s: int, a: int, r: float, s_next: int, schedule,
                    gamma: float) -> QTable:
    """Off-policy update of entry ``(s, a)`` in place; returns ``q``."""
    alpha = schedule(int(q.visit_counts[s, a]))
    target = r + gamma * float(np.max(q.values[s_next]))
    q.values[s, a] = (1.0 - alpha) * q.values[s, a] + alpha * target
    q.visit_counts[s, a] += 1
    return q


class Offer(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


@dataclass
class Job:
    record: TransitionRecord
    m_index: int
    accepted_at: int
    completes_at: int


@dataclass
class AppliedUpdate:
    origin: tuple[int, int, int, int]
    m_index: int
    time: int
    old_value: float
    new_value: float
    # Same formula evaluated on the table as it stands at application time
    current_form_value: float


@dataclass
class BlockingScheduler:
    latency: int
    clock: int = 1
    blocking: set[int] = field(default_factory=set)
    in_flight: list[Job] = field(default_factory=list)

    def __post_init__(self):
        if self.latency < 1:
            raise ValueError("latency must be at least 1")

    def offer(self, q: QTable, z: TransitionRecord) -> Offer:
        s, a = z.origin[0], z.origin[1]
        if s in self.blocking:
            return Offer.REJECTED
        self.in_flight.append(Job(z, int(q.accepted_counts[s, a]), self.clock,
                                  self.clock + self.latency))
        self.blocking.add(s)
        return Offer.ACCEPTED

    def tick(self, q: QTable) -> list[AppliedUpdate]:
        self.clock += 1
        due = [job for job in self.in_flight if job.completes_at == self.clock]
        if not due:
            return []
        self.in_flight = [job for job in self.in_flight if job.completes_at != self.clock]
        applied = []
        for job in due:
            z = job.record
            s, a, s_next, a_next = z.origin
            old = float(q.values[s, a])
            new = sarsa_update(z.q_sa, z.reward, z.q_next, z.alpha, z.gamma)
            q_next_now = 0.0 if a_next == NO_ACTION else float(q.values[s_next, a_next])
            current = sarsa_update(old, z.reward, q_next_now, z.alpha, z.gamma)
            q.values[s, a] = new
            q.accepted_counts[s, a] += 1
            self.blocking.discard(s)
            applied.append(AppliedUpdate(z.origin, job.m_index, self.clock, old, new, current))
        return applied


def scheduler_offer(sch: BlockingScheduler, q: QTable, z: TransitionRecord) -> Offer:
    return sch.offer(q, z)


def scheduler_tick(sch: BlockingScheduler, q: QTable) -> list[AppliedUpdate]:
    return sch.tick(q)


@dataclass
class TraceRow:
    step: int
    s: int
    a: int
    reward: float
    accepted: bool
    entry_updated: str
    q_value: float | None


@dataclass
class RunResult:
    q: QTable
    snapshots: list[tuple[int, np.ndarray]]
    trace: list[TraceRow]
    applied: list[AppliedUpdate]


def _visit(q: QTable, s: int, a: int) -> None:
    q.visit_counts[s, a] += 1


def run_sarsa(mdp: Mdp, cfg: PolicyConfig, steps: int, *, q: QTable | None = None,
              start_state: int = 0, snapshot_every: int = SNAPSHOT_EVERY) -> RunResult:
    """Vanilla SARSA(0) with the decreasing-epsilon policy; ``alpha`` indexed by ``n(s,a)``."""
    streams = rng_streams(cfg.seed)
    env = MdpEnv(mdp, streams.env, start_state)
    q = QTable.zeros(mdp.num_states, mdp.num_actions) if q is None else q
    gamma = mdp.discount
    s = env.reset()
    a = epsilon_greedy_select(q, s, cfg, streams.policy)
    q.state_visit_counts[s] += 1
    snapshots, trace = [], []
    for t in range(1, steps + 1):
        s_next, r, _ = env.step(a)
        a_next = epsilon_greedy_select(q, s_next, cfg, streams.policy)
        alpha = cfg.learning_rate(int(q.visit_counts[s, a]))
        new = sarsa_update(float(q.values[s, a]), r, float(q.values[s_next, a_next]),
                           alpha, gamma)
        q.values[s, a] = new
        q.accepted_counts[s, a] += 1
        _visit(q, s, a)
        q.state_visit_counts[s_next] += 1
        trace.append(TraceRow(t, s, a, r, True, f"{s}:{a}", new))
        if t % snapshot_every == 0:
            snapshots.append((t, q.values.copy()))
        s, a = s_next, a_next
    return RunResult(q, snapshots, trace, [])


def run_blocking_sarsa(mdp: Mdp, cfg: PolicyConfig, latency: int, steps: int, *,
                       q: QTable | None = None, start_state: int = 0,
                       snapshot_every: int = SNAPSHOT_EVERY) -> RunResult:
    """SARSA(0) with delayed updates and blocking states; ``alpha`` indexed by ``m(s,a)``."""
    streams = rng_streams(cfg.seed)
    env = MdpEnv(mdp, streams.env, start_state)
    q = QTable.zeros(mdp.num_states, mdp.num_actions) if q is None else q
    sch = BlockingScheduler(latency)
    gamma = mdp.discount
    s = env.reset()
    a = epsilon_greedy_select(q, s, cfg, streams.policy)
    q.state_visit_counts[s] += 1
    snapshots, trace, applied_all = [], [], []
    for t in range(1, steps + 1):
        s_next, r, _ = env.step(a)
        a_next = epsilon_greedy_select(q, s_next, cfg, streams.policy)
        z = TransitionRecord(float(q.values[s, a]), r, float(q.values[s_next, a_next]),
                             cfg.learning_rate(int(q.accepted_counts[s, a])), gamma,
                             (s, a, s_next, a_next))
        outcome = sch.offer(q, z)
        _visit(q, s, a)
        q.state_visit_counts[s_next] += 1
        applied = sch.tick(q)
        applied_all.extend(applied)
        entry = ";".join(f"{u.origin[0]}:{u.origin[1]}" for u in applied)
        value = applied[-1].new_value if applied else None
        trace.append(TraceRow(t, s, a, r, outcome is Offer.ACCEPTED, entry, value))
        if t % snapshot_every == 0:
            snapshots.append((t, q.values.copy()))
        s, a = s_next, a_next
    return RunResult(q, snapshots, trace, applied_all)


def replay_blocking(visits, num_states: int, num_actions: int, latency: int,
                    until: int | None = None) -> tuple[list[Offer], QTable, BlockingScheduler]:
    """Drive the scheduler with a fixed list of visited ``(s, a)`` pairs (time 1, 2, ...).

    Rewards are zero and ``s'``/``a'`` are taken from the next visit; only the
    accept/reject pattern and the revision counts ``m(s,a)`` are of interest.
    Ticks continue past the last visit up to ``until``.
    """
    visits = list(visits)
    q = QTable.zeros(num_states, num_actions)
    sch = BlockingScheduler(latency)
    outcomes = []
    for i, (s, a) in enumerate(visits):
        s_next, a_next = visits[i + 1] if i + 1 < len(visits) else (s, a)
        z = TransitionRecord(0.0, 0.0, 0.0, 1.0, 0.0, (s, a, s_next, a_next))
        outcomes.append(sch.offer(q, z))
        q.visit_counts[s, a] += 1
        if until is None or sch.clock < until:
            sch.tick(q)
    while until is not None and sch.clock < until:
        sch.tick(q)
    return outcomes, q, sch


class BatchCollector:
    """Collects SARSA records in batches with the Q-table frozen per batch.

    Holds the environment position and the pending action between batches
    so consecutive batches continue one trajectory.
    """

    def __init__(self, env, cfg: PolicyConfig, gamma: float, rng: np.random.Generator):
        self.env = env
        self.cfg = cfg
        self.gamma = gamma
        self.rng = rng
        self.state: int | None = None
        self.action: int | None = None
        self.episodes = 0
        self.episode_lengths: list[int] = []
        self._episode_steps = 0

    def _start(self, q: QTable) -> None:
        self.state = self.env.reset()
        self.action = epsilon_greedy_select(q, self.state, self.cfg, self.rng)
        q.state_visit_counts[self.state] += 1

    def collect(self, q: QTable, size: int) -> list[TransitionRecord]:
        if size < 1:
            raise ValueError("batch size must be at least 1")
        if self.state is None:
            self._start(q)
        frozen = q.values.copy()
        records = []
        for _ in range(size):
            s, a = self.state, self.action
            s_next, r, terminal = self.env.step(a)
            self._episode_steps += 1
            if terminal:
                a_next = NO_ACTION
                q_next = 0.0
            else:
                a_next = epsilon_greedy_select(q, s_next, self.cfg, self.rng)
                q_next = float(frozen[s_next, a_next])
            alpha = self.cfg.learning_rate(int(q.accepted_counts[s, a]))
            records.append(TransitionRecord(float(frozen[s, a]), r, q_next, alpha, self.gamma,
                                            (s, a, s_next, a_next)))
            _visit(q, s, a)
            if terminal:
                self.episodes += 1
                self.episode_lengths.append(self._episode_steps)
                self._episode_steps = 0
                self._start(q)
            else:
                q.state_visit_counts[s_next] += 1
                self.state, self.action = s_next, a_next
        return records


def batch_collect(collector: BatchCollector, q: QTable, size: int) -> list[TransitionRecord]:
    return collector.collect(q, size)


def plain_batch_update(records) -> list[float]:
    return [sarsa_update(z.q_sa, z.reward, z.q_next, z.alpha, z.gamma) for z in records]


def batch_apply(q: QTable, records, results, combine: str = "last") -> QTable:
    """Write results back in order; ``m(s,a)`` counts every record.

    With ``combine="last"`` a pair that appears several times in one batch
    keeps its last result.  ``combine="sequential"`` instead chains the
    updates as if applied one after another, each with its own target taken
    from the frozen table: since ``result = (1-a) Q_frozen + a * target``,
    the step is ``Q <- (1-a) Q + result - (1-a) Q_frozen``.
    """
    records = list(records)
    results = list(results)
    if len(records) != len(results):
        raise ValueError(f"{len(records)} records but {len(results)} results")
    if combine not in ("last", "sequential"):
        raise ValueError(f"unknown combine mode {combine!r}")
    for z, value in zip(records, results):
        s, a = z.origin[0], z.origin[1]
        if combine == "last":
            q.values[s, a] = value
        else:
            keep = 1.0 - z.alpha
            q.values[s, a] = keep * q.values[s, a] + (float(value) - keep * z.q_sa)
        q.accepted_counts[s, a] += 1
    return q


def write_trace_csv(path: str | Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row.step, row.s, row.a, repr(float(row.reward)), int(row.accepted),
                        row.entry_updated, "" if row.q_value is None else repr(row.q_value)])


def write_snapshots_csv(path: str | Path, snapshots) -> None:
    """All snapshots in one file: ``step,s,a0,a1,...`` rows, one per state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not snapshots:
            w.writerow(["step", "s"])
            return
        num_actions = snapshots[0][1].shape[1]
        w.writerow(["step", "s"] + [f"a{i}" for i in range(num_actions)])
        for step, values in snapshots:
            for s, row in enumerate(values):
                w.writerow([step, s] + [repr(float(x)) for x in row])
