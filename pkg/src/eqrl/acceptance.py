"""Acceptance checks: each returns a :class:`CriterionResult` with the measured value and bound."""

from __future__ import annotations

import csv
import difflib
import io
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cartpole import NUM_STATES, CartPoleEnv, mean_episode_length
from .circuit import (OPS, REFERENCE_PRECISION_PERCENT, BATCH_OP_COUNTS, OpCounter,
                      encrypted_batch_update, measure_precision, plain_batch_update_vectors,
                      random_batch)
from .ckks import (decode, decrypt, deserialize_ciphertext, encode, encrypt, he_add, he_mul,
                   keygen, relinearize, rescale, serialize_ciphertext, table1_params,
                   test_small_params)
from .ckks.arith import NttTables, find_ntt_primes, mulmod, negacyclic_schoolbook
from .ckks.params import CkksParams
from .cloud import ClientSession, InProcessCloud, loopback_cloud, run_encrypted_training
from .learner import (BatchCollector, batch_apply, plain_batch_update, replay_blocking,
                      run_blocking_sarsa, run_sarsa)
from .mdp import (Constant, PolicyConfig, QTable, RobbinsMonro, chain_mdp, rng_streams,
                  value_iteration)

# Blocking-state scenario: |S| = |A| = 2, L = 3, visits (s, a) at t = 1..10 (0-based indexes)
FIG_VISITS = ((0, 0), (0, 1), (1, 1), (0, 1), (0, 0), (1, 1), (1, 0), (0, 0), (0, 1), (1, 0))
FIG_LATENCY = 3
FIG_UNTIL = 10
GOLDEN_NAME = "fig_blocking_golden.csv"

CONVERGENCE_TOL = 0.05
CONVERGENCE_STEPS = 200_000
CONVERGENCE_LATENCIES = (1, 3, 10)
PRECISION_BOUND = 5e-4
ORACLE_BOUND = 1e-4
CARTPOLE_FACTOR = 10.0

# Cart-pole demo settings (see README)
CARTPOLE_GAMMA = 0.99
CARTPOLE_ALPHA = 0.1
CARTPOLE_COMBINE = "sequential"
CARTPOLE_BATCH = 1000
CARTPOLE_BATCHES = 500
CARTPOLE_EVAL_EPISODES = 100
CARTPOLE_MAX_STEPS = 10_000


@dataclass
class CriterionResult:
    name: str
    measured: str
    bound: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"{status}  {self.name}: measured {self.measured}; bound {self.bound}; "
                f"{self.seconds:.1f}s{extra}")


# -- operation counts --------------------------------------------------------

def op_counts(seed: int = 0, profiles=("test-small", "table1")) -> CriterionResult:
    limits = {"test-small": 0.5, "table1": 5.0}
    makers = {"test-small": test_small_params, "table1": table1_params}
    expected = tuple(BATCH_OP_COUNTS[op] for op in OPS)
    rng = np.random.default_rng(seed)
    ok, parts = True, []
    for name in profiles:
        params = makers[name]()
        keys = keygen(params, rng)
        batch = random_batch(rng, min(1000, params.slot_count))
        counter = OpCounter()
        start = time.perf_counter()
        encrypted_batch_update(batch, keys, params, rng, counter)
        elapsed = time.perf_counter() - start
        counts = counter.count_tuple()
        ok &= counts == expected and elapsed < limits[name]
        parts.append(f"{name} {counts} in {elapsed:.3f}s")
    return CriterionResult("op-counts", "; ".join(parts),
                           f"{expected} exactly, < 0.5s test-small, < 5s table1", ok)


# -- precision ---------------------------------------------------------------

def precision(batches: int = 100, size: int = 1000, seed: int = 0,
              params: CkksParams | None = None) -> CriterionResult:
    params = table1_params() if params is None else params
    rng = np.random.default_rng(seed)
    rep = measure_precision(batches, params, rng, size=min(size, params.slot_count))
    detail = (f"range-normalised {rep.max_range_relative_percent:.5f}%, max abs "
              f"{rep.max_abs_error:.2e}, reference {REFERENCE_PRECISION_PERCENT}%")
    return CriterionResult("precision", f"{rep.max_relative_percent:.5f}% max relative",
                           f"<= {100 * PRECISION_BOUND:.2f}%",
                           rep.max_relative_error <= PRECISION_BOUND, detail)


# -- circuit vs oracle -------------------------------------------------------

def circuit_oracle(trials: int = 100, size: int = 64, seed: int = 7) -> CriterionResult:
    params = test_small_params()
    rng = np.random.default_rng(seed)
    keys = keygen(params, rng)
    worst = 0.0
    for _ in range(trials):
        batch = random_batch(rng, size)
        enc = encrypted_batch_update(batch, keys, params, rng)
        plain = plain_batch_update_vectors(batch)
        worst = max(worst, float(np.max(np.abs(enc - plain) / np.maximum(np.abs(plain), 1.0))))
    return CriterionResult("circuit-oracle", f"{worst:.3e}", f"<= {ORACLE_BOUND:g}",
                           worst <= ORACLE_BOUND, f"{trials} trials of {size} slots")


# -- blocking scenario golden trace ------------------------------------------

def fig_scenario_rows() -> list[list[str]]:
    outcomes, q, sch = replay_blocking(FIG_VISITS, 2, 2, FIG_LATENCY, until=FIG_UNTIL)
    rows = [["kind", "t", "s", "a", "value"]]
    for t, ((s, a), o) in enumerate(zip(FIG_VISITS, outcomes), start=1):
        rows.append(["offer", str(t), str(s), str(a), "A" if o.value == "accepted" else "R"])
    for s in range(2):
        for a in range(2):
            rows.append(["revision", str(FIG_UNTIL), str(s), str(a), str(int(q.accepted_counts[s, a]))])
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def golden_text() -> str:
    return resources.files("eqrl").joinpath("data", GOLDEN_NAME).read_text()


def golden_trace(golden_path: str | Path | None = None,
                 diff_dir: str | Path | None = None) -> CriterionResult:
    expected = Path(golden_path).read_text() if golden_path else golden_text()
    actual = rows_to_csv(fig_scenario_rows())
    if actual == expected:
        return CriterionResult("golden-trace", "matches", "exact match", True)
    diff = "".join(difflib.unified_diff(expected.splitlines(True), actual.splitlines(True),
                                        "golden", "replay"))
    diff_path = Path(diff_dir or ".") / "golden_trace.diff"
    diff_path.parent.mkdir(parents=True, exist_ok=True)
    diff_path.write_text(diff)
    return CriterionResult("golden-trace", "differs", "exact match", False,
                           f"diff written to {diff_path}")


# -- convergence -------------------------------------------------------------

def convergence(seed: int = 0, steps: int = CONVERGENCE_STEPS,
                latencies=CONVERGENCE_LATENCIES) -> CriterionResult:
    mdp = chain_mdp()
    _, q_star = value_iteration(mdp, tol=1e-12)
    cfg = PolicyConfig(0.5, RobbinsMonro(1.0), seed)
    errors = {}
    for latency in latencies:
        res = run_blocking_sarsa(mdp, cfg, latency, steps)
        errors[latency] = float(np.max(np.abs(res.q.values - q_star)))
    worst = max(errors.values())
    measured = ", ".join(f"L={k}: {v:.4f}" for k, v in errors.items())
    return CriterionResult("convergence", measured, f"<= {CONVERGENCE_TOL} each",
                           worst <= CONVERGENCE_TOL, f"{steps} steps")


# -- L = 1 degeneracy --------------------------------------------------------

def latency_one(seed: int = 0, steps: int = 20_000) -> CriterionResult:
    mdp = chain_mdp()
    cfg = PolicyConfig(0.5, RobbinsMonro(1.0), seed)
    plain = run_sarsa(mdp, cfg, steps)
    blocked = run_blocking_sarsa(mdp, cfg, 1, steps)
    same_q = plain.q.values.tobytes() == blocked.q.values.tobytes()
    same_path = all((p.s, p.a, p.reward) == (b.s, b.a, b.reward)
                    for p, b in zip(plain.trace, blocked.trace))
    ok = same_q and same_path and all(r.accepted for r in blocked.trace)
    return CriterionResult("latency-one", "bit-identical" if ok else "differs",
                           "bit-identical", ok, f"{steps} steps")


# -- HE unit properties ------------------------------------------------------

def he_units(seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    big = table1_params()
    v = rng.uniform(-10, 10, big.slot_count)
    enc_err = float(np.max(np.abs(decode(encode(big, v)) - v)))

    small = test_small_params()
    keys = keygen(small, rng)
    n = small.slot_count
    u, w = rng.uniform(-10, 10, n), rng.uniform(-10, 10, n)
    cu, cw = (encrypt(encode(small, x), keys.secret, rng) for x in (u, w))
    add_err = float(np.max(np.abs(decode(decrypt(he_add(cu, cw), keys.secret)) - (u + w))))
    u2, w2 = rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)
    cu2, cw2 = (encrypt(encode(small, x), keys.secret, rng) for x in (u2, w2))
    prod = rescale(relinearize(he_mul(cu2, cw2), keys.relin))
    got = decode(decrypt(prod, keys.secret))
    mul_err = float(np.max(np.abs(got - u2 * w2) / np.maximum(np.abs(u2 * w2), 1.0)))

    ntt_ok = ntt_matches_schoolbook(rng)
    ser_ok = serialize_ciphertext(deserialize_ciphertext(serialize_ciphertext(prod), small)) \
        == serialize_ciphertext(prod)
    ok = enc_err < 1e-5 and add_err < 1e-4 and mul_err < 1e-4 and ntt_ok and ser_ok
    measured = (f"encode {enc_err:.1e}, add {add_err:.1e}, mul {mul_err:.1e}, "
                f"ntt {'ok' if ntt_ok else 'MISMATCH'}, serialize {'ok' if ser_ok else 'MISMATCH'}")
    return CriterionResult("he-units", measured,
                           "encode < 1e-5, add < 1e-4, mul < 1e-4, exact ntt/serialize", ok)


def ntt_matches_schoolbook(rng: np.random.Generator, sizes=(4, 8, 16, 32, 64),
                           cases: int = 5) -> bool:
    for n in sizes:
        primes = find_ntt_primes(30, n, 2)
        tables = NttTables(n, tuple(primes))
        p, pinv = tables.column([0, 1])
        for _ in range(cases):
            a = np.stack([rng.integers(0, q, n) for q in primes])
            b = np.stack([rng.integers(0, q, n) for q in primes])
            prod = tables.inverse(mulmod(tables.forward(a, [0, 1]), tables.forward(b, [0, 1]),
                                         p, pinv), [0, 1])
            for row, q in enumerate(primes):
                if list(prod[row]) != negacyclic_schoolbook(a[row], b[row], q):
                    return False
    return True


# -- transport transparency --------------------------------------------------

SENTINELS = (123456.78125, -98765.4375)


def transport(seed: int = 0, batch_size: int = 32, batches: int = 4) -> CriterionResult:
    params = test_small_params()
    streams = rng_streams(seed)
    keys = keygen(params, streams.keys)
    mdp = chain_mdp()
    cfg = PolicyConfig(0.5, RobbinsMonro(1.0), seed)
    local = run_encrypted_training(mdp, cfg, batch_size, batches,
                                   InProcessCloud(keys, params, rng_streams(seed).noise))
    sock, server = loopback_cloud(params)
    session = ClientSession.connect(sock, keys, params, rng_streams(seed).noise)
    try:
        wire = run_encrypted_training(mdp, cfg, batch_size, batches, session)
        # plant recognisable plaintext values and check the cloud never holds them
        sentinel_batch = random_batch(np.random.default_rng(seed), 8)
        sentinel_batch.q[:2] = SENTINELS
        sentinel_batch.r[:2] = SENTINELS
        session.upload_batch(sentinel_batch)
    finally:
        session.close()
        server.shutdown()
    identical = (local.response_digest == wire.response_digest
                 and local.q.values.tobytes() == wire.q.values.tobytes())
    leaked = cloud_holds_secrets(server, keys, SENTINELS)
    ok = identical and not leaked
    measured = (f"{'identical' if identical else 'DIFFERENT'} ciphertexts over {batches} batches, "
                f"{'sentinel or key bytes found' if leaked else 'no sentinel or key bytes'}")
    return CriterionResult("transport", measured, "identical, no leak", ok)


def cloud_holds_secrets(server, keys, sentinels) -> bool:
    needles = [np.float64(x).tobytes() for x in sentinels]
    needles += [repr(float(x)).encode() for x in sentinels]
    needles.append(keys.secret.coeffs.astype("<u8").tobytes()[:64])
    needles.append(keys.secret.ntt.astype("<u8").tobytes()[:64])
    for state in server.sessions:
        blob = state.retained_bytes()
        if any(needle in blob for needle in needles):
            return True
    return False


# -- cart-pole ---------------------------------------------------------------

@dataclass
class CartpoleOutcome:
    q: QTable
    baseline: float
    trained: float

    @property
    def ratio(self) -> float:
        return self.trained / self.baseline


def train_cartpole(seed: int = 0, batches: int = CARTPOLE_BATCHES,
                   batch_size: int = CARTPOLE_BATCH, session=None) -> QTable:
    """Batch SARSA on cart-pole; plaintext updates unless an HE ``session`` is given."""
    cfg = PolicyConfig(0.5, Constant(CARTPOLE_ALPHA), seed)
    initial = 1.0 / (1.0 - CARTPOLE_GAMMA)
    if session is not None:
        env = CartPoleEnv(rng_streams(seed).env)
        return run_encrypted_training(env, cfg, batch_size, batches, session,
                                      gamma=CARTPOLE_GAMMA, initial=initial,
                                      combine=CARTPOLE_COMBINE).q
    streams = rng_streams(seed)
    q = QTable.zeros(NUM_STATES, 2, initial)
    collector = BatchCollector(CartPoleEnv(streams.env), cfg, CARTPOLE_GAMMA, streams.policy)
    for _ in range(batches):
        records = collector.collect(q, batch_size)
        batch_apply(q, records, plain_batch_update(records), combine=CARTPOLE_COMBINE)
    return q


def evaluate_cartpole(q: QTable, seed: int = 0) -> CartpoleOutcome:
    baseline = mean_episode_length(None, None, CARTPOLE_EVAL_EPISODES, CARTPOLE_MAX_STEPS,
                                   np.random.default_rng(seed + 1000), mode="random")
    trained = mean_episode_length(q, None, CARTPOLE_EVAL_EPISODES, CARTPOLE_MAX_STEPS,
                                  np.random.default_rng(seed + 2000))
    return CartpoleOutcome(q, baseline, trained)


def cartpole(seed: int = 0, batches: int = CARTPOLE_BATCHES) -> CriterionResult:
    out = evaluate_cartpole(train_cartpole(seed, batches), seed)
    return CriterionResult("cartpole", f"{out.trained:.1f} steps = {out.ratio:.1f}x baseline "
                           f"{out.baseline:.2f}", f">= {CARTPOLE_FACTOR:g}x",
                           out.ratio >= CARTPOLE_FACTOR, f"plaintext batches, {batches} x "
                           f"{CARTPOLE_BATCH}")


CRITERIA = {
    "op-counts": op_counts,
    "precision": precision,
    "circuit-oracle": circuit_oracle,
    "golden-trace": golden_trace,
    "convergence": convergence,
    "latency-one": latency_one,
    "he-units": he_units,
    "transport": transport,
    "cartpole": cartpole,
}


def run_criterion(name: str, **kwargs) -> CriterionResult:
    if name not in CRITERIA:
        raise KeyError(name)
    start = time.perf_counter()
    result = CRITERIA[name](**kwargs)
    result.seconds = time.perf_counter() - start
    return result
