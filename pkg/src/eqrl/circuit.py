"""Encrypted batch SARSA(0) update: packing, the depth-2 circuit, unpacking.

The cloud evaluates, slot by slot,

    Q <- Q - a*Q + a*r + (a*g)*Q'

with four ciphertext products and three additions (the subtraction counts as
one).  ``alpha`` is encoded at the scale of the top data prime and ``gamma``
at the scale of the next one, so after each rescale every term lands on the
default scale exactly and the additions never mix scales.
"""

from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ckks import (Ciphertext, CkksParams, KeySet, RelinKey, decode, decrypt, encode, encrypt,
                   he_add, he_mul, he_sub, keygen, mod_switch_to, relinearize, rescale)
from .ckks.errors import CkksError
from .learner import plain_batch_update

OPS = ("Encode", "Encrypt", "Multiply", "Relinearize", "Rescale", "Addition", "Decrypt", "Decode")
CLIENT_OPS = ("Encode", "Encrypt", "Decrypt", "Decode")
CLOUD_OPS = ("Multiply", "Relinearize", "Rescale", "Addition")
# Number of each operation in one batch update
BATCH_OP_COUNTS = {"Encode": 5, "Encrypt": 5, "Multiply": 4, "Relinearize": 4, "Rescale": 4,
                   "Addition": 3, "Decrypt": 1, "Decode": 1}
# Published SEAL milliseconds per batch, shown next to local timings
REFERENCE_TIMES_MS = {"Encode": 6.695, "Encrypt": 33.519, "Multiply": 2.549,
                      "Relinearize": 14.909, "Rescale": 7.886, "Addition": 0.074,
                      "Decrypt": 1.225, "Decode": 4.881}
REFERENCE_PRECISION_PERCENT = 0.0063
OPERANDS = ("Q", "r", "Q'", "alpha", "gamma")


class CircuitError(CkksError):
    """An operand of the update circuit is at the wrong level or scale."""

    def __init__(self, operand: str, message: str):
        super().__init__(f"operand {operand}: {message}")
        self.operand = operand


@dataclass
class OpCounter:
    counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(OPS, 0))
    seconds: dict[str, float] = field(default_factory=lambda: dict.fromkeys(OPS, 0.0))

    @contextlib.contextmanager
    def timed(self, op: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[op] += time.perf_counter() - start
            self.counts[op] += 1

    def merge(self, other: "OpCounter") -> "OpCounter":
        for op in OPS:
            self.counts[op] += other.counts[op]
            self.seconds[op] += other.seconds[op]
        return self

    def count_tuple(self) -> tuple[int, ...]:
        return tuple(self.counts[op] for op in OPS)

    def restricted(self, ops) -> "OpCounter":
        out = OpCounter()
        for op in ops:
            out.counts[op] = self.counts[op]
            out.seconds[op] = self.seconds[op]
        return out


@dataclass
class PackedBatch:
    q: np.ndarray
    r: np.ndarray
    q_next: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    origins: list[tuple[int, int, int, int]]

    def __post_init__(self):
        lengths = {len(v) for v in (self.q, self.r, self.q_next, self.alpha, self.gamma)}
        if len(lengths) != 1:
            raise ValueError("all packed vectors must have the same length")

    def __len__(self) -> int:
        return len(self.q)

    @classmethod
    def from_records(cls, records) -> "PackedBatch":
        records = list(records)
        return cls(np.array([z.q_sa for z in records], dtype=np.float64),
                   np.array([z.reward for z in records], dtype=np.float64),
                   np.array([z.q_next for z in records], dtype=np.float64),
                   np.array([z.alpha for z in records], dtype=np.float64),
                   np.array([z.gamma for z in records], dtype=np.float64),
                   [z.origin for z in records])

    def vectors(self) -> tuple[np.ndarray, ...]:
        return self.q, self.r, self.q_next, self.alpha, self.gamma


def operand_scales(params: CkksParams, level: int | None = None) -> tuple[float, ...]:
    """Encoding scales for ``(Q, r, Q', alpha, gamma)`` at ``level``."""
    level = params.max_level if level is None else level
    if level < 2:
        raise CircuitError("Q", f"the update needs two rescales but level is {level}")
    delta = params.scale
    return (delta, delta, delta, float(params.moduli[level]), float(params.moduli[level - 1]))


def pack_and_encrypt(batch, keys: KeySet, params: CkksParams, rng: np.random.Generator,
                     counter: OpCounter | None = None,
                     use_public_key: bool = False) -> tuple[list[Ciphertext], OpCounter]:
    """Encode and encrypt the five operand vectors of a batch."""
    if not isinstance(batch, PackedBatch):
        batch = PackedBatch.from_records(batch)
    size = len(batch)
    if not 1 <= size <= params.slot_count:
        raise ValueError(f"batch size {size} outside [1, {params.slot_count}]")
    delta = OpCounter()
    key = keys.public if use_public_key else keys.secret
    cts = []
    for vec, scale in zip(batch.vectors(), operand_scales(params)):
        with delta.timed("Encode"):
            pt = encode(params, vec, scale=scale)
        with delta.timed("Encrypt"):
            cts.append(encrypt(pt, key, rng))
    if counter is not None:
        counter.merge(delta)
    return cts, delta


def _check_operands(cts, params: CkksParams) -> int:
    if len(cts) != 5:
        raise CircuitError("Q", f"expected 5 ciphertexts, got {len(cts)}")
    level = cts[0].level
    for name, ct in zip(OPERANDS, cts):
        if ct.params.params_hash != params.params_hash:
            raise CircuitError(name, "encrypted under different parameters")
        if ct.size != 2:
            raise CircuitError(name, f"has {ct.size} components, expected 2")
        if ct.level != level:
            raise CircuitError(name, f"at level {ct.level}, expected {level}")
    expected = operand_scales(params, level)
    for name, ct, scale in zip(OPERANDS, cts, expected):
        if abs(ct.scale / params.scale - 1.0) > 2.0 ** -10:
            raise CircuitError(name, f"scale {ct.scale:.6g} is not the nominal {params.scale:.6g}")
        if ct.scale != scale:
            raise CircuitError(name, f"scale {ct.scale!r} differs from the packing scale {scale!r}")
    return level


def evaluate_update(c_q: Ciphertext, c_r: Ciphertext, c_qn: Ciphertext, c_alpha: Ciphertext,
                    c_gamma: Ciphertext, relin_key: RelinKey,
                    counter: OpCounter | None = None) -> tuple[Ciphertext, OpCounter]:
    """Slotwise ``(1 - alpha) Q + alpha r + alpha gamma Q'`` at depth 2."""
    params = c_q.params
    level = _check_operands((c_q, c_r, c_qn, c_alpha, c_gamma), params)
    delta = OpCounter()

    def product(x, y):
        with delta.timed("Multiply"):
            z = he_mul(x, y)
        with delta.timed("Relinearize"):
            z = relinearize(z, relin_key)
        with delta.timed("Rescale"):
            return rescale(z)

    m1 = product(c_alpha, c_gamma)
    m2 = product(m1, mod_switch_to(c_qn, level - 1))
    m3 = product(c_alpha, c_r)
    m4 = product(c_alpha, c_q)
    with delta.timed("Addition"):
        a1 = he_sub(mod_switch_to(c_q, level - 1), m4)
    with delta.timed("Addition"):
        a2 = he_add(a1, m3)
    with delta.timed("Addition"):
        out = he_add(mod_switch_to(a2, level - 2), m2)
    if counter is not None:
        counter.merge(delta)
    return out, delta


def decrypt_and_unpack(ct: Ciphertext, keys: KeySet, size: int,
                       counter: OpCounter | None = None) -> tuple[np.ndarray, OpCounter]:
    delta = OpCounter()
    with delta.timed("Decrypt"):
        pt = decrypt(ct, keys.secret)
    with delta.timed("Decode"):
        values = decode(pt)
    if counter is not None:
        counter.merge(delta)
    return values[:size].copy(), delta


def encrypted_batch_update(records, keys: KeySet, params: CkksParams, rng: np.random.Generator,
                           counter: OpCounter | None = None) -> np.ndarray:
    """In-process client + cloud round trip for one batch."""
    batch = records if isinstance(records, PackedBatch) else PackedBatch.from_records(records)
    cts, _ = pack_and_encrypt(batch, keys, params, rng, counter)
    out, _ = evaluate_update(*cts, keys.relin, counter)
    values, _ = decrypt_and_unpack(out, keys, len(batch), counter)
    return values


def relative_errors(encrypted, plain, floor: float = 1e-6) -> np.ndarray:
    encrypted = np.asarray(encrypted, dtype=np.float64)
    plain = np.asarray(plain, dtype=np.float64)
    return np.abs(encrypted - plain) / np.maximum(np.abs(plain), floor)


def random_batch(rng: np.random.Generator, size: int, q_bound: float = 100.0) -> PackedBatch:
    """Synthetic batch: Q, Q' in [-q_bound, q_bound], r in [-1, 1], alpha in (0, 1], gamma in [0, 1)."""
    return PackedBatch(rng.uniform(-q_bound, q_bound, size), rng.uniform(-1.0, 1.0, size),
                       rng.uniform(-q_bound, q_bound, size), 1.0 - rng.random(size),
                       rng.random(size), [(i, 0, i, 0) for i in range(size)])


@dataclass
class PrecisionReport:
    batches: int
    slots: int
    max_relative_error: float
    max_abs_error: float
    # error divided by the largest |Q| magnitude in the batch
    max_range_relative_error: float
    reference_percent: float = REFERENCE_PRECISION_PERCENT

    @property
    def max_relative_percent(self) -> float:
        return 100.0 * self.max_relative_error

    @property
    def max_range_relative_percent(self) -> float:
        return 100.0 * self.max_range_relative_error


def measure_precision(batches: int, params: CkksParams, rng: np.random.Generator, *,
                      size: int = 1000, keys: KeySet | None = None,
                      q_bound: float = 100.0, counter: OpCounter | None = None) -> PrecisionReport:
    """Max relative error of encrypted vs plaintext updates over random batches."""
    if batches < 1:
        raise ValueError("need at least one batch")
    keys = keygen(params, rng) if keys is None else keys
    max_rel = max_abs = max_rng = 0.0
    for _ in range(batches):
        batch = random_batch(rng, size, q_bound)
        plain = plain_batch_update_vectors(batch)
        enc = encrypted_batch_update(batch, keys, params, rng, counter)
        err = np.abs(enc - plain)
        max_rel = max(max_rel, float(np.max(relative_errors(enc, plain))))
        max_abs = max(max_abs, float(np.max(err)))
        magnitude = max(float(np.max(np.abs(batch.q))), float(np.max(np.abs(batch.q_next))),
                        float(np.max(np.abs(plain))), 1e-6)
        max_rng = max(max_rng, float(np.max(err)) / magnitude)
    return PrecisionReport(batches, batches * size, max_rel, max_abs, max_rng)


def plain_batch_update_vectors(batch: PackedBatch) -> np.ndarray:
    return (1.0 - batch.alpha) * batch.q + batch.alpha * (batch.r + batch.gamma * batch.q_next)


def plain_results(records) -> np.ndarray:
    return np.array(plain_batch_update(records))


def write_op_report_tsv(path: str | Path, counter: OpCounter, batches: int = 1,
                        include_reference: bool = False) -> None:
    """Per-operation TSV: Type, Num, Time (ms), Percent (per batch averages)."""
    rows = op_report_rows(counter, batches)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        header = ["Type", "Num", "Time (ms)", "Percent"]
        if include_reference:
            header += ["Reference Num", "Reference Time (ms)"]
        w.writerow(header)
        for op, num, ms, pct in rows:
            line = [op, f"{num:g}", f"{ms:.3f}", f"{pct:.2f}"]
            if include_reference:
                line += [BATCH_OP_COUNTS[op], f"{REFERENCE_TIMES_MS[op]:.3f}"]
            w.writerow(line)


def op_report_rows(counter: OpCounter, batches: int = 1) -> list[tuple[str, float, float, float]]:
    batches = max(batches, 1)
    total = sum(counter.seconds.values())
    rows = []
    for op in OPS:
        ms = 1000.0 * counter.seconds[op] / batches
        pct = 100.0 * counter.seconds[op] / total if total > 0 else 0.0
        rows.append((op, counter.counts[op] / batches, ms, pct))
    return rows
