"""Canonical-embedding encoder.

Slot ``j`` holds the evaluation of the plaintext polynomial at
``zeta ** (5**j mod 2N)`` with ``zeta = exp(i*pi/N)``.  Evaluating at all odd
powers of ``zeta`` is an inverse DFT of the twisted coefficients
``m_i * zeta**i``, so both directions cost one complex FFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EncodingError, LevelError
from .params import CkksParams

# rint() of a float64 is exact below 2**52; stay safely under it
_MAX_COEFF = 2.0 ** 52


@dataclass
class Plaintext:
    params: CkksParams
    poly: np.ndarray  # (level + 1, N) residues, coefficient form
    level: int
    scale: float


@lru_cache(maxsize=None)
def _embedding(n: int):
    two_n = 2 * n
    exps = np.empty(n // 2, dtype=np.int64)
    e = 1
    for j in range(n // 2):
        exps[j] = e
        e = e * 5 % two_n
    slot_idx = (exps - 1) // 2
    conj_idx = (two_n - exps - 1) // 2
    i = np.arange(n)
    twist = np.exp(1j * np.pi * i / n)
    return slot_idx, conj_idx, twist, np.conj(twist)


def embed(coeffs: np.ndarray) -> np.ndarray:
    """Slot values of a real-coefficient polynomial (no scaling)."""
    n = coeffs.shape[-1]
    slot_idx, _, twist, _ = _embedding(n)
    evals = np.fft.ifft(coeffs * twist) * n
    return evals[slot_idx]


def unembed(slots: np.ndarray, n: int) -> np.ndarray:
    """Real coefficients whose embedding is ``slots`` (length N/2)."""
    slot_idx, conj_idx, _, untwist = _embedding(n)
    evals = np.zeros(n, dtype=np.complex128)
    evals[slot_idx] = slots
    evals[conj_idx] = np.conj(slots)
    return (np.fft.fft(evals) / n * untwist).real


def encode(params: CkksParams, values, level: int | None = None,
           scale: float | None = None) -> Plaintext:
    """Encode up to N/2 real or complex values; unused slots are zero."""
    level = params.max_level if level is None else level
    scale = params.scale if scale is None else float(scale)
    if not 0 <= level <= params.max_level:
        raise LevelError(f"level {level} outside [0, {params.max_level}]")
    n = params.ring_degree
    values = np.asarray(values, dtype=np.complex128).ravel()
    if values.size > params.slot_count:
        raise EncodingError(f"{values.size} values exceed {params.slot_count} slots")
    if not np.all(np.isfinite(values)):
        raise EncodingError("cannot encode non-finite values")
    slots = np.zeros(params.slot_count, dtype=np.complex128)
    slots[: values.size] = values
    coeffs = np.rint(unembed(slots, n) * scale)
    bound = float(np.max(np.abs(coeffs))) if n else 0.0
    if bound >= _MAX_COEFF or 2 * bound >= params.modulus_at(level):
        raise EncodingError(
            f"scaled coefficients reach {bound:.3g}, beyond the modulus budget at level {level}")
    coeffs = coeffs.astype(np.int64)
    p, _ = params.column(range(level + 1))
    return Plaintext(params, coeffs[None, :] % p, level, scale)


def crt_centered(poly: np.ndarray, params: CkksParams, level: int) -> np.ndarray:
    """Centered integer coefficients (float64) of an RNS polynomial."""
    moduli = params.data_moduli[: level + 1]
    if level == 0:
        q = moduli[0]
        return np.where(poly[0] > q // 2, poly[0] - q, poly[0]).astype(np.float64)
    big_q = params.modulus_at(level)
    acc = np.zeros(poly.shape[1], dtype=object)
    for row, q in enumerate(moduli):
        q_hat = big_q // q
        y = pow(q_hat % q, -1, q)
        # y * residue < 2**102 fits a Python int; reduce mod q before lifting
        t = (poly[row].astype(object) * y) % q
        acc += t * q_hat
    acc %= big_q
    half = big_q // 2
    centered = np.where(acc > half, acc - big_q, acc)
    return centered.astype(np.float64)


def decode(pt: Plaintext, complex_output: bool = False) -> np.ndarray:
    coeffs = crt_centered(pt.poly, pt.params, pt.level) / pt.scale
    slots = embed(coeffs)
    return slots if complex_output else slots.real
