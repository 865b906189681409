"""Modular arithmetic and the negacyclic NTT over stacked RNS residues.

Residue arrays are ``int64`` with shape ``(k, N)``; row ``i`` is reduced
modulo ``moduli[i]``.  Products of two residues below 2**51 do not fit in
64 bits, so :func:`mulmod` estimates the quotient in floating point and
recovers the exact remainder with wrapping 64-bit arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sympy import isprime

MAX_PRIME_BITS = 51


def mulmod(a: np.ndarray, b: np.ndarray, p: np.ndarray, pinv: np.ndarray) -> np.ndarray:
    """Exact ``a * b mod p`` for ``0 <= a, b < p < 2**51``.

    ``pinv`` is ``1.0 / p`` as float64, broadcastable like ``p``.
    """
    quot = np.floor(a.astype(np.float64) * b * pinv).astype(np.int64)
    # Both products wrap mod 2**64; their difference is the true remainder
    # up to one multiple of p either side.
    r = a * b - quot * p
    r += np.where(r < 0, p, 0)
    r -= np.where(r >= p, p, 0)
    return r


def addmod(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    s = a + b
    s -= np.where(s >= p, p, 0)
    return s


def submod(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    s = a - b
    s += np.where(s < 0, p, 0)
    return s


def negmod(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.where(a == 0, 0, p - a)


def center(a: np.ndarray, p) -> np.ndarray:
    """Map residues in ``[0, p)`` to ``(-p/2, p/2]``."""
    return np.where(a > p // 2, a - p, a)


def find_ntt_primes(bits: int, ring_degree: int, count: int, exclude=()) -> list[int]:
    """Largest ``count`` primes below ``2**bits`` congruent to 1 mod ``2N``."""
    step = 2 * ring_degree
    found: list[int] = []
    cand = ((1 << bits) - 1) // step * step + 1
    while len(found) < count:
        if cand < step:
            raise ValueError(f"not enough {bits}-bit NTT primes for N={ring_degree}")
        if cand not in exclude and isprime(cand):
            found.append(cand)
        cand -= step
    return found


def _bit_reverse(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


def primitive_2n_root(p: int, ring_degree: int) -> int:
    """Smallest-generator primitive ``2N``-th root of unity modulo ``p``."""
    if (p - 1) % (2 * ring_degree):
        raise ValueError(f"{p} is not congruent to 1 mod {2 * ring_degree}")
    exp = (p - 1) // (2 * ring_degree)
    for g in range(2, 10_000):
        psi = pow(g, exp, p)
        # psi has order exactly 2N iff psi^N == -1, since 2N is a power of two
        if pow(psi, ring_degree, p) == p - 1:
            return psi
    raise ValueError(f"no primitive {2 * ring_degree}-th root found mod {p}")


@dataclass
class NttTables:
    """Twiddle tables for a list of primes, stacked row-wise."""

    ring_degree: int
    moduli: tuple[int, ...]
    psi_rev: np.ndarray = field(init=False, repr=False)
    psi_inv_rev: np.ndarray = field(init=False, repr=False)
    n_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.ring_degree
        if n < 2 or n & (n - 1):
            raise ValueError(f"ring degree must be a power of two, got {n}")
        bits = n.bit_length() - 1
        rev = [_bit_reverse(i, bits) for i in range(n)]
        psi_rev = np.empty((len(self.moduli), n), dtype=np.int64)
        psi_inv_rev = np.empty_like(psi_rev)
        n_inv = np.empty((len(self.moduli), 1), dtype=np.int64)
        for row, p in enumerate(self.moduli):
            if p.bit_length() > MAX_PRIME_BITS:
                raise ValueError(f"prime {p} exceeds {MAX_PRIME_BITS} bits")
            psi = primitive_2n_root(p, n)
            psi_inv = pow(psi, -1, p)
            pw = [1] * n
            pw_inv = [1] * n
            for i in range(1, n):
                pw[i] = pw[i - 1] * psi % p
                pw_inv[i] = pw_inv[i - 1] * psi_inv % p
            psi_rev[row] = [pw[r] for r in rev]
            psi_inv_rev[row] = [pw_inv[r] for r in rev]
            n_inv[row, 0] = pow(n, -1, p)
        self.psi_rev = psi_rev
        self.psi_inv_rev = psi_inv_rev
        self.n_inv = n_inv

    def column(self, rows) -> tuple[np.ndarray, np.ndarray]:
        """Moduli of ``rows`` as ``(k, 1)`` int64 and their float reciprocals."""
        p = np.array([self.moduli[r] for r in rows], dtype=np.int64).reshape(-1, 1)
        return p, 1.0 / p.astype(np.float64)

    def forward(self, a: np.ndarray, rows) -> np.ndarray:
        """Negacyclic NTT of each row of ``a``; output in bit-reversed order."""
        rows = list(rows)
        n = self.ring_degree
        k = len(rows)
        p, pinv = self.column(rows)
        p3, pinv3 = p[:, :, None], pinv[:, :, None]
        tw = self.psi_rev[rows]
        a = np.array(a, dtype=np.int64, copy=True).reshape(k, n)
        m, t = 1, n
        while m < n:
            t //= 2
            blocks = a.reshape(k, m, 2, t)
            u = blocks[:, :, 0, :]
            v = mulmod(blocks[:, :, 1, :], tw[:, m:2 * m, None], p3, pinv3)
            top = addmod(u, v, p3)
            bot = submod(u, v, p3)
            blocks[:, :, 0, :] = top
            blocks[:, :, 1, :] = bot
            m *= 2
        return a

    def inverse(self, a: np.ndarray, rows) -> np.ndarray:
        rows = list(rows)
        n = self.ring_degree
        k = len(rows)
        p, pinv = self.column(rows)
        p3, pinv3 = p[:, :, None], pinv[:, :, None]
        tw = self.psi_inv_rev[rows]
        a = np.array(a, dtype=np.int64, copy=True).reshape(k, n)
        m, t = n, 1
        while m > 1:
            h = m // 2
            blocks = a.reshape(k, h, 2, t)
            u = blocks[:, :, 0, :].copy()
            v = blocks[:, :, 1, :]
            blocks[:, :, 0, :] = addmod(u, v, p3)
            blocks[:, :, 1, :] = mulmod(submod(u, v, p3), tw[:, h:2 * h, None], p3, pinv3)
            t *= 2
            m = h
        return mulmod(a, self.n_inv[rows], p, pinv)


def negacyclic_schoolbook(a, b, p: int) -> list[int]:
    """Reference product in ``Z_p[x] / (x^N + 1)`` using Python integers."""
    n = len(a)
    out = [0] * n
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            k = i + j
            if k < n:
                out[k] += int(ai) * int(bj)
            else:
                out[k - n] -= int(ai) * int(bj)
    return [x % p for x in out]
