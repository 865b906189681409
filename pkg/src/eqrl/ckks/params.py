"""Parameter sets for the leveled CKKS engine.

The modulus chain is stored as ``data primes + (special prime,)``.  The data
primes ``q_0 .. q_L`` carry ciphertexts; the special prime is only used while
key switching.  ``level`` of a ciphertext is the index of its highest active
data prime, so a fresh ciphertext sits at ``max_level = L`` and each rescale
drops one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sympy import isprime

from .arith import NttTables, find_ntt_primes
from .errors import ParameterError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class CkksParams:
    ring_degree: int
    moduli: tuple[int, ...]
    scale: float
    noise_stddev: float = 3.2
    name: str = "custom"

    def __post_init__(self):
        n = self.ring_degree
        if n < 4 or n & (n - 1):
            raise ParameterError(f"ring degree must be a power of two >= 4, got {n}")
        if len(self.moduli) < 2:
            raise ParameterError("need at least one data prime and one special prime")
        if len(set(self.moduli)) != len(self.moduli):
            raise ParameterError("moduli must be distinct")
        for q in self.moduli:
            if (q - 1) % (2 * n):
                raise ParameterError(f"modulus {q} is not 1 mod {2 * n}")
            if not isprime(q):
                raise ParameterError(f"modulus {q} is not prime")
        if self.scale <= 1 or np.log2(self.scale) % 1:
            raise ParameterError(f"scale must be a power of two, got {self.scale}")
        if self.noise_stddev <= 0:
            raise ParameterError("noise_stddev must be positive")

    @classmethod
    def from_bit_sizes(cls, ring_degree: int, bit_sizes, scale_bits: int,
                       noise_stddev: float = 3.2, name: str = "custom") -> "CkksParams":
        """Pick the largest NTT-friendly primes of each listed size.

        For the scale-sized primes this is also the closest choice to
        ``2**scale_bits`` that keeps the stated bit length, so rescaling keeps
        the scale near its nominal value.
        """
        chosen: list[int] = []
        for bits in bit_sizes:
            chosen.append(find_ntt_primes(bits, ring_degree, 1, exclude=chosen)[0])
        return cls(ring_degree, tuple(chosen), float(2 ** scale_bits), noise_stddev, name)

    @property
    def data_moduli(self) -> tuple[int, ...]:
        return self.moduli[:-1]

    @property
    def special_modulus(self) -> int:
        return self.moduli[-1]

    @property
    def special_row(self) -> int:
        return len(self.moduli) - 1

    @property
    def max_level(self) -> int:
        return len(self.moduli) - 2

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    def modulus_at(self, level: int) -> int:
        """Product of the active data primes at ``level``."""
        q = 1
        for p in self.data_moduli[: level + 1]:
            q *= p
        return q

    def canonical_bytes(self) -> bytes:
        out = struct.pack("<IB", self.ring_degree, len(self.moduli))
        out += b"".join(struct.pack("<Q", q) for q in self.moduli)
        out += struct.pack("<d", self.scale)
        return out

    @cached_property
    def params_hash(self) -> bytes:
        return struct.pack("<Q", fnv1a64(self.canonical_bytes()))

    @cached_property
    def ntt(self) -> NttTables:
        return NttTables(self.ring_degree, self.moduli)

    def column(self, rows) -> tuple[np.ndarray, np.ndarray]:
        return self.ntt.column(rows)


_PROFILES: dict[str, CkksParams] = {}


def table1_params() -> CkksParams:
    """N = 8192, chain (50, 30, 30, 30, 50) bits, scale 2**30, 4096 slots."""
    if "table1" not in _PROFILES:
        _PROFILES["table1"] = CkksParams.from_bit_sizes(
            8192, (50, 30, 30, 30, 50), 30, name="table1")
    return _PROFILES["table1"]


def test_small_params() -> CkksParams:
    """N = 1024, chain (40, 30, 30, 40) bits, scale 2**30.  INSECURE, for CI only."""
    if "test-small" not in _PROFILES:
        _PROFILES["test-small"] = CkksParams.from_bit_sizes(
            1024, (40, 30, 30, 40), 30, name="test-small")
    return _PROFILES["test-small"]


def profile(name: str) -> CkksParams:
    if name == "table1":
        return table1_params()
    if name in ("test-small", "test_small"):
        return test_small_params()
    raise ParameterError(f"unknown parameter profile {name!r}")
