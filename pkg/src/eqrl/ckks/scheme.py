"""Keys, encryption and homomorphic operations.

Polynomials are kept in coefficient form between operations; products go
through the NTT.  All operations return new objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arith import addmod, center, mulmod, negmod, submod
from .encoding import Plaintext
from .errors import (CkksError, DepthExhaustedError, LevelError, MissingKeyError,
                     ScaleError)
from .params import CkksParams

# Relative tolerance for treating two scales as the same nominal scale.
SCALE_TOLERANCE = 2.0 ** -10
# Rescaling below this would leave no fractional precision at all.
MIN_SCALE = 2.0 ** 10


@dataclass
class Ciphertext:
    params: CkksParams
    components: tuple[np.ndarray, ...]  # each (level + 1, N), coefficient form
    level: int
    scale: float

    def __post_init__(self):
        if len(self.components) not in (2, 3):
            raise CkksError(f"ciphertext must have 2 or 3 components, got {len(self.components)}")
        shape = (self.level + 1, self.params.ring_degree)
        for c in self.components:
            if c.shape != shape:
                raise CkksError(f"component shape {c.shape} does not match level {self.level}")
        if not self.scale > 0:
            raise ScaleError("ciphertext scale must be positive")

    @property
    def size(self) -> int:
        return len(self.components)


@dataclass
class SecretKey:
    params: CkksParams
    coeffs: np.ndarray  # ternary, length N
    ntt: np.ndarray = field(repr=False)  # (len(moduli), N)


@dataclass
class PublicKey:
    params: CkksParams
    b: np.ndarray = field(repr=False)  # NTT form over the data primes
    a: np.ndarray = field(repr=False)


@dataclass
class RelinKey:
    """One key-switching pair per data prime, NTT form over every modulus."""

    params: CkksParams
    b: np.ndarray = field(repr=False)  # (L + 1, len(moduli), N)
    a: np.ndarray = field(repr=False)


@dataclass
class KeySet:
    secret: SecretKey
    public: PublicKey
    relin: RelinKey


def sample_ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def sample_gaussian(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    bound = math.ceil(6 * sigma)
    return np.clip(np.rint(rng.normal(0.0, sigma, size=n)), -bound, bound).astype(np.int64)


def _to_rns(small: np.ndarray, params: CkksParams, rows) -> np.ndarray:
    p, _ = params.column(rows)
    return small[None, :] % p


def _uniform(rng: np.random.Generator, params: CkksParams, rows) -> np.ndarray:
    return np.stack([rng.integers(0, params.moduli[r], size=params.ring_degree, dtype=np.int64)
                     for r in rows])


def keygen(params: CkksParams, rng: np.random.Generator) -> KeySet:
    n = params.ring_degree
    all_rows = list(range(len(params.moduli)))
    data_rows = all_rows[:-1]
    ntt = params.ntt
    p_all, pinv_all = params.column(all_rows)

    s = sample_ternary(rng, n)
    s_ntt = ntt.forward(_to_rns(s, params, all_rows), all_rows)
    secret = SecretKey(params, s, s_ntt)

    p, pinv = params.column(data_rows)
    a = _uniform(rng, params, data_rows)
    e = ntt.forward(_to_rns(sample_gaussian(rng, n, params.noise_stddev), params, data_rows),
                    data_rows)
    b = submod(e, mulmod(a, s_ntt[data_rows], p, pinv), p)
    public = PublicKey(params, b, a)

    s2 = mulmod(s_ntt, s_ntt, p_all, pinv_all)
    special = params.special_modulus
    rb, ra = [], []
    for j in data_rows:
        aj = _uniform(rng, params, all_rows)
        ej = ntt.forward(_to_rns(sample_gaussian(rng, n, params.noise_stddev), params, all_rows),
                         all_rows)
        bj = submod(ej, mulmod(aj, s_ntt, p_all, pinv_all), p_all)
        qj = params.moduli[j]
        gadget = np.full((1, 1), special % qj, dtype=np.int64)
        bj[j] = addmod(bj[j], mulmod(s2[j], gadget, p_all[j], pinv_all[j]), p_all[j])
        rb.append(bj)
        ra.append(aj)
    relin = RelinKey(params, np.stack(rb), np.stack(ra))
    return KeySet(secret, public, relin)


def encrypt(pt: Plaintext, key: PublicKey | SecretKey, rng: np.random.Generator) -> Ciphertext:
    """Encrypt under a public key, or under the secret key when the encryptor also decrypts.

    Secret-key ciphertexts carry only the fresh error ``e``; public-key ones
    add ``u*e + e1*s``, roughly ``sqrt(N)`` times more noise.
    """
    if isinstance(key, SecretKey):
        return encrypt_symmetric(pt, key, rng)
    return encrypt_public(pt, key, rng)


def encrypt_public(pt: Plaintext, public: PublicKey, rng: np.random.Generator) -> Ciphertext:
    """Public-key encryption: ``(u*b + e0 + m, u*a + e1)``."""
    params = pt.params
    rows = list(range(pt.level + 1))
    n = params.ring_degree
    p, pinv = params.column(rows)
    ntt = params.ntt
    u = ntt.forward(_to_rns(sample_ternary(rng, n), params, rows), rows)
    prods = np.concatenate([mulmod(u, public.b[rows], p, pinv),
                            mulmod(u, public.a[rows], p, pinv)])
    prods = ntt.inverse(prods, rows + rows)
    k = len(rows)
    e0 = _to_rns(sample_gaussian(rng, n, params.noise_stddev), params, rows)
    e1 = _to_rns(sample_gaussian(rng, n, params.noise_stddev), params, rows)
    c0 = addmod(addmod(prods[:k], e0, p), pt.poly, p)
    c1 = addmod(prods[k:], e1, p)
    return Ciphertext(params, (c0, c1), pt.level, pt.scale)


def encrypt_symmetric(pt: Plaintext, secret: SecretKey, rng: np.random.Generator) -> Ciphertext:
    """Secret-key encryption: ``(-a*s + e + m, a)``."""
    params = pt.params
    rows = list(range(pt.level + 1))
    p, pinv = params.column(rows)
    a = _uniform(rng, params, rows)
    a_ntt = params.ntt.forward(a, rows)
    as_ = params.ntt.inverse(mulmod(a_ntt, secret.ntt[rows], p, pinv), rows)
    e = _to_rns(sample_gaussian(rng, params.ring_degree, params.noise_stddev), params, rows)
    c0 = addmod(submod(e, as_, p), pt.poly, p)
    return Ciphertext(params, (c0, a), pt.level, pt.scale)


def decrypt(ct: Ciphertext, secret: SecretKey) -> Plaintext:
    params = ct.params
    if ct.level < 0:
        raise DepthExhaustedError("ciphertext has no active primes")
    rows = list(range(ct.level + 1))
    p, pinv = params.column(rows)
    ntt = params.ntt
    s = secret.ntt[rows]
    comps = ntt.forward(np.concatenate(ct.components[1:]), rows * (ct.size - 1))
    k = len(rows)
    acc = mulmod(comps[:k], s, p, pinv)
    if ct.size == 3:
        s2 = mulmod(s, s, p, pinv)
        acc = addmod(acc, mulmod(comps[k:], s2, p, pinv), p)
    m = addmod(ct.components[0], ntt.inverse(acc, rows), p)
    return Plaintext(params, m, ct.level, ct.scale)


def _check_compatible(a, b, op: str) -> None:
    if a.params is not b.params and a.params.params_hash != b.params.params_hash:
        raise CkksError(f"{op}: operands use different parameters")
    if a.level != b.level:
        raise LevelError(
            f"{op}: level mismatch ({a.level} vs {b.level}); mod_switch_to the lower level first")


def _check_scales(a, b, op: str) -> None:
    if abs(a.scale / b.scale - 1.0) > SCALE_TOLERANCE:
        raise ScaleError(f"{op}: scale mismatch ({a.scale:.6g} vs {b.scale:.6g})")


def _pad(ct: Ciphertext, size: int) -> tuple[np.ndarray, ...]:
    comps = ct.components
    return comps + tuple(np.zeros_like(comps[0]) for _ in range(size - len(comps)))


def he_add(a: Ciphertext | Plaintext, b: Ciphertext) -> Ciphertext:
    if isinstance(a, Ciphertext) and isinstance(b, Plaintext):
        a, b = b, a
    _check_compatible(a, b, "add")
    _check_scales(a, b, "add")
    p, _ = b.params.column(range(b.level + 1))
    if isinstance(a, Plaintext):
        comps = (addmod(b.components[0], a.poly, p),) + b.components[1:]
    else:
        size = max(a.size, b.size)
        comps = tuple(addmod(x, y, p) for x, y in zip(_pad(a, size), _pad(b, size)))
    return Ciphertext(b.params, comps, b.level, max(a.scale, b.scale))


def he_negate(ct: Ciphertext) -> Ciphertext:
    p, _ = ct.params.column(range(ct.level + 1))
    return Ciphertext(ct.params, tuple(negmod(c, p) for c in ct.components), ct.level, ct.scale)


def he_sub(a: Ciphertext | Plaintext, b: Ciphertext | Plaintext) -> Ciphertext:
    """``a - b`` where at least one operand is encrypted."""
    if isinstance(b, Plaintext):
        _check_compatible(a, b, "sub")
        _check_scales(a, b, "sub")
        p, _ = a.params.column(range(a.level + 1))
        comps = (submod(a.components[0], b.poly, p),) + a.components[1:]
        return Ciphertext(a.params, comps, a.level, max(a.scale, b.scale))
    return he_add(a, he_negate(b))


def he_mul(a: Ciphertext, b: Ciphertext | Plaintext) -> Ciphertext:
    """Slotwise product; the result scale is the product of the scales."""
    _check_compatible(a, b, "mul")
    params = a.params
    level = a.level
    new_scale = a.scale * b.scale
    if math.log2(new_scale) + 1 >= math.log2(params.modulus_at(level)):
        raise DepthExhaustedError(
            f"mul: product scale 2^{math.log2(new_scale):.1f} does not fit the "
            f"modulus at level {level}")
    rows = list(range(level + 1))
    k = len(rows)
    p, pinv = params.column(rows)
    ntt = params.ntt
    if isinstance(b, Plaintext):
        fa = ntt.forward(np.concatenate(a.components + (b.poly,)), rows * (a.size + 1))
        pb = fa[-k:]
        comps = [mulmod(fa[i * k:(i + 1) * k], pb, p, pinv) for i in range(a.size)]
        out = ntt.inverse(np.concatenate(comps), rows * a.size)
        return Ciphertext(params, tuple(out[i * k:(i + 1) * k] for i in range(a.size)),
                          level, new_scale)
    if a.size != 2 or b.size != 2:
        raise CkksError("mul: relinearize 3-component ciphertexts before multiplying")
    f = ntt.forward(np.concatenate(a.components + b.components), rows * 4)
    a0, a1, b0, b1 = (f[i * k:(i + 1) * k] for i in range(4))
    d0 = mulmod(a0, b0, p, pinv)
    d1 = addmod(mulmod(a0, b1, p, pinv), mulmod(a1, b0, p, pinv), p)
    d2 = mulmod(a1, b1, p, pinv)
    out = ntt.inverse(np.concatenate([d0, d1, d2]), rows * 3)
    return Ciphertext(params, (out[:k], out[k:2 * k], out[2 * k:]), level, new_scale)


def _divide_and_round(poly: np.ndarray, rows, drop_modulus: int, drop_residue: np.ndarray,
                      params: CkksParams) -> np.ndarray:
    """``round(x / q_drop)`` on the remaining rows, given ``x mod q_drop``."""
    p, pinv = params.column(rows)
    r = center(drop_residue, drop_modulus)[None, :] % p
    inv = np.array([[pow(drop_modulus, -1, params.moduli[i])] for i in rows], dtype=np.int64)
    return mulmod(submod(poly, r, p), inv, p, pinv)


def relinearize(ct: Ciphertext, relin: RelinKey | None) -> Ciphertext:
    """Switch the ``s**2`` component back to ``s`` using the special prime."""
    if relin is None:
        raise MissingKeyError("relinearize: no relinearization key available")
    if ct.size != 3:
        raise CkksError(f"relinearize: expected 3 components, got {ct.size}")
    params = ct.params
    if relin.params.params_hash != params.params_hash:
        raise MissingKeyError("relinearize: key was generated for different parameters")
    level = ct.level
    rows = list(range(level + 1))
    ext = rows + [params.special_row]
    k, ke = len(rows), len(ext)
    p_ext, pinv_ext = params.column(ext)
    ntt = params.ntt

    d2 = ct.components[2]
    digits = np.concatenate([center(d2[j], params.moduli[j])[None, :] % p_ext for j in rows])
    digits = ntt.forward(digits, ext * k).reshape(k, ke, -1)
    kb = relin.b[: k][:, ext]
    ka = relin.a[: k][:, ext]
    acc0 = mulmod(digits, kb, p_ext[None], pinv_ext[None])
    acc1 = mulmod(digits, ka, p_ext[None], pinv_ext[None])
    # the sum of at most L + 1 residues below 2**51 stays inside int64
    acc = np.concatenate([acc0.sum(axis=0), acc1.sum(axis=0)]) % np.concatenate([p_ext, p_ext])
    acc = ntt.inverse(acc, ext * 2)
    special = params.special_modulus
    p, _ = params.column(rows)
    out = []
    for i, comp in enumerate(ct.components[:2]):
        part = acc[i * ke:(i + 1) * ke]
        down = _divide_and_round(part[:k], rows, special, part[k], params)
        out.append(addmod(comp, down, p))
    return Ciphertext(params, tuple(out), level, ct.scale)


def rescale(ct: Ciphertext) -> Ciphertext:
    """Divide by the top active prime and drop it."""
    if ct.level == 0:
        raise DepthExhaustedError("rescale: no prime left to drop")
    params = ct.params
    q_drop = params.moduli[ct.level]
    new_scale = ct.scale / q_drop
    if new_scale < MIN_SCALE:
        raise ScaleError(
            f"rescale: scale would underflow to {new_scale:.3g}; rescale only after a multiply")
    rows = list(range(ct.level))
    comps = tuple(_divide_and_round(c[:-1], rows, q_drop, c[-1], params) for c in ct.components)
    return Ciphertext(params, comps, ct.level - 1, new_scale)


def mod_switch_to(ct: Ciphertext, target_level: int) -> Ciphertext:
    """Drop primes down to ``target_level`` without touching the value or scale."""
    if target_level > ct.level:
        raise LevelError(f"mod_switch_to: cannot switch up from {ct.level} to {target_level}")
    if target_level < 0:
        raise DepthExhaustedError("mod_switch_to: target level exhausts the modulus chain")
    if target_level == ct.level:
        return ct
    comps = tuple(c[: target_level + 1].copy() for c in ct.components)
    return Ciphertext(ct.params, comps, target_level, ct.scale)


def mod_switch_plain(pt: Plaintext, target_level: int) -> Plaintext:
    if not 0 <= target_level <= pt.level:
        raise LevelError(f"cannot switch plaintext from {pt.level} to {target_level}")
    return Plaintext(pt.params, pt.poly[: target_level + 1].copy(), target_level, pt.scale)
