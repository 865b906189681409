"""Binary formats for ciphertexts and relinearization keys (little-endian).

Ciphertext::

    magic "EQRL" | version u16 | params hash (8 bytes) | component count u8
    | level u8 | scale f64 | per component, per active prime: N x u64

Relinearization key::

    magic "EQRK" | version u16 | params hash (8 bytes) | digit count u8
    | modulus count u8 | b words | a words      (each digits x moduli x N u64)
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (BadMagicError, ParamsMismatchError, SerializationError, TruncatedError,
                     UnsupportedVersionError)
from .params import CkksParams
from .scheme import Ciphertext, RelinKey

CT_MAGIC = b"EQRL"
RK_MAGIC = b"EQRK"
FORMAT_VERSION = 1
_CT_HEADER = struct.Struct("<4sH8sBBd")
_RK_HEADER = struct.Struct("<4sH8sBB")
CT_HEADER_SIZE = _CT_HEADER.size


def serialized_size(params: CkksParams, components: int, level: int) -> int:
    return CT_HEADER_SIZE + components * (level + 1) * params.ring_degree * 8


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    header = _CT_HEADER.pack(CT_MAGIC, FORMAT_VERSION, ct.params.params_hash,
                             ct.size, ct.level, ct.scale)
    body = np.stack(ct.components).astype("<u8", copy=False).tobytes()
    return header + body


def _check_header(magic, version, phash, expected_magic, params):
    if magic != expected_magic:
        raise BadMagicError(f"bad magic {magic!r}, expected {expected_magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported")
    if phash != params.params_hash:
        raise ParamsMismatchError(
            f"params hash {phash.hex()} does not match {params.params_hash.hex()}")


def deserialize_ciphertext(data: bytes, params: CkksParams) -> Ciphertext:
    if len(data) < CT_HEADER_SIZE:
        raise TruncatedError(f"{len(data)} bytes is shorter than the header")
    magic, version, phash, size, level, scale = _CT_HEADER.unpack_from(data)
    _check_header(magic, version, phash, CT_MAGIC, params)
    if size not in (2, 3) or level > params.max_level:
        raise SerializationError(f"invalid component count {size} or level {level}")
    expected = serialized_size(params, size, level)
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise SerializationError(f"{len(data) - expected} trailing bytes")
    words = np.frombuffer(data, dtype="<u8", offset=CT_HEADER_SIZE)
    words = words.reshape(size, level + 1, params.ring_degree).astype(np.int64)
    moduli = np.array(params.data_moduli[: level + 1], dtype=np.int64).reshape(1, -1, 1)
    if np.any(words >= moduli) or np.any(words < 0):
        raise SerializationError("coefficient word out of range for its prime")
    return Ciphertext(params, tuple(words[i].copy() for i in range(size)), level, scale)


def serialize_relin_key(key: RelinKey) -> bytes:
    digits, nmod, _ = key.b.shape
    header = _RK_HEADER.pack(RK_MAGIC, FORMAT_VERSION, key.params.params_hash, digits, nmod)
    return header + key.b.astype("<u8").tobytes() + key.a.astype("<u8").tobytes()


def deserialize_relin_key(data: bytes, params: CkksParams) -> RelinKey:
    if len(data) < _RK_HEADER.size:
        raise TruncatedError("relinearization key shorter than its header")
    magic, version, phash, digits, nmod = _RK_HEADER.unpack_from(data)
    _check_header(magic, version, phash, RK_MAGIC, params)
    if digits != params.max_level + 1 or nmod != len(params.moduli):
        raise SerializationError("relinearization key shape does not match parameters")
    count = digits * nmod * params.ring_degree
    if len(data) != _RK_HEADER.size + 2 * count * 8:
        raise TruncatedError("relinearization key length mismatch")
    words = np.frombuffer(data, dtype="<u8", offset=_RK_HEADER.size).astype(np.int64)
    shape = (digits, nmod, params.ring_degree)
    return RelinKey(params, words[:count].reshape(shape), words[count:].reshape(shape))
