import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sympy.ntheory.modular import crt

from eqrl.ckks import EncodingError, LevelError, decode, encode
from eqrl.ckks.encoding import crt_centered


def direct_embedding(coeffs: np.ndarray, slots: int) -> np.ndarray:
    """Evaluate sum m_i zeta^(e_j i) term by term, exponents reduced exactly."""
    n = len(coeffs)
    exps = [pow(5, j, 2 * n) for j in range(slots)]
    i = np.arange(n, dtype=np.int64)
    out = np.empty(slots, dtype=np.complex128)
    for start in range(0, slots, 256):
        e = np.array(exps[start:start + 256], dtype=np.int64)[:, None]
        angle = (e * i[None, :]) % (2 * n)
        out[start:start + 256] = np.exp(1j * np.pi * angle / n) @ coeffs
    return out


def test_zero_vector(big):
    pt = encode(big, np.zeros(big.slot_count))
    assert not np.any(pt.poly)
    assert np.all(decode(pt) == 0)


def test_constant_vector_is_constant_polynomial(big):
    pt = encode(big, np.ones(big.slot_count))
    coeffs = crt_centered(pt.poly, big, pt.level)
    assert coeffs[0] == big.scale
    assert not np.any(coeffs[1:])
    assert np.max(np.abs(decode(pt) - 1.0)) < 1e-6


def test_random_roundtrip_against_direct_evaluation(big, rng):
    v = rng.uniform(-10, 10, big.slot_count)
    pt = encode(big, v, level=0)
    # at level 0 the single residue is the centred coefficient itself
    q0 = big.moduli[0]
    coeffs = np.where(pt.poly[0] > q0 // 2, pt.poly[0] - q0, pt.poly[0]).astype(np.float64)
    oracle = direct_embedding(coeffs, big.slot_count) / pt.scale
    assert np.max(np.abs(oracle.real - v)) < 1e-5
    assert np.max(np.abs(oracle.imag)) < 1e-5
    assert np.max(np.abs(decode(pt) - oracle.real)) < 1e-7


def test_full_level_roundtrip(big, rng):
    v = rng.uniform(-10, 10, big.slot_count)
    assert np.max(np.abs(decode(encode(big, v)) - v)) < 1e-5


def test_crt_matches_python_integers(small, rng):
    pt = encode(small, rng.uniform(-5, 5, small.slot_count))
    coeffs = crt_centered(pt.poly, small, pt.level)
    big_q = small.modulus_at(pt.level)
    moduli = [int(q) for q in small.moduli[:pt.level + 1]]
    for idx in rng.integers(0, small.ring_degree, 20):
        x, _ = crt(moduli, [int(r) for r in pt.poly[:, idx]])
        x = int(x)
        if x > big_q // 2:
            x -= big_q
        assert coeffs[idx] == float(x)


def test_complex_slots(small, rng):
    v = rng.normal(size=small.slot_count) + 1j * rng.normal(size=small.slot_count)
    got = decode(encode(small, v), complex_output=True)
    assert np.max(np.abs(got - v)) < 1e-6


def test_short_vector_zero_fills(small):
    got = decode(encode(small, [3.5, -1.25]))
    assert abs(got[0] - 3.5) < 1e-6 and abs(got[1] + 1.25) < 1e-6
    assert np.max(np.abs(got[2:])) < 1e-6


def test_errors(small):
    with pytest.raises(EncodingError):
        encode(small, np.zeros(small.slot_count + 1))
    with pytest.raises(EncodingError):
        encode(small, [np.nan])
    with pytest.raises(EncodingError):
        encode(small, [1e9], level=0)  # 1e9 * 2^30 exceeds the 40-bit prime
    with pytest.raises(LevelError):
        encode(small, [1.0], level=small.max_level + 1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=512))
def test_roundtrip_property(small, values):
    got = decode(encode(small, values))
    assert np.max(np.abs(got[:len(values)] - np.array(values))) < 1e-5
