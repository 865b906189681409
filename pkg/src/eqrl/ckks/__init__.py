"""Leveled CKKS: RNS polynomial arithmetic, encoding, keys and HE operations."""

from .encoding import Plaintext, decode, encode
from .errors import (BadMagicError, CkksError, DepthExhaustedError, EncodingError, LevelError,
                     MissingKeyError, ParameterError, ParamsMismatchError, ScaleError,
                     SerializationError, TruncatedError, UnsupportedVersionError)
from .params import CkksParams, profile, table1_params, test_small_params
from .scheme import (Ciphertext, KeySet, PublicKey, RelinKey, SecretKey, decrypt, encrypt,
                     encrypt_public, encrypt_symmetric, he_add, he_mul, he_negate, he_sub,
                     keygen, mod_switch_to, relinearize, rescale)
from .serialize import (deserialize_ciphertext, deserialize_relin_key, serialize_ciphertext,
                        serialize_relin_key)

__all__ = [
    "BadMagicError", "Ciphertext", "CkksError", "CkksParams", "DepthExhaustedError",
    "EncodingError", "KeySet", "LevelError", "MissingKeyError", "ParameterError",
    "ParamsMismatchError", "Plaintext", "PublicKey", "RelinKey", "ScaleError", "SecretKey",
    "SerializationError", "TruncatedError", "UnsupportedVersionError", "decode", "decrypt",
    "deserialize_ciphertext", "deserialize_relin_key", "encode", "encrypt", "encrypt_public",
    "encrypt_symmetric", "he_add", "he_mul", "he_negate", "he_sub", "keygen", "mod_switch_to",
    "profile", "relinearize", "rescale", "serialize_ciphertext", "serialize_relin_key",
    "table1_params", "test_small_params",
]
