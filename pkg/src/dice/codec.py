"""Canonical binary encoding, hashing and the default signature scheme.

Every value that is hashed or signed anywhere in the simulator goes through
``encode`` so that identical inputs produce byte-identical digests across
runs and platforms.  The encoding is length-prefixed and type-tagged;
dict keys are emitted in sorted order.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from typing import Protocol

DIGEST_SIZE = 32
ZERO_DIGEST = b"\x00" * DIGEST_SIZE

_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


def _enc(value, out: list[bytes]) -> None:
    if value is None:
        out.append(b"n")
    elif value is True:
        out.append(b"T")
    elif value is False:
        out.append(b"F")
    elif isinstance(value, int):
        raw = str(value).encode("ascii")
        out.append(b"i" + _U32.pack(len(raw)) + raw)
    elif isinstance(value, float):
        out.append(b"f" + _F64.pack(value))
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(b"s" + _U32.pack(len(raw)) + raw)
    elif isinstance(value, (bytes, bytearray)):
        out.append(b"b" + _U32.pack(len(value)) + bytes(value))
    elif isinstance(value, (list, tuple)):
        out.append(b"l" + _U32.pack(len(value)))
        for item in value:
            _enc(item, out)
    elif isinstance(value, dict):
        keys = sorted(value)
        out.append(b"d" + _U32.pack(len(keys)))
        for key in keys:
            if not isinstance(key, str):
                raise TypeError(f"canonical dict keys must be str, got {type(key)!r}")
            _enc(key, out)
            _enc(value[key], out)
    else:
        raise TypeError(f"value of type {type(value)!r} has no canonical encoding")


def encode(value) -> bytes:
    """Canonical byte encoding of a plain-data value."""
    out: list[bytes] = []
    _enc(value, out)
    return b"".join(out)


def digest(value) -> bytes:
    """SHA-256 over the canonical encoding."""
    return hashlib.sha256(encode(value)).digest()


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def merkle_root(leaves: list[bytes]) -> bytes:
    """Binary Merkle root over 32-byte leaves; odd leaf promoted unchanged.

    An empty leaf list hashes to the all-zero digest.
    """
    if not leaves:
        return ZERO_DIGEST
    level = list(leaves)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(hashlib.sha256(level[i] + level[i + 1]).digest())
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


class Signer(Protocol):
    """Pluggable signature backend; the default is a keyed MAC."""

    def sign(self, actor: str, message: bytes) -> bytes: ...

    def verify(self, actor: str, message: bytes, signature: bytes) -> bool: ...

    def knows(self, actor: str) -> bool: ...


class KeyedMacSigner:
    """Deterministic HMAC-SHA256 signatures from per-actor secrets.

    Stands in for real PKI at desk scale: a signature proves the signer
    holds the secret registered for it at genesis.
    """

    def __init__(self, keys: dict[str, bytes]):
        self._keys = dict(keys)

    def sign(self, actor: str, message: bytes) -> bytes:
        key = self._keys.get(actor)
        if key is None:
            raise KeyError(f"no key registered for actor {actor!r}")
        return hmac.new(key, message, hashlib.sha256).digest()

    def verify(self, actor: str, message: bytes, signature: bytes) -> bool:
        key = self._keys.get(actor)
        if key is None:
            return False
        return hmac.compare_digest(hmac.new(key, message, hashlib.sha256).digest(), signature)

    def knows(self, actor: str) -> bool:
        return actor in self._keys

    @property
    def keys(self) -> dict[str, bytes]:
        return dict(self._keys)


def derive_key(seed: int, actor: str) -> bytes:
    """Per-actor secret derived from the scenario seed."""
    return hashlib.sha256(f"dice-key:{seed}:{actor}".encode()).digest()


def derive_seed(seed: int, label: str) -> int:
    """Independent 63-bit child seed for a named random stream."""
    raw = hashlib.sha256(f"dice-seed:{seed}:{label}".encode()).digest()
    return int.from_bytes(raw[:8], "big") >> 1
