"""Symmetric crypto, nonce, key, and clock plumbing for the attestation protocol.

AES-128-CBC with PKCS#7 padding and a fresh random IV per message,
HMAC-SHA256 message tags, a seedable randomness source so simulations are
reproducible, and simulated/system millisecond clocks.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import secrets
import random
import time

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY_LEN = 16
IV_LEN = 16
NONCE_LEN = 16
TAG_LEN = 32


class DecryptError(ValueError):
    """Ciphertext failed structural or padding checks during decryption."""


class RandomSource:
    """Byte source for IVs and nonces.

    With a seed the stream is a deterministic PRNG (simulation mode); with
    seed=None bytes come from the OS CSPRNG (live mode).
    """

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._rng = random.Random(seed) if seed is not None else None

    def bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("byte count must be non-negative")
        if self._rng is None:
            return secrets.token_bytes(n)
        return self._rng.randbytes(n)

    def nonce(self) -> bytes:
        return self.bytes(NONCE_LEN)


class SimulatedClock:
    """Explicitly advanced millisecond clock for deterministic protocol runs."""

    def __init__(self, start_ms: int = 0):
        if start_ms < 0:
            raise ValueError("start_ms must be non-negative")
        self._now = int(start_ms)

    def now(self) -> int:
        return self._now

    def advance(self, delta_ms: int) -> None:
        if delta_ms < 0:
            raise ValueError("clock cannot move backwards")
        self._now += int(delta_ms)


class SystemClock:
    """Monotonic wall clock in milliseconds (live mode)."""

    def now(self) -> int:
        return time.monotonic_ns() // 1_000_000


def _check_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_LEN:
        raise ValueError("key must be %d bytes" % KEY_LEN)


def enc(plaintext: bytes, key: bytes, rng: RandomSource) -> bytes:
    """Encrypt with AES-128-CBC/PKCS#7. Returns IV || ciphertext."""
    _check_key(key)
    iv = rng.bytes(IV_LEN)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(bytes(plaintext)) + padder.finalize()
    encryptor = Cipher(algorithms.AES(bytes(key)), modes.CBC(iv)).encryptor()
    return iv + encryptor.update(padded) + encryptor.finalize()


def dec(blob: bytes, key: bytes) -> bytes:
    """Decrypt IV || ciphertext produced by enc(). Raises DecryptError."""
    _check_key(key)
    blob = bytes(blob)
    if len(blob) < IV_LEN + 16 or (len(blob) - IV_LEN) % 16 != 0:
        raise DecryptError("ciphertext has invalid length")
    iv, body = blob[:IV_LEN], blob[IV_LEN:]
    decryptor = Cipher(algorithms.AES(bytes(key)), modes.CBC(iv)).decryptor()
    padded = decryptor.update(body) + decryptor.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as e:
        raise DecryptError("bad padding") from e


def hmac_tag(message: bytes, key: bytes) -> bytes:
    """HMAC-SHA256 tag (32 bytes)."""
    _check_key(key)
    return _hmac.new(bytes(key), bytes(message), hashlib.sha256).digest()


def hmac_verify(message: bytes, key: bytes, tag: bytes) -> bool:
    """Constant-time tag comparison."""
    if not isinstance(tag, (bytes, bytearray)) or len(tag) != TAG_LEN:
        return False
    return _hmac.compare_digest(hmac_tag(message, key), bytes(tag))


class KeyStore:
    """Pairwise pre-shared keys.

    Each unordered device pair holds two independent 128-bit keys: an outer
    key for handshake messages and an inner key for attestation reports
    produced inside the trusted environment.
    """

    def __init__(self):
        self._outer: dict[frozenset, bytes] = {}
        self._inner: dict[frozenset, bytes] = {}

    @staticmethod
    def _pair(a: bytes, b: bytes) -> frozenset:
        if a == b:
            raise ValueError("a key pair needs two distinct device ids")
        return frozenset((bytes(a), bytes(b)))

    def add_pair(self, a: bytes, b: bytes, outer: bytes, inner: bytes) -> None:
        if len(outer) != KEY_LEN or len(inner) != KEY_LEN:
            raise ValueError("keys must be %d bytes" % KEY_LEN)
        if outer == inner:
            raise ValueError("outer and inner key must differ")
        p = self._pair(a, b)
        self._outer[p] = bytes(outer)
        self._inner[p] = bytes(inner)

    def outer(self, a: bytes, b: bytes) -> bytes:
        return self._outer[self._pair(a, b)]

    def inner(self, a: bytes, b: bytes) -> bytes:
        return self._inner[self._pair(a, b)]

    def has_pair(self, a: bytes, b: bytes) -> bool:
        return self._pair(a, b) in self._outer

    def peers(self, a: bytes) -> list[bytes]:
        """Device ids that share keys with a, sorted."""
        a = bytes(a)
        out = []
        for pair in self._outer:
            if a in pair:
                out.extend(x for x in pair if x != a)
        return sorted(out)

    @classmethod
    def generate(cls, device_ids: list[bytes], rng: RandomSource) -> "KeyStore":
        """Provision distinct outer/inner keys for every device pair."""
        ks = cls()
        ids = sorted(bytes(d) for d in device_ids)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                outer = rng.bytes(KEY_LEN)
                inner = rng.bytes(KEY_LEN)
                while inner == outer:
                    inner = rng.bytes(KEY_LEN)
                ks.add_pair(a, b, outer, inner)
        return ks
