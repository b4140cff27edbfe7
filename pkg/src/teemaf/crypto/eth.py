"""Ethereum-convention keys, addresses, personal-message hashing and ecrecover."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from . import secp256k1 as curve
from .keccak import keccak256

PERSONAL_PREFIX = b"\x19Ethereum Signed Message:\n"


class CryptoError(ValueError):
    """Base class for key, point and signature failures."""


class InvalidPoint(CryptoError):
    pass


class InvalidKey(CryptoError):
    pass


class UnrecoverableSignature(CryptoError):
    pass


@dataclass(frozen=True)
class EthAddress:
    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != 20:
            raise ValueError(f"address must be 20 bytes, got {len(self.raw)}")

    @classmethod
    def from_hex(cls, text: str) -> EthAddress:
        return cls(bytes.fromhex(text.removeprefix("0x")))

    def hex(self) -> str:
        return "0x" + self.raw.hex()

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True)
class KeyPair:
    sk: bytes
    pk: bytes  # x || y, 64 bytes, no 0x04 prefix

    @classmethod
    def from_secret(cls, secret: int | bytes) -> KeyPair:
        d = int.from_bytes(secret, "big") if isinstance(secret, bytes) else secret
        if not 1 <= d < curve.N:
            raise InvalidKey("secret scalar out of range")
        x, y = curve.mul_g(d)
        return cls(d.to_bytes(32, "big"), x.to_bytes(32, "big") + y.to_bytes(32, "big"))

    @property
    def address(self) -> EthAddress:
        return derive_address(self.pk)

    def __repr__(self) -> str:
        return f"KeyPair(address={self.address})"


@dataclass(frozen=True)
class Signature:
    r: int
    s: int
    v: int  # 27 or 28

    def to_bytes(self) -> bytes:
        return self.r.to_bytes(32, "big") + self.s.to_bytes(32, "big") + bytes([self.v])

    @classmethod
    def from_bytes(cls, data: bytes) -> Signature:
        if len(data) != 65:
            raise ValueError("signature must be 65 bytes")
        return cls(int.from_bytes(data[:32], "big"), int.from_bytes(data[32:64], "big"), data[64])


def _seed_bytes(seed: int | str | bytes) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes((seed.bit_length() + 8) // 8, "big", signed=True)
    return seed.encode()


def keygen(seed: int | str | bytes) -> KeyPair:
    """Deterministically derive a key pair from ``seed`` by rejection sampling."""
    material = _seed_bytes(seed)
    counter = 0
    while True:
        h = hashlib.sha256(b"teemaf/keygen\x00" + material + counter.to_bytes(4, "big")).digest()
        d = int.from_bytes(h, "big")
        if 1 <= d < curve.N:
            return KeyPair.from_secret(d)
        counter += 1


def pk_to_point(pk: bytes) -> curve.Point:
    if len(pk) != 64:
        raise InvalidPoint("public key must be 64 bytes")
    point = (int.from_bytes(pk[:32], "big"), int.from_bytes(pk[32:], "big"))
    if not curve.is_on_curve(point):
        raise InvalidPoint("public key is not on secp256k1")
    return point


def point_to_pk(point: curve.Point) -> bytes:
    return point[0].to_bytes(32, "big") + point[1].to_bytes(32, "big")


def derive_address(pk: bytes) -> EthAddress:
    pk_to_point(pk)
    return EthAddress(keccak256(pk)[-20:])


@lru_cache(maxsize=16384)
def eth_signed_message_hash(msg: bytes) -> bytes:
    return keccak256(PERSONAL_PREFIX + str(len(msg)).encode() + msg)


def _secret_int(sk: bytes) -> int:
    if len(sk) != 32:
        raise InvalidKey("private key must be 32 bytes")
    d = int.from_bytes(sk, "big")
    if not 1 <= d < curve.N:
        raise InvalidKey("private key out of range")
    return d


@lru_cache(maxsize=8192)
def sign_digest(digest: bytes, sk: bytes) -> Signature:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    r, s, recid = curve.ecdsa_sign(digest, _secret_int(sk))
    if recid > 1:
        # r overflowed the group order; not representable with v in {27, 28}
        raise CryptoError("signature requires recovery id > 1")
    return Signature(r, s, 27 + recid)


def sign(msg: bytes, sk: bytes) -> Signature:
    """Sign the personal-message hash of ``msg``."""
    return sign_digest(eth_signed_message_hash(msg), sk)


@lru_cache(maxsize=16384)
def recover_public_key(digest: bytes, sig: Signature) -> bytes:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    if sig.v not in (27, 28):
        raise UnrecoverableSignature(f"bad recovery id {sig.v}")
    if sig.s > curve.HALF_N:
        raise UnrecoverableSignature("high-s signature")
    point = curve.ecdsa_recover(digest, sig.r, sig.s, sig.v - 27)
    if point is None:
        raise UnrecoverableSignature("no curve point for signature")
    return point_to_pk(point)


def recover(digest: bytes, sig: Signature) -> EthAddress:
    """ecrecover: the address whose key produced ``sig`` over ``digest``."""
    return _address_of(recover_public_key(digest, sig))


@lru_cache(maxsize=16384)
def _address_of(pk: bytes) -> EthAddress:
    return EthAddress(keccak256(pk)[-20:])


def verify_digest(digest: bytes, sig: Signature, pk: bytes) -> bool:
    try:
        return recover_public_key(digest, sig) == pk
    except CryptoError:
        return False


# golden vector files: "msg sk r s v address" per line, hex fields, '#' comments,
# "-" for an empty message


@dataclass(frozen=True)
class GoldenVector:
    msg: bytes
    sk: bytes
    r: int
    s: int
    v: int
    address: EthAddress

    @property
    def signature(self) -> Signature:
        return Signature(self.r, self.s, self.v)


def read_golden_vectors(path: str | Path) -> list[GoldenVector]:
    vectors = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        msg, sk, r, s, v, addr = fields
        vectors.append(
            GoldenVector(
                b"" if msg == "-" else bytes.fromhex(msg),
                bytes.fromhex(sk),
                int(r, 16),
                int(s, 16),
                int(v, 16),
                EthAddress.from_hex(addr),
            )
        )
    return vectors


def format_golden_vector(vec: GoldenVector) -> str:
    return " ".join(
        [
            vec.msg.hex() or "-",
            vec.sk.hex(),
            f"{vec.r:064x}",
            f"{vec.s:064x}",
            f"{vec.v:02x}",
            vec.address.raw.hex(),
        ]
    )


def write_golden_vectors(path: str | Path, vectors: Iterable[GoldenVector], header: str = "") -> None:
    lines = [f"# {h}" for h in header.splitlines()]
    lines += [format_golden_vector(v) for v in vectors]
    Path(path).write_text("\n".join(lines) + "\n")
