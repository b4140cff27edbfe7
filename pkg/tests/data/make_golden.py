"""Regenerate golden_vectors.txt from independent oracles (libsecp256k1 via coincurve, pycryptodome Keccak).

    python3 tests/data/make_golden.py
"""

from __future__ import annotations

import random
from pathlib import Path

from coincurve import PrivateKey
from Crypto.Hash import keccak

N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141


def keccak256(data: bytes) -> bytes:
    return keccak.new(digest_bits=256, data=data).digest()


def personal_hash(msg: bytes) -> bytes:
    return keccak256(b"\x19Ethereum Signed Message:\n" + str(len(msg)).encode() + msg)


def vector(msg: bytes, sk: bytes) -> str:
    key = PrivateKey(sk)
    sig = key.sign_recoverable(personal_hash(msg), hasher=None)
    r, s, v = sig[:32], sig[32:64], 27 + sig[64]
    address = keccak256(key.public_key.format(compressed=False)[1:])[-20:]
    return f"{msg.hex() or '-'} {sk.hex()} {r.hex()} {s.hex()} {v:02x} {address.hex()}"


def main() -> None:
    rng = random.Random(20240611)
    cases = [
        (b"", (1).to_bytes(32, "big")),
        (b"abc", (N - 1).to_bytes(32, "big")),
        (b"hello world", (2).to_bytes(32, "big")),
    ]
    while len(cases) < 128:
        sk = rng.randrange(1, N).to_bytes(32, "big")
        cases.append((rng.randbytes(rng.choice([0, 1, 31, 32, 33, 64, 100, 200])), sk))
    lines = [
        "# msg sk r s v address (all hex); '-' is the empty message",
        "# produced by libsecp256k1 (coincurve) and pycryptodome Keccak-256",
    ]
    lines += [vector(m, k) for m, k in cases]
    Path(__file__).with_name("golden_vectors.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
