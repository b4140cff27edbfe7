"""secp256k1 keys, Ethereum addresses and personal-message signatures."""

from .eth import (
    CryptoError,
    EthAddress,
    GoldenVector,
    InvalidKey,
    InvalidPoint,
    KeyPair,
    Signature,
    UnrecoverableSignature,
    derive_address,
    eth_signed_message_hash,
    keygen,
    read_golden_vectors,
    recover,
    recover_public_key,
    sign,
    sign_digest,
    verify_digest,
    write_golden_vectors,
)
from .keccak import keccak256

__all__ = [
    "CryptoError",
    "EthAddress",
    "GoldenVector",
    "InvalidKey",
    "InvalidPoint",
    "KeyPair",
    "Signature",
    "UnrecoverableSignature",
    "derive_address",
    "eth_signed_message_hash",
    "keccak256",
    "keygen",
    "read_golden_vectors",
    "recover",
    "recover_public_key",
    "sign",
    "sign_digest",
    "verify_digest",
    "write_golden_vectors",
]
