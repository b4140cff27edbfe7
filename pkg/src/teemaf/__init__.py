"""Mutual attestation between smart contracts and TEE-hosted off-chain functions, simulated end to end."""

__version__ = "0.1.0"
