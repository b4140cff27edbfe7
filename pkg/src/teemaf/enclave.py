"""Simulated SGX platform: measurement, launch, EREPORT, quoting and quote verification.

The platform's root provisioning key stays inside :class:`PlatformIdentity`;
only the attestation public key derived from it is published.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .crypto import KeyPair, Signature, secp256k1, sign_digest, verify_digest

REPORT_DATA_LEN = 64

BAD_SIGNATURE = "bad-signature"
UNKNOWN_PLATFORM = "unknown-platform"
STALE_FIRMWARE = "stale-firmware"
MALFORMED_QUOTE = "malformed-quote"

_AK_LABEL = b"teemaf/attestation-key\x00"
_REPORT_KEY_LABEL = b"teemaf/report-key\x00"


class EnclaveError(Exception):
    pass


class StaleHandle(EnclaveError):
    pass


class CrossPlatformReport(EnclaveError):
    """Local attestation failed: the report was not produced on this platform."""


class MalformedQuote(EnclaveError):
    pass


def measure(code: bytes) -> bytes:
    """MRENCLAVE stand-in: SHA-256 over the whole image."""
    return hashlib.sha256(code).digest()


@dataclass(frozen=True)
class EnclaveImage:
    code: bytes

    @property
    def mre(self) -> bytes:
        return measure(self.code)


class PlatformIdentity:
    """An SGX-capable CPU. Immutable once provisioned."""

    __slots__ = ("platform_id", "firmware_version", "__rpk", "__ak")

    def __init__(self, platform_id: str, rpk: bytes, firmware_version: int = 1) -> None:
        if len(rpk) != 32:
            raise ValueError("root provisioning key must be 32 bytes")
        if firmware_version < 0:
            raise ValueError("firmware version must be non-negative")
        self.platform_id = platform_id
        self.firmware_version = firmware_version
        self.__rpk = rpk
        tag = hmac.new(rpk, _AK_LABEL + firmware_version.to_bytes(4, "big"), hashlib.sha256).digest()
        self.__ak = KeyPair.from_secret(int.from_bytes(tag, "big") % (secp256k1.N - 1) + 1)

    @classmethod
    def provision(cls, platform_id: str, rng: random.Random, firmware_version: int = 1) -> PlatformIdentity:
        return cls(platform_id, rng.randbytes(32), firmware_version)

    def with_firmware(self, firmware_version: int) -> PlatformIdentity:
        """Same fused key, different firmware: the attestation key changes with it."""
        return PlatformIdentity(self.platform_id, self.__rpk, firmware_version)

    @property
    def attestation_public_key(self) -> bytes:
        return self.__ak.pk

    def _report_mac(self, body: bytes) -> bytes:
        key = hmac.new(self.__rpk, _REPORT_KEY_LABEL, hashlib.sha256).digest()
        return hmac.new(key, body, hashlib.sha256).digest()

    def _sign(self, digest: bytes) -> Signature:
        return sign_digest(digest, self.__ak.sk)

    def __repr__(self) -> str:
        return f"PlatformIdentity({self.platform_id!r}, firmware_version={self.firmware_version})"

    def __reduce__(self):
        raise TypeError("platform identities cannot be serialized")


@dataclass(frozen=True)
class Report:
    mre: bytes
    report_data: bytes
    platform_id: str
    mac: bytes

    def body(self) -> bytes:
        pid = self.platform_id.encode()
        return self.mre + self.report_data + struct.pack(">H", len(pid)) + pid

    def to_bytes(self) -> bytes:
        return self.body() + self.mac


@dataclass(frozen=True)
class Quote:
    report: Report
    firmware_version: int
    ak_signature: Signature

    def signed_body(self) -> bytes:
        return self.report.to_bytes() + struct.pack(">I", self.firmware_version)

    def to_bytes(self) -> bytes:
        return self.signed_body() + self.ak_signature.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        try:
            mre = data[0:32]
            report_data = data[32:96]
            (pid_len,) = struct.unpack(">H", data[96:98])
            pid = data[98:98 + pid_len].decode()
            off = 98 + pid_len
            mac = data[off:off + 32]
            (fw,) = struct.unpack(">I", data[off + 32:off + 36])
            sig = Signature.from_bytes(data[off + 36:])
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise MalformedQuote(str(exc)) from exc
        if len(mre) != 32 or len(report_data) != REPORT_DATA_LEN or len(mac) != 32:
            raise MalformedQuote("truncated quote")
        return cls(Report(mre, report_data, pid, mac), fw, sig)


@dataclass(frozen=True)
class AttestationVerificationReport:
    positive: bool
    quoted_mre: bytes
    platform_id: str
    reason: str | None = None


AVR = AttestationVerificationReport


class EnclaveHandle:
    """A launched enclave. Confined to the simulated container that owns it."""

    def __init__(self, platform: PlatformIdentity, mre: bytes) -> None:
        self._platform = platform
        self.platform_id = platform.platform_id
        self.mre = mre
        self.live = True
        self.issued_report_data: list[bytes] = []
        self._secrets = None

    def destroy(self) -> None:
        self.live = False
        self._secrets = None

    def accept_secrets(self, bundle) -> None:
        if not self.live:
            raise StaleHandle("enclave was destroyed")
        self._secrets = bundle

    @property
    def secrets(self):
        return self._secrets

    def __repr__(self) -> str:
        return f"EnclaveHandle(platform={self.platform_id!r}, mre={self.mre.hex()[:16]}..)"


def launch(image: EnclaveImage, platform: PlatformIdentity) -> EnclaveHandle:
    return EnclaveHandle(platform, measure(image.code))


def ereport(handle: EnclaveHandle, report_data: bytes) -> Report:
    if not handle.live:
        raise StaleHandle("enclave was destroyed")
    if len(report_data) != REPORT_DATA_LEN:
        raise ValueError(f"report_data must be {REPORT_DATA_LEN} bytes")
    handle.issued_report_data.append(report_data)
    unsigned = Report(handle.mre, report_data, handle.platform_id, b"")
    return Report(handle.mre, report_data, handle.platform_id, handle._platform._report_mac(unsigned.body()))


def las_quote(report: Report, platform: PlatformIdentity) -> Quote:
    """Local attestation by the quoting enclave, then sign with the attestation key."""
    if report.platform_id != platform.platform_id:
        raise CrossPlatformReport(f"report from {report.platform_id!r}, quoting on {platform.platform_id!r}")
    if not hmac.compare_digest(report.mac, platform._report_mac(report.body())):
        raise CrossPlatformReport("report MAC does not verify under this platform's report key")
    body = report.to_bytes() + struct.pack(">I", platform.firmware_version)
    return Quote(report, platform.firmware_version, platform._sign(hashlib.sha256(body).digest()))


@dataclass(frozen=True)
class RegistryEntry:
    attestation_public_key: bytes
    min_firmware: int


class PlatformRegistry:
    """Known genuine platforms, as the attestation service sees them."""

    def __init__(self) -> None:
        self._entries: dict[str, RegistryEntry] = {}

    def register(self, platform_id: str, attestation_public_key: bytes, min_firmware: int) -> None:
        self._entries[platform_id] = RegistryEntry(attestation_public_key, min_firmware)

    def enroll(self, platform: PlatformIdentity, min_firmware: int | None = None) -> None:
        floor = platform.firmware_version if min_firmware is None else min_firmware
        self.register(platform.platform_id, platform.attestation_public_key, floor)

    def get(self, platform_id: str) -> RegistryEntry | None:
        return self._entries.get(platform_id)

    def __contains__(self, platform_id: str) -> bool:
        return platform_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def dump(self, path: str | Path) -> None:
        lines = ["# platform_id(hex) attestation_public_key(hex) min_firmware(hex)"]
        for pid in sorted(self._entries):
            e = self._entries[pid]
            lines.append(f"{pid.encode().hex()} {e.attestation_public_key.hex()} {e.min_firmware:x}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PlatformRegistry:
        reg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                pid, pk, fw = line.split()
                reg.register(bytes.fromhex(pid).decode(), bytes.fromhex(pk), int(fw, 16))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return reg


def verify_quote(quote: Quote | bytes, registry: PlatformRegistry) -> AVR:
    """Attestation-service check. Failures come back as negative reports, never exceptions."""
    if isinstance(quote, (bytes, bytearray)):
        try:
            quote = Quote.from_bytes(bytes(quote))
        except MalformedQuote:
            return AVR(False, b"", "", MALFORMED_QUOTE)
    report = quote.report
    entry = registry.get(report.platform_id)
    if entry is None:
        return AVR(False, report.mre, report.platform_id, UNKNOWN_PLATFORM)
    if quote.firmware_version < entry.min_firmware:
        return AVR(False, report.mre, report.platform_id, STALE_FIRMWARE)
    digest = hashlib.sha256(quote.signed_body()).digest()
    if not verify_digest(digest, quote.ak_signature, entry.attestation_public_key):
        return AVR(False, report.mre, report.platform_id, BAD_SIGNATURE)
    return AVR(True, report.mre, report.platform_id)


class QuoteVerifier(Protocol):
    def verify(self, quote: Quote) -> AVR: ...


class AttestationService:
    """Single simulated backend standing in for IAS or DCAP."""

    def __init__(self, registry: PlatformRegistry) -> None:
        self.registry = registry
        self.verified = 0

    def verify(self, quote: Quote) -> AVR:
        self.verified += 1
        return verify_quote(quote, self.registry)
