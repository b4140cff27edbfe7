"""Simulated SCONE CAS: policy store, attestation-gated secret release, injection channel."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable

from .crypto import EthAddress, keygen
from .enclave import (
    AVR,
    AttestationService,
    EnclaveHandle,
    EnclaveImage,
    PlatformIdentity,
    PlatformRegistry,
    MalformedQuote,
    Quote,
    QuoteVerifier,
    ereport,
    las_quote,
    launch,
)

NONCE_MISMATCH = "nonce-mismatch"
MRE_MISMATCH = "mre-mismatch"
ATTESTATION_FAILED = "attestation-failed"
CHANNEL_REFUSED = "channel-refused"
UNKNOWN_SID = "unknown-sid"
MALFORMED_MESSAGE = "malformed-message"

REQUIRED_SECRETS = ("sk_offcf", "sca_dapp")
SESSION_TTL_MS = 60_000


class CASError(Exception):
    pass


class DuplicateSid(CASError):
    pass


class UnknownSid(CASError):
    pass


class UnknownSession(CASError):
    pass


class PolicyInvalid(CASError):
    pass


class ChannelRefused(CASError):
    pass


@dataclass(frozen=True)
class Policy:
    sid: str
    mre: bytes
    secrets: dict[str, bytes]
    owner: EthAddress

    def __post_init__(self) -> None:
        if not self.sid:
            raise PolicyInvalid("empty sid")
        if len(self.mre) != 32:
            raise PolicyInvalid("mre must be 32 bytes")
        if not self.secrets:
            raise PolicyInvalid("policy has no secrets")
        missing = [name for name in REQUIRED_SECRETS if name not in self.secrets]
        if missing:
            raise PolicyInvalid(f"policy missing secrets: {', '.join(missing)}")
        if len(self.secrets["sk_offcf"]) != 32:
            raise PolicyInvalid("sk_offcf must be 32 bytes")
        if len(self.secrets["sca_dapp"]) != 20:
            raise PolicyInvalid("sca_dapp must be a 20-byte address")

    def __repr__(self) -> str:
        return f"Policy(sid={self.sid!r}, mre={self.mre.hex()[:16]}.., secrets=<{len(self.secrets)} hidden>)"

    def to_json(self) -> dict:
        return {
            "sid": self.sid,
            "mre": self.mre.hex(),
            "secrets": {k: v.hex() for k, v in sorted(self.secrets.items())},
            "owner": self.owner.raw.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Policy:
        try:
            return cls(
                sid=obj["sid"],
                mre=bytes.fromhex(obj["mre"]),
                secrets={k: bytes.fromhex(v) for k, v in obj["secrets"].items()},
                owner=EthAddress.from_hex(obj["owner"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PolicyInvalid):
                raise
            raise PolicyInvalid(f"bad policy document: {exc}") from exc


def load_policies(path: str | Path) -> list[Policy]:
    """Read a JSON policy file: one policy object or a list of them."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = [doc]
    return [Policy.from_json(p) for p in doc]


_INJECT_TOKEN = object()


class SecretBundle:
    """Secrets released to an attested container. Only the CAS inject path builds these."""

    __slots__ = ("sk_offcf", "sca_dapp", "session_id")

    def __init__(self, sk_offcf: bytes, sca_dapp: EthAddress, session_id: str, *, _token: object = None) -> None:
        if _token is not _INJECT_TOKEN:
            raise TypeError("SecretBundle is only issued by the CAS inject path")
        self.sk_offcf = sk_offcf
        self.sca_dapp = sca_dapp
        self.session_id = session_id

    def __repr__(self) -> str:
        return f"SecretBundle(session={self.session_id}, sca={self.sca_dapp}, sk=<hidden>)"


def _issue_bundle(sk_offcf: bytes, sca_dapp: EthAddress, session_id: str) -> SecretBundle:
    return SecretBundle(sk_offcf, sca_dapp, session_id, _token=_INJECT_TOKEN)


@dataclass(frozen=True)
class Refusal:
    reason: str
    session_id: str | None = None
    avr: AVR | None = None


class AttestedChannel:
    """Authenticated delivery bound to one attested enclave; anything else is refused."""

    def __init__(self, attested: EnclaveHandle, quote: Quote) -> None:
        self._attested = attested
        self._quote = quote

    def deliver(self, bundle: SecretBundle, endpoint: object) -> None:
        report = self._quote.report
        if (
            endpoint is not self._attested
            or not isinstance(endpoint, EnclaveHandle)
            or not endpoint.live
            or endpoint.platform_id != report.platform_id
            or endpoint.mre != report.mre
            or report.report_data not in endpoint.issued_report_data
        ):
            raise ChannelRefused("endpoint is not the attested enclave")
        endpoint.accept_secrets(bundle)


@dataclass
class _Session:
    sid: str
    nonce: bytes
    opened_at: int


def report_binding(nonce: bytes, sid: str) -> bytes:
    """The 64 report_data bytes a container must put in its report for a session."""
    return nonce + hashlib.sha256(b"teemaf/sid\x00" + sid.encode()).digest()


@dataclass
class CAS:
    verifier: QuoteVerifier
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    clock: Callable[[], int] = lambda: 0
    _policies: dict[str, Policy] = field(default_factory=dict, repr=False)
    _sessions: dict[str, _Session] = field(default_factory=dict, repr=False)
    _session_counter: int = 0
    audit: list[tuple[str, str, str]] = field(default_factory=list, repr=False)

    def register_policy(self, policy: Policy) -> str:
        if policy.sid in self._policies:
            raise DuplicateSid(policy.sid)
        self._policies[policy.sid] = policy
        return policy.sid

    def policy_ids(self) -> list[str]:
        return list(self._policies)

    def has_policy(self, sid: str) -> bool:
        return sid in self._policies

    def policy_mre(self, sid: str) -> bytes:
        return self._policies[sid].mre

    def begin_session(self, sid: str) -> tuple[str, bytes]:
        if sid not in self._policies:
            raise UnknownSid(sid)
        self._session_counter += 1
        session_id = f"s{self._session_counter:06d}"
        nonce = self.rng.randbytes(32)
        self._sessions[session_id] = _Session(sid, nonce, self.clock())
        return session_id, nonce

    def _take_session(self, session_id: str) -> _Session:
        session = self._sessions.pop(session_id, None)
        if session is None or self.clock() - session.opened_at > SESSION_TTL_MS:
            raise UnknownSession(session_id)
        return session

    def verify_and_inject(
        self, session_id: str, quote: Quote | bytes, endpoint: object = None
    ) -> SecretBundle | Refusal:
        """Release the policy's secrets iff nonce, measurement and attestation all check out.

        The session is consumed whatever the outcome. When ``endpoint`` is given the
        bundle is also delivered over an :class:`AttestedChannel` bound to it.
        Wire-format quotes that fail to parse are refused, never raised.
        """
        session = self._take_session(session_id)
        policy = self._policies[session.sid]
        if not isinstance(quote, Quote):
            try:
                quote = Quote.from_bytes(bytes(quote))
            except (MalformedQuote, TypeError):
                return self._refuse(session_id, MALFORMED_MESSAGE)
        report = quote.report
        if report.report_data != report_binding(session.nonce, session.sid):
            return self._refuse(session_id, NONCE_MISMATCH)
        if report.mre != policy.mre:
            return self._refuse(session_id, MRE_MISMATCH)
        avr = self.verifier.verify(quote)
        if not avr.positive:
            return self._refuse(session_id, ATTESTATION_FAILED, avr)
        bundle = _issue_bundle(
            policy.secrets["sk_offcf"], EthAddress(policy.secrets["sca_dapp"]), session_id
        )
        if endpoint is not None:
            try:
                AttestedChannel(endpoint, quote).deliver(bundle, endpoint)
            except ChannelRefused:
                return self._refuse(session_id, CHANNEL_REFUSED, avr)
        self.audit.append((session_id, session.sid, "released"))
        return bundle

    def _refuse(self, session_id: str, reason: str, avr: AVR | None = None) -> Refusal:
        self.audit.append((session_id, "", reason))
        return Refusal(reason, session_id, avr)


@dataclass(frozen=True)
class GateRow:
    nonce_ok: bool
    mre_ok: bool
    avr_ok: bool
    released: bool
    reason: str | None


def exhaustive_gate_truth_table(seed: int = 0) -> list[GateRow]:
    """Drive the CAS gate through all eight nonce/measurement/attestation combinations."""
    rng = random.Random(seed)
    rows = []
    for nonce_ok, mre_ok, avr_ok in product((False, True), repeat=3):
        good = PlatformIdentity.provision("gate-platform", rng)
        registry = PlatformRegistry()
        if avr_ok:
            registry.enroll(good)
        cas = CAS(AttestationService(registry), rng=random.Random(rng.random()))
        image = EnclaveImage(b"gate-fixture-image")
        owner = keygen(f"gate-owner-{seed}")
        cas.register_policy(
            Policy(
                sid="gate",
                mre=image.mre if mre_ok else bytes(32),
                secrets={"sk_offcf": keygen(f"gate-sk-{seed}").sk, "sca_dapp": bytes(range(20))},
                owner=owner.address,
            )
        )
        session_id, nonce = cas.begin_session("gate")
        handle = launch(image, good)
        bound = report_binding(nonce if nonce_ok else bytes(32), "gate")
        quote = las_quote(ereport(handle, bound), good)
        outcome = cas.verify_and_inject(session_id, quote, handle)
        released = isinstance(outcome, SecretBundle)
        rows.append(GateRow(nonce_ok, mre_ok, avr_ok, released, None if released else outcome.reason))
    return rows
