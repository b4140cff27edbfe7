"""The DApp attestation contract and the DROP service-provider contract.

Method arguments use a fixed canonical encoding: every field is a 4-byte
big-endian length followed by its payload. Integers are 32-byte big-endian,
strings UTF-8, addresses 20 raw bytes, signatures r || s || v (65 bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any

from .chain import Contract, ExecutionContext, Revert
from .crypto import CryptoError, EthAddress, Signature, eth_signed_message_hash, recover

ROLE_SP_AGENT = "sp-agent"

AVAILABLE = "available"
BUSY = "busy"
OFFLINE = "offline"
WORKER_STATUSES = (AVAILABLE, BUSY, OFFLINE)

PENDING = "pending"
RUNNING = "running"
COMPLETED = "completed"
FAILED = "failed"
DEPLOYMENT_STATES = (PENDING, RUNNING, COMPLETED, FAILED)
LEGAL_TRANSITIONS = {
    PENDING: (RUNNING, FAILED),
    RUNNING: (COMPLETED, FAILED),
}


# -- canonical argument encoding -----------------------------------------------------


def _field(value: Any) -> bytes:
    if isinstance(value, bool):
        payload = b"\x01" if value else b"\x00"
    elif isinstance(value, int):
        payload = value.to_bytes(32, "big")
    elif isinstance(value, str):
        payload = value.encode()
    elif isinstance(value, EthAddress):
        payload = value.raw
    elif isinstance(value, Signature):
        payload = value.to_bytes()
    elif isinstance(value, (bytes, bytearray)):
        payload = bytes(value)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")
    return struct.pack(">I", len(payload)) + payload


def encode_args(*values: Any) -> bytes:
    return b"".join(_field(v) for v in values)


def decode_args(data: bytes, schema: tuple[str, ...]) -> list[Any]:
    """Decode ``data`` against a schema of "bytes", "str", "uint", "bool", "address", "sig"."""
    out: list[Any] = []
    off = 0
    for kind in schema:
        if off + 4 > len(data):
            raise Revert("malformed arguments")
        (n,) = struct.unpack(">I", data[off:off + 4])
        payload = data[off + 4:off + 4 + n]
        if len(payload) != n:
            raise Revert("malformed arguments")
        off += 4 + n
        try:
            if kind == "bytes":
                out.append(payload)
            elif kind == "str":
                out.append(payload.decode())
            elif kind == "uint":
                if n != 32:
                    raise ValueError("uint must be 32 bytes")
                out.append(int.from_bytes(payload, "big"))
            elif kind == "bool":
                out.append(payload == b"\x01")
            elif kind == "address":
                out.append(EthAddress(payload))
            elif kind == "sig":
                out.append(Signature.from_bytes(payload))
            else:
                raise ValueError(f"unknown kind {kind}")
        except (ValueError, UnicodeDecodeError) as exc:
            raise Revert(f"malformed arguments: {exc}") from exc
    if off != len(data):
        raise Revert("malformed arguments: trailing bytes")
    return out


@dataclass(frozen=True)
class CostModel:
    """Virtual execution cost in milliseconds."""

    method_cost_ms: float = 2.0
    sig_verify_cost_ms: float = 2.0


class _SignatureGate:
    """Shared verification: personal-message hash, ecrecover, compare, replay guard."""

    costs: CostModel
    faithful_replay: bool
    storage: Any

    def _verify_against(self, ctx: ExecutionContext, expected: EthAddress, msg: bytes, sig: Signature) -> bool:
        ctx.charge(self.costs.sig_verify_cost_ms)
        digest = eth_signed_message_hash(msg)
        try:
            recovered = recover(digest, sig)
        except CryptoError:
            return False
        if recovered != expected:
            return False
        if not self.faithful_replay:
            key = b"seen:" + digest
            if key in self.storage:
                return False
            self.storage.set(key, b"\x01")
        return True


class DAppContract(_SignatureGate, Contract):
    """Per-DApp contract: RegisterPK and OffChainFunctionSignatureVerify."""

    def __init__(
        self,
        address: EthAddress,
        owner: EthAddress,
        costs: CostModel | None = None,
        faithful_replay: bool = False,
    ) -> None:
        super().__init__(address)
        self.costs = costs or CostModel()
        self.method_cost_ms = self.costs.method_cost_ms
        self.faithful_replay = faithful_replay
        self.storage.set(b"owner", owner.raw)

    @property
    def owner(self) -> EthAddress:
        return EthAddress(self.storage.get(b"owner"))

    @property
    def registered_ea(self) -> EthAddress | None:
        raw = self.storage.get(b"registered_ea")
        return EthAddress(raw) if raw else None

    def seen_nonces(self) -> list[bytes]:
        return [k[len(b"seen:"):] for k, _ in self.storage.items(b"seen:")]

    def call_register_pk(self, ctx: ExecutionContext, args: bytes) -> bytes:
        (ea,) = decode_args(args, ("address",))
        if ctx.sender != self.owner:
            raise Revert("not-owner")
        self.storage.set(b"registered_ea", ea.raw)
        ctx.emit("PublicKeyRegistered", ea.raw)
        return b""

    def call_off_chain_function_signature_verify(self, ctx: ExecutionContext, args: bytes) -> bytes:
        msg, sig = decode_args(args, ("bytes", "sig"))
        registered = self.registered_ea
        if registered is None:
            raise Revert("no-registered-key")
        ok = self._verify_against(ctx, registered, msg, sig)
        ctx.emit("SignatureVerified", (b"\x01" if ok else b"\x00") + eth_signed_message_hash(msg))
        return b"\x01" if ok else b"\x00"


@dataclass(frozen=True)
class WorkerRecord:
    worker_id: str
    controller_ea: EthAddress
    attested: bool
    status: str

    def encode(self) -> bytes:
        return encode_args(self.controller_ea, self.attested, self.status)

    @classmethod
    def decode(cls, worker_id: str, data: bytes) -> WorkerRecord:
        ea, attested, status = decode_args(data, ("address", "bool", "str"))
        return cls(worker_id, ea, attested, status)


@dataclass(frozen=True)
class DeploymentRecord:
    deployment_id: int
    requester: EthAddress
    image_cid: bytes
    worker_id: str
    sid: str
    state: str

    def encode(self) -> bytes:
        return encode_args(self.requester, self.image_cid, self.worker_id, self.sid, self.state)

    @classmethod
    def decode(cls, deployment_id: int, data: bytes) -> DeploymentRecord:
        requester, cid, worker_id, sid, state = decode_args(data, ("address", "bytes", "str", "str", "str"))
        return cls(deployment_id, requester, cid, worker_id, sid, state)


def worker_role(worker_id: str) -> str:
    return f"worker:{worker_id}"


class ServiceProviderContract(_SignatureGate, Contract):
    """DROP's SC_SP: role-keyed attestation, worker registry, orchestration, status reports.

    Methods called by off-chain functions (worker registration, status reports)
    must pass :meth:`on_chain_attestation` or the transaction reverts. With
    ``ra_enabled=False`` registration skips the check; that is the control
    configuration the benchmark compares against.
    """

    def __init__(
        self,
        address: EthAddress,
        owner: EthAddress,
        costs: CostModel | None = None,
        faithful_replay: bool = False,
        ra_enabled: bool = True,
        roles: dict[str, EthAddress] | None = None,
    ) -> None:
        super().__init__(address)
        self.costs = costs or CostModel()
        self.method_cost_ms = self.costs.method_cost_ms
        self.faithful_replay = faithful_replay
        self.ra_enabled = ra_enabled
        self.storage.set(b"owner", owner.raw)
        # genesis role keys, as if registered by the owner before the first block
        for role, ea in (roles or {}).items():
            self.storage.set(b"role:" + role.encode(), ea.raw)

    @property
    def owner(self) -> EthAddress:
        return EthAddress(self.storage.get(b"owner"))

    # -- attestation -------------------------------------------------------------

    def role_key(self, role: str) -> EthAddress | None:
        raw = self.storage.get(b"role:" + role.encode())
        return EthAddress(raw) if raw else None

    def on_chain_attestation(self, ctx: ExecutionContext, role: str, msg: bytes, sig: Signature) -> bool:
        expected = self.role_key(role)
        if expected is None:
            raise Revert("unknown-role")
        ok = self._verify_against(ctx, expected, msg, sig)
        ctx.emit("OnChainAttestation", (b"\x01" if ok else b"\x00") + role.encode())
        return ok

    def _require_attested(self, ctx: ExecutionContext, role: str, msg: bytes, sig: Signature) -> None:
        if not self.on_chain_attestation(ctx, role, msg, sig):
            raise Revert("attestation-failed")

    def call_register_role_key(self, ctx: ExecutionContext, args: bytes) -> bytes:
        role, ea = decode_args(args, ("str", "address"))
        if ctx.sender != self.owner:
            raise Revert("not-owner")
        self.storage.set(b"role:" + role.encode(), ea.raw)
        ctx.emit("RoleKeyRegistered", role.encode())
        return b""

    def call_on_chain_attestation(self, ctx: ExecutionContext, args: bytes) -> bytes:
        role, msg, sig = decode_args(args, ("str", "bytes", "sig"))
        return b"\x01" if self.on_chain_attestation(ctx, role, msg, sig) else b"\x00"

    # -- workers -----------------------------------------------------------------

    def worker(self, worker_id: str) -> WorkerRecord | None:
        raw = self.storage.get(b"worker:" + worker_id.encode())
        return WorkerRecord.decode(worker_id, raw) if raw else None

    def worker_ids(self) -> list[str]:
        n = int.from_bytes(self.storage.get(b"worker_count", bytes(4)), "big")
        return [self.storage.get(b"widx:" + i.to_bytes(4, "big")).decode() for i in range(n)]

    def workers(self) -> list[WorkerRecord]:
        return [self.worker(w) for w in sorted(self.worker_ids())]

    def off_chain_worker_lookup(self) -> list[WorkerRecord]:
        """OffChainWorkerLookup: available workers, ordered by worker id."""
        return [w for w in self.workers() if w.status == AVAILABLE]

    def _put_worker(self, record: WorkerRecord) -> None:
        self.storage.set(b"worker:" + record.worker_id.encode(), record.encode())

    def call_off_chain_worker_register(self, ctx: ExecutionContext, args: bytes) -> bytes:
        worker_id, controller, msg, sig = decode_args(args, ("str", "address", "bytes", "sig"))
        if self.ra_enabled:
            self._require_attested(ctx, ROLE_SP_AGENT, msg, sig)
        if not worker_id or self.worker(worker_id) is not None:
            raise Revert("duplicate-worker")
        self._put_worker(WorkerRecord(worker_id, controller, True, AVAILABLE))
        n = int.from_bytes(self.storage.get(b"worker_count", bytes(4)), "big")
        self.storage.set(b"widx:" + n.to_bytes(4, "big"), worker_id.encode())
        self.storage.set(b"worker_count", (n + 1).to_bytes(4, "big"))
        self.storage.set(b"role:" + worker_role(worker_id).encode(), controller.raw)
        ctx.emit("WorkerRegistered", encode_args(worker_id, controller))
        return b""

    def call_off_chain_worker_set_status(self, ctx: ExecutionContext, args: bytes) -> bytes:
        worker_id, status, msg, sig = decode_args(args, ("str", "str", "bytes", "sig"))
        record = self.worker(worker_id)
        if record is None:
            raise Revert("unknown-worker")
        self._require_attested(ctx, worker_role(worker_id), msg, sig)
        if status not in (AVAILABLE, OFFLINE) or record.status == BUSY:
            raise Revert("illegal-transition")
        if status == AVAILABLE and not record.attested:
            raise Revert("worker-not-attested")
        self._put_worker(WorkerRecord(worker_id, record.controller_ea, record.attested, status))
        ctx.emit("WorkerStatus", encode_args(worker_id, status))
        return b""

    # -- deployments -------------------------------------------------------------

    def deployment(self, deployment_id: int) -> DeploymentRecord | None:
        raw = self.storage.get(b"deploy:" + deployment_id.to_bytes(8, "big"))
        return DeploymentRecord.decode(deployment_id, raw) if raw else None

    def deployments(self) -> list[DeploymentRecord]:
        prefix = b"deploy:"
        return [DeploymentRecord.decode(int.from_bytes(k[len(prefix):], "big"), v) for k, v in self.storage.items(prefix)]

    def _put_deployment(self, record: DeploymentRecord) -> None:
        self.storage.set(b"deploy:" + record.deployment_id.to_bytes(8, "big"), record.encode())

    def call_off_chain_function_deploy(self, ctx: ExecutionContext, args: bytes) -> bytes:
        image_cid, worker_id, sid = decode_args(args, ("bytes", "str", "str"))
        record = self.worker(worker_id)
        if record is None or record.status != AVAILABLE:
            raise Revert("worker-unavailable")
        deployment_id = int.from_bytes(self.storage.get(b"deploy_count", bytes(8)), "big") + 1
        self.storage.set(b"deploy_count", deployment_id.to_bytes(8, "big"))
        self._put_deployment(DeploymentRecord(deployment_id, ctx.sender, image_cid, worker_id, sid, PENDING))
        self._put_worker(WorkerRecord(worker_id, record.controller_ea, record.attested, BUSY))
        # OffChainWorkerOrchestration: hand the image label to the chosen worker
        ctx.emit("Orchestrate", encode_args(deployment_id, image_cid, worker_id, sid))
        return deployment_id.to_bytes(32, "big")

    def call_report_status(self, ctx: ExecutionContext, args: bytes) -> bytes:
        deployment_id, new_state, msg, sig = decode_args(args, ("uint", "str", "bytes", "sig"))
        record = self.deployment(deployment_id)
        if record is None:
            raise Revert("unknown-deployment")
        self._require_attested(ctx, worker_role(record.worker_id), msg, sig)
        if new_state not in LEGAL_TRANSITIONS.get(record.state, ()):
            raise Revert("illegal-transition")
        self._put_deployment(
            DeploymentRecord(deployment_id, record.requester, record.image_cid, record.worker_id, record.sid, new_state)
        )
        if new_state in (COMPLETED, FAILED):
            worker = self.worker(record.worker_id)
            self._put_worker(WorkerRecord(worker.worker_id, worker.controller_ea, worker.attested, AVAILABLE))
        ctx.emit("DeploymentStatus", encode_args(deployment_id, new_state))
        return b""


def decode_orchestrate(data: bytes) -> tuple[int, bytes, str, str]:
    deployment_id, cid, worker_id, sid = decode_args(data, ("uint", "bytes", "str", "str"))
    return deployment_id, cid, worker_id, sid
