"""DROP off-chain runtime: content store, fixture images, worker daemons and the attesting agent.

Fixture image byte layout (all integers big-endian)::

    offset      size  field
    0           4     magic b"TMAF"
    4           1     format version
    5           2     sid length L
    7           L     sid (UTF-8)
    7+L         2     opcode count M
    9+L         2*M   opcodes, each (op, arg) as two bytes
    9+L+2M      4     payload length P
    13+L+2M     P     payload

The enclave measures the whole byte string. The header is only parsed after
attestation succeeded, so a tampered image is rejected by measurement before
any of its fields are trusted.
"""

from __future__ import annotations

import hashlib
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .cas import CAS, UNKNOWN_SID, Policy, Refusal, UnknownSid, report_binding
from .chain import Call, Chain, ChainConfig, Event, Receipt
from .contracts import (
    COMPLETED,
    FAILED,
    ROLE_SP_AGENT,
    RUNNING,
    CostModel,
    DAppContract,
    ServiceProviderContract,
    decode_orchestrate,
    encode_args,
)
from .crypto import EthAddress, KeyPair, keygen, sign
from .enclave import (
    AttestationService,
    CrossPlatformReport,
    EnclaveHandle,
    EnclaveImage,
    PlatformIdentity,
    PlatformRegistry,
    ereport,
    las_quote,
    launch,
)
from .sim import Simulation

MAGIC = b"TMAF"
IMAGE_VERSION = 1
OP_ATTEST = 0x01
OP_INTERACT = 0x02
OP_EXIT = 0x03

FETCH_NOT_FOUND = "not-found"
FETCH_INTEGRITY = "integrity-violation"
LAS_REFUSED = "las-refused"
ROLLBACK_DETECTED = "rollback-detected"
VERIFICATION_FALSE = "verification-false"
IMAGE_REJECTED = "image-rejected"


class DropError(Exception):
    pass


class ImageFormatError(DropError):
    pass


class StoreError(DropError):
    pass


class NotFound(StoreError):
    pass


class IntegrityViolation(StoreError):
    pass


class NotAttested(DropError):
    pass


class RollbackDetected(DropError):
    pass


# -- fixture images ------------------------------------------------------------------


@dataclass(frozen=True)
class FixtureImage:
    sid: str
    ops: tuple[tuple[int, int], ...]
    payload: bytes = b""
    version: int = IMAGE_VERSION

    @property
    def interactions(self) -> int:
        return sum(arg for op, arg in self.ops if op == OP_INTERACT)

    def encode(self) -> bytes:
        sid = self.sid.encode()
        out = bytearray(MAGIC)
        out += struct.pack(">BH", self.version, len(sid)) + sid
        out += struct.pack(">H", len(self.ops))
        for op, arg in self.ops:
            out += struct.pack(">BB", op, arg)
        out += struct.pack(">I", len(self.payload)) + self.payload
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> FixtureImage:
        try:
            if data[:4] != MAGIC:
                raise ImageFormatError("bad magic")
            version, sid_len = struct.unpack(">BH", data[4:7])
            if version != IMAGE_VERSION:
                raise ImageFormatError(f"unsupported image version {version}")
            sid = data[7:7 + sid_len].decode()
            off = 7 + sid_len
            (count,) = struct.unpack(">H", data[off:off + 2])
            off += 2
            ops = tuple(struct.unpack(">BB", data[off + 2 * i:off + 2 * i + 2]) for i in range(count))
            off += 2 * count
            (plen,) = struct.unpack(">I", data[off:off + 4])
            payload = data[off + 4:]
        except (struct.error, UnicodeDecodeError) as exc:
            raise ImageFormatError(str(exc)) from exc
        if len(payload) != plen:
            raise ImageFormatError("payload length mismatch")
        if any(op not in (OP_ATTEST, OP_INTERACT, OP_EXIT) for op, _ in ops):
            raise ImageFormatError("unknown opcode")
        return cls(sid, ops, payload, version)


def build_fixture_image(sid: str, interactions: int = 3, payload: bytes = b"") -> bytes:
    """The scripted off-chain function: attest, K signed interactions, exit."""
    if not 0 <= interactions <= 255:
        raise ValueError("interactions must fit in one byte")
    return FixtureImage(sid, ((OP_ATTEST, 0), (OP_INTERACT, interactions), (OP_EXIT, 0)), payload).encode()


# -- content-addressed store ---------------------------------------------------------


def content_id(content: bytes) -> bytes:
    return hashlib.sha256(content).digest()


class ContentStore:
    """Content-addressed blobs, in memory or under ``root`` on disk."""

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._blobs: dict[bytes, bytes] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def put(self, content: bytes) -> bytes:
        cid = content_id(content)
        self._write(cid, bytes(content))
        return cid

    def get(self, cid: bytes) -> bytes:
        data = self._read(cid)
        if content_id(data) != cid:
            raise IntegrityViolation(cid.hex())
        return data

    def corrupt(self, cid: bytes, content: bytes) -> None:
        """Overwrite the backing bytes of ``cid`` without re-addressing (adversary hook)."""
        self._read(cid)
        self._write(cid, content)

    def __contains__(self, cid: bytes) -> bool:
        try:
            self._read(cid)
        except NotFound:
            return False
        return True

    def _write(self, cid: bytes, content: bytes) -> None:
        if self.root is None:
            self._blobs[cid] = content
        else:
            (self.root / cid.hex()).write_bytes(content)

    def _read(self, cid: bytes) -> bytes:
        if self.root is None:
            if cid not in self._blobs:
                raise NotFound(cid.hex())
            return self._blobs[cid]
        path = self.root / cid.hex()
        if not path.is_file():
            raise NotFound(cid.hex())
        return path.read_bytes()


# -- containers and the off-chain agent ----------------------------------------------

CREATED = "created"
ATTESTED = "attested"
STOPPED = "stopped"
_LIFECYCLE = {
    CREATED: (ATTESTED, FAILED),
    ATTESTED: (RUNNING, FAILED),
    RUNNING: (STOPPED, FAILED),
}


@dataclass
class ContainerInstance:
    deployment_id: int
    worker_id: str
    sid: str
    image: bytes
    handle: EnclaveHandle
    lifecycle: str = CREATED
    failure: str | None = None
    failure_detail: str | None = None
    # one write counter per virtual file block, persisted outside the enclave
    file_blocks: list[int] = field(default_factory=lambda: [0, 0, 0, 0])

    @property
    def rollback_counter(self) -> int:
        return sum(self.file_blocks)

    def transition(self, new: str) -> None:
        if new not in _LIFECYCLE.get(self.lifecycle, ()):
            raise DropError(f"illegal lifecycle transition {self.lifecycle} -> {new}")
        if new == ATTESTED and self.handle.secrets is None:
            raise DropError("attested requires injected secrets")
        self.lifecycle = new

    def fail(self, reason: str, detail: str | None = None) -> None:
        if self.lifecycle != FAILED:
            self.transition(FAILED)
        self.failure = reason
        self.failure_detail = detail
        self.handle.destroy()


class OffChainAgent:
    """Agent inside the container. Its signing key and target come only from the injected bundle."""

    def __init__(self, instance: ContainerInstance) -> None:
        self.instance = instance
        self.session_id: str | None = None
        self.refusal: str | None = None
        self.interactions: list[str] = []
        self._expected_blocks = list(instance.file_blocks)
        self._sender: EthAddress | None = None

    @property
    def attested(self) -> bool:
        return self.instance.lifecycle in (ATTESTED, RUNNING) and self.instance.handle.secrets is not None

    @property
    def target_contract(self) -> EthAddress | None:
        bundle = self.instance.handle.secrets
        return bundle.sca_dapp if bundle is not None else None

    @property
    def address(self) -> EthAddress:
        if self._sender is None:
            self._sender = KeyPair.from_secret(self._bundle().sk_offcf).address
        return self._sender

    def _bundle(self):
        bundle = self.instance.handle.secrets
        if bundle is None or not self.attested:
            raise NotAttested(f"deployment {self.instance.deployment_id} holds no secrets")
        return bundle

    def check_rollback(self) -> None:
        for i, (seen, expected) in enumerate(zip(self.instance.file_blocks, self._expected_blocks)):
            if seen < expected:
                raise RollbackDetected(f"file block {i} went from {expected} to {seen}")

    def sign_interaction(self, rng: random.Random, payload: bytes = b"") -> tuple[bytes, object]:
        bundle = self._bundle()
        self.check_rollback()
        msg = rng.randbytes(32) + payload
        sig = sign(msg, bundle.sk_offcf)
        k = len(self.interactions) % len(self.instance.file_blocks)
        self.instance.file_blocks[k] += 1
        self._expected_blocks[k] = self.instance.file_blocks[k]
        return msg, sig


def agent_attest(
    instance: ContainerInstance,
    cas: CAS,
    platform: PlatformIdentity,
    log: Callable[[str], None] = lambda _m: None,
) -> OffChainAgent:
    """Nonce, report, quote, verification and injection. Refusals land on the instance."""
    agent = OffChainAgent(instance)
    try:
        session_id, nonce = cas.begin_session(instance.sid)
    except UnknownSid:
        agent.refusal = UNKNOWN_SID
        instance.fail(UNKNOWN_SID)
        log(f"step 1: CAS has no policy for sid {instance.sid!r}")
        return agent
    agent.session_id = session_id
    log(f"step 1: deployment {instance.deployment_id} requests secrets, session {session_id}")
    report = ereport(instance.handle, report_binding(nonce, instance.sid))
    log(f"step 2: EREPORT mre={report.mre.hex()[:16]}.. bound to the session nonce")
    try:
        quote = las_quote(report, platform)
    except CrossPlatformReport:
        agent.refusal = LAS_REFUSED
        instance.fail(LAS_REFUSED)
        log("step 3: LAS refused the report")
        return agent
    log(f"step 3: LAS quote on {platform.platform_id} firmware {quote.firmware_version}")
    outcome = cas.verify_and_inject(session_id, quote, instance.handle)
    if isinstance(outcome, Refusal):
        detail = outcome.avr.reason if outcome.avr is not None else None
        agent.refusal = outcome.reason
        instance.fail(outcome.reason, detail)
        suffix = f" ({detail})" if detail else ""
        log(f"step 4-5: CAS refused session {session_id}: {outcome.reason}{suffix}")
        return agent
    log(f"step 4-5: positive attestation report, nonce and MRENCLAVE match for session {session_id}")
    instance.transition(ATTESTED)
    log(f"step 6: secrets injected over the attested channel, target contract {outcome.sca_dapp}")
    return agent


def agent_interact(agent: OffChainAgent, chain: Chain, rng: random.Random, via_node: int = 0, payload: bytes = b"") -> str:
    """Sign a fresh random message and ask the DApp contract to verify it."""
    msg, sig = agent.sign_interaction(rng, payload)
    call = Call(agent.target_contract, "off_chain_function_signature_verify", encode_args(msg, sig))
    tx_id = chain.submit(agent.address, call, via_node)
    agent.interactions.append(tx_id)
    return tx_id


# -- worker daemon -------------------------------------------------------------------


class StatusReporter:
    """Submits one deployment's status reports in order, resubmitting lost ones."""

    def __init__(self, daemon: WorkerDaemon, deployment_id: int) -> None:
        self.daemon = daemon
        self.deployment_id = deployment_id
        self.queue: deque[str] = deque()
        self.attempts: dict[str, list[str]] = {}
        self.committed: list[tuple[str, Receipt]] = []
        self._inflight: str | None = None

    @property
    def idle(self) -> bool:
        return not self.queue and self._inflight is None

    def report(self, state: str) -> None:
        self.queue.append(state)
        if self._inflight is None:
            self._send()

    def _send(self) -> None:
        state = self.queue[0]
        self._inflight = state
        d = self.daemon
        tx_id = d.submit_report(self.deployment_id, state)
        self.attempts.setdefault(state, []).append(tx_id)
        d.chain.watch(tx_id, d.node_id, lambda r, s=state: self._on_receipt(s, r))
        d.sim.after(d.retry_after_ms, self._check, state, tx_id)

    def _on_receipt(self, state: str, receipt: Receipt) -> None:
        if self._inflight != state:
            return
        self.committed.append((state, receipt))
        self.daemon.log(
            f"status {state} for deployment {self.deployment_id} "
            + ("committed" if receipt.ok else f"reverted ({receipt.revert_reason})")
        )
        self.queue.popleft()
        self._inflight = None
        self.daemon.world.on_status(self.deployment_id, state, receipt)
        if self.queue:
            self._send()

    def _check(self, state: str, tx_id: str) -> None:
        if self._inflight == state and self.attempts[state][-1] == tx_id:
            self.daemon.log(f"status {state} for deployment {self.deployment_id} not committed, resubmitting")
            self._send()


class WorkerDaemon:
    """A third-party worker: watches orchestration events on its node and runs containers."""

    def __init__(self, world: DropWorld, worker_id: str, platform: PlatformIdentity, key: KeyPair, node_id: int) -> None:
        self.world = world
        self.worker_id = worker_id
        self.platform = platform
        self.key = key
        self.node_id = node_id
        self.instances: dict[int, ContainerInstance] = {}
        self.agents: dict[int, OffChainAgent] = {}
        self.reporters: dict[int, StatusReporter] = {}
        self.ignored_events = 0
        # adversary hooks
        self.host_tamper: Callable[[int, bytes], bytes] | None = None
        self.before_launch: Callable[[WorkerDaemon], None] | None = None
        self.before_interaction: Callable[[ContainerInstance, int], None] | None = None
        world.chain.nodes[node_id].subscribe(self.on_event)

    @property
    def sim(self) -> Simulation:
        return self.world.sim

    @property
    def chain(self) -> Chain:
        return self.world.chain

    @property
    def retry_after_ms(self) -> int:
        return self.world.config.retry_after_blocks * self.chain.config.block_time_ms

    def log(self, msg: str) -> None:
        self.sim.log(f"[{self.worker_id}] {msg}")

    def on_event(self, event: Event) -> None:
        if event.contract != self.world.sp_address or event.name != "Orchestrate":
            return
        deployment_id, cid, worker_id, sid = decode_orchestrate(event.data)
        if worker_id != self.worker_id:
            self.ignored_events += 1
            return
        self.watch_and_instantiate(deployment_id, cid, sid)

    def watch_and_instantiate(self, deployment_id: int, cid: bytes, sid: str) -> ContainerInstance | None:
        self.log(f"orchestration event: deployment {deployment_id}, image {cid.hex()[:16]}..")
        try:
            image = self.world.store.get(cid)
        except StoreError as exc:
            reason = FETCH_NOT_FOUND if isinstance(exc, NotFound) else FETCH_INTEGRITY
            self.log(f"fetch failed for deployment {deployment_id}: {reason}")
            self.world.fetch_failures[deployment_id] = reason
            self.monitor_and_report(deployment_id, FAILED)
            return None
        if self.host_tamper is not None:
            image = self.host_tamper(deployment_id, image)
        if self.before_launch is not None:
            self.before_launch(self)
        handle = launch(EnclaveImage(image), self.platform)
        instance = ContainerInstance(deployment_id, self.worker_id, sid, image, handle)
        self.instances[deployment_id] = instance
        self.log(f"container for deployment {deployment_id} created, mre={handle.mre.hex()[:16]}..")
        agent = agent_attest(instance, self.world.cas, self.platform, self.log)
        self.agents[deployment_id] = agent
        if agent.attested:
            self.world.attest_log.append((deployment_id, agent.session_id))
        self.sim.after(self.world.config.attestation_rtt_ms, self._after_attest, instance, agent)
        return instance

    def _after_attest(self, instance: ContainerInstance, agent: OffChainAgent) -> None:
        if instance.lifecycle == FAILED:
            self.monitor_and_report(instance.deployment_id, FAILED)
            return
        try:
            script = FixtureImage.parse(instance.image)
        except ImageFormatError as exc:
            script = None
            detail = str(exc)
        else:
            detail = f"image sid {script.sid!r} does not match {instance.sid!r}"
        if script is None or script.sid != instance.sid:
            instance.fail(IMAGE_REJECTED, detail)
            self.monitor_and_report(instance.deployment_id, FAILED)
            return
        instance.transition(RUNNING)
        self.monitor_and_report(instance.deployment_id, RUNNING)
        self._interact(instance, agent, 0, script.interactions)

    def _interact(self, instance: ContainerInstance, agent: OffChainAgent, i: int, total: int) -> None:
        if instance.lifecycle != RUNNING:
            return
        if i == total:
            instance.transition(STOPPED)
            instance.handle.destroy()
            self.log(f"deployment {instance.deployment_id} finished its script")
            self.monitor_and_report(instance.deployment_id, COMPLETED)
            return
        if self.before_interaction is not None:
            self.before_interaction(instance, i)
        try:
            tx_id = agent_interact(agent, self.chain, self.sim.rng, self.node_id)
        except RollbackDetected as exc:
            self.log(f"deployment {instance.deployment_id} terminated: {exc}")
            instance.fail(ROLLBACK_DETECTED, str(exc))
            self.monitor_and_report(instance.deployment_id, FAILED)
            return
        self.log(f"step 7: deployment {instance.deployment_id} interaction {i + 1}/{total} submitted")
        self.chain.watch(tx_id, self.node_id, lambda r: self._after_interaction(instance, agent, i, total, r))

    def _after_interaction(self, instance, agent, i: int, total: int, receipt: Receipt) -> None:
        ok = receipt.ok and receipt.output == b"\x01"
        self.world.verifications.append(Verification(instance.deployment_id, agent.session_id, receipt.tx_id, ok))
        self.log(f"step 7: on-chain verification {i + 1}/{total} isAttested={int(ok)}")
        if not ok:
            instance.fail(VERIFICATION_FALSE)
            self.monitor_and_report(instance.deployment_id, FAILED)
            return
        self._interact(instance, agent, i + 1, total)

    def monitor_and_report(self, deployment_id: int, state: str) -> None:
        reporter = self.reporters.get(deployment_id)
        if reporter is None:
            reporter = self.reporters[deployment_id] = StatusReporter(self, deployment_id)
        reporter.report(state)

    def submit_report(self, deployment_id: int, state: str) -> str:
        msg = self.sim.rng.randbytes(32)
        sig = sign(msg, self.key.sk)
        call = Call(self.world.sp_address, "report_status", encode_args(deployment_id, state, msg, sig))
        return self.chain.submit(self.key.address, call, self.node_id)


# -- scenario assembly ---------------------------------------------------------------


@dataclass(frozen=True)
class AppSpec:
    name: str
    interactions: int = 3
    register_policy: bool = True


@dataclass(frozen=True)
class DeploymentRequest:
    app: str
    # host-side single-byte mutation of the fetched image: (offset, xor mask)
    tamper: tuple[int, int] | None = None


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    nodes: int = 1
    block_time_s: float = 5
    block_capacity: int = 250
    gossip_delay_ms: int = 50
    topology: str = "ring"
    workers: int = 1
    apps: tuple[AppSpec, ...] = (AppSpec("app"),)
    requests: tuple[DeploymentRequest, ...] | None = None
    faithful_replay: bool = False
    costs: CostModel = CostModel()
    attestation_rtt_ms: int = 30
    firmware_version: int = 2
    retry_after_blocks: int = 3
    limit_ms: int | None = None

    def deployment_requests(self) -> tuple[DeploymentRequest, ...]:
        if self.requests is not None:
            return self.requests
        return tuple(DeploymentRequest(a.name) for a in self.apps)


@dataclass(frozen=True)
class Verification:
    deployment_id: int
    session_id: str | None
    tx_id: str
    ok: bool


@dataclass
class App:
    spec: AppSpec
    owner: KeyPair
    sid: str
    image: bytes
    cid: bytes
    dapp_address: EthAddress
    ea_offcf: EthAddress


@dataclass
class DeploymentOutcome:
    request: DeploymentRequest
    deployment_id: int | None
    state: str | None
    failure: str | None
    failure_detail: str | None


@dataclass
class WorldResult:
    outcomes: list[DeploymentOutcome]
    verifications: list[Verification]
    trace: list[str]
    finished: bool

    @property
    def is_attested(self) -> bool:
        """Every interaction verified on chain and every deployment completed."""
        return (
            self.finished
            and bool(self.verifications)
            and all(v.ok for v in self.verifications)
            and all(o.state == COMPLETED for o in self.outcomes)
        )

    def count(self, state: str) -> int:
        return sum(1 for o in self.outcomes if o.state == state)


class DropWorld:
    """One simulated deployment of DROP: chain, CAS, attestation service, workers, users."""

    def __init__(self, config: WorldConfig | None = None) -> None:
        self.config = cfg = config or WorldConfig()
        self.sim = Simulation(cfg.seed)
        rng = self.sim.rng
        self.chain = Chain(
            self.sim,
            ChainConfig(cfg.nodes, cfg.block_time_s, cfg.block_capacity, cfg.gossip_delay_ms, cfg.topology),
        )
        self.store = ContentStore()
        self.registry = PlatformRegistry()
        self.attestation = AttestationService(self.registry)
        self.cas = CAS(self.attestation, rng=random.Random(rng.getrandbits(64)), clock=self.sim.clock)
        self.verifications: list[Verification] = []
        self.attest_log: list[tuple[int, str]] = []
        self.fetch_failures: dict[int, str] = {}
        self.status_log: list[tuple[int, str, bool]] = []

        self.sp_owner = keygen(rng.randbytes(32))
        self.sp_agent = keygen(rng.randbytes(32))
        costs, faithful = cfg.costs, cfg.faithful_replay
        self.sp_address = self.chain.deploy(
            self.sp_owner.address,
            lambda a: ServiceProviderContract(a, self.sp_owner.address, costs, faithful),
        )

        self.apps: dict[str, App] = {}
        for spec in cfg.apps:
            owner = keygen(rng.randbytes(32))
            offcf = keygen(rng.randbytes(32))
            dapp = self.chain.deploy(owner.address, lambda a, o=owner.address: DAppContract(a, o, costs, faithful))
            sid = f"{spec.name}-sid"
            image = build_fixture_image(sid, spec.interactions, rng.randbytes(8))
            cid = self.store.put(image)
            app = App(spec, owner, sid, image, cid, dapp, offcf.address)
            self.apps[spec.name] = app
            if spec.register_policy:
                self.cas.register_policy(
                    Policy(sid, EnclaveImage(image).mre, {"sk_offcf": offcf.sk, "sca_dapp": dapp.raw}, owner.address)
                )

        self.chain.start()
        self.workers: list[WorkerDaemon] = []
        for i in range(cfg.workers):
            platform = PlatformIdentity.provision(f"platform-{i}", rng, cfg.firmware_version)
            self.registry.enroll(platform)
            key = keygen(rng.randbytes(32))
            self.workers.append(WorkerDaemon(self, f"worker-{i:02d}", platform, key, i % cfg.nodes))

        self.requests = list(cfg.deployment_requests())
        self.outcomes: list[DeploymentOutcome] = [DeploymentOutcome(r, None, None, None, None) for r in self.requests]
        self._next_request = 0
        self._awaiting_deploy = False
        self._done: set[int] = set()
        self._install_tamper()

    # -- driving -------------------------------------------------------------------

    def log(self, msg: str) -> None:
        self.sim.log(msg)

    def tamper_request(self, index: int, offset: int, mask: int) -> None:
        """Have the worker host flip ``mask`` into byte ``offset`` of request ``index``'s image."""
        self.requests[index] = DeploymentRequest(self.requests[index].app, (offset, mask))
        self.outcomes[index].request = self.requests[index]
        self._install_tamper()

    def _install_tamper(self) -> None:
        by_id = {i + 1: r.tamper for i, r in enumerate(self.requests) if r.tamper is not None}
        if not by_id:
            return

        def tamper(deployment_id: int, image: bytes) -> bytes:
            spec = by_id.get(deployment_id)
            if spec is None:
                return image
            offset, mask = spec
            mutated = bytearray(image)
            mutated[offset] ^= mask
            self.log(f"host adversary mutates byte {offset} of the image for deployment {deployment_id}")
            return bytes(mutated)

        for w in self.workers:
            w.host_tamper = tamper

    def _initialize(self) -> None:
        chain = self.chain
        role_tx = chain.submit(
            self.sp_owner.address,
            Call(self.sp_address, "register_role_key", encode_args(ROLE_SP_AGENT, self.sp_agent.address)),
        )
        for app in self.apps.values():
            chain.submit(app.owner.address, Call(app.dapp_address, "register_pk", encode_args(app.ea_offcf)))
            self.log(
                f"step 0: {app.spec.name}: off-chain key generated, EA {app.ea_offcf} registered with "
                f"{app.dapp_address}, policy {app.sid!r} "
                + ("stored in CAS" if app.spec.register_policy else "not registered")
                + f", image {app.cid.hex()[:16]}.. uploaded"
            )
        # workers are registered once the SP agent's role key is on chain
        chain.watch(role_tx, 0, lambda _r: [self._register_worker(w) for w in self.workers])
        self.chain.nodes[0].subscribe(self._on_node0_event)

    def _register_worker(self, worker: WorkerDaemon) -> None:
        """The SP agent attests a worker's TEE off chain, then registers it on chain."""
        session_nonce = self.sim.rng.randbytes(64)
        probe = launch(EnclaveImage(b"teemaf/capability-probe"), worker.platform)
        quote = las_quote(ereport(probe, session_nonce), worker.platform)
        probe.destroy()
        avr = self.attestation.verify(quote)
        if not avr.positive:
            self.log(f"SP agent: {worker.worker_id} failed capability attestation ({avr.reason})")
            return
        msg = self.sim.rng.randbytes(32)
        sig = sign(msg, self.sp_agent.sk)
        args = encode_args(worker.worker_id, worker.key.address, msg, sig)
        self.chain.submit(self.sp_agent.address, Call(self.sp_address, "off_chain_worker_register", args))
        self.log(f"SP agent: {worker.worker_id} capability attested, registration submitted")

    def _on_node0_event(self, event: Event) -> None:
        if event.contract == self.sp_address and event.name in ("WorkerRegistered", "DeploymentStatus"):
            self._try_deploy()

    def _try_deploy(self) -> None:
        if self._awaiting_deploy or self._next_request >= len(self.requests):
            return
        sp: ServiceProviderContract = self.chain.contract(self.sp_address, 0)
        available = sp.off_chain_worker_lookup()
        if not available:
            return
        worker_id = available[0].worker_id
        idx = self._next_request
        app = self.apps[self.requests[idx].app]
        args = encode_args(app.cid, worker_id, app.sid)
        tx_id = self.chain.submit(app.owner.address, Call(self.sp_address, "off_chain_function_deploy", args))
        self._awaiting_deploy = True
        self.log(f"step 1: {app.spec.name} requests deployment of {app.cid.hex()[:16]}.. on {worker_id}")
        self.chain.watch(tx_id, 0, lambda r: self._on_deploy_receipt(idx, r))

    def _on_deploy_receipt(self, idx: int, receipt: Receipt) -> None:
        self._awaiting_deploy = False
        if receipt.ok:
            deployment_id = int.from_bytes(receipt.output, "big")
            self.outcomes[idx].deployment_id = deployment_id
            self._next_request += 1
        else:
            self.log(f"deployment request {idx} reverted: {receipt.revert_reason}")
        self._try_deploy()

    def on_status(self, deployment_id: int, state: str, receipt: Receipt) -> None:
        self.status_log.append((deployment_id, state, receipt.ok))
        if state in (COMPLETED, FAILED):
            self._done.add(deployment_id)

    def finished(self) -> bool:
        if self._next_request < len(self.requests) or len(self._done) < len(self.requests):
            return False
        return self.chain.quiescent()

    def run(self) -> WorldResult:
        self._initialize()
        limit = self.config.limit_ms
        if limit is None:
            limit = self.chain.config.block_time_ms * (20 + 10 * len(self.requests))
        self.sim.run(until=limit, stop=self.finished)
        done = self.finished()
        self._collect()
        verdict = "isAttested=1" if done and self.verifications and all(v.ok for v in self.verifications) else "isAttested=0"
        self.log(f"run finished: {verdict}")
        return WorldResult(self.outcomes, self.verifications, list(self.sim.trace), done)

    def _collect(self) -> None:
        sp: ServiceProviderContract = self.chain.contract(self.sp_address, 0)
        instances = {dep: inst for w in self.workers for dep, inst in w.instances.items()}
        for outcome in self.outcomes:
            dep = outcome.deployment_id
            if dep is None:
                continue
            record = sp.deployment(dep)
            outcome.state = record.state if record else None
            inst = instances.get(dep)
            if inst is not None:
                outcome.failure, outcome.failure_detail = inst.failure, inst.failure_detail
            elif dep in self.fetch_failures:
                outcome.failure = self.fetch_failures[dep]

    def state_snapshot(self) -> list[bytes]:
        return [n.state_bytes() for n in self.chain.nodes]


def run_demo(
    seed: int = 0,
    tamper: bool = False,
    faithful_replay: bool = False,
    nodes: int = 1,
    block_time_s: float = 5,
    interactions: int = 3,
) -> WorldResult:
    """Happy path through workflow steps 0-7; ``tamper`` flips one byte of the image on the host."""
    app = AppSpec("app", interactions)
    request = DeploymentRequest("app")
    if tamper:
        image_len = len(build_fixture_image("app-sid", interactions, bytes(8)))
        request = DeploymentRequest("app", (random.Random(seed).randrange(image_len), 0x01))
    cfg = WorldConfig(
        seed=seed,
        nodes=nodes,
        block_time_s=block_time_s,
        apps=(app,),
        requests=(request,),
        faithful_replay=faithful_replay,
    )
    return DropWorld(cfg).run()
