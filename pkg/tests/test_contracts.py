from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, initialize, invariant, rule

from teemaf.chain import Call, ExecutionContext, Node, Revert, Transaction
from teemaf.contracts import (
    AVAILABLE,
    BUSY,
    COMPLETED,
    FAILED,
    OFFLINE,
    PENDING,
    ROLE_SP_AGENT,
    RUNNING,
    CostModel,
    DAppContract,
    ServiceProviderContract,
    decode_args,
    decode_orchestrate,
    encode_args,
    worker_role,
)
from teemaf.crypto import EthAddress, Signature, keygen, sign
from teemaf.crypto import secp256k1 as curve

OWNER = keygen("owner")
OFFCF = keygen("offcf")
AGENT = keygen("sp-agent")
USER = keygen("user")
ADDR = EthAddress(b"\x01" * 20)


class Harness:
    """Executes transactions one at a time on a single node, like a block of size one."""

    def __init__(self, factory):
        self.node = Node(0, {ADDR: factory})
        self.height = 0
        self.nonce = 0
        self.msg_counter = 0

    @property
    def contract(self):
        return self.node.contracts[ADDR]

    def call(self, sender, method, *args):
        self.height += 1
        self.nonce += 1
        tx = Transaction(sender.address, Call(ADDR, method, encode_args(*args)), self.nonce, self.height)
        (receipt,), _ = self.node.execute_txs(self.height, self.height, [tx])
        return receipt

    def fresh(self, kp):
        self.msg_counter += 1
        msg = b"msg-%d" % self.msg_counter
        return msg, sign(msg, kp.sk)


def dapp(faithful=False):
    return Harness(lambda a: DAppContract(a, OWNER.address, faithful_replay=faithful))


def sp(ra_enabled=True):
    return Harness(
        lambda a: ServiceProviderContract(a, OWNER.address, ra_enabled=ra_enabled, roles={ROLE_SP_AGENT: AGENT.address})
    )


# -- argument encoding ---------------------------------------------------------------------


def test_encoding_is_length_prefixed_big_endian():
    assert encode_args(1) == b"\x00\x00\x00\x20" + (1).to_bytes(32, "big")
    assert encode_args("ab", True) == b"\x00\x00\x00\x02ab\x00\x00\x00\x01\x01"


@given(st.binary(), st.text(), st.integers(0, 2**256 - 1), st.booleans(), st.binary(min_size=20, max_size=20))
def test_encoding_round_trip(blob, text, n, flag, raw):
    data = encode_args(blob, text, n, flag, EthAddress(raw))
    assert decode_args(data, ("bytes", "str", "uint", "bool", "address")) == [blob, text, n, flag, EthAddress(raw)]


@given(st.binary(max_size=80))
def test_decoding_garbage_reverts_cleanly(data):
    try:
        decode_args(data, ("bytes", "sig"))
    except Revert:
        pass


# -- DApp contract --------------------------------------------------------------------------


def test_register_pk_owner_only_and_overwrites():
    h = dapp()
    assert h.call(OWNER, "register_pk", OFFCF.address).ok
    assert h.contract.registered_ea == OFFCF.address
    r = h.call(USER, "register_pk", USER.address)
    assert not r.ok and r.revert_reason == "not-owner"
    assert h.contract.registered_ea == OFFCF.address
    assert h.call(OWNER, "register_pk", USER.address).ok
    assert h.contract.registered_ea == USER.address


def test_verify_requires_registered_key():
    h = dapp()
    msg, sig = h.fresh(OFFCF)
    r = h.call(OFFCF, "off_chain_function_signature_verify", msg, sig)
    assert not r.ok and r.revert_reason == "no-registered-key"


def test_verify_accepts_injected_key_once():
    h = dapp()
    h.call(OWNER, "register_pk", OFFCF.address)
    msg, sig = h.fresh(OFFCF)
    assert h.call(OFFCF, "off_chain_function_signature_verify", msg, sig).output == b"\x01"
    assert h.call(OFFCF, "off_chain_function_signature_verify", msg, sig).output == b"\x00"
    assert len(h.contract.seen_nonces()) == 1


def test_verify_rejects_other_key():
    h = dapp()
    h.call(OWNER, "register_pk", OFFCF.address)
    msg, sig = h.fresh(USER)
    assert h.call(OFFCF, "off_chain_function_signature_verify", msg, sig).output == b"\x00"
    assert h.contract.seen_nonces() == []


def test_faithful_mode_accepts_replay():
    h = dapp(faithful=True)
    h.call(OWNER, "register_pk", OFFCF.address)
    msg, sig = h.fresh(OFFCF)
    for _ in range(3):
        assert h.call(OFFCF, "off_chain_function_signature_verify", msg, sig).output == b"\x01"


def test_verification_cost_is_charged():
    costs = CostModel(method_cost_ms=3.0, sig_verify_cost_ms=5.0)
    h = Harness(lambda a: DAppContract(a, OWNER.address, costs))
    h.call(OWNER, "register_pk", OFFCF.address)
    msg, sig = h.fresh(OFFCF)
    tx = Transaction(OFFCF.address, Call(ADDR, "off_chain_function_signature_verify", encode_args(msg, sig)), 99, 9)
    _, cost = h.node.execute_txs(9, 9, [tx])
    assert cost == 8.0


@pytest.mark.slow
def test_verification_soundness_fuzz():
    """10^4 forged or foreign signatures, zero accepted."""
    rng = random.Random(2024)
    gate = DAppContract(ADDR, OWNER.address)
    gate.storage.set(b"registered_ea", OFFCF.address.raw)
    foreign = [keygen(b"foreign-%d" % i) for i in range(64)]
    false_accepts = 0
    cases = 0
    for i in range(10_000):
        msg = rng.randbytes(rng.randrange(1, 64))
        kind = i % 3
        if kind == 0:
            # a random key signs
            sig = sign(msg, rng.choice(foreign).sk)
        elif kind == 1:
            # the right key, but for a different message
            sig = sign(msg + b"!", OFFCF.sk)
        else:
            sig = Signature(rng.randrange(1, curve.N), rng.randrange(1, curve.HALF_N + 1), rng.choice((27, 28)))
        ctx = ExecutionContext(USER.address, "t", 1, 1, ADDR)
        if gate._verify_against(ctx, OFFCF.address, msg, sig):
            false_accepts += 1
        cases += 1
    assert cases >= 10_000 and false_accepts == 0


# -- service provider contract --------------------------------------------------------------


def register(h, worker_id, controller=None, signer=AGENT):
    msg, sig = h.fresh(signer)
    return h.call(AGENT, "off_chain_worker_register", worker_id, (controller or keygen(worker_id)).address, msg, sig)


def test_on_chain_attestation_roles():
    h = sp()
    msg, sig = h.fresh(AGENT)
    assert h.call(USER, "on_chain_attestation", ROLE_SP_AGENT, msg, sig).output == b"\x01"
    msg, sig = h.fresh(USER)
    assert h.call(USER, "on_chain_attestation", ROLE_SP_AGENT, msg, sig).output == b"\x00"
    r = h.call(USER, "on_chain_attestation", "nobody", msg, sig)
    assert not r.ok and r.revert_reason == "unknown-role"


def test_role_key_registration_owner_only():
    h = sp()
    assert not h.call(USER, "register_role_key", "x", USER.address).ok
    assert h.call(OWNER, "register_role_key", "x", USER.address).ok
    assert h.contract.role_key("x") == USER.address


def test_worker_registration():
    h = sp()
    assert h.contract.off_chain_worker_lookup() == []
    assert register(h, "w1").ok
    (rec,) = h.contract.off_chain_worker_lookup()
    assert rec.worker_id == "w1" and rec.attested and rec.status == AVAILABLE
    r = register(h, "w1")
    assert not r.ok and r.revert_reason == "duplicate-worker"
    r = register(h, "w2", signer=USER)
    assert not r.ok and r.revert_reason == "attestation-failed"
    assert h.contract.worker("w2") is None


def test_registration_without_ra_skips_check():
    h = sp(ra_enabled=False)
    assert register(h, "w1", signer=USER).ok


def deploy(h, worker_id, cid=b"cid", sid="sid"):
    return h.call(USER, "off_chain_function_deploy", cid, worker_id, sid)


def report(h, dep_id, state, signer):
    msg, sig = h.fresh(signer)
    return h.call(signer, "report_status", dep_id, state, msg, sig)


def test_deploy_and_lifecycle():
    h = sp()
    w1, w2 = keygen("w1"), keygen("w2")
    register(h, "w1", w1)
    register(h, "w2", w2)
    r = deploy(h, "w1")
    assert r.ok
    dep_id = int.from_bytes(r.output, "big")
    orch = [e for e in r.events if e.name == "Orchestrate"]
    assert decode_orchestrate(orch[0].data) == (dep_id, b"cid", "w1", "sid")
    assert [w.worker_id for w in h.contract.off_chain_worker_lookup()] == ["w2"]
    assert deploy(h, "w1").revert_reason == "worker-unavailable"
    assert deploy(h, "ghost").revert_reason == "worker-unavailable"
    assert report(h, dep_id, COMPLETED, w1).revert_reason == "illegal-transition"
    assert report(h, dep_id, RUNNING, w2).revert_reason == "attestation-failed"
    assert report(h, dep_id, RUNNING, w1).ok
    assert h.contract.worker("w1").status == BUSY
    assert report(h, dep_id, COMPLETED, w1).ok
    assert h.contract.deployment(dep_id).state == COMPLETED
    assert h.contract.worker("w1").status == AVAILABLE
    assert report(h, 999, RUNNING, w1).revert_reason == "unknown-deployment"


def test_worker_set_status():
    h = sp()
    w1 = keygen("w1")
    register(h, "w1", w1)
    msg, sig = h.fresh(w1)
    assert h.call(w1, "off_chain_worker_set_status", "w1", OFFLINE, msg, sig).ok
    assert h.contract.off_chain_worker_lookup() == []
    msg, sig = h.fresh(USER)
    assert h.call(USER, "off_chain_worker_set_status", "w1", AVAILABLE, msg, sig).revert_reason == "attestation-failed"
    msg, sig = h.fresh(w1)
    assert h.call(w1, "off_chain_worker_set_status", "w1", BUSY, msg, sig).revert_reason == "illegal-transition"


GATED = {"off_chain_worker_register", "off_chain_worker_set_status", "report_status"}


class SPModel(RuleBasedStateMachine):
    """Random register/status/deploy/report sequences checked against a reference map."""

    @initialize()
    def setup(self):
        self.h = sp()
        self.keys = {f"w{i}": keygen(f"model-w{i}") for i in range(4)}
        self.workers: dict[str, str] = {}
        self.deps: dict[int, tuple[str, str]] = {}
        self.log = []

    def _run(self, signer, method, *args):
        root = self.h.node.state_root()
        receipt = self.h.call(signer, method, *args)
        self.log.append((method, receipt, root, self.h.node.state_root()))
        return receipt

    @rule(w=st.sampled_from(["w0", "w1", "w2", "w3"]), honest=st.booleans())
    def register(self, w, honest):
        msg, sig = self.h.fresh(AGENT if honest else USER)
        r = self._run(AGENT, "off_chain_worker_register", w, self.keys[w].address, msg, sig)
        if honest and w not in self.workers:
            assert r.ok
            self.workers[w] = AVAILABLE
        else:
            assert not r.ok

    @rule(w=st.sampled_from(["w0", "w1", "w2", "w3"]), status=st.sampled_from([AVAILABLE, OFFLINE]), honest=st.booleans())
    def set_status(self, w, status, honest):
        signer = self.keys[w] if honest else USER
        msg, sig = self.h.fresh(signer)
        r = self._run(signer, "off_chain_worker_set_status", w, status, msg, sig)
        if honest and self.workers.get(w) in (AVAILABLE, OFFLINE):
            assert r.ok
            self.workers[w] = status
        else:
            assert not r.ok

    @rule(w=st.sampled_from(["w0", "w1", "w2", "w3"]))
    def deploy(self, w):
        r = self._run(USER, "off_chain_function_deploy", b"cid", w, "sid")
        if self.workers.get(w) == AVAILABLE:
            assert r.ok
            self.deps[int.from_bytes(r.output, "big")] = (w, PENDING)
            self.workers[w] = BUSY
        else:
            assert not r.ok

    @rule(pick=st.integers(0, 10), state=st.sampled_from([RUNNING, COMPLETED, FAILED]), honest=st.booleans())
    def report(self, pick, state, honest):
        if not self.deps:
            return
        dep_id = sorted(self.deps)[pick % len(self.deps)]
        w, current = self.deps[dep_id]
        signer = self.keys[w] if honest else USER
        msg, sig = self.h.fresh(signer)
        r = self._run(signer, "report_status", dep_id, state, msg, sig)
        legal = {PENDING: (RUNNING, FAILED), RUNNING: (COMPLETED, FAILED)}.get(current, ())
        if honest and state in legal:
            assert r.ok
            self.deps[dep_id] = (w, state)
            if state in (COMPLETED, FAILED):
                self.workers[w] = AVAILABLE
        else:
            assert not r.ok

    @invariant()
    def lookup_matches_model(self):
        expected = sorted(w for w, s in self.workers.items() if s == AVAILABLE)
        assert [w.worker_id for w in self.h.contract.off_chain_worker_lookup()] == expected

    @invariant()
    def worker_accounting(self):
        busy = sum(1 for w in self.h.contract.workers() if w.status == BUSY)
        active = sum(1 for d in self.h.contract.deployments() if d.state in (PENDING, RUNNING))
        assert busy == active

    @invariant()
    def gatekeeping(self):
        # every gated call either attested successfully or left the state untouched
        for method, receipt, before, after in self.log:
            if method not in GATED:
                continue
            if receipt.ok:
                assert any(e.name == "OnChainAttestation" and e.data[:1] == b"\x01" for e in receipt.events)
            else:
                assert before == after


TestSPModel = SPModel.TestCase
TestSPModel.settings = settings(max_examples=40, stateful_step_count=25, deadline=None)


def test_worker_role_naming():
    assert worker_role("w7") == "worker:w7"
