"""Idealized proof-of-authority chain over the virtual clock.

Blocks are sealed every ``block_time`` by nodes in round-robin order. Each
sealed block travels hop by hop over the configured topology and every node
executes it against its own copy of contract state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .crypto import EthAddress
from .sim import Simulation

TOPOLOGIES = ("ring", "mesh", "line")


class ChainError(Exception):
    pass


class NotCommitted(ChainError):
    pass


class Revert(Exception):
    """Raised inside a contract method; the transaction's writes are discarded."""


@dataclass(frozen=True)
class ChainConfig:
    node_count: int = 1
    block_time_s: float = 5
    block_capacity: int = 250
    gossip_delay_ms: int = 50
    topology: str = "ring"

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.block_time_s <= 0 or self.block_capacity <= 0 or self.gossip_delay_ms < 0:
            raise ValueError("block_time_s and block_capacity must be positive, gossip_delay_ms non-negative")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")

    @property
    def block_time_ms(self) -> int:
        return int(round(self.block_time_s * 1000))

    def hops(self, a: int, b: int) -> int:
        d = abs(a - b)
        if self.topology == "line":
            return d
        if self.topology == "mesh":
            return int(d != 0)
        return min(d, self.node_count - d)


@dataclass(frozen=True)
class Call:
    contract: EthAddress
    method: str
    args: bytes


@dataclass(frozen=True)
class Transaction:
    sender: EthAddress
    call: Call
    nonce: int
    submit_time: int

    @property
    def id(self) -> str:
        return _tx_id(self.sender, self.call, self.nonce)

    def encode(self) -> bytes:
        method = self.call.method.encode()
        return (
            self.sender.raw
            + self.call.contract.raw
            + struct.pack(">H", len(method))
            + method
            + struct.pack(">I", len(self.call.args))
            + self.call.args
            + struct.pack(">Q", self.nonce)
        )


def _tx_id(sender: EthAddress, call: Call, nonce: int) -> str:
    method = call.method.encode()
    h = hashlib.sha256()
    h.update(sender.raw + call.contract.raw + struct.pack(">H", len(method)) + method)
    h.update(struct.pack(">I", len(call.args)) + call.args + struct.pack(">Q", nonce))
    return h.hexdigest()


@dataclass(frozen=True)
class Block:
    height: int
    parent_hash: str
    sealer_id: int
    timestamp: int
    txs: tuple[Transaction, ...]
    state_root: str
    hash: str = ""

    def compute_hash(self) -> str:
        h = hashlib.sha256()
        h.update(bytes.fromhex(self.parent_hash))
        h.update(struct.pack(">QIQ", self.height, self.sealer_id, self.timestamp))
        for tx in self.txs:
            h.update(bytes.fromhex(tx.id))
        h.update(bytes.fromhex(self.state_root))
        return h.hexdigest()


GENESIS_HASH = "00" * 32


# -- deterministic execution environment ------------------------------------------------


_MOD = 1 << 256


def _entry_hash(key: bytes, value: bytes) -> int:
    h = hashlib.sha256(struct.pack(">I", len(key)) + key + value).digest()
    return int.from_bytes(h, "big")


class Storage:
    """Key/value contract storage with a write journal for reverts.

    A running additive digest over all entries keeps the state root O(1) per
    write instead of re-hashing the whole store every block.
    """

    def __init__(self) -> None:
        self._data: dict[bytes, bytes] = {}
        self._journal: list[tuple[bytes, bytes | None]] | None = None
        self._acc = 0

    def get(self, key: bytes, default: bytes | None = None) -> bytes | None:
        return self._data.get(key, default)

    def __contains__(self, key: bytes) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def _put(self, key: bytes, value: bytes | None) -> None:
        old = self._data.get(key)
        if old is not None:
            self._acc = (self._acc - _entry_hash(key, old)) % _MOD
        if value is None:
            self._data.pop(key, None)
        else:
            self._data[key] = value
            self._acc = (self._acc + _entry_hash(key, value)) % _MOD

    def set(self, key: bytes, value: bytes) -> None:
        if self._journal is not None:
            self._journal.append((key, self._data.get(key)))
        self._put(key, bytes(value))

    def delete(self, key: bytes) -> None:
        if key in self._data:
            if self._journal is not None:
                self._journal.append((key, self._data[key]))
            self._put(key, None)

    def items(self, prefix: bytes = b"") -> list[tuple[bytes, bytes]]:
        return sorted((k, v) for k, v in self._data.items() if k.startswith(prefix))

    def begin(self) -> None:
        self._journal = []

    def commit(self) -> None:
        self._journal = None

    def rollback(self) -> None:
        for key, old in reversed(self._journal or []):
            self._put(key, old)
        self._journal = None

    def digest(self) -> bytes:
        return self._acc.to_bytes(32, "big") + struct.pack(">Q", len(self._data))

    def serialize(self) -> bytes:
        out = bytearray()
        for k in sorted(self._data):
            v = self._data[k]
            out += struct.pack(">I", len(k)) + k + struct.pack(">I", len(v)) + v
        return bytes(out)


@dataclass(frozen=True)
class Event:
    height: int
    tx_id: str
    contract: EthAddress
    name: str
    data: bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "height": self.height,
                "tx_id": self.tx_id,
                "contract": self.contract.hex(),
                "name": self.name,
                "data": self.data.hex(),
            },
            sort_keys=True,
        )


@dataclass
class ExecutionContext:
    sender: EthAddress
    tx_id: str
    height: int
    timestamp: int
    contract: EthAddress
    cost_ms: float = 0.0
    events: list[tuple[str, bytes]] = field(default_factory=list)

    def emit(self, name: str, data: bytes = b"") -> None:
        self.events.append((name, data))

    def charge(self, ms: float) -> None:
        self.cost_ms += ms


class Contract:
    """Base class for deterministic contracts. Subclasses expose ``call_<method>``."""

    method_cost_ms: float = 2.0

    def __init__(self, address: EthAddress) -> None:
        self.address = address
        self.storage = Storage()

    def dispatch(self, ctx: ExecutionContext, method: str, args: bytes) -> bytes:
        fn = getattr(self, f"call_{method}", None)
        if fn is None:
            raise Revert(f"unknown method {method}")
        ctx.charge(self.method_cost_ms)
        return fn(ctx, args) or b""


ContractFactory = Callable[[EthAddress], Contract]


@dataclass(frozen=True)
class Receipt:
    tx_id: str
    height: int
    ok: bool
    output: bytes
    events: tuple[Event, ...]
    revert_reason: str = ""


class Node:
    def __init__(self, node_id: int, factories: dict[EthAddress, ContractFactory]) -> None:
        self.node_id = node_id
        self.contracts: dict[EthAddress, Contract] = {a: f(a) for a, f in factories.items()}
        self.blocks: list[Block] = []
        self.receipts: dict[str, Receipt] = {}
        self.event_log: list[Event] = []
        self.visible: set[str] = set()
        self._subscribers: list[Callable[[Event], None]] = []
        self._buffer: dict[int, Block] = {}

    @property
    def head_hash(self) -> str:
        return self.blocks[-1].hash if self.blocks else GENESIS_HASH

    def subscribe(self, callback: Callable[[Event], None]) -> None:
        self._subscribers.append(callback)

    def state_root(self) -> str:
        h = hashlib.sha256()
        for addr in sorted(self.contracts, key=lambda a: a.raw):
            h.update(addr.raw + self.contracts[addr].storage.digest())
        return h.hexdigest()

    def state_bytes(self) -> bytes:
        out = bytearray()
        for addr in sorted(self.contracts, key=lambda a: a.raw):
            blob = self.contracts[addr].storage.serialize()
            out += addr.raw + struct.pack(">Q", len(blob)) + blob
        return bytes(out)

    def execute_txs(self, height: int, timestamp: int, txs: Iterable[Transaction]) -> tuple[list[Receipt], float]:
        receipts = []
        total_cost = 0.0
        for tx in txs:
            receipt, cost = self._execute_tx(height, timestamp, tx)
            receipts.append(receipt)
            total_cost += cost
        return receipts, total_cost

    def _execute_tx(self, height: int, timestamp: int, tx: Transaction) -> tuple[Receipt, float]:
        tx_id = tx.id
        contract = self.contracts.get(tx.call.contract)
        ctx = ExecutionContext(tx.sender, tx_id, height, timestamp, tx.call.contract)
        if tx_id in self.receipts:
            receipt = Receipt(tx_id, height, False, b"", (), "duplicate transaction")
            return receipt, 0.0
        if contract is None:
            ok, output, reason = False, b"", "no contract at address"
        else:
            contract.storage.begin()
            try:
                output = contract.dispatch(ctx, tx.call.method, tx.call.args)
            except Revert as exc:
                contract.storage.rollback()
                ok, output, reason = False, b"", str(exc)
            else:
                contract.storage.commit()
                ok, reason = True, ""
        if ok:
            events = tuple(Event(height, tx_id, tx.call.contract, n, d) for n, d in ctx.events)
        else:
            events = (Event(height, tx_id, tx.call.contract, "Revert", reason.encode()),)
        return Receipt(tx_id, height, ok, output, events, reason), ctx.cost_ms

    def apply_block(self, block: Block) -> list[Receipt]:
        if block.parent_hash != self.head_hash or block.height != len(self.blocks) + 1:
            raise ChainError(f"node {self.node_id}: block {block.height} does not extend head")
        receipts, _ = self.execute_txs(block.height, block.timestamp, block.txs)
        root = self.state_root()
        if root != block.state_root:
            raise ChainError(f"node {self.node_id}: state root mismatch at height {block.height}")
        self._record(block, receipts)
        return receipts

    def _record(self, block: Block, receipts: list[Receipt]) -> None:
        self.blocks.append(block)
        for r in receipts:
            self.receipts[r.tx_id] = r
            self.event_log.extend(r.events)

    def _publish(self, receipts: list[Receipt]) -> None:
        for r in receipts:
            self.visible.add(r.tx_id)
        for r in receipts:
            for ev in r.events:
                for cb in list(self._subscribers):
                    cb(ev)

    def export_events(self, path: str | Path) -> None:
        Path(path).write_text("".join(ev.to_json() + "\n" for ev in self.event_log))


@dataclass
class _Pending:
    tx: Transaction
    via_node: int
    seq: int


class Chain:
    """N sealing nodes sharing one canonical chain (no forks)."""

    def __init__(self, sim: Simulation, config: ChainConfig | None = None) -> None:
        self.sim = sim
        self.config = config or ChainConfig()
        self._factories: dict[EthAddress, ContractFactory] = {}
        self.nodes: list[Node] = []
        self.blocks: list[Block] = []
        self._pending: dict[str, _Pending] = {}
        self._submitted: dict[str, _Pending] = {}
        self._committed: dict[str, Block] = {}
        self._available_at: dict[int, int] = {}
        self._watchers: dict[tuple[str, int], list[Callable[[Receipt], None]]] = {}
        self._nonces: dict[EthAddress, int] = {}
        self._started = False
        # fault injection: transactions matching this predicate are lost before any pool sees them
        self.drop_rule: Callable[[Transaction], bool] | None = None
        self.dropped: list[str] = []

    # -- setup ---------------------------------------------------------------------------

    def deploy(self, deployer: EthAddress, factory: ContractFactory) -> EthAddress:
        """Genesis deployment; every node gets its own instance."""
        if self._started:
            raise ChainError("contracts are deployed at genesis only")
        address = EthAddress(hashlib.sha256(b"deploy" + deployer.raw + struct.pack(">I", len(self._factories))).digest()[-20:])
        self._factories[address] = factory
        return address

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.nodes = [Node(i, self._factories) for i in range(self.config.node_count)]
        self.sim.at(self.config.block_time_ms, self._seal)

    def contract(self, address: EthAddress, node: int = 0) -> Contract:
        return self.nodes[node].contracts[address]

    # -- transactions ----------------------------------------------------------------

    def next_nonce(self, sender: EthAddress) -> int:
        n = self._nonces.get(sender, 0)
        self._nonces[sender] = n + 1
        return n

    def submit(self, sender: EthAddress, call: Call, via_node: int = 0) -> str:
        self.start()
        if not 0 <= via_node < self.config.node_count:
            raise ChainError(f"no node {via_node}")
        tx = Transaction(sender, call, self.next_nonce(sender), self.sim.now)
        entry = _Pending(tx, via_node, len(self._submitted))
        self._submitted[tx.id] = entry
        if self.drop_rule is not None and self.drop_rule(tx):
            self.dropped.append(tx.id)
        else:
            self._pending[tx.id] = entry
        return tx.id

    def arrival_time(self, tx_id: str, node: int) -> int:
        entry = self._submitted[tx_id]
        return entry.tx.submit_time + self.config.gossip_delay_ms * self.config.hops(entry.via_node, node)

    def pool(self, node: int) -> list[str]:
        """Ids of uncommitted transactions present in ``node``'s pool right now."""
        now = self.sim.now
        return [tid for tid in self._pending if self.arrival_time(tid, node) <= now]

    def pending_count(self) -> int:
        return len(self._pending)

    def watch(self, tx_id: str, node: int, callback: Callable[[Receipt], None]) -> None:
        """Call back when ``node`` has executed the block containing ``tx_id``."""
        if self.nodes and tx_id in self.nodes[node].visible:
            callback(self.nodes[node].receipts[tx_id])
        else:
            self._watchers.setdefault((tx_id, node), []).append(callback)

    # -- sealing ---------------------------------------------------------------------

    def _seal(self) -> None:
        cfg = self.config
        height = len(self.blocks) + 1
        sealer = (height - 1) % cfg.node_count
        now = self.sim.now
        node = self.nodes[sealer]
        # idealized PoA: the sealer always builds on the canonical head
        self._catch_up(sealer)
        ready = [
            p
            for p in self._pending.values()
            if p.tx.submit_time + cfg.gossip_delay_ms * cfg.hops(p.via_node, sealer) <= now
        ]
        # FIFO by submission time, ties broken by transaction id
        ready.sort(key=lambda p: (p.tx.submit_time, p.tx.id))
        txs = tuple(p.tx for p in ready[: cfg.block_capacity])
        receipts, exec_cost = node.execute_txs(height, now, txs)
        parent = self.blocks[-1].hash if self.blocks else GENESIS_HASH
        block = Block(height, parent, sealer, now, txs, node.state_root())
        block = replace(block, hash=block.compute_hash())
        node._record(block, receipts)
        self.blocks.append(block)
        for tx in txs:
            del self._pending[tx.id]
            self._committed[tx.id] = block
        available = now + int(round(exec_cost))
        self._available_at[height] = available
        self.sim.at(available, self._publish, sealer, receipts)
        for other in range(cfg.node_count):
            if other != sealer:
                self.sim.at(available + cfg.gossip_delay_ms * cfg.hops(sealer, other), self._import_remote, other, block)
        self.sim.at(now + cfg.block_time_ms, self._seal)

    def _catch_up(self, node_id: int) -> None:
        node = self.nodes[node_id]
        while len(node.blocks) < len(self.blocks):
            nxt = self.blocks[len(node.blocks)]
            node._buffer.pop(nxt.height, None)
            receipts = node.apply_block(nxt)
            self._publish(node_id, receipts)

    def _publish(self, node_id: int, receipts: list[Receipt]) -> None:
        self.nodes[node_id]._publish(receipts)
        for r in receipts:
            for cb in self._watchers.pop((r.tx_id, node_id), []):
                cb(r)

    def _import_remote(self, node_id: int, block: Block) -> None:
        node = self.nodes[node_id]
        if block.height <= len(node.blocks):
            return
        node._buffer[block.height] = block
        while len(node.blocks) + 1 in node._buffer:
            nxt = node._buffer.pop(len(node.blocks) + 1)
            receipts = node.apply_block(nxt)
            self._publish(node_id, receipts)

    def seal_blocks(self, until: int) -> list[Block]:
        """Advance the simulation to ``until`` and return the blocks sealed meanwhile."""
        self.start()
        before = len(self.blocks)
        self.sim.run(until=until)
        return self.blocks[before:]

    def quiescent(self) -> bool:
        if self._pending:
            return False
        height = len(self.blocks)
        return all(len(n.blocks) == height for n in self.nodes)

    def drain(self, limit_ms: int | None = None) -> None:
        """Run until every submitted transaction is committed and imported everywhere."""
        self.start()
        self.sim.run(until=limit_ms, stop=self.quiescent)

    # -- measurements ----------------------------------------------------------------

    def commit_block(self, tx_id: str) -> Block:
        block = self._committed.get(tx_id)
        if block is None:
            raise NotCommitted(tx_id)
        return block

    def commit_time(self, tx_id: str, observer: int | None = None) -> int:
        """Virtual time at which ``observer`` (default: the submitting node) sees the commit."""
        block = self.commit_block(tx_id)
        entry = self._submitted[tx_id]
        obs = entry.via_node if observer is None else observer
        return self._available_at[block.height] + self.config.gossip_delay_ms * self.config.hops(block.sealer_id, obs)

    def latency(self, tx_id: str, observer: int | None = None) -> int:
        return self.commit_time(tx_id, observer) - self._submitted[tx_id].tx.submit_time

    def transaction(self, tx_id: str) -> Transaction:
        return self._submitted[tx_id].tx

    def receipt(self, tx_id: str, node: int = 0) -> Receipt | None:
        return self.nodes[node].receipts.get(tx_id)

    def submitted_ids(self) -> list[str]:
        return list(self._submitted)

    def tx_log(self) -> list[tuple[int, Transaction]]:
        return [(b.height, tx) for b in self.blocks for tx in b.txs]


def replay(factories: dict[EthAddress, ContractFactory], blocks: Iterable[Block]) -> Node:
    """Re-execute a block sequence on a fresh node; raises on any state divergence."""
    node = Node(-1, factories)
    for block in blocks:
        node.apply_block(block)
    return node
