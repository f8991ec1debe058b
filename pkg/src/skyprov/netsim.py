"""Deterministic network simulator for the handler chain.

One seeded Random drives every latency draw and drop decision, heap events
break ties on (time, priority, sender, sequence), and nodes act in sorted
id order, so a config maps to exactly one trace byte-for-byte.

Message deliveries carry priority 0 and slot ticks priority 1: everything
arriving "at" a slot boundary is processed before the slot fires.

Fault repertoire:
  offline         ignore all traffic in a slot window, sync on reconnect
  equivocate      sign two blocks for one slot, send each to half the net
  tamper_history  rewrite an already-confirmed block (optionally re-signing
                  the suffix) in the copy served to sync and audit
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .canonical import digest_from_hex, sha256_bytes
from .chain import (
    Block,
    BlockHeader,
    ChainState,
    GenesisConfig,
    detect_equivocation,
    header_hash,
    header_signing_bytes,
    produce_block,
    tx_tree_root,
)
from .errors import ConfigError
from .keys import SigningKey
from .merkle import MerkleLog, verify_consistency
from .model import (
    DatasetDescriptor,
    FileRef,
    PublishDataset,
    RegisterProgram,
    RegisterStorage,
    sign_transaction,
    tx_wire_bytes,
)

# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    handler: str
    from_slot: int = 0
    to_slot: int = 0
    slot: int = 0
    height: int = 0
    resign: int = 0


@dataclass(frozen=True)
class SimConfig:
    seed: int
    handler_ids: tuple
    slot_duration_ms: int
    duration_slots: int
    ordering_mode: str = "fixed"
    genesis_time: int = 1_000_000_000_000
    latency_min: int = 0
    latency_max: int = 0
    drop_probability: float = 0.0
    txs_per_slot: int = 1
    faults: tuple = ()


def _want(obj, key, types, what):
    if key not in obj:
        raise ConfigError(f"missing {what}")
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise ConfigError(f"{what} has the wrong type")
    return value


def _fault_from_obj(obj, handler_ids) -> FaultSpec:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError("fault entries must be objects with a kind")
    kind = obj["kind"]
    handler = obj.get("handler")
    if handler not in handler_ids:
        raise ConfigError(f"fault names unknown handler {handler!r}")
    if kind == "offline":
        if set(obj) != {"kind", "handler", "from_slot", "to_slot"}:
            raise ConfigError("offline fault takes handler, from_slot, to_slot")
        lo, hi = obj["from_slot"], obj["to_slot"]
        if not (isinstance(lo, int) and isinstance(hi, int) and 0 <= lo <= hi):
            raise ConfigError("offline fault needs 0 <= from_slot <= to_slot")
        return FaultSpec(kind=kind, handler=handler, from_slot=lo, to_slot=hi)
    if kind == "equivocate":
        if set(obj) != {"kind", "handler", "slot"}:
            raise ConfigError("equivocate fault takes handler, slot")
        if not isinstance(obj["slot"], int) or obj["slot"] < 0:
            raise ConfigError("equivocate slot must be a non-negative integer")
        return FaultSpec(kind=kind, handler=handler, slot=obj["slot"])
    if kind == "tamper_history":
        if set(obj) != {"kind", "handler", "slot", "height", "resign"}:
            raise ConfigError("tamper_history fault takes handler, slot, height, resign")
        if not isinstance(obj["height"], int) or obj["height"] < 0:
            raise ConfigError("tamper height must be a non-negative integer")
        if not isinstance(obj["slot"], int) or obj["slot"] < 0:
            raise ConfigError("tamper slot must be a non-negative integer")
        if obj["resign"] not in (0, 1):
            raise ConfigError("tamper resign must be 0 or 1")
        return FaultSpec(
            kind=kind, handler=handler, slot=obj["slot"], height=obj["height"], resign=obj["resign"]
        )
    raise ConfigError(f"unknown fault kind {kind!r}")


def sim_config_from_obj(obj) -> SimConfig:
    if not isinstance(obj, dict):
        raise ConfigError("simulation config must be an object")
    known = {
        "seed",
        "handlers",
        "slot_duration_ms",
        "duration_slots",
        "ordering_mode",
        "genesis_time",
        "latency_ms",
        "drop_probability",
        "txs_per_slot",
        "faults",
    }
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    seed = _want(obj, "seed", int, "seed")
    handlers = _want(obj, "handlers", (int, list), "handlers")
    if isinstance(handlers, int):
        if handlers < 1:
            raise ConfigError("handlers count must be >= 1")
        handler_ids = tuple(f"h{i}" for i in range(handlers))
    else:
        if not handlers or any(not isinstance(h, str) or not h for h in handlers):
            raise ConfigError("handlers list must hold non-empty strings")
        if len(set(handlers)) != len(handlers):
            raise ConfigError("handler ids must be unique")
        handler_ids = tuple(handlers)
    slot_ms = _want(obj, "slot_duration_ms", int, "slot_duration_ms")
    duration = _want(obj, "duration_slots", int, "duration_slots")
    if slot_ms < 1 or duration < 1:
        raise ConfigError("slot_duration_ms and duration_slots must be >= 1")
    mode = obj.get("ordering_mode", "fixed")
    if mode not in ("fixed", "reshuffled"):
        raise ConfigError("ordering_mode must be fixed or reshuffled")
    genesis_time = obj.get("genesis_time", 1_000_000_000_000)
    if not isinstance(genesis_time, int) or genesis_time < 0:
        raise ConfigError("genesis_time must be a non-negative integer")
    latency = obj.get("latency_ms", {"min": 0, "max": 0})
    if (
        not isinstance(latency, dict)
        or set(latency) != {"max", "min"}
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in latency.values())
        or not 0 <= latency["min"] <= latency["max"]
    ):
        raise ConfigError("latency_ms must be {min, max} with 0 <= min <= max")
    drop = obj.get("drop_probability", 0.0)
    if isinstance(drop, bool) or not isinstance(drop, (int, float)) or not 0 <= drop <= 1:
        raise ConfigError("drop_probability must be in [0, 1]")
    txs = obj.get("txs_per_slot", 1)
    if not isinstance(txs, int) or txs < 0:
        raise ConfigError("txs_per_slot must be >= 0")
    faults = tuple(_fault_from_obj(f, handler_ids) for f in obj.get("faults", []))
    tampered = [f.handler for f in faults if f.kind == "tamper_history"]
    if len(set(tampered)) != len(tampered):
        raise ConfigError("at most one tamper_history fault per handler")
    return SimConfig(
        seed=seed,
        handler_ids=handler_ids,
        slot_duration_ms=slot_ms,
        duration_slots=duration,
        ordering_mode=mode,
        genesis_time=genesis_time,
        latency_min=latency["min"],
        latency_max=latency["max"],
        drop_probability=float(drop),
        txs_per_slot=txs,
        faults=faults,
    )


def handler_key(seed: int, handler_id: str) -> SigningKey:
    return SigningKey.from_seed(f"sim:{seed}:handler:{handler_id}".encode())


def client_key(seed: int) -> SigningKey:
    return SigningKey.from_seed(f"sim:{seed}:client".encode())


def genesis_for(config: SimConfig) -> GenesisConfig:
    handlers = tuple((hid, handler_key(config.seed, hid).public_hex) for hid in config.handler_ids)
    return GenesisConfig(
        handlers=handlers,
        slot_duration_ms=config.slot_duration_ms,
        ordering_mode=config.ordering_mode,
        genesis_time=config.genesis_time,
    )


# -- history rewriting (the tamper fault) --------------------------------------------


def rewrite_history(blocks, height: int, key: SigningKey, resign: int):
    """A forged copy of the chain with block[height]'s first tx mutated.

    resign=0 keeps every header byte, so the tampered block no longer
    matches its own tx_root. resign=1 rebuilds commitments and re-signs
    every header from the tampered height with the forger's key, leaving
    creator fields alone, so headers whose creator key differs stop
    verifying instead.
    """
    blocks = list(blocks)
    if not 0 <= height < len(blocks):
        raise ConfigError(f"tamper height {height} is not a confirmed block")
    target = blocks[height]
    if not target.transactions:
        raise ConfigError(f"block {height} has no transactions to tamper with")
    tx0 = target.transactions[0]
    body = tx0.body
    if not hasattr(body, "dataset"):
        raise ConfigError("tamper expects a dataset-carrying first transaction")
    extra = dict(body.dataset.extra)
    extra["tampered"] = "1"
    new_body = dataclasses.replace(body, dataset=dataclasses.replace(body.dataset, extra=extra))
    if resign:
        new_tx = sign_transaction(new_body, key, created_at=tx0.created_at)
    else:
        new_tx = dataclasses.replace(tx0, body=new_body)
    new_txs = (new_tx,) + target.transactions[1:]

    if not resign:
        blocks[height] = Block(header=target.header, transactions=new_txs)
        return blocks

    log = MerkleLog()
    for block in blocks[:height]:
        for tx in block.transactions:
            log.append(tx_wire_bytes(tx))
    prev_hash = blocks[height].header.prev_block_hash
    for h in range(height, len(blocks)):
        txs = new_txs if h == height else blocks[h].transactions
        for tx in txs:
            log.append(tx_wire_bytes(tx))
        old = blocks[h].header
        unsigned = dataclasses.replace(
            old,
            prev_block_hash=prev_hash,
            tx_root=tx_tree_root([tx_wire_bytes(tx) for tx in txs]),
            registry_root=log.root().hex(),
            registry_size=log.size,
            signature="0" * 128,
        )
        signed = dataclasses.replace(unsigned, signature=key.sign(header_signing_bytes(unsigned)).hex())
        blocks[h] = Block(header=signed, transactions=txs)
        prev_hash = header_hash(signed)
    return blocks


# -- nodes ------------------------------------------------------------------------------


class SimNode:
    def __init__(self, node_id: str, key: SigningKey, genesis: GenesisConfig):
        self.node_id = node_id
        self.key = key
        self.state = ChainState(genesis)
        self.seen_headers = {}  # (creator, slot) -> header
        self.evidence = {}  # (creator, slot) -> EquivocationEvidence
        self.evidence_headers = {}  # (creator, slot) -> (header, header)
        self.pending = {}  # height -> block waiting for its predecessor
        self.checkpoints = [self.state.checkpoint()]
        self.flooded = set()  # evidence keys already passed on
        self.awaiting_sync = False  # reconnected, no sync response seen yet
        self.tamper: Optional[FaultSpec] = None
        self.tamper_active = False

    def export_chain(self):
        if self.tamper_active and self.tamper is not None:
            return rewrite_history(
                self.state.blocks, self.tamper.height, self.key, self.tamper.resign
            )
        return list(self.state.blocks)

    def register_header(self, header: BlockHeader, config: GenesisConfig):
        """Track one header per (creator, slot); a conflicting second one is
        equivocation evidence. Returns new evidence or None."""
        key = (header.creator, header.slot)
        prev = self.seen_headers.get(key)
        if prev is None:
            self.seen_headers[key] = header
            return None
        if header_hash(prev) == header_hash(header):
            return None
        evidence = detect_equivocation(prev, header, config)
        if evidence is None or key in self.evidence:
            return None
        self.evidence[key] = evidence
        return (prev, header)

    def try_apply(self, block: Block):
        """Apply if it extends the head; returns (applied, verdict)."""
        verdict = self.state.receive_block(block)
        if verdict.ok:
            self.checkpoints.append(self.state.checkpoint())
            self.drain_pending()
        return verdict

    def drain_pending(self):
        while True:
            nxt = self.pending.pop(self.state.head_height + 1, None)
            if nxt is None:
                return
            if not self.state.receive_block(nxt).ok:
                return
            self.checkpoints.append(self.state.checkpoint())


# -- the simulator -----------------------------------------------------------------------


PRIORITY_DELIVER = 0
PRIORITY_TICK = 1


@dataclass
class SimTrace:
    events: list = field(default_factory=list)

    def log(self, obj):
        self.events.append(obj)

    def to_jsonl_bytes(self) -> bytes:
        out = []
        for obj in self.events:
            out.append(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        return ("\n".join(out) + "\n").encode("utf-8") if out else b""


def _short(hex_digest: str) -> str:
    return hex_digest[:12]


class Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.genesis = genesis_for(config)
        self.rng = random.Random(config.seed)
        self.trace = SimTrace()
        self.heap = []
        self.seq = 0
        self.halted = False
        self.client = client_key(config.seed)
        self.nodes = {
            hid: SimNode(hid, handler_key(config.seed, hid), self.genesis)
            for hid in config.handler_ids
        }
        self.offline_windows = {}  # handler -> (from_slot, to_slot)
        self.equivocations = {}  # (handler, slot) -> FaultSpec
        for fault in config.faults:
            if fault.kind == "offline":
                self.offline_windows[fault.handler] = (fault.from_slot, fault.to_slot)
            elif fault.kind == "equivocate":
                self.equivocations[(fault.handler, fault.slot)] = fault
            elif fault.kind == "tamper_history":
                self.nodes[fault.handler].tamper = fault

    # -- scheduling --

    def push(self, time_ms: int, priority: int, sender: str, payload):
        heapq.heappush(self.heap, (time_ms, priority, sender, self.seq, payload))
        self.seq += 1

    def send(self, time_ms: int, sender: str, receiver: str, msg, reliable: bool):
        latency = self.rng.randint(self.config.latency_min, self.config.latency_max)
        if not reliable and self.config.drop_probability > 0:
            if self.rng.random() < self.config.drop_probability:
                self.trace.log(
                    {"t": time_ms, "type": "drop", "from": sender, "to": receiver, "msg": msg[0]}
                )
                return
        self.push(time_ms + latency, PRIORITY_DELIVER, sender, ("deliver", receiver, msg))

    def broadcast_block(self, time_ms: int, sender: str, block: Block, receivers=None):
        for receiver in sorted(receivers if receivers is not None else set(self.nodes) - {sender}):
            self.send(time_ms, sender, receiver, ("block", sender, block), reliable=False)

    def is_offline(self, node_id: str, slot: int) -> bool:
        window = self.offline_windows.get(node_id)
        return window is not None and window[0] <= slot <= window[1]

    def slot_of(self, time_ms: int) -> int:
        return time_ms // self.config.slot_duration_ms

    # -- workload --

    def make_publish_body(self, slot: int, k: int) -> PublishDataset:
        ds_id = f"ds-{slot}-{k}"
        path = f"data/{ds_id}.jsonl"
        start = self.nodes_time(slot)
        return PublishDataset(
            dataset=DatasetDescriptor(
                dataset_id=ds_id,
                kind="primary",
                storage_id="sim-storage",
                file_refs=(
                    FileRef(
                        path=path,
                        content_hash=sha256_bytes(path.encode()).hex(),
                        size=1,
                        format="jsonl",
                    ),
                ),
                facility_id="SIM",
                time_range=(start, start + self.config.slot_duration_ms * 1_000_000),
                detector_geometry_hash=sha256_bytes(b"sim-geometry").hex(),
                extra={},
            )
        )

    def nodes_time(self, slot: int) -> int:
        return self.config.genesis_time + slot * self.config.slot_duration_ms * 1_000_000

    def schedule_workload(self):
        bootstrap = [
            RegisterStorage(
                storage_id="sim-storage",
                adapter_kind="jsonl",
                base_uri="/sim/storage",
                storage_pubkey=client_key(self.config.seed).public_hex,
            ),
            RegisterProgram(
                program_id="sim-program",
                version="1.0",
                code_hash=SigningKey.from_seed(b"sim-code").public_hex,
            ),
        ]
        txs = [
            sign_transaction(body, self.client, created_at=self.config.genesis_time)
            for body in bootstrap
        ]
        for slot in range(self.config.duration_slots):
            t = slot * self.config.slot_duration_ms
            slot_txs = list(txs) if slot == 0 else []
            for k in range(self.config.txs_per_slot):
                slot_txs.append(
                    sign_transaction(
                        self.make_publish_body(slot, k),
                        self.client,
                        created_at=self.nodes_time(slot) + k + 1,
                    )
                )
            if slot_txs:
                self.push(t, PRIORITY_DELIVER, "client", ("txs", slot, tuple(slot_txs)))

    # -- event handlers --

    def run(self, audit: bool = True) -> SimTrace:
        self.schedule_workload()
        for slot in range(self.config.duration_slots + 1):
            self.push(slot * self.config.slot_duration_ms, PRIORITY_TICK, "~tick", ("tick", slot))
        while self.heap:
            time_ms, _, _, _, payload = heapq.heappop(self.heap)
            kind = payload[0]
            if kind == "txs":
                self.handle_txs(time_ms, payload[1], payload[2])
            elif kind == "tick":
                self.handle_tick(time_ms, payload[1])
            elif kind == "deliver":
                self.handle_delivery(time_ms, payload[1], payload[2])
        if audit:
            self.audit()
        self.finals()
        return self.trace

    def handle_txs(self, time_ms: int, slot: int, txs):
        self.trace.log({"t": time_ms, "type": "txs", "slot": slot, "count": len(txs)})
        for node_id in sorted(self.nodes):
            if self.is_offline(node_id, slot):
                continue
            for tx in txs:
                self.nodes[node_id].state.submit(tx)

    def handle_tick(self, time_ms: int, slot: int):
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            window = self.offline_windows.get(node_id)
            if window is not None and slot == window[1] + 1:
                self.trace.log({"t": time_ms, "type": "reconnect", "node": node_id, "slot": slot})
                node.awaiting_sync = True
                self.request_sync(time_ms, node_id)
            if node.tamper is not None and slot == node.tamper.slot and not node.tamper_active:
                if node.tamper.height > node.state.head_height:
                    raise ConfigError(
                        f"tamper height {node.tamper.height} not confirmed at slot {slot} "
                        f"(head is {node.state.head_height})"
                    )
                node.export_chain()  # raises ConfigError if the target block is untamperable
                node.tamper_active = True
                self.trace.log(
                    {
                        "t": time_ms,
                        "type": "tamper",
                        "node": node_id,
                        "height": node.tamper.height,
                        "resign": node.tamper.resign,
                    }
                )

        if slot >= self.config.duration_slots:
            return
        equiv = None
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            fault = self.equivocations.get((node_id, slot))
            if fault is not None:
                scheduled = node.state.scheduled_handler(slot)
                if scheduled != node_id:
                    raise ConfigError(
                        f"equivocate fault: slot {slot} belongs to {scheduled}, not {node_id}"
                    )
                if self.is_offline(node_id, slot):
                    raise ConfigError(f"equivocator {node_id} is offline at slot {slot}")
                equiv = node_id
        if self.halted:
            return
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            if self.is_offline(node_id, slot):
                continue
            if node.state.scheduled_handler(slot) != node_id:
                continue
            if node.state.last_slot() >= slot:
                continue
            if node.pending or node.awaiting_sync:
                # the node knows it is behind; producing here would fork it off
                self.trace.log({"t": time_ms, "type": "abstain", "node": node_id, "slot": slot})
                continue
            block = produce_block(node.state, slot, node.key, now=self.nodes_time(slot))
            if node_id == equiv:
                second = produce_block(node.state, slot, node.key, now=self.nodes_time(slot) + 1)
                node.try_apply(block)
                node.register_header(block.header, self.genesis)
                receivers = sorted(set(self.nodes) - {node_id})
                half = len(receivers) // 2
                self.trace.log(
                    {
                        "t": time_ms,
                        "type": "produce_equivocation",
                        "node": node_id,
                        "slot": slot,
                        "blocks": [_short(header_hash(block.header)), _short(header_hash(second.header))],
                    }
                )
                self.broadcast_block(time_ms, node_id, block, receivers=receivers[:half])
                self.broadcast_block(time_ms, node_id, second, receivers=receivers[half:])
            else:
                node.try_apply(block)
                node.register_header(block.header, self.genesis)
                self.trace.log(
                    {
                        "t": time_ms,
                        "type": "produce",
                        "node": node_id,
                        "slot": slot,
                        "height": block.header.height,
                        "block": _short(header_hash(block.header)),
                    }
                )
                self.broadcast_block(time_ms, node_id, block)

    def handle_delivery(self, time_ms: int, receiver: str, msg):
        node = self.nodes[receiver]
        slot = self.slot_of(time_ms)
        if self.is_offline(receiver, slot):
            self.trace.log({"t": time_ms, "type": "offline_ignore", "node": receiver, "msg": msg[0]})
            return
        kind = msg[0]
        if kind == "block":
            _, sender, block = msg
            self.note_header(time_ms, receiver, block.header)
            verdict = node.try_apply(block)
            if verdict.ok:
                self.trace.log(
                    {
                        "t": time_ms,
                        "type": "apply",
                        "node": receiver,
                        "height": block.header.height,
                        "block": _short(header_hash(block.header)),
                    }
                )
                return
            height = block.header.height
            if height > node.state.head_height + 1:
                node.pending[height] = block
                self.trace.log(
                    {"t": time_ms, "type": "gap", "node": receiver, "height": height, "head": node.state.head_height}
                )
                self.send_sync_req(time_ms, receiver, sender)
            elif verdict.reason == "BadLink" and height == node.state.head_height + 1:
                # same-height fork: compare notes with the sender
                self.trace.log(
                    {"t": time_ms, "type": "fork", "node": receiver, "height": height, "reason": verdict.reason}
                )
                self.send_sync_req(time_ms, receiver, sender)
            else:
                self.trace.log(
                    {"t": time_ms, "type": "reject", "node": receiver, "height": height, "reason": verdict.reason}
                )
        elif kind == "sync_req":
            _, requester, their_head = msg
            blocks = [b for b in node.state.blocks if b.header.height >= max(0, their_head)]
            pairs = tuple(node.evidence_headers[key] for key in sorted(node.evidence_headers))
            self.trace.log(
                {"t": time_ms, "type": "sync_resp", "from": receiver, "to": requester, "blocks": len(blocks)}
            )
            self.send(time_ms, receiver, requester, ("sync_resp", receiver, tuple(blocks), pairs), reliable=True)
        elif kind == "sync_resp":
            _, sender, blocks, pairs = msg
            node.awaiting_sync = False
            for a, b in pairs:
                self.note_header(time_ms, receiver, a)
                self.note_header(time_ms, receiver, b)
            for block in blocks:
                self.note_header(time_ms, receiver, block.header)
                if block.header.height == node.state.head_height + 1:
                    if node.try_apply(block).ok:
                        self.trace.log(
                            {
                                "t": time_ms,
                                "type": "apply",
                                "node": receiver,
                                "height": block.header.height,
                                "block": _short(header_hash(block.header)),
                            }
                        )
        elif kind == "evidence":
            _, a, b = msg
            self.note_header(time_ms, receiver, a)
            self.note_header(time_ms, receiver, b)

    def note_header(self, time_ms: int, node_id: str, header: BlockHeader):
        node = self.nodes[node_id]
        pair = node.register_header(header, self.genesis)
        if pair is None:
            return
        key = (header.creator, header.slot)
        node.evidence_headers[key] = pair
        self.trace.log(
            {"t": time_ms, "type": "evidence", "node": node_id, "creator": header.creator, "slot": header.slot}
        )
        if not self.halted:
            self.halted = True
            self.trace.log({"t": time_ms, "type": "halt", "node": node_id})
        if key not in node.flooded:
            node.flooded.add(key)
            for other in sorted(set(self.nodes) - {node_id}):
                self.send(time_ms, node_id, other, ("evidence", pair[0], pair[1]), reliable=True)

    def send_sync_req(self, time_ms: int, requester: str, responder: str):
        if responder == requester or responder not in self.nodes:
            return
        self.trace.log(
            {"t": time_ms, "type": "sync_req", "from": requester, "to": responder, "head": self.nodes[requester].state.head_height}
        )
        self.send(
            time_ms,
            requester,
            responder,
            ("sync_req", requester, self.nodes[requester].state.head_height),
            reliable=True,
        )

    def request_sync(self, time_ms: int, node_id: str):
        for other in sorted(set(self.nodes) - {node_id}):
            self.send_sync_req(time_ms, node_id, other)

    # -- end-of-run verification --

    def audit(self):
        tamperers = {f.handler for f in self.config.faults if f.kind == "tamper_history"}
        verifiers = [n for n in sorted(self.nodes) if n not in tamperers]
        for verifier in verifiers:
            own = self.nodes[verifier]
            for peer in sorted(self.nodes):
                if peer == verifier:
                    continue
                chain = self.nodes[peer].export_chain()
                replay = ChainState(self.genesis)
                failure = None
                for block in chain:
                    verdict = replay.receive_block(block)
                    if not verdict.ok:
                        failure = {"height": block.header.height, "reason": verdict.reason}
                        break
                peer_log = MerkleLog()
                for block in chain:
                    for tx in block.transactions:
                        peer_log.append(tx_wire_bytes(tx))
                failed_checkpoints = []
                for cp in own.checkpoints:
                    if cp.registry_size > peer_log.size:
                        failed_checkpoints.append(cp.registry_size)
                        continue
                    proof = peer_log.prove_consistency(cp.registry_size)
                    ok = verify_consistency(
                        digest_from_hex(cp.registry_root),
                        cp.registry_size,
                        peer_log.root(),
                        peer_log.size,
                        proof,
                    )
                    if not ok:
                        failed_checkpoints.append(cp.registry_size)
                self.trace.log(
                    {
                        "type": "audit",
                        "verifier": verifier,
                        "peer": peer,
                        "replay": failure if failure else "ok",
                        "checkpoints": len(own.checkpoints),
                        "failed_checkpoints": sorted(set(failed_checkpoints)),
                    }
                )

    def finals(self):
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            self.trace.log(
                {
                    "type": "final",
                    "node": node_id,
                    "height": node.state.head_height,
                    "head": node.state.head_hash(),
                    "registry_root": node.state.registry_log.root().hex(),
                    "registry_size": node.state.registry_log.size,
                    "pool": len(node.state.pending_pool),
                    "evidence": [[c, s] for c, s in sorted(node.evidence)],
                }
            )


def run_simulation(config: SimConfig, audit: bool = True) -> SimTrace:
    """Run one scripted network simulation; audit=False skips the final
    cross-replay audit (useful when only convergence is examined)."""
    return Simulation(config).run(audit=audit)
