"""Data model for air-shower events, datasets, and provenance transactions.

Every on-wire object has exactly one byte form (see canonical.py), so the
same logical value always hashes and signs identically. All digest-valued
fields are carried as lowercase hex strings; raw digest bytes appear only
at the Merkle-log boundary.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union

from .canonical import dumps_canonical, loads_canonical, sha256_bytes
from .errors import InvalidBody, NotFound
from .keys import SigningKey, verify_signature

_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")
_HEX128_RE = re.compile(r"^[0-9a-f]{128}$")
# fixed-point, non-negative; exponents and signs are not canonical
_DECIMAL_RE = re.compile(r"^[0-9]+(\.[0-9]+)?$")

DATASET_KINDS = ("primary", "secondary")
ADAPTER_KINDS = ("jsonl", "packed")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidBody(msg)


def _require_str(value: Any, name: str, allow_empty: bool = False) -> str:
    _require(isinstance(value, str), f"{name} must be a string")
    if not allow_empty:
        _require(len(value) > 0, f"{name} must be non-empty")
    return value


def _require_int(value: Any, name: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool), f"{name} must be an integer")
    return value


def _require_hex64(value: Any, name: str) -> str:
    _require(isinstance(value, str) and bool(_HEX64_RE.match(value)), f"{name} must be 64 lowercase hex chars")
    return value


def _require_str_map(value: Any, name: str) -> dict:
    _require(isinstance(value, dict), f"{name} must be a string map")
    for k, v in value.items():
        _require(isinstance(k, str), f"{name} keys must be strings")
        _require(isinstance(v, str), f"{name} values must be strings")
    return dict(value)


# -- events --------------------------------------------------------------


@dataclass(frozen=True, eq=True)
class EasEvent:
    """One extensive-air-shower event record.

    registration_time and bin_width are integer nanoseconds; energy is a
    fixed-point decimal string in PeV (no floats anywhere near signed or
    hashed bytes).
    """

    event_id: str
    registration_time: int
    facility_id: str
    detector_id: str
    signal_histogram: tuple
    bin_width: int
    energy_estimate: Optional[str] = None
    service_info: Mapping[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, EasEvent):
            return NotImplemented
        return (
            self.event_id == other.event_id
            and self.registration_time == other.registration_time
            and self.facility_id == other.facility_id
            and self.detector_id == other.detector_id
            and tuple(self.signal_histogram) == tuple(other.signal_histogram)
            and self.bin_width == other.bin_width
            and self.energy_estimate == other.energy_estimate
            and dict(self.service_info) == dict(other.service_info)
        )

    __hash__ = None


def validate_event(ev: EasEvent) -> None:
    _require_str(ev.event_id, "event_id")
    _require_int(ev.registration_time, "registration_time")
    _require(ev.registration_time > 0, "registration_time must be > 0")
    _require_str(ev.facility_id, "facility_id")
    _require_str(ev.detector_id, "detector_id")
    _require(isinstance(ev.signal_histogram, (list, tuple)), "signal_histogram must be a sequence")
    for c in ev.signal_histogram:
        _require_int(c, "histogram count")
        _require(c >= 0, "histogram counts must be >= 0")
    _require_int(ev.bin_width, "bin_width")
    _require(ev.bin_width > 0, "bin_width must be > 0")
    if ev.energy_estimate is not None:
        _require(
            isinstance(ev.energy_estimate, str) and bool(_DECIMAL_RE.match(ev.energy_estimate)),
            "energy_estimate must be a non-negative fixed-point decimal string",
        )
    _require_str_map(ev.service_info, "service_info")


def event_to_obj(ev: EasEvent) -> dict:
    validate_event(ev)
    return {
        "bin_width": ev.bin_width,
        "detector_id": ev.detector_id,
        "energy_estimate": ev.energy_estimate,
        "event_id": ev.event_id,
        "facility_id": ev.facility_id,
        "registration_time": ev.registration_time,
        "service_info": dict(sorted(ev.service_info.items())),
        "signal_histogram": list(ev.signal_histogram),
    }


_EVENT_KEYS = {
    "bin_width",
    "detector_id",
    "energy_estimate",
    "event_id",
    "facility_id",
    "registration_time",
    "service_info",
    "signal_histogram",
}


def event_from_obj(obj: Any) -> EasEvent:
    _require(isinstance(obj, dict), "event must be an object")
    _require(set(obj) == _EVENT_KEYS, f"event object keys must be exactly {sorted(_EVENT_KEYS)}")
    ev = EasEvent(
        event_id=obj["event_id"],
        registration_time=obj["registration_time"],
        facility_id=obj["facility_id"],
        detector_id=obj["detector_id"],
        signal_histogram=tuple(obj["signal_histogram"]) if isinstance(obj["signal_histogram"], (list, tuple)) else obj["signal_histogram"],
        bin_width=obj["bin_width"],
        energy_estimate=obj["energy_estimate"],
        service_info=obj["service_info"],
    )
    validate_event(ev)
    return ev


def event_bytes(ev: EasEvent) -> bytes:
    return dumps_canonical(event_to_obj(ev))


# -- datasets ------------------------------------------------------------


@dataclass(frozen=True)
class FileRef:
    path: str
    content_hash: str
    size: int
    format: str


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: str
    kind: str
    storage_id: str
    file_refs: tuple
    facility_id: str
    time_range: tuple
    detector_geometry_hash: str
    extra: Mapping[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, DatasetDescriptor):
            return NotImplemented
        return dataset_to_obj(self) == dataset_to_obj(other)

    __hash__ = None


def validate_dataset(ds: DatasetDescriptor) -> None:
    _require_str(ds.dataset_id, "dataset_id")
    _require(ds.kind in DATASET_KINDS, f"kind must be one of {DATASET_KINDS}")
    _require_str(ds.storage_id, "storage_id")
    _require(isinstance(ds.file_refs, (list, tuple)) and len(ds.file_refs) > 0, "file_refs must be non-empty")
    for ref in ds.file_refs:
        _require(isinstance(ref, FileRef), "file_refs entries must be FileRef")
        _require_str(ref.path, "file path")
        _require_hex64(ref.content_hash, "content_hash")
        _require_int(ref.size, "file size")
        _require(ref.size >= 0, "file size must be >= 0")
        _require(ref.format in ADAPTER_KINDS, f"file format must be one of {ADAPTER_KINDS}")
    _require_str(ds.facility_id, "facility_id")
    _require(
        isinstance(ds.time_range, (list, tuple)) and len(ds.time_range) == 2,
        "time_range must be a (start, end) pair",
    )
    start, end = ds.time_range
    _require_int(start, "time_range.start")
    _require_int(end, "time_range.end")
    _require(start <= end, "time_range.start must be <= time_range.end")
    _require_hex64(ds.detector_geometry_hash, "detector_geometry_hash")
    _require_str_map(ds.extra, "extra")


def dataset_to_obj(ds: DatasetDescriptor) -> dict:
    validate_dataset(ds)
    return {
        "dataset_id": ds.dataset_id,
        "detector_geometry_hash": ds.detector_geometry_hash,
        "extra": dict(sorted(ds.extra.items())),
        "facility_id": ds.facility_id,
        "file_refs": [
            {"content_hash": r.content_hash, "format": r.format, "path": r.path, "size": r.size}
            for r in ds.file_refs
        ],
        "kind": ds.kind,
        "storage_id": ds.storage_id,
        "time_range": {"end": ds.time_range[1], "start": ds.time_range[0]},
    }


_DATASET_KEYS = {
    "dataset_id",
    "detector_geometry_hash",
    "extra",
    "facility_id",
    "file_refs",
    "kind",
    "storage_id",
    "time_range",
}

_FILE_REF_KEYS = {"content_hash", "format", "path", "size"}


def dataset_from_obj(obj: Any) -> DatasetDescriptor:
    _require(isinstance(obj, dict), "dataset must be an object")
    _require(set(obj) == _DATASET_KEYS, f"dataset object keys must be exactly {sorted(_DATASET_KEYS)}")
    refs_obj = obj["file_refs"]
    _require(isinstance(refs_obj, list), "file_refs must be a list")
    refs = []
    for r in refs_obj:
        _require(isinstance(r, dict) and set(r) == _FILE_REF_KEYS, "file_refs entries malformed")
        refs.append(FileRef(path=r["path"], content_hash=r["content_hash"], size=r["size"], format=r["format"]))
    tr = obj["time_range"]
    _require(isinstance(tr, dict) and set(tr) == {"end", "start"}, "time_range malformed")
    ds = DatasetDescriptor(
        dataset_id=obj["dataset_id"],
        kind=obj["kind"],
        storage_id=obj["storage_id"],
        file_refs=tuple(refs),
        facility_id=obj["facility_id"],
        time_range=(tr["start"], tr["end"]),
        detector_geometry_hash=obj["detector_geometry_hash"],
        extra=obj["extra"],
    )
    validate_dataset(ds)
    return ds


# -- transaction bodies ---------------------------------------------------


@dataclass(frozen=True)
class RegisterStorage:
    storage_id: str
    adapter_kind: str
    base_uri: str
    storage_pubkey: str


@dataclass(frozen=True)
class RegisterProgram:
    program_id: str
    version: str
    code_hash: str


@dataclass(frozen=True)
class PublishDataset:
    dataset: DatasetDescriptor


@dataclass(frozen=True)
class DeriveDataset:
    dataset: DatasetDescriptor
    parent_dataset_ids: tuple
    program_id: str
    program_version: str
    parameters_hash: str


TxBody = Union[RegisterStorage, RegisterProgram, PublishDataset, DeriveDataset]

BODY_TYPE_TAGS = {
    RegisterStorage: "register_storage",
    RegisterProgram: "register_program",
    PublishDataset: "publish_dataset",
    DeriveDataset: "derive_dataset",
}


def body_to_obj(body: TxBody) -> dict:
    if isinstance(body, RegisterStorage):
        _require_str(body.storage_id, "storage_id")
        _require(body.adapter_kind in ADAPTER_KINDS, f"adapter_kind must be one of {ADAPTER_KINDS}")
        _require_str(body.base_uri, "base_uri")
        _require_hex64(body.storage_pubkey, "storage_pubkey")
        return {
            "adapter_kind": body.adapter_kind,
            "base_uri": body.base_uri,
            "storage_id": body.storage_id,
            "storage_pubkey": body.storage_pubkey,
            "type": "register_storage",
        }
    if isinstance(body, RegisterProgram):
        _require_str(body.program_id, "program_id")
        _require_str(body.version, "version")
        _require_hex64(body.code_hash, "code_hash")
        return {
            "code_hash": body.code_hash,
            "program_id": body.program_id,
            "type": "register_program",
            "version": body.version,
        }
    if isinstance(body, PublishDataset):
        _require(body.dataset.kind == "primary", "publish_dataset must carry a primary dataset")
        return {"dataset": dataset_to_obj(body.dataset), "type": "publish_dataset"}
    if isinstance(body, DeriveDataset):
        _require(body.dataset.kind == "secondary", "derive_dataset must carry a secondary dataset")
        _require(
            isinstance(body.parent_dataset_ids, (list, tuple)) and len(body.parent_dataset_ids) > 0,
            "parent_dataset_ids must be non-empty",
        )
        seen = set()
        for p in body.parent_dataset_ids:
            _require_str(p, "parent dataset id")
            _require(p not in seen, "parent_dataset_ids must be distinct")
            seen.add(p)
        _require(body.dataset.dataset_id not in seen, "a dataset cannot be its own parent")
        _require_str(body.program_id, "program_id")
        _require_str(body.program_version, "program_version")
        _require_hex64(body.parameters_hash, "parameters_hash")
        return {
            "dataset": dataset_to_obj(body.dataset),
            "parameters_hash": body.parameters_hash,
            "parent_dataset_ids": list(body.parent_dataset_ids),
            "program_id": body.program_id,
            "program_version": body.program_version,
            "type": "derive_dataset",
        }
    raise InvalidBody(f"unknown transaction body type {type(body).__name__}")


def body_from_obj(obj: Any) -> TxBody:
    _require(isinstance(obj, dict), "body must be an object")
    tag = obj.get("type")
    if tag == "register_storage":
        _require(set(obj) == {"adapter_kind", "base_uri", "storage_id", "storage_pubkey", "type"}, "register_storage keys malformed")
        body = RegisterStorage(
            storage_id=obj["storage_id"],
            adapter_kind=obj["adapter_kind"],
            base_uri=obj["base_uri"],
            storage_pubkey=obj["storage_pubkey"],
        )
    elif tag == "register_program":
        _require(set(obj) == {"code_hash", "program_id", "type", "version"}, "register_program keys malformed")
        body = RegisterProgram(program_id=obj["program_id"], version=obj["version"], code_hash=obj["code_hash"])
    elif tag == "publish_dataset":
        _require(set(obj) == {"dataset", "type"}, "publish_dataset keys malformed")
        body = PublishDataset(dataset=dataset_from_obj(obj["dataset"]))
    elif tag == "derive_dataset":
        _require(
            set(obj) == {"dataset", "parameters_hash", "parent_dataset_ids", "program_id", "program_version", "type"},
            "derive_dataset keys malformed",
        )
        parents = obj["parent_dataset_ids"]
        _require(isinstance(parents, list), "parent_dataset_ids must be a list")
        body = DeriveDataset(
            dataset=dataset_from_obj(obj["dataset"]),
            parent_dataset_ids=tuple(parents),
            program_id=obj["program_id"],
            program_version=obj["program_version"],
            parameters_hash=obj["parameters_hash"],
        )
    else:
        raise InvalidBody(f"unknown body type tag {tag!r}")
    body_to_obj(body)  # full field validation
    return body


def canonical_bytes(body: TxBody) -> bytes:
    """The unique byte form of a transaction body: hashed and signed as-is."""
    return dumps_canonical(body_to_obj(body))


def compute_tx_id(body: TxBody) -> str:
    return sha256_bytes(canonical_bytes(body)).hex()


# -- signed transactions ---------------------------------------------------


@dataclass(frozen=True)
class PmdTransaction:
    body: TxBody
    creator: str
    created_at: int
    signature: str
    tx_id: str


def sign_transaction(body: TxBody, key: SigningKey, created_at: Optional[int] = None) -> PmdTransaction:
    if not isinstance(key, SigningKey):
        raise InvalidBody("key must be a SigningKey")
    data = canonical_bytes(body)
    if created_at is None:
        created_at = time.time_ns()
    _require_int(created_at, "created_at")
    _require(created_at > 0, "created_at must be > 0")
    return PmdTransaction(
        body=body,
        creator=key.public_hex,
        created_at=created_at,
        signature=key.sign(data).hex(),
        tx_id=sha256_bytes(data).hex(),
    )


def tx_to_obj(tx: PmdTransaction) -> dict:
    _require_hex64(tx.creator, "creator")
    _require_int(tx.created_at, "created_at")
    _require(tx.created_at > 0, "created_at must be > 0")
    _require(isinstance(tx.signature, str) and bool(_HEX128_RE.match(tx.signature)), "signature must be 128 lowercase hex chars")
    _require_hex64(tx.tx_id, "tx_id")
    return {
        "body": body_to_obj(tx.body),
        "created_at": tx.created_at,
        "creator": tx.creator,
        "signature": tx.signature,
        "tx_id": tx.tx_id,
    }


_TX_KEYS = {"body", "created_at", "creator", "signature", "tx_id"}


def tx_from_obj(obj: Any) -> PmdTransaction:
    _require(isinstance(obj, dict), "transaction must be an object")
    _require(set(obj) == _TX_KEYS, f"transaction keys must be exactly {sorted(_TX_KEYS)}")
    tx = PmdTransaction(
        body=body_from_obj(obj["body"]),
        creator=obj["creator"],
        created_at=obj["created_at"],
        signature=obj["signature"],
        tx_id=obj["tx_id"],
    )
    tx_to_obj(tx)  # field validation
    return tx


def tx_wire_bytes(tx: PmdTransaction) -> bytes:
    """Wire form: the canonical bytes appended to the registry log."""
    return dumps_canonical(tx_to_obj(tx))


def tx_from_wire_bytes(data: bytes) -> PmdTransaction:
    return tx_from_obj(loads_canonical(data))


# -- registry state and validation -----------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    descriptor: DatasetDescriptor
    parents: tuple
    program: Optional[tuple]  # (program_id, program_version) for derived data
    tx_id: str

    __hash__ = None

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            self.descriptor == other.descriptor
            and tuple(self.parents) == tuple(other.parents)
            and self.program == other.program
            and self.tx_id == other.tx_id
        )


class RegistryState:
    """Confirmed-transaction view used to validate new transactions.

    Mutating apply() is only ever called with transactions that passed
    validate_transaction against this same state, in confirmation order.
    """

    __slots__ = ("storages", "programs", "datasets")

    def __init__(self):
        self.storages: dict = {}
        self.programs: dict = {}
        self.datasets: dict = {}

    def clone(self) -> "RegistryState":
        out = RegistryState()
        out.storages = dict(self.storages)
        out.programs = dict(self.programs)
        out.datasets = dict(self.datasets)
        return out

    def apply(self, tx: PmdTransaction) -> None:
        body = tx.body
        if isinstance(body, RegisterStorage):
            self.storages[body.storage_id] = body
        elif isinstance(body, RegisterProgram):
            self.programs[(body.program_id, body.version)] = body.code_hash
        elif isinstance(body, PublishDataset):
            self.datasets[body.dataset.dataset_id] = DatasetRecord(
                descriptor=body.dataset, parents=(), program=None, tx_id=tx.tx_id
            )
        elif isinstance(body, DeriveDataset):
            self.datasets[body.dataset.dataset_id] = DatasetRecord(
                descriptor=body.dataset,
                parents=tuple(body.parent_dataset_ids),
                program=(body.program_id, body.program_version),
                tx_id=tx.tx_id,
            )
        else:  # pragma: no cover - bodies are validated before apply
            raise InvalidBody(f"unknown body type {type(body).__name__}")


@dataclass(frozen=True)
class TxVerdict:
    ok: bool
    reason: Optional[str] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


TX_ACCEPT = TxVerdict(True)


def validate_transaction(tx: PmdTransaction, state: RegistryState) -> TxVerdict:
    """Full admission check against the given confirmed state."""
    try:
        data = canonical_bytes(tx.body)
        tx_to_obj(tx)
    except InvalidBody as exc:
        return TxVerdict(False, "InvalidBody", str(exc))
    if tx.tx_id != sha256_bytes(data).hex():
        return TxVerdict(False, "BadTxId", "tx_id does not hash the body")
    if not verify_signature(tx.creator, data, bytes.fromhex(tx.signature)):
        return TxVerdict(False, "BadSignature", "signature does not verify under creator key")
    body = tx.body
    if isinstance(body, RegisterStorage):
        if body.storage_id in state.storages:
            return TxVerdict(False, "DuplicateStorage", f"storage {body.storage_id} already registered")
    elif isinstance(body, RegisterProgram):
        if (body.program_id, body.version) in state.programs:
            return TxVerdict(False, "DuplicateProgram", f"program {body.program_id}@{body.version} already registered")
    elif isinstance(body, PublishDataset):
        if body.dataset.storage_id not in state.storages:
            return TxVerdict(False, "UnknownStorage", f"storage {body.dataset.storage_id} not registered")
        if body.dataset.dataset_id in state.datasets:
            return TxVerdict(False, "DuplicateDataset", f"dataset {body.dataset.dataset_id} already exists")
    elif isinstance(body, DeriveDataset):
        if body.dataset.storage_id not in state.storages:
            return TxVerdict(False, "UnknownStorage", f"storage {body.dataset.storage_id} not registered")
        for parent in body.parent_dataset_ids:
            if parent not in state.datasets:
                return TxVerdict(False, "UnknownParent", f"parent dataset {parent} not found")
        if (body.program_id, body.program_version) not in state.programs:
            return TxVerdict(False, "UnknownProgram", f"program {body.program_id}@{body.program_version} not registered")
        if body.dataset.dataset_id in state.datasets:
            return TxVerdict(False, "DuplicateDataset", f"dataset {body.dataset.dataset_id} already exists")
    return TX_ACCEPT


# -- provenance -------------------------------------------------------------


@dataclass(frozen=True)
class ProvEdge:
    child: str
    parent: str
    program_id: str
    program_version: str


@dataclass(frozen=True)
class ProvenanceDag:
    nodes: tuple
    edges: tuple

    def to_obj(self) -> dict:
        return {
            "edges": [
                {
                    "child": e.child,
                    "parent": e.parent,
                    "program_id": e.program_id,
                    "program_version": e.program_version,
                }
                for e in self.edges
            ],
            "nodes": list(self.nodes),
        }


def provenance_trace(dataset_id: str, state: RegistryState) -> ProvenanceDag:
    """Complete ancestor closure of a dataset, with program annotations."""
    if dataset_id not in state.datasets:
        raise NotFound(f"dataset {dataset_id} not found")
    nodes = set()
    edges = []
    frontier = [dataset_id]
    while frontier:
        current = frontier.pop()
        if current in nodes:
            continue
        if current not in state.datasets:
            raise NotFound(f"dataset {current} referenced but not found")
        nodes.add(current)
        record = state.datasets[current]
        if record.program is None:
            continue
        program_id, program_version = record.program
        for parent in record.parents:
            edges.append(ProvEdge(current, parent, program_id, program_version))
            if parent not in nodes:
                frontier.append(parent)
    return ProvenanceDag(
        nodes=tuple(sorted(nodes)),
        edges=tuple(sorted(edges, key=lambda e: (e.child, e.parent))),
    )
