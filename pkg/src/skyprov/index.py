"""Read-only query index materialized from confirmed chain transactions.

The index is an immutable snapshot: folding a block in returns a new
snapshot and never touches the old one, so readers can hold a version
while the next block lands. Rebuilding from genesis reproduces the
incrementally built index exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from types import MappingProxyType
from typing import Optional

from .chain import Block
from .errors import InvalidBody, NotFound, WatermarkError
from .model import (
    DatasetDescriptor,
    DatasetRecord,
    DeriveDataset,
    PublishDataset,
    RegisterProgram,
    RegisterStorage,
)

_DECIMAL_RE = re.compile(r"^[0-9]+(\.[0-9]+)?$")

KINDS = ("primary", "secondary")


# -- filters -------------------------------------------------------------------


@dataclass(frozen=True)
class QueryFilter:
    """Conjunction of optional predicates; at least one must be set."""

    facility_id: Optional[str] = None
    kind: Optional[str] = None
    time_range: Optional[tuple] = None  # (start, end), matches datasets overlapping it
    energy_min: Optional[str] = None  # decimal string, PeV
    energy_max: Optional[str] = None
    ancestor_of: Optional[str] = None
    descendant_of: Optional[str] = None
    storage_id: Optional[str] = None


def validate_filter(f: QueryFilter) -> None:
    predicates = (
        f.facility_id,
        f.kind,
        f.time_range,
        f.energy_min,
        f.energy_max,
        f.ancestor_of,
        f.descendant_of,
        f.storage_id,
    )
    if all(p is None for p in predicates):
        raise InvalidBody("filter must set at least one predicate")
    if f.kind is not None and f.kind not in KINDS:
        raise InvalidBody(f"kind must be one of {KINDS}")
    if f.time_range is not None:
        ok = (
            isinstance(f.time_range, (list, tuple))
            and len(f.time_range) == 2
            and all(isinstance(t, int) and not isinstance(t, bool) for t in f.time_range)
            and f.time_range[0] <= f.time_range[1]
        )
        if not ok:
            raise InvalidBody("time_range must be an integer (start, end) with start <= end")
    for name, value in (("energy_min", f.energy_min), ("energy_max", f.energy_max)):
        if value is not None and not (isinstance(value, str) and _DECIMAL_RE.match(value)):
            raise InvalidBody(f"{name} must be a non-negative fixed-point decimal string")
    for name, value in (("ancestor_of", f.ancestor_of), ("descendant_of", f.descendant_of), ("facility_id", f.facility_id), ("storage_id", f.storage_id)):
        if value is not None and (not isinstance(value, str) or value == ""):
            raise InvalidBody(f"{name} must be a non-empty string")


# -- index state ------------------------------------------------------------------


def _frozen(d: dict):
    return MappingProxyType(dict(d))


@dataclass(frozen=True)
class IndexState:
    datasets: MappingProxyType = field(default_factory=lambda: _frozen({}))  # id -> DatasetRecord
    storages: MappingProxyType = field(default_factory=lambda: _frozen({}))  # id -> RegisterStorage
    programs: MappingProxyType = field(default_factory=lambda: _frozen({}))  # (id, version) -> code_hash
    children: MappingProxyType = field(default_factory=lambda: _frozen({}))  # parent id -> tuple of child ids
    by_facility: MappingProxyType = field(default_factory=lambda: _frozen({}))  # facility -> frozenset of ids
    by_storage: MappingProxyType = field(default_factory=lambda: _frozen({}))  # storage -> frozenset of ids
    built_to: tuple = (-1, 0)  # (height, registry_size) watermark

    __hash__ = None


def empty_index() -> IndexState:
    return IndexState()


def apply_block(index: IndexState, block: Block) -> IndexState:
    """Fold one confirmed block into a new index snapshot (pure)."""
    expected = index.built_to[0] + 1
    if block.header.height != expected:
        raise WatermarkError(
            f"block height {block.header.height} does not follow watermark height {index.built_to[0]}"
        )
    datasets = dict(index.datasets)
    storages = dict(index.storages)
    programs = dict(index.programs)
    children = dict(index.children)
    by_facility = {k: set(v) for k, v in index.by_facility.items()}
    by_storage = {k: set(v) for k, v in index.by_storage.items()}

    for tx in block.transactions:
        body = tx.body
        if isinstance(body, RegisterStorage):
            storages[body.storage_id] = body
        elif isinstance(body, RegisterProgram):
            programs[(body.program_id, body.version)] = body.code_hash
        elif isinstance(body, (PublishDataset, DeriveDataset)):
            ds = body.dataset
            if isinstance(body, DeriveDataset):
                record = DatasetRecord(
                    descriptor=ds,
                    parents=tuple(body.parent_dataset_ids),
                    program=(body.program_id, body.program_version),
                    tx_id=tx.tx_id,
                )
                for parent in body.parent_dataset_ids:
                    children[parent] = children.get(parent, ()) + (ds.dataset_id,)
            else:
                record = DatasetRecord(descriptor=ds, parents=(), program=None, tx_id=tx.tx_id)
            datasets[ds.dataset_id] = record
            by_facility.setdefault(ds.facility_id, set()).add(ds.dataset_id)
            by_storage.setdefault(ds.storage_id, set()).add(ds.dataset_id)

    return IndexState(
        datasets=_frozen(datasets),
        storages=_frozen(storages),
        programs=_frozen(programs),
        children=_frozen(children),
        by_facility=_frozen({k: frozenset(v) for k, v in by_facility.items()}),
        by_storage=_frozen({k: frozenset(v) for k, v in by_storage.items()}),
        built_to=(block.header.height, index.built_to[1] + len(block.transactions)),
    )


def build_index(blocks) -> IndexState:
    index = empty_index()
    for block in blocks:
        index = apply_block(index, block)
    return index


# -- query -----------------------------------------------------------------------


def _decimal_or_none(text) -> Optional[Decimal]:
    if not isinstance(text, str) or not _DECIMAL_RE.match(text):
        return None
    try:
        return Decimal(text)
    except InvalidOperation:  # pragma: no cover - regex already guards
        return None


def _ancestors(index: IndexState, dataset_id: str) -> set:
    out = set()
    frontier = list(index.datasets[dataset_id].parents) if dataset_id in index.datasets else []
    while frontier:
        current = frontier.pop()
        if current in out:
            continue
        out.add(current)
        record = index.datasets.get(current)
        if record is not None:
            frontier.extend(record.parents)
    return out


def _descendants(index: IndexState, dataset_id: str) -> set:
    out = set()
    frontier = list(index.children.get(dataset_id, ()))
    while frontier:
        current = frontier.pop()
        if current in out:
            continue
        out.add(current)
        frontier.extend(index.children.get(current, ()))
    return out


def query(index: IndexState, f: QueryFilter):
    """Datasets satisfying every predicate, ordered by (time_range.start, dataset_id)."""
    validate_filter(f)

    candidates = None  # None = all dataset ids

    def narrow(ids) -> None:
        nonlocal candidates
        candidates = set(ids) if candidates is None else candidates & set(ids)

    if f.facility_id is not None:
        narrow(index.by_facility.get(f.facility_id, frozenset()))
    if f.storage_id is not None:
        narrow(index.by_storage.get(f.storage_id, frozenset()))
    if f.ancestor_of is not None:
        narrow(_ancestors(index, f.ancestor_of))
    if f.descendant_of is not None:
        narrow(_descendants(index, f.descendant_of))
    if candidates is None:
        candidates = set(index.datasets)

    out = []
    for dataset_id in candidates:
        ds = index.datasets[dataset_id].descriptor
        if f.kind is not None and ds.kind != f.kind:
            continue
        if f.time_range is not None:
            lo, hi = f.time_range
            start, end = ds.time_range
            if end < lo or start > hi:
                continue
        if f.energy_min is not None:
            upper = _decimal_or_none(ds.extra.get("energy_max"))
            if upper is None or upper < Decimal(f.energy_min):
                continue
        if f.energy_max is not None:
            lower = _decimal_or_none(ds.extra.get("energy_min"))
            if lower is None or lower > Decimal(f.energy_max):
                continue
        out.append(ds)
    out.sort(key=lambda d: (d.time_range[0], d.dataset_id))
    return out


# -- file resolution -----------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedFile:
    storage_id: str
    base_uri: str
    path: str
    content_hash: str
    dataset_id: str
    size: int
    format: str


def resolve_files(index: IndexState, dataset_ids):
    """Fetch plan for the given datasets, grouped by storage for concurrent
    retrieval; within a storage, entries keep dataset order then ref order."""
    entries = []
    for position, dataset_id in enumerate(dataset_ids):
        record = index.datasets.get(dataset_id)
        if record is None:
            raise NotFound(f"dataset {dataset_id} not found")
        ds = record.descriptor
        registration = index.storages.get(ds.storage_id)
        assert registration is not None, "confirmed dataset on unregistered storage"
        for ref_position, ref in enumerate(ds.file_refs):
            entries.append(
                (
                    ds.storage_id,
                    position,
                    ref_position,
                    ResolvedFile(
                        storage_id=ds.storage_id,
                        base_uri=registration.base_uri,
                        path=ref.path,
                        content_hash=ref.content_hash,
                        dataset_id=dataset_id,
                        size=ref.size,
                        format=ref.format,
                    ),
                )
            )
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    return [e[3] for e in entries]


# -- serialization (index cache file) ----------------------------------------------------


def index_to_obj(index: IndexState) -> dict:
    from .model import body_to_obj, dataset_to_obj

    return {
        "built_to": {"height": index.built_to[0], "registry_size": index.built_to[1]},
        "datasets": {
            dataset_id: {
                "descriptor": dataset_to_obj(record.descriptor),
                "parents": list(record.parents),
                "program": (
                    None
                    if record.program is None
                    else {"program_id": record.program[0], "program_version": record.program[1]}
                ),
                "tx_id": record.tx_id,
            }
            for dataset_id, record in sorted(index.datasets.items())
        },
        "programs": [
            {"code_hash": code_hash, "program_id": pid, "version": version}
            for (pid, version), code_hash in sorted(index.programs.items())
        ],
        "storages": {sid: body_to_obj(body) for sid, body in sorted(index.storages.items())},
    }


def index_from_obj(obj) -> IndexState:
    from .model import body_from_obj, dataset_from_obj

    if not isinstance(obj, dict) or set(obj) != {"built_to", "datasets", "programs", "storages"}:
        raise InvalidBody("index snapshot keys malformed")
    datasets = {}
    children = {}
    by_facility = {}
    by_storage = {}
    for dataset_id, entry in obj["datasets"].items():
        if not isinstance(entry, dict) or set(entry) != {"descriptor", "parents", "program", "tx_id"}:
            raise InvalidBody(f"dataset entry {dataset_id} malformed")
        descriptor = dataset_from_obj(entry["descriptor"])
        program = entry["program"]
        record = DatasetRecord(
            descriptor=descriptor,
            parents=tuple(entry["parents"]),
            program=None if program is None else (program["program_id"], program["program_version"]),
            tx_id=entry["tx_id"],
        )
        datasets[dataset_id] = record
        for parent in record.parents:
            children[parent] = children.get(parent, ()) + (dataset_id,)
        by_facility.setdefault(descriptor.facility_id, set()).add(dataset_id)
        by_storage.setdefault(descriptor.storage_id, set()).add(dataset_id)
    programs = {}
    for entry in obj["programs"]:
        programs[(entry["program_id"], entry["version"])] = entry["code_hash"]
    storages = {sid: body_from_obj(body) for sid, body in obj["storages"].items()}
    built = obj["built_to"]
    return IndexState(
        datasets=_frozen(datasets),
        storages=_frozen(storages),
        programs=_frozen(programs),
        children=_frozen(children),
        by_facility=_frozen({k: frozenset(v) for k, v in by_facility.items()}),
        by_storage=_frozen({k: frozenset(v) for k, v in by_storage.items()}),
        built_to=(built["height"], built["registry_size"]),
    )
