"""Aggregation service: query, fetch, verify, stream through plugins, deliver.

The engine resolves a metadata filter to physical files, fetches them
per-storage (concurrently by default), refuses to run any plugin before
every fetched file matched its chain-recorded digest, then streams
decoded events through the pipeline. Output is defined entirely by the
merge policy, never by fetch arrival order.
"""

from __future__ import annotations

import heapq
import io
import os
import tarfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterator, NamedTuple, Optional

from .canonical import dumps_canonical, sha256_bytes
from .chain import ChainState
from .errors import (
    DuplicateDataset,
    DuplicateEntry,
    IntegrityError,
    InvalidBody,
    IoError,
    NotFound,
    PluginConfigError,
    PluginNotFound,
    UnknownProgram,
    UnsortedInput,
)
from .index import IndexState, QueryFilter, query, resolve_files, validate_filter
from .keys import SigningKey
from .model import (
    DatasetDescriptor,
    DeriveDataset,
    FileRef,
    PmdTransaction,
    sign_transaction,
)
from .storage import StorageHandle, decode_events, encode_events, get_file, put_file

DEFAULT_WINDOW = 10_000


# -- requests --------------------------------------------------------------------


@dataclass(frozen=True)
class PluginSpec:
    name: str
    parameters: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LocalSink:
    path: str


@dataclass(frozen=True)
class PublishSink:
    storage_id: str
    dataset_id: str
    program_id: str
    program_version: str


@dataclass(frozen=True)
class AggregationRequest:
    filter: QueryFilter
    pipeline: tuple = ()
    sink: object = None


_FILTER_KEYS = {
    "facility_id",
    "kind",
    "time_range",
    "energy_min",
    "energy_max",
    "ancestor_of",
    "descendant_of",
    "storage_id",
}


def filter_from_obj(obj) -> QueryFilter:
    if not isinstance(obj, dict) or not set(obj) <= _FILTER_KEYS:
        raise InvalidBody(f"filter keys must be a subset of {sorted(_FILTER_KEYS)}")
    kwargs = dict(obj)
    tr = kwargs.get("time_range")
    if tr is not None:
        if isinstance(tr, dict) and set(tr) == {"end", "start"}:
            kwargs["time_range"] = (tr["start"], tr["end"])
        elif isinstance(tr, list) and len(tr) == 2:
            kwargs["time_range"] = (tr[0], tr[1])
        else:
            raise InvalidBody("time_range must be [start, end] or {start, end}")
    f = QueryFilter(**kwargs)
    validate_filter(f)
    return f


def request_from_obj(obj) -> AggregationRequest:
    if not isinstance(obj, dict) or set(obj) != {"filter", "pipeline", "sink"}:
        raise InvalidBody("request must have exactly filter, pipeline, sink")
    pipeline = []
    if not isinstance(obj["pipeline"], list):
        raise InvalidBody("pipeline must be a list")
    for entry in obj["pipeline"]:
        if not isinstance(entry, dict) or set(entry) != {"name", "parameters"}:
            raise InvalidBody("pipeline entries must have exactly name and parameters")
        params = entry["parameters"]
        if not isinstance(params, dict) or any(
            not isinstance(k, str) or not isinstance(v, str) for k, v in params.items()
        ):
            raise InvalidBody("plugin parameters must be a string map")
        pipeline.append(PluginSpec(name=entry["name"], parameters=dict(params)))
    sink_obj = obj["sink"]
    if sink_obj is None:
        return AggregationRequest(filter=filter_from_obj(obj["filter"]), pipeline=tuple(pipeline), sink=None)
    if not isinstance(sink_obj, dict) or "type" not in sink_obj:
        raise InvalidBody("sink must be an object with a type")
    if sink_obj["type"] == "local_path":
        if set(sink_obj) != {"path", "type"} or not isinstance(sink_obj["path"], str):
            raise InvalidBody("local_path sink needs exactly a path string")
        sink = LocalSink(path=sink_obj["path"])
    elif sink_obj["type"] == "publish":
        wanted = {"dataset_id", "program_id", "program_version", "storage_id", "type"}
        if set(sink_obj) != wanted:
            raise InvalidBody(f"publish sink keys must be exactly {sorted(wanted)}")
        sink = PublishSink(
            storage_id=sink_obj["storage_id"],
            dataset_id=sink_obj["dataset_id"],
            program_id=sink_obj["program_id"],
            program_version=sink_obj["program_version"],
        )
    else:
        raise InvalidBody(f"unknown sink type {sink_obj['type']!r}")
    return AggregationRequest(filter=filter_from_obj(obj["filter"]), pipeline=tuple(pipeline), sink=sink)


def pipeline_to_obj(pipeline) -> list:
    return [{"name": spec.name, "parameters": dict(sorted(spec.parameters.items()))} for spec in pipeline]


def pipeline_parameters_hash(pipeline) -> str:
    """Identifies an analysis: hash of the full pipeline spec."""
    return sha256_bytes(dumps_canonical(pipeline_to_obj(pipeline))).hex()


# -- plugin library -----------------------------------------------------------------


class StreamItem(NamedTuple):
    dataset_id: str
    origin: str  # "<dataset_id>:<path>" of the source file
    event: object


def _no_parameters(spec: PluginSpec) -> None:
    if spec.parameters:
        raise PluginConfigError(f"{spec.name} takes no parameters, got {sorted(spec.parameters)}")


class TimeOrderedMergePlugin:
    """k-way merge of per-file streams; ties break by (dataset_id, event_id)."""

    kind = "merge"

    def __init__(self, spec: PluginSpec):
        _no_parameters(spec)
        self.peak_buffered = 0

    def merge(self, named_streams) -> Iterator[StreamItem]:
        self.peak_buffered = len(named_streams)
        checked = [_sorted_guard(name, stream) for name, stream in named_streams]
        return heapq.merge(
            *checked, key=lambda item: (item.event.registration_time, item.dataset_id, item.event.event_id)
        )


def _sorted_guard(name: str, stream) -> Iterator[StreamItem]:
    last = None
    for item in stream:
        t = item.event.registration_time
        if last is not None and t < last:
            raise UnsortedInput(f"stream {name} is not time-ordered (saw {t} after {last})")
        last = t
        yield item


def plugin_time_ordered_merge(named_streams) -> Iterator[StreamItem]:
    """Functional form: merge [(name, stream), ...] into one ordered stream."""
    plugin = TimeOrderedMergePlugin(PluginSpec("time_ordered_merge", {}))
    return plugin.merge(list(named_streams))


class EnergyFilterPlugin:
    """Keep events with energy_estimate >= threshold; tally energy-less drops."""

    kind = "stream"

    def __init__(self, spec: PluginSpec):
        params = dict(spec.parameters)
        threshold = params.pop("threshold", None)
        if params:
            raise PluginConfigError(f"energy_filter: unknown parameters {sorted(params)}")
        if threshold is None:
            raise PluginConfigError("energy_filter: missing threshold parameter")
        if isinstance(threshold, str) and threshold.startswith("-"):
            raise PluginConfigError("energy_filter: threshold must be >= 0")
        try:
            self.threshold = Decimal(threshold)
        except Exception as exc:
            raise PluginConfigError(f"energy_filter: bad threshold {threshold!r}") from exc
        if self.threshold.is_nan() or self.threshold < 0:
            raise PluginConfigError("energy_filter: threshold must be a finite decimal >= 0")
        self.dropped_missing = 0

    def transform(self, stream) -> Iterator[StreamItem]:
        for item in stream:
            energy = item.event.energy_estimate
            if energy is None:
                self.dropped_missing += 1
                continue
            if Decimal(energy) >= self.threshold:
                yield item

    @property
    def drop_tally(self) -> int:
        return self.dropped_missing


def plugin_energy_filter(stream, threshold: str):
    """Functional form; returns (kept events iterator materialized, dropped count)."""
    plugin = EnergyFilterPlugin(PluginSpec("energy_filter", {"threshold": threshold}))
    kept = list(plugin.transform(stream))
    return kept, plugin.dropped_missing


class MergeArchivePlugin:
    kind = "archive"

    def __init__(self, spec: PluginSpec):
        _no_parameters(spec)


def plugin_merge_archive(entries) -> bytes:
    """Deterministic uncompressed tar of (name, bytes) entries, sorted by name."""
    items = sorted(entries, key=lambda e: e[0])
    seen = set()
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for name, data in items:
            if name in seen:
                raise DuplicateEntry(f"duplicate archive entry name {name!r}")
            seen.add(name)
            info = tarfile.TarInfo(name=name)
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o644
            info.uid = 0
            info.gid = 0
            info.uname = ""
            info.gname = ""
            try:
                tar.addfile(info, io.BytesIO(data))
            except ValueError as exc:
                raise InvalidBody(f"archive entry name {name!r} not storable: {exc}") from exc
    return buf.getvalue()


_PLUGINS = {
    "time_ordered_merge": TimeOrderedMergePlugin,
    "energy_filter": EnergyFilterPlugin,
    "merge_archive": MergeArchivePlugin,
}


def make_plugin(spec: PluginSpec):
    factory = _PLUGINS.get(spec.name)
    if factory is None:
        raise PluginNotFound(f"no plugin named {spec.name!r}")
    return factory(spec)


# -- execution ------------------------------------------------------------------------


@dataclass
class AggregationResult:
    matched_datasets: tuple  # dataset ids in canonical (query) order
    files_fetched: int
    events_in: int
    events_out: int
    drop_tally: dict  # plugin name -> dropped count
    mode: str  # "events" | "archive"
    output_bytes: bytes
    output_digest: str
    pipeline: tuple
    output_path: Optional[str] = None

    def summary_obj(self) -> dict:
        return {
            "datasets_matched": len(self.matched_datasets),
            "drop_tally": dict(sorted(self.drop_tally.items())),
            "events_in": self.events_in,
            "events_out": self.events_out,
            "files_fetched": self.files_fetched,
            "mode": self.mode,
            "output_digest": self.output_digest,
        }


def _fetch_all(plan, storages, concurrent: bool):
    """Fetch every planned file, grouped per storage; returns {(sid, path): (bytes, digest)}."""
    groups = {}
    for entry in plan:
        groups.setdefault(entry.storage_id, []).append(entry)
    for sid in groups:
        if sid not in storages:
            raise NotFound(f"no handle for storage {sid}")

    def fetch_group(sid):
        out = {}
        for entry in groups[sid]:
            data, digest = get_file(storages[sid], entry.path)
            out[(sid, entry.path)] = (data, digest.hex())
        return out

    fetched = {}
    ordered = sorted(groups)
    if concurrent and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=len(ordered)) as pool:
            for result in pool.map(fetch_group, ordered):
                fetched.update(result)
    else:
        for sid in ordered:
            fetched.update(fetch_group(sid))
    return fetched


def execute(
    request: AggregationRequest,
    index: IndexState,
    storages,
    window: int = DEFAULT_WINDOW,
    concurrent: bool = True,
) -> AggregationResult:
    """Run one aggregation request end to end (sink delivery for local sinks;
    publish sinks are completed by publish_result on the returned result)."""
    validate_filter(request.filter)
    plugins = [make_plugin(spec) for spec in request.pipeline]  # plan-time validation
    archive_mode = any(p.kind == "archive" for p in plugins)
    if archive_mode and len(plugins) != 1:
        raise PluginConfigError("merge_archive must be the only pipeline stage")
    for position, plugin in enumerate(plugins):
        if plugin.kind == "merge" and position != 0:
            raise PluginConfigError("time_ordered_merge must be the first pipeline stage")

    matched = query(index, request.filter)
    dataset_ids = tuple(ds.dataset_id for ds in matched)
    plan = resolve_files(index, dataset_ids)
    fetched = _fetch_all(plan, storages, concurrent)

    # integrity gate: every file verified before any plugin touches any byte
    for entry in plan:
        _, digest = fetched[(entry.storage_id, entry.path)]
        if digest != entry.content_hash:
            raise IntegrityError(
                f"{entry.storage_id}/{entry.path}: digest {digest} does not match chain record {entry.content_hash}"
            )

    drop_tally = {}
    if archive_mode:
        entries = [
            (f"{e.storage_id}/{e.path}", fetched[(e.storage_id, e.path)][0]) for e in plan
        ]
        output = plugin_merge_archive(entries)
        events_in = events_out = 0
    else:
        # canonical pre-merge order: datasets in query order, refs in
        # descriptor order, records in file order
        named_streams = []
        events_in = 0
        for ds in matched:
            for ref in ds.file_refs:
                data, _ = fetched[(ds.storage_id, ref.path)]
                events = decode_events(ref.format, data)
                events_in += len(events)
                name = f"{ds.dataset_id}:{ref.path}"
                items = [StreamItem(ds.dataset_id, name, ev) for ev in events]
                named_streams.append((name, items))
        if len(named_streams) > window:
            raise PluginConfigError(
                f"{len(named_streams)} input streams exceed the buffering window {window}"
            )

        if plugins and plugins[0].kind == "merge":
            stream = plugins[0].merge(named_streams)
            rest = plugins[1:]
        else:
            stream = (item for _, items in named_streams for item in items)
            rest = plugins
        for plugin in rest:
            stream = plugin.transform(stream)

        out_events = [item.event for item in stream]
        events_out = len(out_events)
        output = encode_events("jsonl", out_events)
        for spec, plugin in zip(request.pipeline, plugins):
            tally = getattr(plugin, "drop_tally", 0)
            if tally:
                drop_tally[spec.name] = drop_tally.get(spec.name, 0) + tally

    result = AggregationResult(
        matched_datasets=dataset_ids,
        files_fetched=len(plan),
        events_in=events_in,
        events_out=events_out,
        drop_tally=drop_tally,
        mode="archive" if archive_mode else "events",
        output_bytes=output,
        output_digest=sha256_bytes(output).hex(),
        pipeline=request.pipeline,
    )

    if isinstance(request.sink, LocalSink):
        target = request.sink.path
        try:
            parent = os.path.dirname(os.path.abspath(target))
            os.makedirs(parent, exist_ok=True)
            with open(target, "wb") as fh:
                fh.write(output)
        except OSError as exc:
            raise IoError(f"cannot write sink file {target}: {exc}") from exc
        result.output_path = target
    return result


# -- publish-with-provenance -------------------------------------------------------------


def publish_result(
    result: AggregationResult,
    sink: PublishSink,
    key: SigningKey,
    state: ChainState,
    storages,
    created_at: Optional[int] = None,
) -> PmdTransaction:
    """Write the result into a storage and submit the derivation record.

    Order matters: the file is written first and the transaction submitted
    second, so a failed write never leaves a dangling registry entry.
    """
    if result.mode != "events":
        raise PluginConfigError("only event results can be published as datasets")
    if not result.matched_datasets:
        raise InvalidBody("cannot publish a derivation with zero parent datasets")
    registry = state.registry
    if (sink.program_id, sink.program_version) not in registry.programs:
        raise UnknownProgram(f"program {sink.program_id}@{sink.program_version} is not registered")
    if sink.dataset_id in registry.datasets:
        raise DuplicateDataset(f"dataset {sink.dataset_id} already exists")
    if sink.storage_id not in registry.storages:
        raise NotFound(f"storage {sink.storage_id} is not registered")
    handle = storages.get(sink.storage_id)
    if handle is None:
        raise NotFound(f"no handle for storage {sink.storage_id}")

    parents = [registry.datasets[pid].descriptor for pid in result.matched_datasets]
    facilities = sorted({p.facility_id for p in parents})
    facility_id = facilities[0] if len(facilities) == 1 else "multi"
    time_range = (min(p.time_range[0] for p in parents), max(p.time_range[1] for p in parents))
    geometry = sha256_bytes(
        dumps_canonical(sorted({p.detector_geometry_hash for p in parents}))
    ).hex()

    if handle.kind == "jsonl":
        data = result.output_bytes
    else:
        data = encode_events(handle.kind, decode_events("jsonl", result.output_bytes))
    path = f"derived/{sink.dataset_id}.{handle.kind}"
    digest = put_file(handle, path, data)  # AlreadyExists / IoError abort before any tx

    descriptor = DatasetDescriptor(
        dataset_id=sink.dataset_id,
        kind="secondary",
        storage_id=sink.storage_id,
        file_refs=(FileRef(path=path, content_hash=digest.hex(), size=len(data), format=handle.kind),),
        facility_id=facility_id,
        time_range=time_range,
        detector_geometry_hash=geometry,
        extra={},
    )
    body = DeriveDataset(
        dataset=descriptor,
        parent_dataset_ids=tuple(result.matched_datasets),
        program_id=sink.program_id,
        program_version=sink.program_version,
        parameters_hash=pipeline_parameters_hash(result.pipeline),
    )
    tx = sign_transaction(body, key, created_at=created_at)
    verdict = state.submit(tx)
    if not verdict.ok:
        try:
            os.remove(os.path.join(handle.base_uri, path))
        except OSError:
            pass
        raise InvalidBody(f"publish transaction rejected: {verdict.reason}: {verdict.detail}")
    return tx
