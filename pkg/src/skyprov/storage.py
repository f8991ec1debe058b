"""Storage adapters: a uniform file interface over per-storage formats.

A storage is a directory with a `storage.json` manifest declaring its
codec. Files are retrieved and stored bit-exact; event files decode to
canonical events regardless of the underlying format, so everything
downstream is format-blind.

packed codec, all little-endian:
  file header: magic "EASP", u16 version (1), u32 record count
  per record:
    u16 event_id length, event_id bytes (UTF-8)
    u16 facility_id length, facility_id bytes
    u16 detector_id length, detector_id bytes
    u64 registration_time
    u32 bin_width
    u32 histogram length, then one u32 per count
    u8 energy-present flag; if 1: u16 length, decimal-string bytes
    u16 service-info pair count; per pair (sorted by key):
        u16 key length, key bytes, u16 value length, value bytes
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from .canonical import dumps_canonical, loads_canonical, sha256_bytes
from .errors import (
    AlreadyExists,
    DecodeError,
    InvalidBody,
    IoError,
    NotFound,
    PathViolation,
)
from .model import ADAPTER_KINDS, EasEvent, event_from_obj, event_to_obj, validate_event

MANIFEST_NAME = "storage.json"

PACKED_MAGIC = b"EASP"
PACKED_VERSION = 1

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class StorageHandle:
    storage_id: str
    base_uri: str
    kind: str


def init_storage(base_uri: str, storage_id: str, kind: str) -> StorageHandle:
    """Create a storage directory with its manifest."""
    if kind not in ADAPTER_KINDS:
        raise InvalidBody(f"kind must be one of {ADAPTER_KINDS}")
    if not isinstance(storage_id, str) or storage_id == "":
        raise InvalidBody("storage_id must be a non-empty string")
    os.makedirs(base_uri, exist_ok=True)
    manifest = os.path.join(base_uri, MANIFEST_NAME)
    if os.path.exists(manifest):
        raise AlreadyExists(f"storage manifest already present at {manifest}")
    data = dumps_canonical({"kind": kind, "storage_id": storage_id}) + b"\n"
    try:
        with open(manifest, "xb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write manifest {manifest}: {exc}") from exc
    return StorageHandle(storage_id=storage_id, base_uri=base_uri, kind=kind)


def open_storage(base_uri: str) -> StorageHandle:
    """Open an existing storage by reading its manifest."""
    manifest = os.path.join(base_uri, MANIFEST_NAME)
    if not os.path.isdir(base_uri) or not os.path.isfile(manifest):
        raise NotFound(f"no storage manifest at {manifest}")
    try:
        with open(manifest, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest}: {exc}") from exc
    obj = loads_canonical(raw[:-1] if raw.endswith(b"\n") else raw)
    if not isinstance(obj, dict) or set(obj) != {"kind", "storage_id"}:
        raise InvalidBody(f"manifest {manifest} keys malformed")
    if obj["kind"] not in ADAPTER_KINDS:
        raise InvalidBody(f"manifest {manifest} declares unknown kind {obj['kind']!r}")
    return StorageHandle(storage_id=obj["storage_id"], base_uri=base_uri, kind=obj["kind"])


def _resolve(handle: StorageHandle, path: str) -> str:
    if not isinstance(path, str) or path == "":
        raise PathViolation("path must be a non-empty relative path")
    if os.path.isabs(path):
        raise PathViolation(f"absolute path not allowed: {path}")
    base = os.path.realpath(handle.base_uri)
    target = os.path.realpath(os.path.join(base, path))
    if target != base and not target.startswith(base + os.sep):
        raise PathViolation(f"path escapes storage root: {path}")
    return target


def get_file(handle: StorageHandle, path: str):
    """Exact file bytes plus their SHA-256; integrity verdicts are the caller's."""
    target = _resolve(handle, path)
    if not os.path.isfile(target):
        raise NotFound(f"no file {path} in storage {handle.storage_id}")
    try:
        with open(target, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return data, sha256_bytes(data)


def put_file(handle: StorageHandle, path: str, data: bytes) -> bytes:
    """Store bytes at a fresh path (publish-once); returns their SHA-256."""
    if not isinstance(data, bytes):
        raise InvalidBody("put_file expects bytes")
    target = _resolve(handle, path)
    if os.path.exists(target):
        raise AlreadyExists(f"path {path} already exists in storage {handle.storage_id}")
    try:
        os.makedirs(os.path.dirname(target), exist_ok=True)
        with open(target, "xb") as fh:
            fh.write(data)
    except FileExistsError as exc:
        raise AlreadyExists(f"path {path} already exists in storage {handle.storage_id}") from exc
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return sha256_bytes(data)


# -- jsonl codec ---------------------------------------------------------------


def encode_events_jsonl(events) -> bytes:
    out = bytearray()
    for ev in events:
        out += dumps_canonical(event_to_obj(ev))
        out += b"\n"
    return bytes(out)


def decode_events_jsonl(data: bytes):
    if not isinstance(data, bytes):
        raise DecodeError("jsonl input must be bytes", 0)
    if data == b"":
        return []
    if not data.endswith(b"\n"):
        raise DecodeError("jsonl file must end with a newline", data.count(b"\n"))
    events = []
    for i, line in enumerate(data[:-1].split(b"\n")):
        try:
            events.append(event_from_obj(loads_canonical(line)))
        except InvalidBody as exc:
            raise DecodeError(f"bad jsonl record: {exc}", i) from exc
    return events


# -- packed codec ----------------------------------------------------------------


def _pack_str(text: str, what: str, index: int) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > _U16_MAX:
        raise InvalidBody(f"record {index}: {what} too long for packed format")
    return struct.pack("<H", len(raw)) + raw


def encode_events_packed(events) -> bytes:
    events = list(events)
    out = bytearray()
    out += PACKED_MAGIC
    out += struct.pack("<HI", PACKED_VERSION, len(events))
    for i, ev in enumerate(events):
        validate_event(ev)
        if ev.registration_time > _U64_MAX:
            raise InvalidBody(f"record {i}: registration_time exceeds u64")
        if ev.bin_width > _U32_MAX:
            raise InvalidBody(f"record {i}: bin_width exceeds u32")
        if len(ev.signal_histogram) > _U32_MAX:
            raise InvalidBody(f"record {i}: histogram too long")
        out += _pack_str(ev.event_id, "event_id", i)
        out += _pack_str(ev.facility_id, "facility_id", i)
        out += _pack_str(ev.detector_id, "detector_id", i)
        out += struct.pack("<QI", ev.registration_time, ev.bin_width)
        out += struct.pack("<I", len(ev.signal_histogram))
        for count in ev.signal_histogram:
            if count > _U32_MAX:
                raise InvalidBody(f"record {i}: histogram count exceeds u32")
            out += struct.pack("<I", count)
        if ev.energy_estimate is None:
            out += b"\x00"
        else:
            out += b"\x01"
            out += _pack_str(ev.energy_estimate, "energy_estimate", i)
        pairs = sorted(dict(ev.service_info).items())
        if len(pairs) > _U16_MAX:
            raise InvalidBody(f"record {i}: too many service_info pairs")
        out += struct.pack("<H", len(pairs))
        for key, value in pairs:
            out += _pack_str(key, "service_info key", i)
            out += _pack_str(value, "service_info value", i)
    return bytes(out)


class _Cursor:
    __slots__ = ("data", "pos", "record")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.record = 0

    def need(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated packed record", self.record)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.need(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.need(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.need(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.need(8))[0]

    def string(self) -> str:
        raw = self.need(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8 in packed record: {exc}", self.record) from exc


def decode_events_packed(data: bytes):
    cur = _Cursor(data)
    if cur.need(4) != PACKED_MAGIC:
        raise DecodeError("bad packed magic", 0)
    version = cur.u16()
    if version != PACKED_VERSION:
        raise DecodeError(f"unsupported packed version {version}", 0)
    count = cur.u32()
    events = []
    for i in range(count):
        cur.record = i
        event_id = cur.string()
        facility_id = cur.string()
        detector_id = cur.string()
        registration_time = cur.u64()
        bin_width = cur.u32()
        histogram = tuple(cur.u32() for _ in range(cur.u32()))
        flag = cur.u8()
        if flag not in (0, 1):
            raise DecodeError(f"bad energy flag byte {flag}", i)
        energy = cur.string() if flag else None
        service_info = {}
        for _ in range(cur.u16()):
            key = cur.string()
            value = cur.string()
            if key in service_info:
                raise DecodeError(f"duplicate service_info key {key!r}", i)
            service_info[key] = value
        ev = EasEvent(
            event_id=event_id,
            registration_time=registration_time,
            facility_id=facility_id,
            detector_id=detector_id,
            signal_histogram=histogram,
            bin_width=bin_width,
            energy_estimate=energy,
            service_info=service_info,
        )
        try:
            validate_event(ev)
        except InvalidBody as exc:
            raise DecodeError(f"invalid packed record: {exc}", i) from exc
        events.append(ev)
    if cur.pos != len(data):
        raise DecodeError("trailing bytes after final packed record", count)
    return events


# -- event-level adapter interface ---------------------------------------------------


def encode_events(kind: str, events) -> bytes:
    if kind == "jsonl":
        return encode_events_jsonl(events)
    if kind == "packed":
        return encode_events_packed(events)
    raise InvalidBody(f"unknown adapter kind {kind!r}")


def decode_events(kind: str, data: bytes):
    if kind == "jsonl":
        return decode_events_jsonl(data)
    if kind == "packed":
        return decode_events_packed(data)
    raise InvalidBody(f"unknown adapter kind {kind!r}")


def read_events(handle: StorageHandle, path: str):
    data, _ = get_file(handle, path)
    return decode_events(handle.kind, data)


def write_events(handle: StorageHandle, path: str, events) -> bytes:
    return put_file(handle, path, encode_events(handle.kind, events))
