"""Command-line driver.

One binary, subcommand style. All state lives under an explicit ``--home``
directory: keys in ``home/keys``, the default chain store in ``home/chain``,
storage roots resolved against ``home`` when registered with relative paths.
Machine output (JSON lines, digests) goes to stdout; progress notes go to
stderr. Exit codes: 0 success, 2 usage, 3 validation or integrity failure,
4 I/O.
"""

import argparse
import dataclasses
import json
import os
import sys

from .aggregation import (
    LocalSink,
    PublishSink,
    execute,
    publish_result,
    request_from_obj,
)
from .canonical import digest_from_hex, dumps_canonical
from .chain import (
    Checkpoint,
    GenesisConfig,
    genesis_hash,
    header_hash,
    load_chain,
    load_genesis,
    produce_block,
    replay_chain,
    save_block_file,
    save_genesis,
    validate_genesis,
)
from .errors import (
    AlreadyExists,
    ConfigError,
    IntegrityError,
    InvalidBody,
    IoError,
    NotFound,
    PathViolation,
    SkyprovError,
    UsageError,
)
from .index import QueryFilter, build_index, index_from_obj, index_to_obj, query, validate_filter
from .keys import SigningKey, load_key_file, save_key_file
from .merkle import leaf_hash, verify_consistency
from .model import body_from_obj, dataset_to_obj, sign_transaction, tx_wire_bytes
from .netsim import run_simulation, sim_config_from_obj
from .storage import open_storage

USAGE_EXIT = 2
VALIDATION_EXIT = 3
IO_EXIT = 4

_IO_ERRORS = (IoError, PathViolation, AlreadyExists)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the normal error path."""

    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _read_json_file(path: str, what: str):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {what} {path}: {exc}") from exc
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise InvalidBody(f"{what} {path} is not valid JSON: {exc}") from exc


def _keys_dir(home: str) -> str:
    return os.path.join(home, "keys")


def _key_path(home: str, name: str) -> str:
    return os.path.join(_keys_dir(home), f"{name}.json")


def _chain_dir(args) -> str:
    if getattr(args, "chain", None):
        return args.chain
    if getattr(args, "home", None):
        return os.path.join(args.home, "chain")
    raise UsageError("either --chain or --home is required")


def _load_handler_key(home: str, handler_id: str) -> SigningKey:
    path = _key_path(home, handler_id)
    if not os.path.exists(path):
        raise IoError(f"no key file for scheduled handler {handler_id}: {path}")
    return load_key_file(path)


def _seal_block(state, home: str):
    """Produce the next block from the pool with the scheduled handler's key."""
    slot = state.last_slot() + 1
    handler_id = state.scheduled_handler(slot)
    key = _load_handler_key(home, handler_id)
    block = produce_block(state, slot, key, now=state.slot_start_time(slot))
    verdict = state.receive_block(block)
    if not verdict.ok:
        raise IntegrityError(f"sealed block rejected: {verdict.reason}: {verdict.detail}")
    return block


# -- subcommands -------------------------------------------------------------------


def cmd_keygen(args) -> int:
    path = _key_path(args.home, args.name)
    if os.path.exists(path):
        raise AlreadyExists(f"key file {path} already exists")
    os.makedirs(_keys_dir(args.home), exist_ok=True)
    if args.seed is not None:
        key = SigningKey.from_seed(f"cli:keygen:{args.seed}:{args.name}".encode())
    else:
        key = SigningKey.generate()
    save_key_file(path, key)
    _emit({"name": args.name, "path": path, "public": key.public_hex})
    return 0


def _handler_spec(home: str, spec: str):
    name, sep, value = spec.partition("=")
    if not sep or not name or not value:
        raise UsageError(f"--handler must look like NAME=PUBHEX or NAME=KEYNAME, got {spec!r}")
    if len(value) == 64 and all(c in "0123456789abcdef" for c in value):
        return name, value
    path = _key_path(home, value)
    if not os.path.exists(path):
        raise UsageError(f"--handler {spec!r}: not 64-char hex and no key named {value!r} in home")
    return name, load_key_file(path).public_hex


def cmd_genesis_init(args) -> int:
    chain_dir = _chain_dir(args)
    if os.path.exists(os.path.join(chain_dir, "genesis.json")):
        raise AlreadyExists(f"{chain_dir} already holds a genesis.json")
    handlers = tuple(_handler_spec(args.home, spec) for spec in args.handler)
    config = GenesisConfig(
        handlers=handlers,
        slot_duration_ms=args.slot_ms,
        ordering_mode=args.ordering,
        genesis_time=args.genesis_time,
    )
    validate_genesis(config)
    save_genesis(chain_dir, config)
    _emit({"genesis_hash": genesis_hash(config), "path": os.path.join(chain_dir, "genesis.json")})
    return 0


def cmd_sim_run(args) -> int:
    obj = _read_json_file(args.config, "config file")
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    if args.seed is not None:
        obj = dict(obj, seed=args.seed)
    config = sim_config_from_obj(obj)
    trace = run_simulation(config)
    data = trace.to_jsonl_bytes()
    _progress(f"simulated {config.duration_slots} slots on {len(config.handler_ids)} handlers: "
              f"{len(trace.events)} trace events")
    if args.trace:
        try:
            with open(args.trace, "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise IoError(f"cannot write trace {args.trace}: {exc}") from exc
        _emit({"events": len(trace.events), "path": args.trace})
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    return 0


def cmd_tx_submit(args) -> int:
    chain_dir = _chain_dir(args)
    state = load_chain(chain_dir)
    body = body_from_obj(_read_json_file(args.body, "body file"))
    key = load_key_file(_key_path(args.home, args.key))
    created_at = args.created_at
    if created_at is None:
        created_at = state.slot_start_time(state.last_slot() + 1)
    tx = sign_transaction(body, key, created_at=created_at)
    verdict = state.submit(tx)
    if not verdict.ok:
        _emit({"error": verdict.reason, "message": verdict.detail, "tx_id": tx.tx_id})
        return VALIDATION_EXIT
    if args.no_seal:
        _emit({"sealed": False, "tx_id": tx.tx_id, "verdict": "ok"})
        return 0
    block = _seal_block(state, args.home)
    save_block_file(chain_dir, block)
    _progress(f"sealed block {block.header.height} with {len(block.transactions)} txs")
    _emit({"height": block.header.height, "sealed": True, "tx_id": tx.tx_id, "verdict": "ok"})
    return 0


def cmd_chain_verify(args) -> int:
    chain_dir = _chain_dir(args)
    state, results, failure = replay_chain(chain_dir)
    for height, verdict in results:
        _emit({"height": height, "verdict": "ok" if verdict.ok else verdict.reason})
    if failure is not None:
        height, verdict = failure
        _emit({"error": verdict.reason, "height": height, "message": verdict.detail})
        return VALIDATION_EXIT
    log = state.registry_log
    final = {
        "blocks": len(state.blocks),
        "head_root": log.root().hex(),
        "height": state.head_height,
        "registry_size": log.size,
    }
    if args.checkpoint:
        cp = Checkpoint.from_obj(_read_json_file(args.checkpoint, "checkpoint file"))
        if cp.registry_size > log.size:
            _emit({"error": "IntegrityError",
                   "message": f"checkpoint registry size {cp.registry_size} exceeds head {log.size}"})
            return VALIDATION_EXIT
        ok = True
        if cp.registry_size:  # the empty-chain checkpoint is trivially consistent
            proof = log.prove_consistency(cp.registry_size)
            ok = verify_consistency(
                digest_from_hex(cp.registry_root), cp.registry_size, log.root(), log.size, proof
            )
        if cp.height >= 0:
            if cp.height > state.head_height:
                ok = False
            elif header_hash(state.blocks[cp.height].header) != cp.head_hash:
                ok = False
        if not ok:
            _emit({"error": "IntegrityError", "message": "checkpoint is not consistent with this chain"})
            return VALIDATION_EXIT
        final["checkpoint"] = "ok"
    if args.write_checkpoint:
        cp = state.checkpoint()
        try:
            with open(args.write_checkpoint, "wb") as fh:
                fh.write(dumps_canonical(cp.to_obj()) + b"\n")
        except OSError as exc:
            raise IoError(f"cannot write checkpoint {args.write_checkpoint}: {exc}") from exc
        final["checkpoint_path"] = args.write_checkpoint
    _emit(final)
    return 0


def cmd_proof(args) -> int:
    chain_dir = _chain_dir(args)
    state = load_chain(chain_dir)
    log = state.registry_log
    if args.consistency_from is not None:
        proof = log.prove_consistency(args.consistency_from)
        envelope = {
            "kind": "consistency",
            "new_size": proof.new_size,
            "old_size": proof.old_size,
            "path": [d.hex() for d in proof.path],
            "root": log.root().hex(),
        }
        sys.stdout.buffer.write(dumps_canonical(envelope) + b"\n")
        return 0
    index = None
    position = 0
    for block in state.blocks:
        for tx in block.transactions:
            if tx.tx_id == args.tx_id:
                index = position
                wire = tx_wire_bytes(tx)
            position += 1
    if index is None:
        raise NotFound(f"transaction {args.tx_id} is not on this chain")
    proof = log.prove_inclusion(index)
    envelope = {
        "kind": "inclusion",
        "leaf": leaf_hash(wire).hex(),
        "leaf_index": proof.leaf_index,
        "path": [d.hex() for d in proof.path],
        "root": log.root().hex(),
        "tree_size": proof.tree_size,
        "tx_id": args.tx_id,
    }
    sys.stdout.buffer.write(dumps_canonical(envelope) + b"\n")
    return 0


def cmd_index_build(args) -> int:
    chain_dir = _chain_dir(args)
    out = args.out
    if out is None:
        if not args.home:
            raise UsageError("--out or --home is required")
        out = os.path.join(args.home, "index.json")
    state = load_chain(chain_dir)
    index = build_index(state.blocks)
    data = dumps_canonical(index_to_obj(index)) + b"\n"
    try:
        with open(out, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write index {out}: {exc}") from exc
    height, registry_size = index.built_to
    _emit({
        "built_to": {"height": height, "registry_size": registry_size},
        "datasets": len(index.datasets),
        "path": out,
    })
    return 0


_RANGE_KEYS = {"time"}
_SCALAR_KEYS = {
    "facility": "facility_id",
    "kind": "kind",
    "storage": "storage_id",
    "energy_min": "energy_min",
    "energy_max": "energy_max",
    "ancestor_of": "ancestor_of",
    "descendant_of": "descendant_of",
}


def parse_where(clauses) -> QueryFilter:
    fields = {}
    for clause in clauses:
        key, sep, value = clause.partition("=")
        if not sep or not key or not value:
            raise UsageError(f"--where must look like key=value or key=lo..hi, got {clause!r}")
        if key in _RANGE_KEYS:
            lo, sep2, hi = value.partition("..")
            if not sep2:
                raise UsageError(f"--where {key} takes a range lo..hi, got {clause!r}")
            try:
                fields["time_range"] = (int(lo), int(hi))
            except ValueError:
                raise UsageError(f"--where {key} bounds must be integers, got {clause!r}")
        elif key in _SCALAR_KEYS:
            field = _SCALAR_KEYS[key]
            if field in fields:
                raise UsageError(f"--where {key} given twice")
            fields[field] = value
        else:
            raise UsageError(f"unknown --where key {key!r}")
    f = QueryFilter(**fields)
    try:
        validate_filter(f)
    except SkyprovError as exc:
        raise UsageError(str(exc)) from exc
    return f


def _load_index(args):
    if getattr(args, "index", None):
        obj = _read_json_file(args.index, "index file")
        return index_from_obj(obj)
    state = load_chain(_chain_dir(args))
    return build_index(state.blocks)


def cmd_query(args) -> int:
    if not args.where:
        raise UsageError("at least one --where predicate is required")
    f = parse_where(args.where)
    index = _load_index(args)
    rows = query(index, f)
    for ds in rows:
        sys.stdout.buffer.write(dumps_canonical(dataset_to_obj(ds)) + b"\n")
    _progress(f"{len(rows)} datasets matched")
    return 0


def _open_registered_storages(home: str, index):
    storages = {}
    for storage_id, body in index.storages.items():
        base = body.base_uri
        if not os.path.isabs(base):
            base = os.path.join(home, base)
        if os.path.isdir(base):
            storages[storage_id] = open_storage(base)
    return storages


def _prepare_aggregation(args):
    req = request_from_obj(_read_json_file(args.request, "request file"))
    state = load_chain(_chain_dir(args))
    index = build_index(state.blocks)
    storages = _open_registered_storages(args.home, index)
    return req, state, index, storages


def cmd_aggregate(args) -> int:
    req, _, index, storages = _prepare_aggregation(args)
    if isinstance(req.sink, PublishSink):
        raise UsageError("this request has a publish sink; use the publish command")
    if isinstance(req.sink, LocalSink) and not os.path.isabs(req.sink.path):
        req = dataclasses.replace(req, sink=LocalSink(os.path.join(args.home, req.sink.path)))
    result = execute(req, index, storages, window=args.window, concurrent=not args.sequential)
    output_path = result.output_path
    if output_path is None and args.out:
        try:
            with open(args.out, "wb") as fh:
                fh.write(result.output_bytes)
        except OSError as exc:
            raise IoError(f"cannot write output {args.out}: {exc}") from exc
        output_path = args.out
    summary = result.summary_obj()
    summary["output_path"] = output_path
    _progress(f"matched {len(result.matched_datasets)} datasets, "
              f"{result.events_in} events in, {result.events_out} out")
    _emit(summary)
    return 0


def cmd_publish(args) -> int:
    req, state, index, storages = _prepare_aggregation(args)
    if not isinstance(req.sink, PublishSink):
        raise UsageError("publish requires a request with a publish sink")
    result = execute(req, index, storages, window=args.window, concurrent=not args.sequential)
    key = load_key_file(_key_path(args.home, args.key))
    created_at = args.created_at
    if created_at is None:
        created_at = state.slot_start_time(state.last_slot() + 1)
    tx = publish_result(result, req.sink, key, state, storages, created_at=created_at)
    out = {
        "dataset_id": req.sink.dataset_id,
        "sealed": False,
        "tx_id": tx.tx_id,
        "verdict": "ok",
    }
    if not args.no_seal:
        chain_dir = _chain_dir(args)
        block = _seal_block(state, args.home)
        save_block_file(chain_dir, block)
        out["sealed"] = True
        out["height"] = block.header.height
    _emit(out)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="skyprov", description="registry, audit, and aggregation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("keygen", cmd_keygen, help="create a named signing key under home")
    p.add_argument("--home", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--seed", type=int, default=None, help="derive deterministically from a seed")

    p = add("genesis-init", cmd_genesis_init, help="write a genesis file for a handler roster")
    p.add_argument("--home", required=True)
    p.add_argument("--chain", default=None)
    p.add_argument("--handler", action="append", required=True, metavar="NAME=PUBHEX|NAME=KEYNAME")
    p.add_argument("--slot-ms", type=int, default=100)
    p.add_argument("--ordering", choices=["fixed", "reshuffled"], default="fixed")
    p.add_argument("--genesis-time", type=int, default=1_000_000_000_000)

    p = add("sim-run", cmd_sim_run, help="run a simulated handler network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--trace", default=None, help="write the trace here instead of stdout")

    p = add("tx-submit", cmd_tx_submit, help="sign a transaction body and seal it into a block")
    p.add_argument("--home", required=True)
    p.add_argument("--chain", default=None)
    p.add_argument("--key", required=True, help="signing key name under home/keys")
    p.add_argument("--body", required=True, help="JSON transaction body file")
    p.add_argument("--created-at", type=int, default=None)
    p.add_argument("--no-seal", action="store_true", help="validate only, do not extend the chain")

    p = add("chain-verify", cmd_chain_verify, help="replay a chain store with full validation")
    p.add_argument("--home", default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--checkpoint", default=None, help="also verify log consistency from this checkpoint")
    p.add_argument("--write-checkpoint", default=None, help="store the verified head as a checkpoint")

    p = add("proof", cmd_proof, help="emit an inclusion or consistency proof for the registry log")
    p.add_argument("--home", default=None)
    p.add_argument("--chain", default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--tx-id", default=None)
    group.add_argument("--consistency-from", type=int, default=None, metavar="OLD_SIZE")

    p = add("index-build", cmd_index_build, help="build the query index from a chain store")
    p.add_argument("--home", default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--out", default=None)

    p = add("query", cmd_query, help="query the registry; one dataset JSON per line")
    p.add_argument("--home", default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--index", default=None, help="query a stored index snapshot instead of the chain")
    p.add_argument("--where", action="append", default=[], metavar="K=V|K=lo..hi")

    p = add("aggregate", cmd_aggregate, help="run an aggregation request to a local sink")
    p.add_argument("--home", required=True)
    p.add_argument("--chain", default=None)
    p.add_argument("--request", required=True)
    p.add_argument("--out", default=None, help="output file when the request has no sink")
    p.add_argument("--window", type=int, default=10_000)
    p.add_argument("--sequential", action="store_true")

    p = add("publish", cmd_publish, help="run an aggregation and register the result as a dataset")
    p.add_argument("--home", required=True)
    p.add_argument("--chain", default=None)
    p.add_argument("--request", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--created-at", type=int, default=None)
    p.add_argument("--window", type=int, default=10_000)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--no-seal", action="store_true")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("a subcommand is required (see --help)")
        return args.fn(args)
    except UsageError as exc:
        _emit({"error": "UsageError", "message": str(exc)})
        return USAGE_EXIT
    except _IO_ERRORS as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return IO_EXIT
    except SkyprovError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return VALIDATION_EXIT


if __name__ == "__main__":
    sys.exit(main())
