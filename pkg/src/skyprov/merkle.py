"""Append-only Merkle hash tree over canonical transaction bytes.

Standard audit-log construction: SHA-256 with 0x00/0x01 domain-separation
prefixes for leaf and interior nodes, split point at the largest power of
two strictly below the subtree size, empty-log root = SHA-256 of empty
input.  Inclusion proofs show a record is in a given log version;
consistency proofs show one log version is an unmodified prefix extension
of another, which is how two registry versions are checked for
compatibility.

Proofs carry their tree sizes explicitly so verification needs no
external context, and serialize as canonical JSON with lowercase hex
digests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

from .canonical import digest_from_hex, digest_to_hex, dumps_canonical, loads_canonical
from .errors import IndexOutOfRange, InvalidBody

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

Digest = bytes  # 32-byte SHA-256 output; rendered as lowercase 64-char hex


def leaf_hash(data: bytes) -> Digest:
    """Hash a leaf: SHA-256(0x00 || data), domain-separated from nodes."""
    return hashlib.sha256(LEAF_PREFIX + data).digest()


def node_hash(left: Digest, right: Digest) -> Digest:
    """Hash an interior node: SHA-256(0x01 || left || right)."""
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def empty_root() -> Digest:
    """Root of the empty log: SHA-256 of empty input."""
    return hashlib.sha256(b"").digest()


def _split_point(n: int) -> int:
    """Largest power of two strictly less than n, for n >= 2."""
    return 1 << ((n - 1).bit_length() - 1)


def _is_digest(value: object) -> bool:
    return isinstance(value, bytes) and len(value) == 32


@dataclass(frozen=True)
class InclusionProof:
    """Sibling hashes along the leaf-to-root path, leaf first."""

    leaf_index: int
    tree_size: int
    path: tuple[Digest, ...]

    def to_json_bytes(self) -> bytes:
        return dumps_canonical(
            {
                "leaf_index": self.leaf_index,
                "tree_size": self.tree_size,
                "path": [digest_to_hex(d) for d in self.path],
            }
        )

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "InclusionProof":
        obj = loads_canonical(data)
        if not isinstance(obj, dict) or set(obj) != {"leaf_index", "tree_size", "path"}:
            raise InvalidBody("inclusion proof must have leaf_index, tree_size, path")
        if not isinstance(obj["leaf_index"], int) or not isinstance(obj["tree_size"], int):
            raise InvalidBody("proof sizes must be integers")
        return cls(
            leaf_index=obj["leaf_index"],
            tree_size=obj["tree_size"],
            path=tuple(digest_from_hex(h) for h in obj["path"]),
        )


@dataclass(frozen=True)
class ConsistencyProof:
    """Subtree roots proving one log version extends another unchanged."""

    old_size: int
    new_size: int
    path: tuple[Digest, ...]

    def to_json_bytes(self) -> bytes:
        return dumps_canonical(
            {
                "old_size": self.old_size,
                "new_size": self.new_size,
                "path": [digest_to_hex(d) for d in self.path],
            }
        )

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "ConsistencyProof":
        obj = loads_canonical(data)
        if not isinstance(obj, dict) or set(obj) != {"old_size", "new_size", "path"}:
            raise InvalidBody("consistency proof must have old_size, new_size, path")
        if not isinstance(obj["old_size"], int) or not isinstance(obj["new_size"], int):
            raise InvalidBody("proof sizes must be integers")
        return cls(
            old_size=obj["old_size"],
            new_size=obj["new_size"],
            path=tuple(digest_from_hex(h) for h in obj["path"]),
        )


class MerkleLog:
    """Ordered sequence of leaf hashes with an incrementally maintained root.

    Append-only: a committed leaf never changes.  The root is kept as a
    stack of perfect-subtree roots (one per set bit of the size), merged
    binary-counter style on append, so computing the current root is
    O(log n) and appends are O(1) amortized.  Full leaf hashes are retained
    for proof generation.

    Single writer per instance; hand out ``fork()`` copies to anything that
    needs an independent version.
    """

    __slots__ = ("_leaves", "_peaks")

    def __init__(self) -> None:
        self._leaves: list[Digest] = []
        self._peaks: list[tuple[int, Digest]] = []  # (height, subtree root)

    @property
    def size(self) -> int:
        return len(self._leaves)

    def append(self, data: bytes) -> int:
        """Append raw record bytes; returns the new leaf's index."""
        return self.append_leaf_hash(leaf_hash(data))

    def append_leaf_hash(self, leaf: Digest) -> int:
        if not _is_digest(leaf):
            raise InvalidBody("leaf hash must be a 32-byte digest")
        index = len(self._leaves)
        self._leaves.append(leaf)
        self._push_peak(self._peaks, leaf)
        return index

    @staticmethod
    def _push_peak(peaks: list[tuple[int, Digest]], leaf: Digest) -> None:
        height, node = 0, leaf
        while peaks and peaks[-1][0] == height:
            _, left = peaks.pop()
            node = node_hash(left, node)
            height += 1
        peaks.append((height, node))

    @staticmethod
    def _fold_peaks(peaks: list[tuple[int, Digest]]) -> Digest:
        if not peaks:
            return empty_root()
        root = peaks[-1][1]
        for _, digest in reversed(peaks[:-1]):
            root = node_hash(digest, root)
        return root

    def root(self) -> Digest:
        return self._fold_peaks(self._peaks)

    def extended_root(self, extra_records: Iterable[bytes]) -> tuple[Digest, int]:
        """Root and size the log would have after appending ``extra_records``.

        Works on a copy of the peak stack, so the log itself is untouched;
        used by block validation to check registry commitments cheaply.
        """
        peaks = list(self._peaks)
        count = len(self._leaves)
        for data in extra_records:
            self._push_peak(peaks, leaf_hash(data))
            count += 1
        return self._fold_peaks(peaks), count

    def leaf(self, index: int) -> Digest:
        if not 0 <= index < len(self._leaves):
            raise IndexOutOfRange(f"leaf index {index} outside log of size {len(self._leaves)}")
        return self._leaves[index]

    def leaves(self) -> tuple[Digest, ...]:
        return tuple(self._leaves)

    def fork(self) -> "MerkleLog":
        """Independent copy; mutations to either side stay invisible to the other."""
        other = MerkleLog()
        other._leaves = list(self._leaves)
        other._peaks = list(self._peaks)
        return other

    # -- proofs --------------------------------------------------------

    def _range_root(self, lo: int, hi: int) -> Digest:
        n = hi - lo
        if n == 0:
            return empty_root()
        if n == 1:
            return self._leaves[lo]
        k = _split_point(n)
        return node_hash(self._range_root(lo, lo + k), self._range_root(lo + k, hi))

    def root_at(self, size: int) -> Digest:
        """Root of the log version that held exactly the first ``size`` leaves."""
        if not 0 <= size <= len(self._leaves):
            raise IndexOutOfRange(f"size {size} outside log of size {len(self._leaves)}")
        return self._range_root(0, size)

    def prove_inclusion(self, index: int) -> InclusionProof:
        if not 0 <= index < len(self._leaves):
            raise IndexOutOfRange(f"leaf index {index} outside log of size {len(self._leaves)}")
        path = self._inclusion_path(0, len(self._leaves), index)
        return InclusionProof(leaf_index=index, tree_size=len(self._leaves), path=tuple(path))

    def _inclusion_path(self, lo: int, hi: int, index: int) -> list[Digest]:
        n = hi - lo
        if n == 1:
            return []
        k = _split_point(n)
        if index < lo + k:
            path = self._inclusion_path(lo, lo + k, index)
            path.append(self._range_root(lo + k, hi))
        else:
            path = self._inclusion_path(lo + k, hi, index)
            path.append(self._range_root(lo, lo + k))
        return path

    def prove_consistency(self, old_size: int) -> ConsistencyProof:
        size = len(self._leaves)
        if not 0 <= old_size <= size:
            raise IndexOutOfRange(f"old size {old_size} outside log of size {size}")
        if old_size == 0 or old_size == size:
            return ConsistencyProof(old_size=old_size, new_size=size, path=())
        path = self._consistency_path(0, size, old_size, True)
        return ConsistencyProof(old_size=old_size, new_size=size, path=tuple(path))

    def _consistency_path(self, lo: int, hi: int, m: int, complete: bool) -> list[Digest]:
        n = hi - lo
        if m == n:
            return [] if complete else [self._range_root(lo, hi)]
        k = _split_point(n)
        if m <= k:
            path = self._consistency_path(lo, lo + k, m, complete)
            path.append(self._range_root(lo + k, hi))
        else:
            path = self._consistency_path(lo + k, hi, m - k, False)
            path.append(self._range_root(lo, lo + k))
        return path


def verify_inclusion(root: Digest, leaf: Digest, proof: InclusionProof) -> bool:
    """True iff the path recomputes ``root`` from ``leaf``; malformed input is false."""
    if not _is_digest(root) or not _is_digest(leaf):
        return False
    if not isinstance(proof.leaf_index, int) or not isinstance(proof.tree_size, int):
        return False
    if proof.tree_size <= 0 or not 0 <= proof.leaf_index < proof.tree_size:
        return False
    if any(not _is_digest(p) for p in proof.path):
        return False

    fn = proof.leaf_index
    sn = proof.tree_size - 1
    value = leaf
    for sibling in proof.path:
        if sn == 0:
            return False
        if (fn & 1) or fn == sn:
            value = node_hash(sibling, value)
            if not (fn & 1):
                while not (fn & 1) and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            value = node_hash(value, sibling)
        fn >>= 1
        sn >>= 1
    return sn == 0 and value == root


def verify_consistency(
    old_root: Digest,
    old_size: int,
    new_root: Digest,
    new_size: int,
    proof: ConsistencyProof,
) -> bool:
    """True iff the proof shows the new log extends the old one unchanged.

    Malformed or mismatched proofs give false, never an exception.
    """
    if not _is_digest(old_root) or not _is_digest(new_root):
        return False
    if not isinstance(old_size, int) or not isinstance(new_size, int):
        return False
    if proof.old_size != old_size or proof.new_size != new_size:
        return False
    if old_size < 0 or old_size > new_size:
        return False
    if any(not _is_digest(p) for p in proof.path):
        return False

    if old_size == new_size:
        return len(proof.path) == 0 and old_root == new_root
    if old_size == 0:
        # Every log extends the empty log.
        return len(proof.path) == 0
    if len(proof.path) == 0:
        return False

    path = list(proof.path)
    if old_size & (old_size - 1) == 0:
        # Old tree is a perfect subtree of the new one: its root is the
        # first proof node, supplied by the verifier rather than the prover.
        path.insert(0, old_root)

    fn = old_size - 1
    sn = new_size - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    old_calc = new_calc = path[0]
    for node in path[1:]:
        if sn == 0:
            return False
        if (fn & 1) or fn == sn:
            old_calc = node_hash(node, old_calc)
            new_calc = node_hash(node, new_calc)
            if not (fn & 1):
                while not (fn & 1) and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            new_calc = node_hash(new_calc, node)
        fn >>= 1
        sn >>= 1
    return sn == 0 and old_calc == old_root and new_calc == new_root
