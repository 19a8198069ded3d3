"""Content-addressed archive with exactly two indexes.

The archive is a deduplicating key-value map from _hash to instance
document plus one multimap from every EdgeRef that appears in any _ref
array to the documents carrying it.  Those two indexes are the whole
query surface: membership questions are answered by index lookups, never
by scanning event payloads.

Persistence is a single append-friendly file: an 8-byte magic header
followed by length-prefixed canonical JSON records.  Indexes live in
memory and are rebuilt on open; re-appending a document with the same
_hash (score updates, malicious markings) simply wins on replay.  A tiny
manifest sidecar keeps the one counter that cannot be rebuilt from the
records (duplicate_hits).
"""

import copy
import json
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

from .tahoe import (
    Bundle,
    TahoeError,
    canonicalize,
    is_edge_hash,
    raw_payload,
    validate,
)

log = logging.getLogger("cybexp.store")

_MAGIC = b"CYBEXPA1"
_LEN = struct.Struct(">I")


class StoreError(Exception):
    pass


class StoreCorrupt(StoreError):
    pass


class UnknownInstance(StoreError, KeyError):
    pass


class InvalidInstance(StoreError):
    pass


class DanglingEdge(StoreError):
    pass


@dataclass
class InsertReceipt:
    new: int = 0
    deduped: int = 0

    def merge(self, other: "InsertReceipt") -> "InsertReceipt":
        self.new += other.new
        self.deduped += other.deduped
        return self


@dataclass
class StoreStats:
    """Storage accounting for the compression ledger.

    raw_input_bytes counts the as-received payload length of every
    distinct raw instance; replaying the same raw does not inflate it.
    stored_bytes covers the normalized (non-raw) instances: canonical
    byte length, with every 256-bit digest (the _hash plus each plaintext
    _ref/_mal_ref entry) counted at its 32-byte binary width and
    encrypted edge tokens at their actual UTF-8 length.  Raw originals
    are the baseline being compressed, so they count on the raw side
    only.  instance_count covers everything stored, raws included.
    """

    raw_input_bytes: int = 0
    stored_bytes: int = 0
    instance_count: int = 0
    duplicate_hits: int = 0

    @property
    def compression_gain_percent(self) -> Optional[float]:
        if self.raw_input_bytes <= 0:
            return None
        return (
            100.0
            * (self.raw_input_bytes - self.stored_bytes)
            / self.raw_input_bytes
        )


@dataclass
class Subgraph:
    root: str
    nodes: Dict[str, Dict[str, Any]]
    edges: Set[Tuple[str, str]]  # (event_hash, member_hash)


def stored_size(doc: Dict[str, Any]) -> int:
    """Measured size of one normalized document, digests at binary width."""
    body = {k: v for k, v in doc.items() if k not in ("_hash", "_ref", "_mal_ref")}
    size = len(canonicalize(body)) + 32  # the document's own digest
    for field in ("_ref", "_mal_ref"):
        for entry in doc.get(field, ()):
            if is_edge_hash(entry):
                size += 32
            else:
                size += len(str(entry).encode("utf-8"))
    return size


InsertInput = Union[Dict[str, Any], Bundle, Iterable[Dict[str, Any]]]


def _as_docs(batch: InsertInput) -> List[Dict[str, Any]]:
    if isinstance(batch, Bundle):
        return list(batch.docs)
    if isinstance(batch, dict):
        return [batch]
    return list(batch)


class ArchiveStore:
    """Deduplicating instance archive.

    path=None keeps everything in memory; otherwise the file at path is
    created or replayed on open.  Writes are serialized through one
    internal lock; readers see fully committed state only.
    """

    def __init__(self, path: Optional[str] = None):
        self._path = path
        self._lock = threading.RLock()
        self._instances: Dict[str, Dict[str, Any]] = {}
        self._ref_index: Dict[str, Set[str]] = {}
        self._stats = StoreStats()
        self._fh = None
        if path is not None:
            self._open_file()

    # ------------------------------------------------------------------
    # persistence

    def _open_file(self) -> None:
        import os

        exists = os.path.exists(self._path)
        self._fh = open(self._path, "ab+")
        if not exists or os.path.getsize(self._path) == 0:
            self._fh.write(_MAGIC)
            self._fh.flush()
        else:
            self._replay()
        manifest = self._manifest_path()
        if os.path.exists(manifest):
            try:
                with open(manifest, "r", encoding="utf-8") as f:
                    self._stats.duplicate_hits = int(
                        json.load(f).get("duplicate_hits", 0)
                    )
            except (ValueError, OSError):
                log.warning("unreadable manifest %s, duplicate_hits reset", manifest)

    def _manifest_path(self) -> str:
        return self._path + ".manifest.json"

    def _replay(self) -> None:
        self._fh.seek(0)
        head = self._fh.read(len(_MAGIC))
        if head != _MAGIC:
            raise StoreCorrupt("not an archive file: bad magic")
        offset = len(_MAGIC)
        while True:
            raw_len = self._fh.read(_LEN.size)
            if not raw_len:
                break
            if len(raw_len) < _LEN.size:
                raise StoreCorrupt("torn record header at offset %d" % offset)
            (n,) = _LEN.unpack(raw_len)
            payload = self._fh.read(n)
            if len(payload) < n:
                raise StoreCorrupt("torn record body at offset %d" % offset)
            offset += _LEN.size + n
            try:
                doc = json.loads(payload.decode("utf-8"))
            except ValueError:
                raise StoreCorrupt("undecodable record at offset %d" % offset)
            self._load_doc(doc)
        self._fh.seek(0, 2)

    def _append_record(self, doc: Dict[str, Any]) -> None:
        if self._fh is None:
            return
        payload = canonicalize(doc)
        self._fh.write(_LEN.pack(len(payload)))
        self._fh.write(payload)

    def _write_manifest(self) -> None:
        if self._path is None:
            return
        with open(self._manifest_path(), "w", encoding="utf-8") as f:
            json.dump(
                {"version": 1, "duplicate_hits": self._stats.duplicate_hits}, f
            )

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
            self._write_manifest()

    def close(self) -> None:
        with self._lock:
            self.flush()
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "ArchiveStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ------------------------------------------------------------------
    # committing

    def _load_doc(self, doc: Dict[str, Any]) -> None:
        """Replay path: last record for a hash wins, counters stay exact."""
        h = doc["_hash"]
        old = self._instances.get(h)
        if old is not None:
            self._unindex(old)
            self._account_remove(old)
        self._instances[h] = doc
        self._index(doc)
        self._account_add(doc)

    def _index(self, doc: Dict[str, Any]) -> None:
        h = doc["_hash"]
        for term in doc.get("_ref", ()):
            self._ref_index.setdefault(term, set()).add(h)

    def _unindex(self, doc: Dict[str, Any]) -> None:
        h = doc["_hash"]
        for term in doc.get("_ref", ()):
            bucket = self._ref_index.get(term)
            if bucket is not None:
                bucket.discard(h)
                if not bucket:
                    del self._ref_index[term]

    def _account_add(self, doc: Dict[str, Any]) -> None:
        self._stats.instance_count += 1
        if doc.get("itype") == "raw":
            self._stats.raw_input_bytes += len(raw_payload(doc))
        else:
            self._stats.stored_bytes += stored_size(doc)

    def _account_remove(self, doc: Dict[str, Any]) -> None:
        self._stats.instance_count -= 1
        if doc.get("itype") == "raw":
            self._stats.raw_input_bytes -= len(raw_payload(doc))
        else:
            self._stats.stored_bytes -= stored_size(doc)

    def insert(self, batch: InsertInput) -> InsertReceipt:
        """Insert a document, bundle, or document iterable.

        Idempotent: re-inserting anything already archived is a dedup
        hit, not an error and not a second copy.  Every plaintext edge in
        the batch must resolve either in the store or within the batch
        itself; encrypted edge tokens are exempt.
        """
        docs = _as_docs(batch)
        receipt = InsertReceipt()
        if not docs:
            return receipt
        for doc in docs:
            problems = validate(doc)
            if problems:
                raise InvalidInstance(
                    "rejected %s: %s"
                    % (doc.get("_hash", "<no hash>"), "; ".join(problems))
                )
        with self._lock:
            pool = {d["_hash"] for d in docs}
            for doc in docs:
                for ref in doc.get("_ref", ()):
                    if (
                        is_edge_hash(ref)
                        and ref not in pool
                        and ref not in self._instances
                    ):
                        raise DanglingEdge(
                            "edge %s from %s resolves neither in-store nor "
                            "in-batch" % (ref, doc["_hash"])
                        )
            for doc in docs:
                h = doc["_hash"]
                if h in self._instances:
                    receipt.deduped += 1
                    self._stats.duplicate_hits += 1
                    continue
                kept = copy.deepcopy(doc)
                self._instances[h] = kept
                self._index(kept)
                self._account_add(kept)
                self._append_record(kept)
                receipt.new += 1
            if self._fh is not None:
                self._fh.flush()
                self._write_manifest()
        return receipt

    def update_event_fields(
        self,
        event_hash: str,
        mal_ref: Optional[Sequence[str]] = None,
        malicious_score: Optional[float] = None,
    ) -> None:
        """Committer-side mutation of analytics state on one event.

        Only _mal_ref and _malicious_score may change; the content hash
        covers neither, so identity is preserved.  The updated document
        is re-appended so replay reconstructs the newest state.
        """
        with self._lock:
            doc = self._instances.get(event_hash)
            if doc is None:
                raise UnknownInstance(event_hash)
            if doc.get("itype") != "event":
                raise StoreError("only events carry analytics state")
            before = stored_size(doc)
            if mal_ref is not None:
                mal = sorted(set(mal_ref))
                if not set(mal) <= set(doc.get("_ref", ())):
                    raise StoreError("_mal_ref must be a subset of _ref")
                doc["_mal_ref"] = mal
            if malicious_score is not None:
                if malicious_score > 0:
                    raise StoreError("scores are never positive")
                doc["_malicious_score"] = float(malicious_score)
            self._stats.stored_bytes += stored_size(doc) - before
            self._append_record(doc)
            if self._fh is not None:
                self._fh.flush()

    # ------------------------------------------------------------------
    # reading

    def __len__(self) -> int:
        return len(self._instances)

    def __contains__(self, h: str) -> bool:
        return h in self._instances

    def get(self, h: str) -> Dict[str, Any]:
        doc = self._instances.get(h)
        if doc is None:
            raise UnknownInstance(h)
        return copy.deepcopy(doc)

    def get_internal(self, h: str) -> Optional[Dict[str, Any]]:
        """Read-only view for traversals; callers must not mutate."""
        return self._instances.get(h)

    def iter_all(self) -> Iterator[Dict[str, Any]]:
        for doc in list(self._instances.values()):
            yield doc

    def iter_kind(self, itype: str) -> Iterator[Dict[str, Any]]:
        for doc in list(self._instances.values()):
            if doc.get("itype") == itype:
                yield doc

    def events_referencing(self, terms: Iterable[str]) -> Set[str]:
        """Events whose _ref carries any of the given terms.

        Terms are plaintext hashes and/or encrypted edge tokens.  One
        pass over the index buckets; event documents are never scanned.
        """
        out: Set[str] = set()
        with self._lock:
            for term in terms:
                for h in self._ref_index.get(term, ()):
                    doc = self._instances.get(h)
                    if doc is not None and doc.get("itype") == "event":
                        out.add(h)
        return out

    def referrers(self, term: str) -> Set[str]:
        """All instances (any kind) whose _ref carries the term."""
        with self._lock:
            return set(self._ref_index.get(term, ()))

    def neighbors(self, root: str, depth: int) -> Subgraph:
        """Alternating breadth-first neighborhood of one node.

        Events expand to their _ref members; attributes and objects
        expand to the events referencing them.  Encrypted edge tokens
        appear as terminal pseudo-nodes of itype "encrypted" and are
        never expanded.  depth counts expansion steps and must be >= 1.
        """
        if depth < 1:
            raise StoreError("depth must be >= 1")
        root_doc = self._instances.get(root)
        if root_doc is None:
            raise UnknownInstance(root)
        nodes: Dict[str, Dict[str, Any]] = {root: copy.deepcopy(root_doc)}
        edges: Set[Tuple[str, str]] = set()
        frontier: Set[str] = {root}
        for _ in range(depth):
            nxt: Set[str] = set()
            for h in frontier:
                doc = self._instances.get(h)
                if doc is None:
                    continue  # pseudo-node
                if doc.get("itype") == "event":
                    for ref in doc.get("_ref", ()):
                        edges.add((h, ref))
                        if ref in nodes:
                            continue
                        member = self._instances.get(ref)
                        if member is not None:
                            nodes[ref] = copy.deepcopy(member)
                            nxt.add(ref)
                        elif not is_edge_hash(ref):
                            nodes[ref] = {"itype": "encrypted", "_hash": ref}
                else:
                    for ev in self._ref_index.get(h, ()):
                        ev_doc = self._instances.get(ev)
                        if ev_doc is None or ev_doc.get("itype") != "event":
                            continue
                        edges.add((ev, h))
                        if ev not in nodes:
                            nodes[ev] = copy.deepcopy(ev_doc)
                            nxt.add(ev)
            frontier = nxt
        return Subgraph(root=root, nodes=nodes, edges=edges)

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(
                raw_input_bytes=self._stats.raw_input_bytes,
                stored_bytes=self._stats.stored_bytes,
                instance_count=self._stats.instance_count,
                duplicate_hits=self._stats.duplicate_hits,
            )

    # ------------------------------------------------------------------
    # exchange

    def export_ndjson(self, fp) -> int:
        """Write every instance as one canonical JSON line; returns count."""
        n = 0
        with self._lock:
            for doc in self._instances.values():
                fp.write(canonicalize(doc).decode("utf-8"))
                fp.write("\n")
                n += 1
        return n

    def import_ndjson(self, fp) -> InsertReceipt:
        """Insert newline-delimited instance JSON as one batch."""
        docs = []
        for line in fp:
            line = line.strip()
            if line:
                docs.append(json.loads(line))
        return self.insert(docs)
