"""TAHOE instance documents: canonical bytes, content hashes, constructors.

Everything the platform stores is one of five instance kinds, each a flat
JSON document identified by the SHA-256 of its canonical form:

    attribute   a single named scalar observation (an IP, a filename, ...)
    object      a named grouping of child attributes/objects, by reference
    event       a sighting at a point in time; its _ref holds the complete
                transitive closure of every descendant node
    session     an ordered grouping of events under some criterion
    raw         an opaque as-received payload, kept for provenance

References between instances are EdgeRefs: lowercase 64-hex digests.  An
edge that is not 64-hex is treated as an opaque (encrypted) token and is
never dereferenced here.

Canonical form: field names sorted lexicographically, UTF-8, no
insignificant whitespace, numbers in shortest round-trip decimal form.
_ref arrays are sorted ascending before serialization for every kind
except session, whose member order is meaningful and covered by the hash.

Example::

    ip = new_attribute("ip", "1.1.1.1")
    host = new_attribute("hostname", "example.com")
    net = new_object("network_peer", [ip, host])
    evt = new_event("firewall_log", [net], timestamp=1610427255, orgid="org1")
    evt.head["_ref"]   # three hashes: ip, host, and the object

The event's document never embeds its children; the complete wire
representation of a composite instance is a Bundle, an array of documents
in dependency order with the head last.
"""

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Sequence, Set, Tuple, Union

INSTANCE_KINDS = ("attribute", "object", "event", "session", "raw")

# Fields covered by each kind's content hash.  Everything else on the
# document (_mal_ref, _malicious_score) is mutable analytics state.
HASH_FIELDS = {
    "attribute": ("itype", "sub_type", "data"),
    "object": ("itype", "sub_type", "_ref"),
    "event": ("itype", "sub_type", "orgid", "timestamp", "_ref"),
    "session": ("itype", "sub_type", "criterion", "_ref"),
    "raw": ("itype", "format_tag", "orgid", "timestamp", "payload"),
}

_HEX = set("0123456789abcdef")


class TahoeError(ValueError):
    """Base for malformed instances and failed construction."""


class CanonicalizationError(TahoeError):
    pass


class DanglingReference(TahoeError):
    pass


def is_edge_hash(value: Any) -> bool:
    """True when value is a plaintext EdgeRef (lowercase 64-hex)."""
    return (
        isinstance(value, str)
        and len(value) == 64
        and all(c in _HEX for c in value)
    )


def _check_json_types(value: Any, path: str) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise CanonicalizationError(
                    "non-string field name %r at %s" % (k, path)
                )
            _check_json_types(v, path + "." + k)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_json_types(v, "%s[%d]" % (path, i))
    elif isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise CanonicalizationError("non-finite number at " + path)
    elif value is not None and not isinstance(value, (str, int, bool)):
        raise CanonicalizationError(
            "unsupported field value type %s at %s" % (type(value).__name__, path)
        )


def canonicalize(body: Dict[str, Any]) -> bytes:
    """Deterministic byte form of an instance body (no _hash field).

    Same logical content always yields the same bytes, so digests agree
    across organizations regardless of who serialized first.
    """
    if not isinstance(body, dict):
        raise CanonicalizationError("instance body must be a mapping")
    _check_json_types(body, "$")
    if body.get("itype") != "session" and isinstance(body.get("_ref"), list):
        body = dict(body, _ref=sorted(body["_ref"]))
    if isinstance(body.get("_mal_ref"), list):
        body = dict(body, _mal_ref=sorted(body["_mal_ref"]))
    text = json.dumps(
        body, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        allow_nan=False,
    )
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as e:
        raise CanonicalizationError("unencodable text in body: %s" % e)


def hash_instance(body: Dict[str, Any]) -> str:
    """SHA-256 of the canonical bytes, as lowercase hex."""
    return hashlib.sha256(canonicalize(body)).hexdigest()


def hash_body(doc: Dict[str, Any]) -> Dict[str, Any]:
    """Project a document down to the fields its hash covers."""
    itype = doc.get("itype")
    if itype not in HASH_FIELDS:
        raise TahoeError("unknown itype %r" % (itype,))
    try:
        return {k: doc[k] for k in HASH_FIELDS[itype]}
    except KeyError as e:
        raise TahoeError("missing field %s on %s" % (e.args[0], itype))


@dataclass(frozen=True)
class Bundle:
    """Complete representation of a composite instance.

    docs holds every instance document needed to resolve the head's
    references, dependency-first, head last.  This is also the wire form:
    a JSON array of documents with the event (or object/session) last.
    """

    docs: Tuple[Dict[str, Any], ...]

    @property
    def head(self) -> Dict[str, Any]:
        return self.docs[-1]

    @property
    def hashes(self) -> Set[str]:
        return {d["_hash"] for d in self.docs}

    def to_json(self) -> str:
        return json.dumps(list(self.docs), separators=(",", ":"), ensure_ascii=False)


ChildLike = Union[Dict[str, Any], Bundle]


def _as_bundle(child: ChildLike) -> Bundle:
    if isinstance(child, Bundle):
        return child
    if isinstance(child, dict):
        if child.get("itype") == "attribute":
            return Bundle(docs=(child,))
        raise TahoeError(
            "composite children must be passed as a Bundle so their "
            "descendants travel with them (got bare %r document)"
            % child.get("itype")
        )
    raise TahoeError("child must be an attribute document or a Bundle")


def _merge_docs(bundles: Sequence[Bundle]) -> List[Dict[str, Any]]:
    seen: Set[str] = set()
    out: List[Dict[str, Any]] = []
    for b in bundles:
        for doc in b.docs:
            h = doc["_hash"]
            if h not in seen:
                seen.add(h)
                out.append(doc)
    return out


def _check_closed(docs: Iterable[Dict[str, Any]]) -> None:
    # every plaintext edge must resolve inside the bundle itself
    pool = {d["_hash"] for d in docs}
    for doc in docs:
        for ref in doc.get("_ref", []):
            if is_edge_hash(ref) and ref not in pool:
                raise DanglingReference(
                    "child reference %s does not resolve within the bundle" % ref
                )


def _finish(body: Dict[str, Any], extra: Dict[str, Any] = None) -> Dict[str, Any]:
    doc = dict(body)
    if extra:
        doc.update(extra)
    doc["_hash"] = hash_instance(body)
    return doc


def _require_sub_type(sub_type: str) -> str:
    if not isinstance(sub_type, str) or not sub_type:
        raise TahoeError("sub_type must be a non-empty string")
    sub_type = sub_type.lower()
    if not all(c.isalnum() or c == "_" for c in sub_type):
        raise TahoeError("sub_type must be a lowercase [a-z0-9_] token: %r" % sub_type)
    return sub_type


def new_attribute(sub_type: str, data: Any) -> Dict[str, Any]:
    """Attribute document for one scalar observation.

    The hash covers (itype, sub_type, data) only, so any two parties
    observing the same value produce the same digest.
    """
    if not isinstance(data, (str, int, float)) or isinstance(data, bool):
        raise TahoeError("attribute data must be a string or number")
    body = {
        "itype": "attribute",
        "sub_type": _require_sub_type(sub_type),
        "data": data,
    }
    return _finish(body)


def new_object(sub_type: str, children: Sequence[ChildLike]) -> Bundle:
    """Object grouping its direct children by reference.

    children: attribute documents and/or Bundles of nested objects.
    """
    bundles = [_as_bundle(c) for c in children]
    if not bundles:
        raise TahoeError("object needs at least one child")
    ref = sorted({b.head["_hash"] for b in bundles})
    body = {"itype": "object", "sub_type": _require_sub_type(sub_type), "_ref": ref}
    docs = _merge_docs(bundles)
    _check_closed(docs)
    doc = _finish(body)
    return Bundle(docs=tuple(docs + [doc]))


def new_event(
    sub_type: str,
    children: Sequence[ChildLike],
    timestamp: int,
    orgid: str,
) -> Bundle:
    """Event sighting of the given children at a point in time.

    _ref is the deduplicated transitive closure of every descendant, so
    membership questions about an event never require traversal.  The
    hash covers orgid and timestamp: the same observation reported by two
    organizations is two distinct events over shared attribute nodes.
    """
    if not isinstance(timestamp, int) or isinstance(timestamp, bool):
        raise TahoeError("timestamp must be integer epoch seconds (UTC)")
    if not isinstance(orgid, str) or not orgid:
        raise TahoeError("orgid must be a non-empty string")
    bundles = [_as_bundle(c) for c in children]
    if not bundles:
        raise TahoeError("event needs at least one child")
    closure: Set[str] = set()
    for b in bundles:
        closure |= b.hashes
    body = {
        "itype": "event",
        "sub_type": _require_sub_type(sub_type),
        "orgid": orgid,
        "timestamp": timestamp,
        "_ref": sorted(closure),
    }
    docs = _merge_docs(bundles)
    _check_closed(docs)
    doc = _finish(body, {"_mal_ref": []})
    return Bundle(docs=tuple(docs + [doc]))


def new_session(
    sub_type: str,
    criterion: str,
    events: Sequence[ChildLike],
) -> Bundle:
    """Session over the given events; member order is preserved and hashed."""
    if not isinstance(criterion, str) or not criterion:
        raise TahoeError("criterion must be a non-empty string")
    bundles = [_as_bundle(e) for e in events]
    if not bundles:
        raise TahoeError("session needs at least one event")
    ref: List[str] = []
    for b in bundles:
        if b.head.get("itype") != "event":
            raise TahoeError("session members must be events")
        h = b.head["_hash"]
        if h not in ref:
            ref.append(h)
    body = {
        "itype": "session",
        "sub_type": _require_sub_type(sub_type),
        "criterion": criterion,
        "_ref": ref,
    }
    docs = _merge_docs(bundles)
    _check_closed(docs)
    doc = _finish(body)
    return Bundle(docs=tuple(docs + [doc]))


def new_raw(
    format_tag: str,
    payload: bytes,
    orgid: str,
    timestamp: int,
) -> Dict[str, Any]:
    """Raw instance preserving an as-received payload bit-exactly."""
    if not isinstance(payload, (bytes, bytearray)):
        raise TahoeError("payload must be bytes")
    if not isinstance(timestamp, int) or isinstance(timestamp, bool):
        raise TahoeError("timestamp must be integer epoch seconds (UTC)")
    if not isinstance(orgid, str) or not orgid:
        raise TahoeError("orgid must be a non-empty string")
    if not isinstance(format_tag, str) or not format_tag:
        raise TahoeError("format_tag must be a non-empty string")
    body = {
        "itype": "raw",
        "format_tag": format_tag,
        "orgid": orgid,
        "timestamp": timestamp,
        "payload": base64.b64encode(bytes(payload)).decode("ascii"),
    }
    return _finish(body)


def raw_payload(doc: Dict[str, Any]) -> bytes:
    return base64.b64decode(doc["payload"])


def has_encrypted_edges(doc: Dict[str, Any]) -> bool:
    return any(not is_edge_hash(r) for r in doc.get("_ref", []))


def validate(doc: Dict[str, Any]) -> List[str]:
    """Check one document against the format invariants.

    Returns a list of human-readable violations, empty when the document
    is well formed.  The recomputed-hash check is skipped for documents
    whose _ref carries encrypted tokens: their hash was fixed before the
    edges were sealed and cannot be re-derived without the key.
    """
    problems: List[str] = []
    if not isinstance(doc, dict):
        return ["instance must be a mapping"]
    itype = doc.get("itype")
    if itype not in INSTANCE_KINDS:
        return ["unknown itype %r" % (itype,)]

    for field in HASH_FIELDS[itype]:
        if field not in doc:
            problems.append("missing field %s" % field)
    if problems:
        return problems

    sub = doc.get("sub_type", doc.get("format_tag"))
    if not isinstance(sub, str) or not sub:
        problems.append("sub_type/format_tag must be a non-empty string")

    if itype == "attribute":
        if "_ref" in doc:
            problems.append("attributes never carry _ref")
        if isinstance(doc.get("data"), bool) or not isinstance(
            doc.get("data"), (str, int, float)
        ):
            problems.append("attribute data must be a string or number")
    if itype in ("object", "event", "session"):
        ref = doc.get("_ref")
        if not isinstance(ref, list) or not ref:
            problems.append("_ref must be a non-empty array")
        elif len(set(ref)) != len(ref):
            problems.append("_ref entries must be unique")
    if itype != "event":
        # raws legitimately carry a timestamp; nothing else does
        banned = ("_mal_ref", "_malicious_score")
        if itype != "raw":
            banned = banned + ("timestamp",)
        for field in banned:
            if field in doc:
                problems.append("only events carry %s" % field)
    if itype == "event":
        if not isinstance(doc.get("timestamp"), int) or isinstance(
            doc.get("timestamp"), bool
        ):
            problems.append("timestamp must be integer epoch seconds")
        mal = doc.get("_mal_ref", [])
        if not isinstance(mal, list):
            problems.append("_mal_ref must be an array")
        elif not set(mal) <= set(doc.get("_ref", [])):
            problems.append("_mal_ref must be a subset of _ref")
        score = doc.get("_malicious_score")
        if score is not None and (
            isinstance(score, bool) or not isinstance(score, (int, float))
        ):
            problems.append("_malicious_score must be a number")
        elif isinstance(score, (int, float)) and score > 0:
            problems.append("_malicious_score must be <= 0")
    if itype == "raw":
        try:
            base64.b64decode(doc.get("payload", ""), validate=True)
        except Exception:
            problems.append("payload must be base64")

    h = doc.get("_hash")
    if not is_edge_hash(h):
        problems.append("_hash must be lowercase 64-hex")
    elif not problems and not has_encrypted_edges(doc):
        try:
            if hash_instance(hash_body(doc)) != h:
                problems.append("_hash does not match document content")
        except TahoeError as e:
            problems.append(str(e))
    return problems
