"""Selective sharing: encrypted edges, ACLs, key service, sealed envelopes.

A graph edge is just a digest, so hiding a private attribute from a
sharing partner means two things: withhold the attribute document itself
and replace its digest inside every _ref with a deterministic ciphertext.
Determinism is the point. Everyone holding the key encrypts the same
digest to the same token, so equality joins (the only thing the archive
ever does with an edge) keep working on ciphertext, and nobody else
learns the digest, let alone the value behind it.

Edge tokens look like ``enc:<key id>:<base64url>``: fixed length, tagged
with the key that made them, and impossible to mistake for a plaintext
64-hex digest.  The cipher is AES-SIV keyed per edge secret (the 256-bit
secret is expanded to the SIV key with HKDF-SHA256), which gives
deterministic authenticated encryption; decrypting with the wrong key
fails loudly rather than yielding garbage.

Raw submissions travel and rest as sealed envelopes: a fresh per-message
key encrypts the payload, and that key is sealed to the recipient's
X25519 public key. Nothing between the submitting organization and the
archive ever sees plaintext at rest.
"""

import base64
import hashlib
import json
import os
import secrets as _secrets
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, AESSIV
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .tahoe import Bundle, is_edge_hash

EDGE_TOKEN_PREFIX = "enc:"
PUBLIC = "public"


class PrivacyError(Exception):
    pass


class DecryptError(PrivacyError):
    pass


class AclError(PrivacyError):
    pass


class KmsDenied(PrivacyError):
    pass


class EnvelopeError(PrivacyError):
    pass


def _b64e(b: bytes) -> str:
    return base64.urlsafe_b64encode(b).rstrip(b"=").decode("ascii")


def _b64d(s: str) -> bytes:
    pad = "=" * (-len(s) % 4)
    return base64.urlsafe_b64decode(s + pad)


# ---------------------------------------------------------------------------
# deterministic edge encryption


@dataclass(frozen=True)
class EdgeSecret:
    """256-bit symmetric key for one sharing relationship."""

    key_id: str
    key: bytes

    def __post_init__(self):
        if len(self.key) != 32:
            raise PrivacyError("edge secrets are 32 bytes")


def _derive_key_id(key: bytes) -> str:
    return hashlib.sha256(b"cybexp-edge-key-id:" + key).hexdigest()[:16]


def gen_edge_secret() -> EdgeSecret:
    key = _secrets.token_bytes(32)
    return EdgeSecret(key_id=_derive_key_id(key), key=key)


def edge_secret_from_bytes(key: bytes) -> EdgeSecret:
    """Rebuild a secret (and its derived id) from raw key bytes."""
    return EdgeSecret(key_id=_derive_key_id(key), key=bytes(key))


def _siv(secret: EdgeSecret) -> AESSIV:
    siv_key = HKDF(
        algorithm=SHA256(), length=64, salt=None, info=b"cybexp-edge-siv-v1"
    ).derive(secret.key)
    return AESSIV(siv_key)


def det_encrypt(edge_hash: str, secret: EdgeSecret) -> str:
    """Deterministic token for one plaintext edge under one secret.

    Same (hash, key) always yields the same token, so encrypted edges
    stay joinable; different keys yield unrelated tokens.
    """
    if not is_edge_hash(edge_hash):
        raise PrivacyError("not a plaintext edge hash: %r" % (edge_hash,))
    ct = _siv(secret).encrypt(bytes.fromhex(edge_hash), None)
    return EDGE_TOKEN_PREFIX + secret.key_id + ":" + _b64e(ct)


def is_encrypted_edge(value: Any) -> bool:
    if not isinstance(value, str) or not value.startswith(EDGE_TOKEN_PREFIX):
        return False
    parts = value.split(":")
    return len(parts) == 3 and len(parts[1]) == 16


def token_key_id(token: str) -> str:
    if not is_encrypted_edge(token):
        raise DecryptError("not an encrypted edge token")
    return token.split(":")[1]


def det_decrypt(token: str, secret: EdgeSecret) -> str:
    """Recover the plaintext edge hash; authenticated, so the wrong key
    (or a tampered token) raises instead of returning wrong bytes."""
    if token_key_id(token) != secret.key_id:
        raise DecryptError("token was made under key %s" % token_key_id(token))
    try:
        pt = _siv(secret).decrypt(_b64d(token.split(":")[2]), None)
    except (InvalidTag, ValueError):
        raise DecryptError("authentication failed")
    return pt.hex()


def expand_query_terms(
    edge_hash: str, secrets: Iterable[EdgeSecret] = ()
) -> Set[str]:
    """All index terms one party can derive for a value it knows:
    the plaintext digest plus its token under every held key."""
    terms = {edge_hash}
    for s in secrets:
        terms.add(det_encrypt(edge_hash, s))
    return terms


# ---------------------------------------------------------------------------
# ACL application


@dataclass
class AclPolicy:
    """Per-attribute visibility: anything not listed is public."""

    private: Dict[str, str] = field(default_factory=dict)  # attr hash -> key id

    def mark_private(self, attr_hash: str, key_id: str) -> None:
        self.private[attr_hash] = key_id

    def key_for(self, attr_hash: str) -> Optional[str]:
        return self.private.get(attr_hash)


def apply_acl(
    bundle: Bundle,
    acl: AclPolicy,
    secrets: Mapping[str, EdgeSecret],
) -> Bundle:
    """Shareable form of a bundle under a visibility policy.

    Private attribute documents are withheld and every _ref / _mal_ref
    occurrence of their hash is replaced by its deterministic token.
    Hashes of the remaining documents are left exactly as computed before
    encryption: recipients can still join on them, and holders of the key
    can restore the original edges.
    """
    by_hash = {d["_hash"]: d for d in bundle.docs}
    for h, key_id in acl.private.items():
        doc = by_hash.get(h)
        if doc is not None and doc.get("itype") != "attribute":
            raise AclError("only attributes can be private (%s is %s)"
                           % (h, doc.get("itype")))
        if key_id not in secrets:
            raise AclError("no secret for key id %s" % key_id)

    def seal_ref(ref_list: Sequence[str]) -> List[str]:
        out = []
        for r in ref_list:
            key_id = acl.key_for(r) if is_edge_hash(r) else None
            if key_id is None:
                out.append(r)
            else:
                out.append(det_encrypt(r, secrets[key_id]))
        return sorted(out)

    shared: List[Dict[str, Any]] = []
    for doc in bundle.docs:
        if acl.key_for(doc["_hash"]) is not None:
            continue  # withheld
        new_doc = dict(doc)
        if "_ref" in new_doc and doc.get("itype") != "session":
            new_doc["_ref"] = seal_ref(new_doc["_ref"])
        if "_mal_ref" in new_doc:
            new_doc["_mal_ref"] = seal_ref(new_doc["_mal_ref"])
        shared.append(new_doc)
    return Bundle(docs=tuple(shared))


def decrypt_bundle(
    bundle: Bundle, secrets: Iterable[EdgeSecret]
) -> Bundle:
    """Best-effort inverse of apply_acl for a key holder: every token
    made under a held key becomes its plaintext hash again."""
    by_id = {s.key_id: s for s in secrets}
    out = []
    for doc in bundle.docs:
        new_doc = dict(doc)
        for fieldname in ("_ref", "_mal_ref"):
            if fieldname not in new_doc:
                continue
            entries = []
            for r in new_doc[fieldname]:
                if is_encrypted_edge(r) and token_key_id(r) in by_id:
                    entries.append(det_decrypt(r, by_id[token_key_id(r)]))
                else:
                    entries.append(r)
            if doc.get("itype") == "session" and fieldname == "_ref":
                new_doc[fieldname] = entries
            else:
                new_doc[fieldname] = sorted(entries)
        out.append(new_doc)
    return Bundle(docs=tuple(out))


# ---------------------------------------------------------------------------
# key service


class Kms:
    """Ownership, grants, and an append-only audit trail for edge secrets.

    In memory by default.  save()/load() persist to a single JSON file in
    which the key material section is sealed under a scrypt-derived key,
    so no key file is ever written unencrypted; grants and the audit
    trail are plain (they hold no key material).
    """

    def __init__(self):
        self._keys: Dict[str, EdgeSecret] = {}
        self._owner: Dict[str, str] = {}
        self._grants: Set[Tuple[str, str]] = set()
        self._audit: List[Dict[str, Any]] = []

    def _log(self, action: str, **fields) -> Dict[str, Any]:
        entry = {"seq": len(self._audit), "ts": int(time.time()),
                 "action": action}
        entry.update(fields)
        self._audit.append(entry)
        return entry

    def create(self, org: str) -> EdgeSecret:
        secret = gen_edge_secret()
        self.register(secret, org)
        return secret

    def register(self, secret: EdgeSecret, org: str) -> None:
        if secret.key_id in self._keys:
            raise PrivacyError("key id %s already registered" % secret.key_id)
        self._keys[secret.key_id] = secret
        self._owner[secret.key_id] = org
        self._grants.add((secret.key_id, org))
        self._log("create", key_id=secret.key_id, org=org)

    def has_grant(self, org: str, key_id: str) -> bool:
        return (key_id, org) in self._grants

    def share(self, key_id: str, from_org: str, to_org: str) -> Dict[str, Any]:
        """Extend a grant chain one hop; only current holders may share."""
        if key_id not in self._keys:
            raise KmsDenied("unknown key id %s" % key_id)
        if not self.has_grant(from_org, key_id):
            self._log("share_denied", key_id=key_id, src=from_org, dst=to_org)
            raise KmsDenied("%s holds no grant for %s" % (from_org, key_id))
        self._grants.add((key_id, to_org))
        return self._log("share", key_id=key_id, src=from_org, dst=to_org)

    def get(self, org: str, key_id: str) -> EdgeSecret:
        if key_id not in self._keys or not self.has_grant(org, key_id):
            raise KmsDenied("%s holds no grant for %s" % (org, key_id))
        return self._keys[key_id]

    def granted(self, org: str) -> List[str]:
        return sorted(k for (k, o) in self._grants if o == org)

    def secrets_for(self, org: str, key_ids: Optional[Iterable[str]] = None
                    ) -> List[EdgeSecret]:
        ids = self.granted(org) if key_ids is None else list(key_ids)
        return [self.get(org, k) for k in ids]

    @property
    def audit(self) -> List[Dict[str, Any]]:
        return list(self._audit)

    def export_audit_jsonl(self, fp) -> int:
        for entry in self._audit:
            fp.write(json.dumps(entry, sort_keys=True))
            fp.write("\n")
        return len(self._audit)

    # -- persistence ---------------------------------------------------

    def save(self, path: str, passphrase: str) -> None:
        salt = os.urandom(16)
        kek = Scrypt(salt=salt, length=32, n=2**14, r=8, p=1).derive(
            passphrase.encode("utf-8")
        )
        key_material = json.dumps(
            {kid: _b64e(s.key) for kid, s in self._keys.items()}
        ).encode("utf-8")
        nonce = os.urandom(12)
        sealed = AESGCM(kek).encrypt(nonce, key_material, b"cybexp-kms-v1")
        doc = {
            "version": 1,
            "salt": _b64e(salt),
            "nonce": _b64e(nonce),
            "sealed_keys": _b64e(sealed),
            "owner": self._owner,
            "grants": sorted(list(g) for g in self._grants),
            "audit": self._audit,
        }
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        os.replace(tmp, path)
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str, passphrase: str) -> "Kms":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        kek = Scrypt(
            salt=_b64d(doc["salt"]), length=32, n=2**14, r=8, p=1
        ).derive(passphrase.encode("utf-8"))
        try:
            material = AESGCM(kek).decrypt(
                _b64d(doc["nonce"]), _b64d(doc["sealed_keys"]), b"cybexp-kms-v1"
            )
        except InvalidTag:
            raise KmsDenied("wrong passphrase or corrupted key file")
        kms = cls()
        for kid, b64 in json.loads(material.decode("utf-8")).items():
            kms._keys[kid] = EdgeSecret(key_id=kid, key=_b64d(b64))
        kms._owner = dict(doc["owner"])
        kms._grants = {tuple(g) for g in doc["grants"]}
        kms._audit = list(doc["audit"])
        return kms


# ---------------------------------------------------------------------------
# sealed envelopes (submission transport and cache-at-rest form)


@dataclass
class ArchiveKeys:
    """X25519 keypair identifying one archive endpoint."""

    private: Optional[X25519PrivateKey]
    public: X25519PublicKey
    key_id: str

    @classmethod
    def generate(cls) -> "ArchiveKeys":
        priv = X25519PrivateKey.generate()
        return cls._from_private(priv)

    @classmethod
    def _from_private(cls, priv: X25519PrivateKey) -> "ArchiveKeys":
        pub = priv.public_key()
        return cls(private=priv, public=pub, key_id=_pub_key_id(pub))

    def public_only(self) -> "ArchiveKeys":
        return ArchiveKeys(private=None, public=self.public, key_id=self.key_id)

    def save_private(self, path: str) -> None:
        raw = self.private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as f:
            f.write(raw)

    @classmethod
    def load_private(cls, path: str) -> "ArchiveKeys":
        with open(path, "rb") as f:
            raw = f.read()
        return cls._from_private(X25519PrivateKey.from_private_bytes(raw))


def _pub_key_id(pub: X25519PublicKey) -> str:
    raw = pub.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return hashlib.sha256(b"cybexp-archive-key:" + raw).hexdigest()[:16]


def envelope_seal(payload: bytes, recipient: ArchiveKeys) -> Dict[str, Any]:
    """Hybrid seal: fresh payload key, sealed to the recipient key.

    The ephemeral X25519 share and HKDF bind the wrapped key to this
    recipient; AES-GCM authenticates both layers, so any tampering or a
    mismatched private key surfaces as EnvelopeError on open.
    """
    msg_key = os.urandom(32)
    body_nonce = os.urandom(12)
    body = AESGCM(msg_key).encrypt(body_nonce, payload, b"cybexp-env-body")

    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    rec_pub = recipient.public.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    shared = eph.exchange(recipient.public)
    wrap_key = HKDF(
        algorithm=SHA256(), length=32, salt=None,
        info=b"cybexp-env-wrap-v1" + eph_pub + rec_pub,
    ).derive(shared)
    wrap_nonce = os.urandom(12)
    wrapped = AESGCM(wrap_key).encrypt(wrap_nonce, msg_key, b"cybexp-env-key")

    return {
        "v": 1,
        "alg": "x25519-hkdf-sha256-aesgcm",
        "kid": recipient.key_id,
        "epk": _b64e(eph_pub),
        "wrap_nonce": _b64e(wrap_nonce),
        "wrapped_key": _b64e(wrapped),
        "body_nonce": _b64e(body_nonce),
        "body": _b64e(body),
    }


def envelope_open(envelope: Dict[str, Any], keys: ArchiveKeys) -> bytes:
    if keys.private is None:
        raise EnvelopeError("no private key available")
    try:
        if envelope.get("v") != 1:
            raise EnvelopeError("unknown envelope version")
        eph_pub = _b64d(envelope["epk"])
        rec_pub = keys.public.public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = keys.private.exchange(
            X25519PublicKey.from_public_bytes(eph_pub)
        )
        wrap_key = HKDF(
            algorithm=SHA256(), length=32, salt=None,
            info=b"cybexp-env-wrap-v1" + eph_pub + rec_pub,
        ).derive(shared)
        msg_key = AESGCM(wrap_key).decrypt(
            _b64d(envelope["wrap_nonce"]),
            _b64d(envelope["wrapped_key"]),
            b"cybexp-env-key",
        )
        return AESGCM(msg_key).decrypt(
            _b64d(envelope["body_nonce"]), _b64d(envelope["body"]),
            b"cybexp-env-body",
        )
    except EnvelopeError:
        raise
    except (InvalidTag, KeyError, ValueError) as e:
        raise EnvelopeError("envelope failed to open: %s" % e.__class__.__name__)
