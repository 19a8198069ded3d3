"""Edge encryption, ACL sharing, key service, and envelope behavior."""

import json

import pytest

from cybexp.privacy import (
    AclError,
    AclPolicy,
    ArchiveKeys,
    DecryptError,
    EnvelopeError,
    Kms,
    KmsDenied,
    PrivacyError,
    apply_acl,
    decrypt_bundle,
    det_decrypt,
    det_encrypt,
    edge_secret_from_bytes,
    envelope_open,
    envelope_seal,
    expand_query_terms,
    gen_edge_secret,
    is_encrypted_edge,
    token_key_id,
)
from cybexp.store import ArchiveStore
from cybexp.tahoe import is_edge_hash, new_attribute, new_event, new_object


class TestDeterministicEncryption:
    def test_same_inputs_same_token(self):
        s = edge_secret_from_bytes(bytes(range(32)))
        h = "ab" * 32
        assert det_encrypt(h, s) == det_encrypt(h, s)
        # a fresh secret object over the same bytes agrees too
        again = edge_secret_from_bytes(bytes(range(32)))
        assert det_encrypt(h, again) == det_encrypt(h, s)

    def test_different_keys_different_tokens(self):
        h = "ab" * 32
        assert det_encrypt(h, gen_edge_secret()) != det_encrypt(h, gen_edge_secret())

    def test_token_shape(self):
        s = gen_edge_secret()
        tokens = [det_encrypt(("%02x" % i) * 32, s) for i in range(16)]
        lengths = {len(t) for t in tokens}
        assert len(lengths) == 1  # fixed length
        for t in tokens:
            assert is_encrypted_edge(t)
            assert not is_edge_hash(t)
            assert token_key_id(t) == s.key_id

    def test_round_trip_and_wrong_key(self):
        s1, s2 = gen_edge_secret(), gen_edge_secret()
        h = "cd" * 32
        token = det_encrypt(h, s1)
        assert det_decrypt(token, s1) == h
        with pytest.raises(DecryptError):
            det_decrypt(token, s2)

    def test_tampered_token_fails_authentication(self):
        s = gen_edge_secret()
        token = det_encrypt("ab" * 32, s)
        prefix, kid, ct = token.split(":")
        flipped = ct[:-2] + ("AA" if not ct.endswith("AA") else "BB")
        with pytest.raises(DecryptError):
            det_decrypt(":".join((prefix, kid, flipped)), s)

    def test_plaintext_only(self):
        with pytest.raises(PrivacyError):
            det_encrypt("not-a-hash", gen_edge_secret())

    def test_secret_must_be_32_bytes(self):
        with pytest.raises(PrivacyError):
            edge_secret_from_bytes(b"short")

    def test_query_term_expansion(self):
        s1, s2 = gen_edge_secret(), gen_edge_secret()
        h = "ef" * 32
        terms = expand_query_terms(h, [s1, s2])
        assert h in terms
        assert det_encrypt(h, s1) in terms
        assert det_encrypt(h, s2) in terms
        assert len(terms) == 3


def _email_bundle(private_value="secret@corp.example", ts=1000):
    private = new_attribute("email_addr", private_value)
    public = new_attribute("subject", "quarterly numbers")
    evt = new_event("email", [private, public], timestamp=ts, orgid="org1")
    return private, public, evt


class TestApplyAcl:
    def test_withholds_and_rewrites(self):
        private, public, evt = _email_bundle()
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(private["_hash"], secret.key_id)
        shared = apply_acl(evt, acl, {secret.key_id: secret})

        assert private["_hash"] not in shared.hashes
        head = shared.head
        assert head["_hash"] == evt.head["_hash"]  # identity preserved
        assert private["_hash"] not in head["_ref"]
        token = det_encrypt(private["_hash"], secret)
        assert token in head["_ref"]
        assert public["_hash"] in head["_ref"]

    def test_object_refs_rewritten_too(self):
        inner = new_attribute("ip", "10.1.2.3")
        obj = new_object("peer", [inner, new_attribute("port", 443)])
        evt = new_event("flow", [obj], timestamp=5, orgid="o")
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(inner["_hash"], secret.key_id)
        shared = apply_acl(evt, acl, {secret.key_id: secret})
        shared_obj = next(d for d in shared.docs if d["itype"] == "object")
        assert inner["_hash"] not in shared_obj["_ref"]
        assert det_encrypt(inner["_hash"], secret) in shared_obj["_ref"]
        assert shared_obj["_hash"] == obj.head["_hash"]

    def test_missing_secret_errors(self):
        private, _, evt = _email_bundle()
        acl = AclPolicy()
        acl.mark_private(private["_hash"], "0" * 16)
        with pytest.raises(AclError):
            apply_acl(evt, acl, {})

    def test_only_attributes_can_be_private(self):
        obj = new_object("peer", [new_attribute("ip", "1.2.3.4")])
        evt = new_event("flow", [obj], timestamp=5, orgid="o")
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(obj.head["_hash"], secret.key_id)
        with pytest.raises(AclError):
            apply_acl(evt, acl, {secret.key_id: secret})

    def test_shared_bundle_inserts_and_queries(self):
        private, public, evt = _email_bundle()
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(private["_hash"], secret.key_id)
        shared = apply_acl(evt, acl, {secret.key_id: secret})

        store = ArchiveStore()
        store.insert(shared)  # encrypted edges exempt from resolution

        # no key: the value query cannot see the event
        naked = store.events_referencing(expand_query_terms(private["_hash"]))
        assert naked == set()
        # with the key the token term joins
        held = store.events_referencing(
            expand_query_terms(private["_hash"], [secret])
        )
        assert held == {evt.head["_hash"]}
        # the public attribute finds it either way
        assert store.events_referencing([public["_hash"]]) == {evt.head["_hash"]}

    def test_serialized_share_leaks_nothing(self):
        private, _, evt = _email_bundle(private_value="leakcanary@x.example")
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(private["_hash"], secret.key_id)
        shared = apply_acl(evt, acl, {secret.key_id: secret})
        text = shared.to_json()
        assert "leakcanary" not in text
        assert private["_hash"] not in text

    def test_decrypt_bundle_restores_original(self):
        private, _, evt = _email_bundle()
        secret = gen_edge_secret()
        acl = AclPolicy()
        acl.mark_private(private["_hash"], secret.key_id)
        shared = apply_acl(evt, acl, {secret.key_id: secret})
        restored = decrypt_bundle(shared, [secret])
        assert restored.head == evt.head  # same _ref, same hash
        # withheld document stays withheld; only edges come back
        assert private["_hash"] not in restored.hashes


class TestKms:
    def test_owner_granted_on_create(self):
        kms = Kms()
        s = kms.create("org1")
        assert kms.has_grant("org1", s.key_id)
        assert kms.get("org1", s.key_id) == s

    def test_share_chain(self):
        kms = Kms()
        s = kms.create("org1")
        kms.share(s.key_id, "org1", "org2")
        kms.share(s.key_id, "org2", "org3")  # re-share by grantee
        assert kms.get("org3", s.key_id) == s

    def test_share_without_grant_denied_and_audited(self):
        kms = Kms()
        s = kms.create("org1")
        with pytest.raises(KmsDenied):
            kms.share(s.key_id, "org2", "org3")
        assert kms.audit[-1]["action"] == "share_denied"
        with pytest.raises(KmsDenied):
            kms.get("org3", s.key_id)

    def test_audit_is_append_only_sequence(self):
        kms = Kms()
        s = kms.create("org1")
        kms.share(s.key_id, "org1", "org2")
        seqs = [e["seq"] for e in kms.audit]
        assert seqs == list(range(len(seqs)))
        # the accessor hands out copies, not the live list
        kms.audit.append({"forged": True})
        assert all("forged" not in e for e in kms.audit)

    def test_export_jsonl(self, tmp_path):
        import io

        kms = Kms()
        s = kms.create("org1")
        kms.share(s.key_id, "org1", "org2")
        buf = io.StringIO()
        n = kms.export_audit_jsonl(buf)
        lines = [json.loads(l) for l in buf.getvalue().splitlines()]
        assert n == len(lines) == 2
        assert lines[1]["action"] == "share"

    def test_save_load_round_trip_encrypted(self, tmp_path):
        path = str(tmp_path / "kms.json")
        kms = Kms()
        s = kms.create("org1")
        kms.share(s.key_id, "org1", "org2")
        kms.save(path, "hunter2 correct horse")

        raw = open(path, "rb").read()
        assert s.key not in raw
        assert s.key.hex().encode() not in raw
        import base64
        assert base64.urlsafe_b64encode(s.key).rstrip(b"=") not in raw

        back = Kms.load(path, "hunter2 correct horse")
        assert back.get("org2", s.key_id).key == s.key
        assert back.audit == kms.audit
        with pytest.raises(KmsDenied):
            Kms.load(path, "wrong passphrase")


class TestEnvelopes:
    def test_round_trip(self):
        keys = ArchiveKeys.generate()
        env = envelope_seal(b"hello archive", keys)
        assert envelope_open(env, keys) == b"hello archive"

    def test_fresh_randomness_per_seal(self):
        keys = ArchiveKeys.generate()
        a = envelope_seal(b"same payload", keys)
        b = envelope_seal(b"same payload", keys)
        assert a["body"] != b["body"]
        assert a["wrapped_key"] != b["wrapped_key"]

    def test_wrong_recipient_fails(self):
        env = envelope_seal(b"x", ArchiveKeys.generate())
        with pytest.raises(EnvelopeError):
            envelope_open(env, ArchiveKeys.generate())

    def test_tamper_detected(self):
        keys = ArchiveKeys.generate()
        env = envelope_seal(b"payload bytes", keys)
        bad = dict(env, body=env["body"][:-4] + "AAAA")
        with pytest.raises(EnvelopeError):
            envelope_open(bad, keys)

    def test_public_only_cannot_open(self):
        keys = ArchiveKeys.generate()
        env = envelope_seal(b"x", keys)
        with pytest.raises(EnvelopeError):
            envelope_open(env, keys.public_only())

    def test_ten_megabyte_payload(self):
        keys = ArchiveKeys.generate()
        payload = b"\xa5" * (10 * 1024 * 1024)
        assert envelope_open(envelope_seal(payload, keys), keys) == payload

    def test_private_key_file_round_trip(self, tmp_path):
        import os, stat

        path = str(tmp_path / "archive.key")
        keys = ArchiveKeys.generate()
        keys.save_private(path)
        mode = stat.S_IMODE(os.stat(path).st_mode)
        assert mode == 0o600
        back = ArchiveKeys.load_private(path)
        assert back.key_id == keys.key_id
        env = envelope_seal(b"x", keys.public_only())
        assert envelope_open(env, back) == b"x"
