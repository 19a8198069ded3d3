"""Shared corpus builders for the suite.

Random corpora are seeded and deliberately small: wide enough to exercise
sharing (attribute pools smaller than the event count force reuse),
narrow enough that brute-force oracles stay fast.
"""

import random
from typing import List, Tuple

from cybexp.store import ArchiveStore
from cybexp.tahoe import Bundle, new_attribute, new_event, new_object

SUB_TYPES = ("ip", "url", "email_addr", "filename", "port", "username")


def random_attribute(rng: random.Random):
    sub = rng.choice(SUB_TYPES)
    if sub == "port":
        return new_attribute(sub, rng.randrange(1, 65536))
    if sub == "ip":
        return new_attribute(
            sub, "%d.%d.%d.%d" % tuple(rng.randrange(1, 255) for _ in range(4))
        )
    return new_attribute(sub, "v%d" % rng.randrange(10**6))


def random_corpus(
    rng: random.Random,
    n_events: int = 8,
    pool_size: int = 6,
    max_children: int = 3,
    with_objects: bool = False,
) -> List[Bundle]:
    """Events drawing children from a shared attribute pool."""
    pool = []
    seen = set()
    while len(pool) < pool_size:
        a = random_attribute(rng)
        if a["_hash"] not in seen:
            seen.add(a["_hash"])
            pool.append(a)
    bundles = []
    for i in range(n_events):
        k = rng.randrange(1, max_children + 1)
        children = list(rng.sample(pool, min(k, len(pool))))
        if with_objects and rng.random() < 0.4:
            inner = rng.sample(pool, min(2, len(pool)))
            children.append(new_object("peer", inner))
        bundles.append(
            new_event(
                rng.choice(("firewall_log", "ssh_login", "email")),
                children,
                timestamp=1_600_000_000 + rng.randrange(0, 10**6),
                orgid=rng.choice(("org1", "org2", "org3")),
            )
        )
    return bundles


def corpus_store(bundles: List[Bundle]) -> Tuple[ArchiveStore, list]:
    store = ArchiveStore()
    docs = []
    seen = set()
    for b in bundles:
        store.insert(b)
        for d in b.docs:
            if d["_hash"] not in seen:
                seen.add(d["_hash"])
                docs.append(d)
    return store, docs


# ---------------------------------------------------------------------------
# Random query material (module tests and the acceptance suite share these).

from cybexp.tdql import (
    AttributeIs,
    HashIs,
    Query,
    RefContains,
    ScoreBelow,
    SessionIs,
)

_VALUE_ALPHABET = (
    "abcxyz019._-/:@ \t\"\\é中Ж"  # quotes, escapes, unicode
)


def random_scalar(rng: random.Random):
    roll = rng.random()
    if roll < 0.5:
        return "".join(
            rng.choice(_VALUE_ALPHABET) for _ in range(rng.randrange(0, 24))
        )
    if roll < 0.75:
        return rng.randrange(-(10**9), 10**9)
    return rng.uniform(-1e6, 1e6)


def random_hex(rng: random.Random) -> str:
    return "".join(rng.choice("0123456789abcdef") for _ in range(64))


def random_condition(rng: random.Random):
    roll = rng.randrange(5)
    if roll == 0:
        sub = rng.choice(("ip", "url", "email_addr", "username", "port", "zz9"))
        return AttributeIs(sub_type=sub, value=random_scalar(rng))
    if roll == 1:
        return HashIs(digest=random_hex(rng))
    if roll == 2:
        if rng.random() < 0.3:
            return RefContains(term="enc:%016x:%s" % (rng.getrandbits(64),
                                                      "QUJDRA" * 8))
        return RefContains(term=random_hex(rng))
    if roll == 3:
        return ScoreBelow(threshold=round(rng.uniform(-1.5, 0.5), 6))
    return SessionIs(digest=random_hex(rng))


def random_query_ast(rng: random.Random) -> Query:
    target = rng.choice(("events", "attributes", "objects", "sessions"))
    count = False
    if target == "events" and rng.random() < 0.2:
        count = True
    conds = tuple(random_condition(rng) for _ in range(rng.randrange(0, 4)))
    since = until = limit = None
    if rng.random() < 0.4:
        since = rng.randrange(0, 2**33)
    if rng.random() < 0.4:
        until = rng.randrange(0, 2**33)
    if not conds and since is None and until is None:
        since = rng.randrange(0, 2**33)
    if rng.random() < 0.3:
        limit = rng.randrange(1, 10**6)
    return Query(target=target, count=count, conditions=conds,
                 since=since, until=until, limit=limit)


def random_query_against(rng: random.Random, docs) -> Query:
    """Query whose terms mostly reference the corpus, so hits are common."""
    attrs = [d for d in docs if d["itype"] == "attribute"]
    events = [d for d in docs if d["itype"] == "event"]
    sessions = [d for d in docs if d["itype"] == "session"]

    def cond(_):
        roll = rng.randrange(6)
        if roll in (0, 1) and attrs:
            a = rng.choice(attrs)
            value = a["data"] if rng.random() < 0.8 else random_scalar(rng)
            return AttributeIs(sub_type=a["sub_type"], value=value)
        if roll == 2 and docs:
            return HashIs(digest=rng.choice(docs)["_hash"])
        if roll == 3 and attrs:
            return RefContains(term=rng.choice(attrs)["_hash"])
        if roll == 4:
            return ScoreBelow(threshold=round(rng.uniform(-1.0, 0.1), 4))
        if sessions:
            return SessionIs(digest=rng.choice(sessions)["_hash"])
        return random_condition(rng)

    conds = tuple(cond(i) for i in range(rng.randrange(0, 3)))
    since = until = None
    if events and rng.random() < 0.5:
        base = rng.choice(events)["timestamp"]
        since = base - rng.randrange(0, 10**5)
        if rng.random() < 0.5:
            until = base + rng.randrange(0, 10**5)
    if not conds and since is None and until is None:
        conds = (cond(0),)
    target = rng.choice(("events", "attributes", "objects", "sessions"))
    count = target == "events" and rng.random() < 0.25
    limit = rng.randrange(1, 6) if rng.random() < 0.3 else None
    return Query(target=target, count=count, conditions=conds,
                 since=since, until=until, limit=limit)
