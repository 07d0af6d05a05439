from __future__ import annotations

import math
import threading
import zlib
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptmem.errors import Deleted, DimensionMismatch, NotFound, StorageFailure
from adaptmem.store import LOG, VECTORS, MemoryStore, StoreConfig, cosine
from adaptmem.types import Granularity, MemoryEntry, MetaInfo, Speaker, TurnId, canonical_json

from conftest import DIM


def mk(content="x", gran=Granularity.FACT, vec=None, turn=(1, 0), rel=(), ts=datetime(2024, 1, 1), title=None, dim=DIM):
    if vec is None:
        vec = np.random.default_rng(zlib.crc32(content.encode())).standard_normal(dim)
    if gran is Granularity.EPISODE and title is None:
        title = "Episode"
    return MemoryEntry(
        gran, content, MetaInfo(ts, TurnId(*turn), Speaker.USER),
        relations=tuple(TurnId(*r) for r in rel), title=title, embedding=tuple(float(v) for v in vec),
    )


def oracle_top_k(store: MemoryStore, gran: Granularity, q, k: int) -> list[int]:
    """Exhaustive scan with the textbook cosine formula."""
    q = [float(x) for x in q]
    qn = math.sqrt(sum(x * x for x in q))
    scored = []
    for e in store.scan(gran):
        v = [float(x) for x in e.embedding]
        vn = math.sqrt(sum(x * x for x in v))
        s = 0.0 if vn * qn == 0 else sum(a * b for a, b in zip(v, q)) / (vn * qn)
        scored.append((-s, e.created_at, e.id))
    scored.sort()
    return [i for _, _, i in scored[:k]]


def test_ids_are_monotone(store):
    assert store.insert(mk("a")) == 1
    assert store.insert(mk("b", Granularity.RAW)) == 2
    e1, e2 = store.get(1), store.get(2)
    assert e1.created_at < e2.created_at


def test_dimension_mismatch(store):
    with pytest.raises(DimensionMismatch):
        store.insert(mk("a", vec=[1.0, 2.0, 3.0]))
    with pytest.raises(DimensionMismatch):
        store.top_k(Granularity.FACT, [1.0], 1)
    assert len(store) == 0


def test_reopen_round_trip(tmp_path):
    path = tmp_path / "s"
    with MemoryStore(StoreConfig(path, DIM, fsync=False)) as s:
        i = s.insert(mk("Alice lives in Paris", rel=[(0, 1)]))
        before = canonical_json(s.get(i).to_dict())
    with MemoryStore.open(path) as s2:
        assert canonical_json(s2.get(i).to_dict()) == before


def test_reopen_with_wrong_dim(tmp_path):
    MemoryStore(StoreConfig(tmp_path, 4, fsync=False)).insert(mk("a", dim=4))
    with pytest.raises(DimensionMismatch):
        MemoryStore(StoreConfig(tmp_path, 8, fsync=False))


def test_embedding_stored_as_float32(store):
    v = [0.1] * DIM
    i = store.insert(mk("a", vec=v))
    assert store.get(i).embedding == tuple(np.float32(0.1).item() for _ in v)


def test_get_by_turn_ids(store):
    assert store.get_by_turn_ids([TurnId(9, 9)]) == []
    raw = store.insert(mk("raw", Granularity.RAW, turn=(1, 2)))
    fact = store.insert(mk("fact", turn=(1, 5), rel=[(1, 2)]))
    store.insert(mk("other", turn=(2, 0)))
    assert [e.id for e in store.get_by_turn_ids([TurnId(1, 2)])] == [raw, fact]
    store.delete(fact)
    assert [e.id for e in store.get_by_turn_ids([TurnId(1, 2)])] == [raw]


def test_top_k_basic(store):
    v = np.arange(1, DIM + 1, dtype=float)
    store.insert(mk("a", vec=v))
    [hit] = store.top_k(Granularity.FACT, v, 5)
    assert hit.score == pytest.approx(1.0, abs=1e-7)
    ortho = np.zeros(DIM)
    ortho[0], ortho[1] = 2.0, -1.0  # v[0]=1, v[1]=2 -> dot 0
    assert store.top_k(Granularity.FACT, ortho, 1)[0].score == pytest.approx(0.0, abs=1e-7)
    assert store.top_k(Granularity.RAW, v, 3) == []
    with pytest.raises(ValueError):
        store.top_k(Granularity.FACT, v, 0)


def test_top_k_ties_break_by_creation(store):
    v = np.ones(DIM)
    ids = [store.insert(mk(f"dup{j}", vec=v)) for j in range(4)]
    assert [s.entry.id for s in store.top_k(Granularity.FACT, v, 4)] == ids


def test_zero_vector_scores_zero(store):
    store.insert(mk("zero", vec=np.zeros(DIM)))
    assert store.top_k(Granularity.FACT, np.ones(DIM), 1)[0].score == 0.0
    assert cosine([0, 0], [1, 1]) == 0.0


def test_scores_match_formula(store):
    rng = np.random.default_rng(0)
    for j in range(30):
        store.insert(mk(f"e{j}", vec=rng.standard_normal(DIM)))
    q = rng.standard_normal(DIM)
    for s in store.top_k(Granularity.FACT, q, 30):
        assert abs(s.score - cosine(q, s.entry.embedding)) < 1e-9


def test_update_content(store):
    rng = np.random.default_rng(1)
    paris, tokyo = rng.standard_normal(DIM), rng.standard_normal(DIM)
    i = store.insert(mk("User lives in Paris", vec=paris, rel=[(0, 0)]))
    store.insert(mk("User likes tea", vec=rng.standard_normal(DIM)))
    new = store.update_content(i, "User lives in Tokyo", tokyo, datetime(2024, 6, 1))
    assert new.id == i and new.granularity is Granularity.FACT
    assert new.relations == (TurnId(0, 0),) and new.meta.speaker is Speaker.USER
    assert new.meta.timestamp == datetime(2024, 6, 1)
    assert store.top_k(Granularity.FACT, tokyo, 1)[0].entry.id == i
    # Same content again: a fixed point apart from the embedding.
    again = store.update_content(i, "User lives in Tokyo", tokyo)
    assert again.content == new.content and again.meta == new.meta


def test_update_errors(store):
    with pytest.raises(NotFound):
        store.update_content(42, "x", np.ones(DIM))
    i = store.insert(mk("a"))
    store.delete(i)
    with pytest.raises(Deleted):
        store.update_content(i, "x", np.ones(DIM))
    j = store.insert(mk("b"))
    with pytest.raises(ValueError):
        store.update_content(j, " ", np.ones(DIM))


def test_delete_semantics(store):
    v = np.ones(DIM)
    ids = [store.insert(mk(f"e{j}", vec=v + j)) for j in range(3)]
    store.delete(ids[1])
    got = store.top_k(Granularity.FACT, v, 3)
    assert sorted(s.entry.id for s in got) == [ids[0], ids[2]]
    assert ids[1] not in [e.id for e in store.scan()]
    assert store.audit(ids[1]).deleted
    assert [e.id for e in store.tombstones()] == [ids[1]]
    with pytest.raises(NotFound):
        store.delete(ids[1])
    with pytest.raises(NotFound):
        store.get(ids[1])
    with pytest.raises(NotFound):
        store.delete(999)


def test_apply_edits_is_all_or_nothing(store):
    a = store.insert(mk("a"))
    before = canonical_json([e.to_dict() for e in store.all_records()])
    with pytest.raises(NotFound):
        store.apply_edits([(a, "changed", np.ones(DIM), None)], [77])
    assert canonical_json([e.to_dict() for e in store.all_records()]) == before


def test_purge_expired(tmp_path):
    now = datetime(2024, 3, 1)
    s = MemoryStore(StoreConfig(tmp_path, DIM, retention_limit=timedelta(days=30), fsync=False))
    old = s.insert(mk("old", ts=now - timedelta(days=45)))
    old_other = s.insert(mk("old other", ts=now - timedelta(days=45)))
    young = s.insert(mk("young", ts=now - timedelta(days=10)))
    unknown = s.insert(mk("unknown", ts=None))
    assert s.purge_expired([old, young, unknown], now) == [old]
    assert s.audit(old).deleted
    assert not s.audit(old_other).deleted
    assert not s.audit(young).deleted and not s.audit(unknown).deleted


def test_purge_without_limit_is_noop(store):
    i = store.insert(mk("ancient", ts=datetime(1990, 1, 1)))
    assert store.purge_expired([i], datetime(2024, 1, 1)) == []


def test_compact(tmp_path):
    path = tmp_path / "s"
    s = MemoryStore(StoreConfig(path, DIM, fsync=False))
    ids = [s.insert(mk(f"e{j}")) for j in range(4)]
    s.update_content(ids[0], "updated", np.ones(DIM))
    s.delete(ids[1])
    lines_before = (path / LOG).read_text().count("\n")
    assert s.compact() == 1
    assert (path / LOG).read_text().count("\n") == 3 < lines_before
    assert s.tombstones() == []
    assert s.insert(mk("new")) == 5  # ids are never reused
    s2 = MemoryStore.open(path)
    assert [e.id for e in s2.scan()] == [ids[0], ids[2], ids[3], 5]
    assert s2.get(ids[0]).content == "updated"


def test_torn_log_tail_is_truncated(tmp_path):
    path = tmp_path / "s"
    s = MemoryStore(StoreConfig(path, DIM, fsync=False))
    s.insert(mk("a"))
    with open(path / LOG, "ab") as fh:
        fh.write(b'{"id": 2, "trunc')
    s2 = MemoryStore.open(path)
    assert len(s2) == 1
    assert (path / LOG).read_bytes().endswith(b"\n")


def test_failed_commit_rolls_back(tmp_path, monkeypatch):
    path = tmp_path / "s"
    s = MemoryStore(StoreConfig(path, DIM, fsync=False))
    s.insert(mk("a"))
    log_before = (path / LOG).read_bytes()
    vec_before = (path / VECTORS).read_bytes()

    def boom(payload):
        raise OSError("disk full")

    monkeypatch.setattr(s, "_write_log", boom)
    with pytest.raises(StorageFailure):
        s.insert_many([mk("b"), mk("c")])
    assert (path / LOG).read_bytes() == log_before
    assert (path / VECTORS).read_bytes() == vec_before
    assert len(s) == 1
    monkeypatch.undo()
    assert s.insert(mk("d")) == 2


def test_closed_store_rejects_writes(store):
    store.close()
    with pytest.raises(StorageFailure):
        store.insert(mk("a"))


def test_concurrent_inserts(store):
    def worker(n):
        for j in range(25):
            store.insert(mk(f"t{n}-{j}"))

    threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    recs = store.all_records()
    assert [e.id for e in recs] == list(range(1, 101))
    assert sorted(e.created_at for e in recs) == list(range(1, 101))


@settings(max_examples=40, deadline=None)
@given(
    data=st.lists(st.lists(st.integers(-3, 3), min_size=4, max_size=4), min_size=1, max_size=40),
    query=st.lists(st.integers(-3, 3), min_size=4, max_size=4),
    k=st.integers(1, 50),
    deletes=st.sets(st.integers(1, 40), max_size=10),
)
def test_top_k_matches_oracle_property(tmp_path_factory, data, query, k, deletes):
    # Small integer vectors make exact ties common, exercising tie order.
    s = MemoryStore(StoreConfig(tmp_path_factory.mktemp("p"), 4, fsync=False))
    for j, v in enumerate(data):
        s.insert(mk(f"e{j}", vec=v, dim=4))
    for d in deletes:
        if d <= len(data):
            s.delete(d)
    got = [x.entry.id for x in s.top_k(Granularity.FACT, query, k)]
    assert got == oracle_top_k(s, Granularity.FACT, query, k)
