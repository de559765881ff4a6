"""VNI store: allocation order, quarantine, users, audit log, durability."""

import random
import threading

import pytest

from slingsim.store import (
    AuditOp,
    NotAllocated,
    NotOwner,
    PoolExhausted,
    QuarantinePolicy,
    ReplayStateMachine,
    UsersRemain,
    VniState,
    VniStore,
)


@pytest.fixture
def make_store(tmp_path):
    stores = []

    def factory(pool=(1024, 1279), quarantine=30.0, name="vni.db"):
        s = VniStore(str(tmp_path / name), pool=pool,
                     quarantine=QuarantinePolicy(quarantine))
        stores.append(s)
        return s

    yield factory
    for s in stores:
        s.close()


class TestAcquireRelease:
    def test_empty_store_hands_out_lowest_free(self, make_store):
        store = make_store()
        assert store.acquire("job:a/x", now=0) == 1024

    def test_quarantine_blocks_reuse_until_duration_exceeded(self, make_store):
        # released at t=100: still quarantined at t=125 (25 <= 30), eligible
        # again at t=131 (31 > 30) and preferred as the lowest value
        store = make_store()
        v = store.acquire("job:a/x", now=0)
        assert v == 1024
        store.release(1024, "job:a/x", now=100)
        assert store.acquire("job:a/y", now=125) == 1025
        assert store.acquire("job:a/z", now=131) == 1024

    def test_boundary_is_strict(self, make_store):
        store = make_store()
        store.acquire("a", now=0)
        store.release(1024, "a", now=10)
        # exactly `duration` after release is still inside the quarantine
        assert store.acquire("b", now=40) == 1025
        assert store.acquire("c", now=40.001) == 1024

    def test_acquire_is_idempotent_per_owner(self, make_store):
        store = make_store()
        v1 = store.acquire("job:a/x", now=0)
        v2 = store.acquire("job:a/x", now=5)
        assert v1 == v2
        # the repeat is a read, not a second allocation
        assert len([r for r in store.audit_log() if r.op is AuditOp.ACQUIRE]) == 1

    def test_concurrent_acquires_all_distinct(self, make_store):
        store = make_store()
        results = {}

        def worker(i):
            results[i] = store.acquire(f"owner-{i}")

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(64)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(results.values())) == 64
        # replay against the single-threaded reference
        replay = ReplayStateMachine(store.quarantine.duration).apply_all(store.audit_log())
        assert replay.violations == []
        assert replay.matches_store(store) == []

    def test_release_quarantines_with_timestamp(self, make_store):
        store = make_store()
        v = store.acquire("a", now=0)
        store.release(v, "a", now=17)
        rec = store.record(v)
        assert rec.state is VniState.QUARANTINED
        assert rec.released_at == 17
        assert rec.owner is None and rec.users == frozenset()

    def test_release_by_wrong_owner_rejected_state_unchanged(self, make_store):
        store = make_store()
        v = store.acquire("a", now=0)
        with pytest.raises(NotOwner):
            store.release(v, "b", now=1)
        assert store.record(v).state is VniState.ALLOCATED
        assert store.lookup_owner("a") == v

    def test_release_unallocated(self, make_store):
        store = make_store()
        with pytest.raises(NotAllocated):
            store.release(1024, "a", now=0)

    def test_pool_exhaustion(self, make_store):
        store = make_store(pool=(1024, 1025))
        store.acquire("a", now=0)
        store.acquire("b", now=0)
        with pytest.raises(PoolExhausted):
            store.acquire("c", now=0)
        denied = [r for r in store.audit_log() if not r.ok]
        assert [d.reason for d in denied] == ["PoolExhausted"]


class TestUsers:
    def test_release_stalls_until_users_removed(self, make_store):
        store = make_store()
        v = store.acquire("claim:a/c", now=0)
        store.add_user(v, "job:a/j1")
        with pytest.raises(UsersRemain):
            store.release(v, "claim:a/c", now=1)
        assert store.remove_user(v, "job:a/j1") == 0
        store.release(v, "claim:a/c", now=2)
        assert store.record(v).state is VniState.QUARANTINED

    def test_add_user_idempotent(self, make_store):
        store = make_store()
        v = store.acquire("c", now=0)
        store.add_user(v, "u")
        store.add_user(v, "u")
        assert store.users(v) == frozenset({"u"})
        assert len([r for r in store.audit_log() if r.op is AuditOp.ADD_USER]) == 1

    def test_add_user_on_free_vni(self, make_store):
        store = make_store()
        with pytest.raises(NotAllocated):
            store.add_user(1024, "u")

    def test_remove_sole_user_returns_zero(self, make_store):
        store = make_store()
        v = store.acquire("c", now=0)
        store.add_user(v, "u")
        assert store.remove_user(v, "u") == 0

    def test_remove_unknown_user_is_noop(self, make_store):
        store = make_store()
        v = store.acquire("c", now=0)
        store.add_user(v, "u1")
        store.add_user(v, "u2")
        assert store.remove_user(v, "stranger") == 2
        assert store.users(v) == frozenset({"u1", "u2"})

    def test_interleaved_users_match_shadow_set(self, make_store):
        store = make_store()
        v = store.acquire("c", now=0)
        rng = random.Random(5)
        shadow = set()
        users = [f"job:ns/j{i}" for i in range(10)]
        for _ in range(300):
            u = rng.choice(users)
            if rng.random() < 0.5:
                store.add_user(v, u)
                shadow.add(u)
            else:
                remaining = store.remove_user(v, u)
                shadow.discard(u)
                assert remaining == len(shadow)
            assert store.users(v) == frozenset(shadow)


class TestLookupAndAudit:
    def test_lookup_owner_lifecycle(self, make_store):
        store = make_store()
        assert store.lookup_owner("claim:a/c") is None
        v = store.acquire("claim:a/c", now=0)
        assert store.lookup_owner("claim:a/c") == v
        store.release(v, "claim:a/c", now=1)
        assert store.lookup_owner("claim:a/c") is None

    def test_fresh_store_log_empty(self, make_store):
        assert make_store().audit_log() == []

    def test_acquire_release_ordering(self, make_store):
        store = make_store()
        v = store.acquire("a", now=0)
        store.release(v, "a", now=1)
        ops = [r.op for r in store.audit_log()]
        assert ops == [AuditOp.ACQUIRE, AuditOp.RELEASE]
        seqs = [r.seq for r in store.audit_log()]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)

    def test_since_seq_filtering(self, make_store):
        store = make_store()
        v = store.acquire("a", now=0)
        cut = store.audit_log()[-1].seq
        store.release(v, "a", now=1)
        tail = store.audit_log(since_seq=cut)
        assert [r.op for r in tail] == [AuditOp.RELEASE]

    def test_random_trace_log_counts_state_affecting_calls(self, make_store):
        # counter oracle: one record per state-changing call plus one per
        # denied call; idempotent no-ops add nothing
        store = make_store(pool=(1024, 1054), quarantine=10.0)
        rng = random.Random(42)
        owners = [f"o{i}" for i in range(40)]
        held = {}
        users = {}
        now = 0.0
        expected_records = 0
        for _ in range(500):
            now += rng.random()
            dice = rng.random()
            owner = rng.choice(owners)
            if dice < 0.4:
                try:
                    v = store.acquire(owner, now=now)
                    if owner not in held:
                        expected_records += 1  # fresh allocation
                        held[owner] = v
                except PoolExhausted:
                    expected_records += 1
            elif dice < 0.7 and held:
                owner = rng.choice(sorted(held))
                v = held[owner]
                try:
                    store.release(v, owner, now=now)
                    expected_records += 1
                    del held[owner]
                    users.pop(v, None)
                except UsersRemain:
                    expected_records += 1
            elif dice < 0.85 and held:
                v = held[rng.choice(sorted(held))]
                u = f"u{rng.randrange(5)}"
                fresh = u not in users.get(v, set())
                store.add_user(v, u, now=now)
                users.setdefault(v, set()).add(u)
                expected_records += fresh
            elif held:
                v = held[rng.choice(sorted(held))]
                u = f"u{rng.randrange(5)}"
                present = u in users.get(v, set())
                store.remove_user(v, u, now=now)
                users.get(v, set()).discard(u)
                expected_records += present
        assert len(store.audit_log()) == expected_records

    def test_replay_of_ok_records_reproduces_state(self, make_store):
        store = make_store(pool=(1024, 1040), quarantine=5.0)
        rng = random.Random(9)
        now = 0.0
        held = {}
        for _ in range(400):
            now += rng.random()
            if rng.random() < 0.55 or not held:
                owner = f"o{rng.randrange(30)}"
                try:
                    v = store.acquire(owner, now=now)
                    held[owner] = v
                except PoolExhausted:
                    pass
            else:
                owner = rng.choice(sorted(held))
                store.release(held.pop(owner), owner, now=now)
        replay = ReplayStateMachine(store.quarantine.duration).apply_all(store.audit_log())
        assert replay.violations == []
        assert replay.matches_store(store) == []


class TestDurability:
    def test_reopen_preserves_state_and_log(self, tmp_path):
        path = str(tmp_path / "durable.db")
        store = VniStore(path, pool=(1024, 1100), quarantine=QuarantinePolicy(30))
        a = store.acquire("a", now=0)
        b = store.acquire("claim:x/c", now=0)
        store.add_user(b, "job:x/j")
        store.release(a, "a", now=5)
        log_before = store.audit_log()
        store.close()

        reopened = VniStore(path)
        try:
            assert reopened.pool == (1024, 1100)
            assert reopened.lookup_owner("claim:x/c") == b
            assert reopened.users(b) == frozenset({"job:x/j"})
            assert reopened.record(a).state is VniState.QUARANTINED
            assert reopened.record(a).released_at == 5
            assert reopened.audit_log() == log_before
        finally:
            reopened.close()

    def test_dump_contains_table_and_audit(self, make_store):
        store = make_store()
        v = store.acquire("a", now=0)
        rows = list(store.dump())
        kinds = [r["type"] for r in rows]
        assert kinds.count("vni") == 1 and kinds.count("audit") == 1
        assert rows[0]["vni"] == v and rows[0]["state"] == "allocated"
