"""The VNI database: transactional allocation with reuse quarantine.

Single SQLite file, serializable isolation. Every multi-step operation
(check-then-allocate, guarded release, user add/remove) runs inside one
BEGIN IMMEDIATE transaction, so concurrent callers cannot race between
the check and the write. Connections are per-thread.

State machine per VNI: free -> allocated -> quarantined -> (eligible
again once now - released_at > quarantine duration). Allocation always
picks the lowest eligible value; quarantine-expired VNIs compete equally
with free ones.

Audit policy: every state-changing operation appends an Ok record and
every denied operation appends a Denied record; idempotent no-ops
(re-acquire by the current holder, re-add of an existing user, removal
of an unknown user) succeed silently. Replaying the Ok records through
a fresh state machine reproduces the table exactly.
"""

from __future__ import annotations

import json
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Optional

DEFAULT_POOL = (1024, 0xFFFF)  # values below 1024 model the globally accessible range
DEFAULT_QUARANTINE_S = 30.0


class StoreError(Exception):
    pass


class PoolExhausted(StoreError):
    pass


class NotAllocated(StoreError):
    pass


class NotOwner(StoreError):
    pass


class UsersRemain(StoreError):
    pass


class VniState(str, Enum):
    FREE = "free"
    ALLOCATED = "allocated"
    QUARANTINED = "quarantined"


class AuditOp(str, Enum):
    ACQUIRE = "Acquire"
    RELEASE = "Release"
    ADD_USER = "AddUser"
    REMOVE_USER = "RemoveUser"


@dataclass(frozen=True)
class QuarantinePolicy:
    duration: float = DEFAULT_QUARANTINE_S

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("quarantine duration must be positive")


@dataclass(frozen=True)
class VniRecord:
    vni: int
    state: VniState
    owner: Optional[str]
    users: frozenset[str]
    released_at: Optional[float]


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    at: float
    op: AuditOp
    vni: Optional[int]
    actor: str
    ok: bool
    reason: Optional[str] = None


_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS vnis (
    vni INTEGER PRIMARY KEY,
    state TEXT NOT NULL CHECK (state IN ('free','allocated','quarantined')),
    owner TEXT,
    released_at REAL
);
CREATE INDEX IF NOT EXISTS vnis_owner ON vnis(owner) WHERE owner IS NOT NULL;
CREATE INDEX IF NOT EXISTS vnis_state_vni ON vnis(state, vni);
CREATE TABLE IF NOT EXISTS users (
    vni INTEGER NOT NULL REFERENCES vnis(vni),
    user TEXT NOT NULL,
    PRIMARY KEY (vni, user)
);
CREATE TABLE IF NOT EXISTS audit (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    at REAL NOT NULL,
    op TEXT NOT NULL,
    vni INTEGER,
    actor TEXT NOT NULL,
    ok INTEGER NOT NULL,
    reason TEXT
);
"""


class VniStore:
    """Thread-safe persistent VNI pool. All operations are linearizable."""

    def __init__(
        self,
        path: str,
        pool: tuple[int, int] = DEFAULT_POOL,
        quarantine: QuarantinePolicy = QuarantinePolicy(),
        clock: Callable[[], float] = time.time,
    ) -> None:
        if not (0 <= pool[0] <= pool[1] <= 0xFFFF):
            raise ValueError(f"bad pool range {pool}")
        self.path = path
        self.quarantine = quarantine
        self.clock = clock
        self._local = threading.local()
        self._conns: list[sqlite3.Connection] = []
        self._conns_lock = threading.Lock()
        # writers queue here instead of in SQLite's sleeping busy handler
        self._write_lock = threading.Lock()
        self._conn().executescript(_SCHEMA)
        with self._tx() as cur:
            row = cur.execute("SELECT value FROM meta WHERE key='pool'").fetchone()
            if row is None:
                cur.execute("INSERT INTO meta(key, value) VALUES ('pool', ?)", (json.dumps(pool),))
                cur.executemany(
                    "INSERT INTO vnis(vni, state) VALUES (?, 'free')",
                    ((v,) for v in range(pool[0], pool[1] + 1)),
                )
                self.pool = (pool[0], pool[1])
            else:
                stored = tuple(json.loads(row[0]))
                self.pool = (int(stored[0]), int(stored[1]))

    # -- connection / transaction plumbing ---------------------------------

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self.path, timeout=60.0, check_same_thread=False)
            conn.isolation_level = None  # explicit BEGIN/COMMIT
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            conn.execute("PRAGMA busy_timeout=60000")
            conn.execute("PRAGMA foreign_keys=ON")
            self._local.conn = conn
            with self._conns_lock:
                self._conns.append(conn)
        return conn

    @contextmanager
    def _tx(self) -> Iterator[sqlite3.Cursor]:
        conn = self._conn()
        with self._write_lock:
            cur = conn.cursor()
            cur.execute("BEGIN IMMEDIATE")
            try:
                yield cur
            except BaseException:
                conn.rollback()
                raise
            else:
                conn.commit()
            finally:
                cur.close()

    def close(self) -> None:
        with self._conns_lock:
            for conn in self._conns:
                try:
                    conn.close()
                except sqlite3.ProgrammingError:
                    pass
            self._conns.clear()
        self._local = threading.local()

    def _now(self, now: Optional[float]) -> float:
        return self.clock() if now is None else float(now)

    @staticmethod
    def _audit(cur: sqlite3.Cursor, at: float, op: AuditOp, vni: Optional[int], actor: str,
               ok: bool, reason: Optional[str] = None) -> None:
        cur.execute(
            "INSERT INTO audit(at, op, vni, actor, ok, reason) VALUES (?,?,?,?,?,?)",
            (at, op.value, vni, actor, 1 if ok else 0, reason),
        )

    # -- operations ---------------------------------------------------------

    def acquire(self, owner: str, now: Optional[float] = None) -> int:
        """Allocate the lowest eligible VNI for owner; idempotent per owner.

        Raises PoolExhausted when no VNI is free or quarantine-expired.
        """
        at = self._now(now)
        denial: Optional[StoreError] = None
        vni: Optional[int] = None
        with self._tx() as cur:
            held = cur.execute("SELECT vni FROM vnis WHERE owner=?", (owner,)).fetchone()
            if held is not None:
                return int(held["vni"])
            row = cur.execute(
                "SELECT vni FROM vnis WHERE state='free' "
                "OR (state='quarantined' AND ? - released_at > ?) "
                "ORDER BY vni LIMIT 1",
                (at, self.quarantine.duration),
            ).fetchone()
            if row is None:
                denial = PoolExhausted(f"no eligible VNI for {owner}")
                self._audit(cur, at, AuditOp.ACQUIRE, None, owner, ok=False, reason="PoolExhausted")
            else:
                vni = int(row["vni"])
                cur.execute(
                    "UPDATE vnis SET state='allocated', owner=?, released_at=NULL WHERE vni=?",
                    (owner, vni),
                )
                self._audit(cur, at, AuditOp.ACQUIRE, vni, owner, ok=True)
        if denial is not None:
            raise denial
        assert vni is not None
        return vni

    def release(self, vni: int, owner: str, now: Optional[float] = None) -> None:
        """Move an allocated VNI to quarantine. Denied while users remain."""
        at = self._now(now)
        denial: Optional[StoreError] = None
        with self._tx() as cur:
            row = cur.execute("SELECT state, owner FROM vnis WHERE vni=?", (vni,)).fetchone()
            if row is None or row["state"] != VniState.ALLOCATED.value:
                denial = NotAllocated(f"VNI {vni} is not allocated")
            elif row["owner"] != owner:
                denial = NotOwner(f"VNI {vni} is owned by {row['owner']}, not {owner}")
            else:
                n_users = cur.execute("SELECT COUNT(*) AS n FROM users WHERE vni=?", (vni,)).fetchone()["n"]
                if n_users:
                    denial = UsersRemain(f"VNI {vni} still has {n_users} user(s)")
            if denial is not None:
                self._audit(cur, at, AuditOp.RELEASE, vni, owner, ok=False,
                            reason=type(denial).__name__)
            else:
                cur.execute(
                    "UPDATE vnis SET state='quarantined', owner=NULL, released_at=? WHERE vni=?",
                    (at, vni),
                )
                self._audit(cur, at, AuditOp.RELEASE, vni, owner, ok=True)
        if denial is not None:
            raise denial

    def add_user(self, vni: int, user: str, now: Optional[float] = None) -> None:
        """Attach user to an allocated VNI; re-adding is a silent no-op."""
        at = self._now(now)
        denial: Optional[StoreError] = None
        with self._tx() as cur:
            row = cur.execute("SELECT state FROM vnis WHERE vni=?", (vni,)).fetchone()
            if row is None or row["state"] != VniState.ALLOCATED.value:
                denial = NotAllocated(f"VNI {vni} is not allocated")
                self._audit(cur, at, AuditOp.ADD_USER, vni, user, ok=False, reason="NotAllocated")
            else:
                existing = cur.execute(
                    "SELECT 1 FROM users WHERE vni=? AND user=?", (vni, user)
                ).fetchone()
                if existing is None:
                    cur.execute("INSERT INTO users(vni, user) VALUES (?,?)", (vni, user))
                    self._audit(cur, at, AuditOp.ADD_USER, vni, user, ok=True)
        if denial is not None:
            raise denial

    def remove_user(self, vni: int, user: str, now: Optional[float] = None) -> int:
        """Detach user from an allocated VNI; returns the remaining user count.

        Removing a user that was never added is a no-op.
        """
        at = self._now(now)
        denial: Optional[StoreError] = None
        remaining = 0
        with self._tx() as cur:
            row = cur.execute("SELECT state FROM vnis WHERE vni=?", (vni,)).fetchone()
            if row is None or row["state"] != VniState.ALLOCATED.value:
                denial = NotAllocated(f"VNI {vni} is not allocated")
                self._audit(cur, at, AuditOp.REMOVE_USER, vni, user, ok=False, reason="NotAllocated")
            else:
                cur.execute("DELETE FROM users WHERE vni=? AND user=?", (vni, user))
                if cur.rowcount:
                    self._audit(cur, at, AuditOp.REMOVE_USER, vni, user, ok=True)
                remaining = cur.execute(
                    "SELECT COUNT(*) AS n FROM users WHERE vni=?", (vni,)
                ).fetchone()["n"]
        if denial is not None:
            raise denial
        return remaining

    def lookup_owner(self, owner: str) -> Optional[int]:
        row = self._conn().execute("SELECT vni FROM vnis WHERE owner=?", (owner,)).fetchone()
        return None if row is None else int(row["vni"])

    def audit_log(self, since_seq: int = 0) -> list[AuditRecord]:
        rows = self._conn().execute(
            "SELECT seq, at, op, vni, actor, ok, reason FROM audit WHERE seq > ? ORDER BY seq",
            (since_seq,),
        ).fetchall()
        return [
            AuditRecord(
                seq=r["seq"], at=r["at"], op=AuditOp(r["op"]),
                vni=None if r["vni"] is None else int(r["vni"]),
                actor=r["actor"], ok=bool(r["ok"]), reason=r["reason"],
            )
            for r in rows
        ]

    # -- read-only views ------------------------------------------------------

    def users(self, vni: int) -> frozenset[str]:
        rows = self._conn().execute("SELECT user FROM users WHERE vni=?", (vni,)).fetchall()
        return frozenset(r["user"] for r in rows)

    def record(self, vni: int) -> Optional[VniRecord]:
        row = self._conn().execute(
            "SELECT vni, state, owner, released_at FROM vnis WHERE vni=?", (vni,)
        ).fetchone()
        if row is None:
            return None
        return VniRecord(
            vni=int(row["vni"]),
            state=VniState(row["state"]),
            owner=row["owner"],
            users=self.users(vni),
            released_at=row["released_at"],
        )

    def allocated(self) -> list[VniRecord]:
        rows = self._conn().execute(
            "SELECT vni FROM vnis WHERE state='allocated' ORDER BY vni"
        ).fetchall()
        return [self.record(int(r["vni"])) for r in rows]

    def allocated_count(self) -> int:
        row = self._conn().execute(
            "SELECT COUNT(*) AS n FROM vnis WHERE state='allocated'"
        ).fetchone()
        return int(row["n"])

    def counts(self) -> dict[str, int]:
        rows = self._conn().execute(
            "SELECT state, COUNT(*) AS n FROM vnis GROUP BY state"
        ).fetchall()
        out = {s.value: 0 for s in VniState}
        for r in rows:
            out[r["state"]] = int(r["n"])
        return out

    def dump(self) -> Iterator[dict]:
        """Non-free VNI rows then audit rows, as JSON-ready dicts."""
        cur = self._conn().execute(
            "SELECT vni, state, owner, released_at FROM vnis WHERE state != 'free' ORDER BY vni"
        )
        for r in cur.fetchall():
            yield {
                "type": "vni",
                "vni": int(r["vni"]),
                "state": r["state"],
                "owner": r["owner"],
                "users": sorted(self.users(int(r["vni"]))),
                "released_at": r["released_at"],
            }
        for rec in self.audit_log():
            yield {
                "type": "audit",
                "seq": rec.seq,
                "at": rec.at,
                "op": rec.op.value,
                "vni": rec.vni,
                "actor": rec.actor,
                "outcome": "ok" if rec.ok else f"denied:{rec.reason}",
            }


class ReplayStateMachine:
    """Reference state machine: replays Ok audit records into plain dicts.

    Used by tests and the bench auditor to check that the audit log alone
    reproduces the store state, and that no record violates mutual
    exclusivity or the quarantine window.
    """

    def __init__(self, quarantine_duration: float) -> None:
        self.duration = quarantine_duration
        self.owner_of: dict[int, str] = {}
        self.vni_of: dict[str, int] = {}
        self.users: dict[int, set[str]] = {}
        self.released_at: dict[int, float] = {}
        self.violations: list[str] = []

    def apply(self, rec: AuditRecord) -> None:
        if not rec.ok:
            return
        if rec.op is AuditOp.ACQUIRE:
            assert rec.vni is not None
            if rec.vni in self.owner_of:
                self.violations.append(
                    f"seq {rec.seq}: VNI {rec.vni} acquired by {rec.actor} while owned by {self.owner_of[rec.vni]}"
                )
            if rec.actor in self.vni_of:
                self.violations.append(
                    f"seq {rec.seq}: owner {rec.actor} acquired VNI {rec.vni} while holding {self.vni_of[rec.actor]}"
                )
            released = self.released_at.get(rec.vni)
            if released is not None and rec.at - released <= self.duration:
                self.violations.append(
                    f"seq {rec.seq}: VNI {rec.vni} reused {rec.at - released:.3f}s after release (quarantine {self.duration}s)"
                )
            self.owner_of[rec.vni] = rec.actor
            self.vni_of[rec.actor] = rec.vni
            self.released_at.pop(rec.vni, None)
        elif rec.op is AuditOp.RELEASE:
            assert rec.vni is not None
            if self.owner_of.get(rec.vni) != rec.actor:
                self.violations.append(f"seq {rec.seq}: release of {rec.vni} by non-owner {rec.actor}")
            self.owner_of.pop(rec.vni, None)
            self.vni_of.pop(rec.actor, None)
            self.users.pop(rec.vni, None)
            self.released_at[rec.vni] = rec.at
        elif rec.op is AuditOp.ADD_USER:
            assert rec.vni is not None
            self.users.setdefault(rec.vni, set()).add(rec.actor)
        elif rec.op is AuditOp.REMOVE_USER:
            assert rec.vni is not None
            self.users.get(rec.vni, set()).discard(rec.actor)

    def apply_all(self, records: list[AuditRecord]) -> "ReplayStateMachine":
        for rec in records:
            self.apply(rec)
        return self

    def matches_store(self, store: VniStore) -> list[str]:
        """Differences between the replayed state and the live table."""
        diffs: list[str] = []
        live = {rec.vni: rec for rec in store.allocated()}
        for vni, owner in self.owner_of.items():
            rec = live.get(vni)
            if rec is None:
                diffs.append(f"VNI {vni} allocated in replay but not in store")
            else:
                if rec.owner != owner:
                    diffs.append(f"VNI {vni} owner mismatch: replay {owner}, store {rec.owner}")
                if rec.users != frozenset(self.users.get(vni, set())):
                    diffs.append(f"VNI {vni} user set mismatch")
        for vni in live:
            if vni not in self.owner_of:
                diffs.append(f"VNI {vni} allocated in store but not in replay")
        return diffs
