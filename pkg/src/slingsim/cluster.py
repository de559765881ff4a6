"""Cluster simulator: control plane, nodes, and the reconciliation loop.

Simulates just enough of a Kubernetes deployment to exercise the VNI
stack end to end: namespaced resources (Job, VniClaim, VniCrd, Pod), a
decorator-style controller that routes annotated parents to the VNI
endpoint's /sync and /finalize webhooks and applies the desired children,
round-robin pod scheduling with a configurable control-plane admission
cost, CNI invocation on pod start and teardown, and grace-period
enforcement for straggling pods.

The reconcile step never performs network I/O while holding the cluster
lock: work is planned under the lock, webhooks and CNI invocations run
unlocked (the plugin calls back into the management API served from this
same process), and results are applied under the lock again.

Clocks are injected. Virtual mode advances time explicitly between steps
(run_until_quiescent jumps to the next pending timer); wall mode runs the
loop in a background thread against time.time().
"""

from __future__ import annotations

import json
import random
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import requests

from . import cni
from ._http import JsonHttpServer

NETNS_INODE_BASE = 4026532000


class ClusterError(Exception):
    pass


class Duplicate(ClusterError):
    pass


class NotFound(ClusterError):
    pass


class NonQuiescent(ClusterError):
    def __init__(self, max_steps: int) -> None:
        super().__init__(f"work remains after {max_steps} steps")
        self.max_steps = max_steps


class Phase(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    TERMINATING = "Terminating"
    DELETED = "Deleted"


class SimClock:
    """Monotone clock, either virtual (explicitly advanced) or wall."""

    def __init__(self, mode: str = "virtual", start: float = 0.0) -> None:
        if mode not in ("virtual", "wall"):
            raise ValueError(f"bad clock mode {mode!r}")
        self.mode = mode
        self._now = start
        self._lock = threading.Lock()

    def __call__(self) -> float:
        if self.mode == "wall":
            return time.time()
        with self._lock:
            return self._now

    def advance(self, dt: float) -> float:
        return self.advance_to(self() + dt)

    def advance_to(self, t: float) -> float:
        if self.mode == "wall":
            raise ClusterError("cannot advance a wall clock")
        with self._lock:
            if t > self._now:
                self._now = t
            return self._now


@dataclass
class ResourceObject:
    kind: str
    namespace: str
    name: str
    annotations: dict[str, str] = field(default_factory=dict)
    spec: dict = field(default_factory=dict)
    phase: Phase = Phase.PENDING
    deletion_requested: bool = False
    uid: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.kind, self.namespace, self.name)

    @property
    def ref(self) -> str:
        return f"{self.namespace}/{self.name}"


@dataclass
class AdmissionRecord:
    job_ref: str
    submitted_at: float
    started_at: Optional[float] = None
    completed_at: Optional[float] = None
    deleted_at: Optional[float] = None


@dataclass
class ClusterSummary:
    steps: int
    jobs_succeeded: int
    jobs_deleted: int
    vnis_allocated: int
    cxi_services: int
    live_objects: int


@dataclass
class ClusterConfig:
    nodes: tuple[str, ...] = ("n0", "n1")
    endpoint_url: Optional[str] = None  # None: no VNI service wired
    cxi_url: str = ""
    mgmt_url: str = ""  # filled in once the management API server is up
    state_dir: str = ""
    netns_dir: str = "/run/simnetns"
    base_admission_delay: float = 0.0  # control-plane-inherent pod start cost
    admission_jitter: float = 0.0
    admission_rate: Optional[float] = None  # pod starts per second; None = unlimited
    admission_burst: float = 5.0
    wall_mode: bool = False
    retry_backoff: float = 1.0  # wall-mode retry spacing for failed/denied webhooks
    webhook_timeout: float = 10.0
    webhook_batch_limit: int = 32  # per-step cap so syncs interleave with scheduling
    seed: int = 0
    event_log_path: Optional[str] = None


@dataclass
class _ParentCtl:
    dirty: bool = True
    finalized: bool = False
    next_retry: float = 0.0
    last_error: Optional[str] = None


@dataclass
class _PodRuntime:
    job_uid: str
    node: Optional[str] = None
    netns_inode: Optional[int] = None
    container_id: Optional[str] = None
    scheduled: bool = False
    ready_at: float = 0.0
    started_at: Optional[float] = None
    completes_at: Optional[float] = None
    term_deadline: Optional[float] = None
    cni_added: bool = False
    next_cni_retry: float = 0.0


@dataclass
class _JobRuntime:
    pods_created: bool = False
    pod_uids: list[str] = field(default_factory=list)
    live_pods: set[str] = field(default_factory=set)
    started: bool = False
    succeeded: bool = False


def _annotated(obj: ResourceObject) -> bool:
    if obj.kind == "VniClaim":
        return True
    return obj.kind == "Job" and bool(obj.annotations.get("vni"))


def _parent_owner_ref(obj: ResourceObject) -> str:
    prefix = "claim" if obj.kind == "VniClaim" else "job"
    return f"{prefix}:{obj.namespace}/{obj.name}"


class Cluster:
    """One simulated cluster. Thread-safe; see module docstring for locking."""

    def __init__(self, config: ClusterConfig, fabric=None, store=None,
                 clock: Optional[SimClock] = None) -> None:
        self.config = config
        self.fabric = fabric
        self.store = store  # introspection only (summaries); never mutated here
        self.clock = clock or SimClock("wall" if config.wall_mode else "virtual")
        self.lock = threading.RLock()
        self.objects: dict[str, ResourceObject] = {}
        self._by_key: dict[tuple[str, str, str], str] = {}
        self._ctl: dict[str, _ParentCtl] = {}
        self._pods: dict[str, _PodRuntime] = {}
        self._jobs: dict[str, _JobRuntime] = {}
        self.records: dict[str, AdmissionRecord] = {}
        self.events: list[dict] = []
        self.stats = {
            "sync_calls": 0, "finalize_calls": 0, "webhook_failures": 0,
            "cni_add_calls": 0, "cni_del_calls": 0, "cni_add_failures": 0,
        }
        self.jobs_succeeded = 0
        self.jobs_deleted = 0
        self._crds_by_parent: dict[str, set[str]] = {}
        self._webhook_cursor: Optional[str] = None
        self._uid_counter = 0
        self._netns_counter = NETNS_INODE_BASE
        self._node_rr = 0
        self._next_start_slot = self.clock()
        self._sessions = threading.local()
        self._pool: Optional[ThreadPoolExecutor] = None
        self._event_fh = open(config.event_log_path, "a") if config.event_log_path else None

    # -- infrastructure -----------------------------------------------------

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=False)
        if self._event_fh is not None:
            self._event_fh.close()
            self._event_fh = None

    def _session(self) -> requests.Session:
        s = getattr(self._sessions, "s", None)
        if s is None:
            s = requests.Session()
            self._sessions.s = s
        return s

    def _event(self, now: float, event: str, obj: ResourceObject, **extra) -> None:
        rec = {"t": now, "event": event, "kind": obj.kind, "ref": obj.ref,
               "phase": obj.phase.value, **extra}
        self.events.append(rec)
        if self._event_fh is not None:
            self._event_fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def _fresh_uid(self, kind: str) -> str:
        self._uid_counter += 1
        return f"{kind.lower()}-{self._uid_counter}"

    def _set_phase(self, now: float, obj: ResourceObject, phase: Phase) -> None:
        if obj.phase is not phase:
            obj.phase = phase
            self._event(now, "phase", obj)

    # -- public API -----------------------------------------------------------

    def submit(self, obj: ResourceObject) -> str:
        with self.lock:
            now = self.clock()
            if obj.key in self._by_key:
                raise Duplicate(f"{obj.kind} {obj.ref} already exists")
            obj.uid = obj.uid or self._fresh_uid(obj.kind)
            obj.phase = Phase.PENDING
            self.objects[obj.uid] = obj
            self._by_key[obj.key] = obj.uid
            if obj.kind == "Job":
                self._jobs[obj.uid] = _JobRuntime()
                self.records[obj.ref] = AdmissionRecord(job_ref=obj.ref, submitted_at=now)
            if _annotated(obj):
                self._ctl[obj.uid] = _ParentCtl(dirty=True)
            self._event(now, "submit", obj)
            return obj.uid

    def request_delete(self, kind: str, namespace: str, name: str) -> None:
        with self.lock:
            now = self.clock()
            uid = self._by_key.get((kind, namespace, name))
            if uid is None:
                raise NotFound(f"{kind} {namespace}/{name}")
            obj = self.objects[uid]
            if kind == "VniCrd":
                # out-of-band child deletion: drop it and let the parent re-sync
                self._remove_object(now, obj)
                parent_uid = self._parent_uid_for_crd(obj)
                if parent_uid is not None and parent_uid in self._ctl:
                    self._ctl[parent_uid].dirty = True
                return
            obj.deletion_requested = True
            self._event(now, "delete_requested", obj)
            if uid in self._ctl:
                ctl = self._ctl[uid]
                ctl.dirty = True
                ctl.next_retry = 0.0
            if obj.kind == "Job":
                for pod_uid in self._jobs[uid].live_pods:
                    pod = self.objects[pod_uid]
                    rt = self._pods[pod_uid]
                    if pod.phase is Phase.RUNNING:
                        self._set_phase(now, pod, Phase.TERMINATING)
                        rt.term_deadline = now + float(pod.spec.get("grace_period", 30.0))
                    elif rt.term_deadline is None:
                        rt.term_deadline = now  # pending/succeeded pods go right away

    def get(self, kind: str, namespace: str, name: str) -> Optional[ResourceObject]:
        with self.lock:
            uid = self._by_key.get((kind, namespace, name))
            return self.objects.get(uid) if uid else None

    def list_kind(self, kind: str) -> list[ResourceObject]:
        with self.lock:
            return [o for o in self.objects.values() if o.kind == kind]

    def controller_backlog(self) -> int:
        with self.lock:
            return sum(1 for c in self._ctl.values() if c.dirty)

    def parent_status(self, kind: str, namespace: str, name: str) -> Optional[str]:
        with self.lock:
            uid = self._by_key.get((kind, namespace, name))
            if uid is None or uid not in self._ctl:
                return None
            return self._ctl[uid].last_error

    # -- helpers used by planning/apply ----------------------------------------

    def _parent_uid_for_crd(self, crd: ResourceObject) -> Optional[str]:
        parent = crd.spec.get("parent", "")
        if ":" not in parent:
            return None
        prefix, ref = parent.split(":", 1)
        ns, _, name = ref.partition("/")
        kind = "VniClaim" if prefix == "claim" else "Job"
        return self._by_key.get((kind, ns, name))

    def _crds_of(self, parent_ref: str) -> list[ResourceObject]:
        uids = self._crds_by_parent.get(parent_ref, set())
        return sorted((self.objects[u] for u in uids if u in self.objects),
                      key=lambda c: c.name)

    def _bound_vni(self, job: ResourceObject) -> Optional[int]:
        crds = self._crds_of(_parent_owner_ref(job))
        return None if not crds else int(crds[0].spec["vni"])

    def _remove_object(self, now: float, obj: ResourceObject) -> None:
        self._set_phase(now, obj, Phase.DELETED)
        self.objects.pop(obj.uid, None)
        self._by_key.pop(obj.key, None)
        self._ctl.pop(obj.uid, None)
        if obj.kind == "VniCrd":
            parent = obj.spec.get("parent")
            if parent in self._crds_by_parent:
                self._crds_by_parent[parent].discard(obj.uid)
                if not self._crds_by_parent[parent]:
                    del self._crds_by_parent[parent]

    def _jitter(self, pod_name: str) -> float:
        if self.config.admission_jitter <= 0:
            return 0.0
        seed = zlib.crc32(f"{self.config.seed}/{pod_name}".encode())
        return random.Random(seed).uniform(0.0, self.config.admission_jitter)

    def _take_token(self, now: float) -> bool:
        """Pod-start rate limiting on a slot schedule: starts are spaced
        1/rate apart. Slots bank while pods are waiting (so long reconcile
        steps lose no capacity); idle periods bank at most `burst` slots
        (clamped in _plan_cni_adds)."""
        rate = self.config.admission_rate
        if rate is None:
            return True
        if self._next_start_slot <= now:
            self._next_start_slot += 1.0 / rate
            return True
        return False

    def _next_token_at(self, now: float) -> float:
        rate = self.config.admission_rate
        if rate is None:
            return now
        return max(self._next_start_slot, now)

    # -- webhook leg -------------------------------------------------------------

    def _plan_webhooks(self, now: float) -> list[tuple[str, str, dict]]:
        eligible = []
        for uid in sorted(self._ctl):
            ctl = self._ctl[uid]
            obj = self.objects.get(uid)
            if obj is None or not ctl.dirty or now < ctl.next_retry:
                continue
            if obj.deletion_requested and ctl.finalized:
                continue
            eligible.append(uid)
        limit = self.config.webhook_batch_limit
        if len(eligible) > limit:
            # rotate the window so no parent is starved across steps
            cursor = self._webhook_cursor
            if cursor is not None:
                eligible = [u for u in eligible if u > cursor] + \
                           [u for u in eligible if u <= cursor]
            eligible = eligible[:limit]
            self._webhook_cursor = eligible[-1]
        else:
            self._webhook_cursor = None
        plan = []
        for uid in eligible:
            obj = self.objects[uid]
            kind_of_call = "finalize" if obj.deletion_requested else "sync"
            body = {
                "parent": {
                    "kind": obj.kind,
                    "namespace": obj.namespace,
                    "name": obj.name,
                    "annotations": dict(obj.annotations),
                    "deletion_requested": obj.deletion_requested,
                    "spec": obj.spec,
                },
                "children": [self._crd_doc(c) for c in self._crds_of(_parent_owner_ref(obj))],
            }
            plan.append((uid, kind_of_call, body))
        return plan

    @staticmethod
    def _crd_doc(crd: ResourceObject) -> dict:
        return {
            "name": crd.name,
            "namespace": crd.namespace,
            "vni": crd.spec.get("vni"),
            "owning": crd.spec.get("owning"),
            "claim_name": crd.spec.get("claim_name"),
        }

    def _call_webhook(self, call: tuple[str, str, dict]) -> tuple[str, str, Optional[dict], Optional[str]]:
        uid, kind_of_call, body = call
        url = self.config.endpoint_url
        if not url:
            return uid, kind_of_call, None, "no endpoint configured"
        try:
            r = self._session().post(f"{url.rstrip('/')}/{kind_of_call}", json=body,
                                     timeout=self.config.webhook_timeout)
            if r.status_code != 200:
                return uid, kind_of_call, None, f"endpoint returned {r.status_code}"
            return uid, kind_of_call, r.json(), None
        except requests.RequestException as exc:
            return uid, kind_of_call, None, f"{type(exc).__name__}: {exc}"

    def _apply_webhook(self, now: float, uid: str, kind_of_call: str,
                       resp: Optional[dict], error: Optional[str]) -> None:
        ctl = self._ctl.get(uid)
        obj = self.objects.get(uid)
        if ctl is None or obj is None:
            return
        if kind_of_call == "sync":
            self.stats["sync_calls"] += 1
        else:
            self.stats["finalize_calls"] += 1
        if error is not None:
            self.stats["webhook_failures"] += 1
            ctl.last_error = error
            ctl.next_retry = now + (self.config.retry_backoff if self.config.wall_mode else 0.0)
            return
        status = resp.get("status") or {}
        self._apply_children(now, obj, resp.get("children") or [])
        if status.get("error"):
            ctl.last_error = status["error"]
            ctl.next_retry = now + (self.config.retry_backoff if self.config.wall_mode else 0.0)
            return
        ctl.last_error = None
        if kind_of_call == "finalize":
            if resp.get("finalized"):
                ctl.finalized = True
                ctl.dirty = False
            else:
                ctl.next_retry = now + (self.config.retry_backoff if self.config.wall_mode else 0.0)
        else:
            ctl.dirty = False

    def _apply_children(self, now: float, parent: ResourceObject, desired: list[dict]) -> None:
        parent_ref = _parent_owner_ref(parent)
        existing = {c.name: c for c in self._crds_of(parent_ref)}
        wanted = {}
        for doc in desired:
            wanted[doc["name"]] = doc
            crd = existing.get(doc["name"])
            spec = {"vni": int(doc["vni"]), "owning": bool(doc["owning"]),
                    "claim_name": doc.get("claim_name"), "parent": parent_ref}
            if crd is None:
                crd = ResourceObject(kind="VniCrd", namespace=doc["namespace"], name=doc["name"],
                                     spec=spec, phase=Phase.RUNNING)
                crd.uid = self._fresh_uid("VniCrd")
                self.objects[crd.uid] = crd
                self._by_key[crd.key] = crd.uid
                self._crds_by_parent.setdefault(parent_ref, set()).add(crd.uid)
                self._event(now, "crd_created", crd, vni=spec["vni"], owning=spec["owning"])
            elif crd.spec != spec:
                crd.spec = spec
                self._event(now, "crd_updated", crd, vni=spec["vni"])
        for name, crd in existing.items():
            if name not in wanted:
                self._remove_object(now, crd)

    # -- pod lifecycle legs ---------------------------------------------------

    def _create_pods(self, now: float) -> int:
        created = 0
        for uid, jr in list(self._jobs.items()):
            job = self.objects.get(uid)
            if job is None or jr.pods_created or job.deletion_requested:
                continue
            jr.pods_created = True
            count = int(job.spec.get("pods", 1))
            for i in range(count):
                pod = ResourceObject(
                    kind="Pod", namespace=job.namespace, name=f"{job.name}-{i}",
                    spec={
                        "job": job.ref,
                        "grace_period": float(job.spec.get("grace_period", 30.0)),
                        "command": job.spec.get("command", "echo"),
                    },
                )
                pod.uid = self._fresh_uid("Pod")
                self.objects[pod.uid] = pod
                self._by_key[pod.key] = pod.uid
                # the control-plane-inherent admission cost runs from pod
                # creation, concurrently with any VNI work on the parent
                rt = _PodRuntime(job_uid=uid)
                rt.ready_at = now + self.config.base_admission_delay + self._jitter(pod.ref)
                self._pods[pod.uid] = rt
                jr.pod_uids.append(pod.uid)
                jr.live_pods.add(pod.uid)
                self._event(now, "pod_created", pod)
                created += 1
        return created

    def _schedule_pods(self, now: float) -> int:
        scheduled = 0
        spread_used: dict[str, set[str]] = {}
        for pod_uid in sorted(self._pods):
            rt = self._pods[pod_uid]
            pod = self.objects.get(pod_uid)
            if pod is None or rt.scheduled or pod.phase is not Phase.PENDING:
                continue
            job = self.objects.get(rt.job_uid)
            if job is None or job.deletion_requested:
                continue
            if _annotated(job) and self._bound_vni(job) is None:
                continue  # launch gate: wait for the VNI CRD
            nodes = list(self.config.nodes)
            if job.spec.get("topology_spread"):
                used = spread_used.setdefault(rt.job_uid, {
                    self._pods[u].node for u in self._jobs[rt.job_uid].pod_uids
                    if self._pods[u].node
                })
                free = [n for n in nodes if n not in used]
                node = free[0] if free else nodes[self._node_rr % len(nodes)]
                used.add(node)
            else:
                node = nodes[self._node_rr % len(nodes)]
            self._node_rr += 1
            self._netns_counter += 1
            rt.node = node
            rt.netns_inode = self._netns_counter
            rt.container_id = f"ctr-{pod.uid}"
            rt.scheduled = True
            self._event(now, "pod_scheduled", pod, node=node, netns_inode=rt.netns_inode)
            scheduled += 1
        return scheduled

    def _plan_cni_adds(self, now: float) -> list[str]:
        batch = []
        candidates = 0
        for pod_uid in sorted(self._pods):
            rt = self._pods[pod_uid]
            pod = self.objects.get(pod_uid)
            if pod is None or not rt.scheduled or rt.cni_added:
                continue
            if pod.phase is not Phase.PENDING or rt.term_deadline is not None:
                continue
            job = self.objects.get(rt.job_uid)
            if job is None or job.deletion_requested:
                continue
            if now < rt.ready_at or now < rt.next_cni_retry:
                continue
            candidates += 1
            if not self._take_token(now):
                break
            batch.append(pod_uid)
        if candidates == 0 and self.config.admission_rate is not None:
            floor = now - self.config.admission_burst / self.config.admission_rate
            if self._next_start_slot < floor:
                self._next_start_slot = floor
        return batch

    def _plan_cni_dels(self, now: float) -> list[str]:
        """Pods past their teardown time. Containers that never started get
        reaped in place (CNI was never invoked for them)."""
        batch = []
        for pod_uid in sorted(self._pods):
            rt = self._pods[pod_uid]
            pod = self.objects.get(pod_uid)
            if pod is None or rt.term_deadline is None or now < rt.term_deadline:
                continue
            if rt.container_id is None:
                jr = self._jobs.get(rt.job_uid)
                if jr is not None:
                    jr.live_pods.discard(pod_uid)
                self._pods.pop(pod_uid, None)
                self._remove_object(now, pod)
                continue
            batch.append(pod_uid)
        return batch

    def _cni_env_config(self, command: str, pod: ResourceObject, rt: _PodRuntime) -> tuple[dict, str]:
        env = {
            "CNI_COMMAND": command,
            "CNI_CONTAINERID": rt.container_id or "",
            "CNI_NETNS": f"{self.config.netns_dir}/{rt.netns_inode}",
            "CNI_IFNAME": "eth0",
            "CNI_PATH": "/opt/cni/bin",
        }
        config = {
            "cniVersion": "1.0.0",
            "name": "slingsim-net",
            "type": "cxi-cni",
            "prevResult": {
                "cniVersion": "1.0.0",
                "interfaces": [{"name": "eth0", "sandbox": env["CNI_NETNS"]}],
            },
            "vniManagementApi": self.config.mgmt_url,
            "cxiSocket": self.config.cxi_url,
            "stateDir": self.config.state_dir,
            "podUid": pod.uid,
        }
        return env, json.dumps(config)

    def _run_cni(self, command: str, pod_uid: str) -> tuple[str, int, str]:
        with self.lock:
            pod = self.objects.get(pod_uid)
            rt = self._pods.get(pod_uid)
            if pod is None or rt is None:
                return pod_uid, -1, ""
            env, config = self._cni_env_config(command, pod, rt)
        code, out = cni.run(env, config)
        return pod_uid, code, out

    # -- the reconcile step -----------------------------------------------------

    def reconcile_step(self, now: Optional[float] = None) -> int:
        processed = 0

        with self.lock:
            t0 = self.clock() if now is None else now
            webhook_plan = self._plan_webhooks(t0)

        webhook_results = self._run_batch(self._call_webhook, webhook_plan)

        with self.lock:
            t1 = self.clock() if now is None else now
            for uid, kind_of_call, resp, error in webhook_results:
                self._apply_webhook(t1, uid, kind_of_call, resp, error)
                processed += 1
            processed += self._create_pods(t1)
            processed += self._schedule_pods(t1)
            add_plan = self._plan_cni_adds(t1)
            del_plan = self._plan_cni_dels(t1)

        add_results = self._run_batch(lambda u: self._run_cni("ADD", u), add_plan)
        del_results = self._run_batch(lambda u: self._run_cni("DEL", u), del_plan)

        with self.lock:
            t2 = self.clock() if now is None else now
            for pod_uid, code, out in add_results:
                processed += 1
                self._apply_cni_add(t2, pod_uid, code, out)
            for pod_uid, code, out in del_results:
                processed += 1
                self._apply_cni_del(t2, pod_uid, code)
            processed += self._complete_pods(t2)
            processed += self._aggregate_jobs(t2)
            processed += self._reap_parents(t2)
        return processed

    def _run_batch(self, fn: Callable, items: list) -> list:
        if not items:
            return []
        if self.config.wall_mode and len(items) > 4:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=8)
            return list(self._pool.map(fn, items))
        return [fn(i) for i in items]

    def _apply_cni_add(self, now: float, pod_uid: str, code: int, out: str) -> None:
        self.stats["cni_add_calls"] += 1
        rt = self._pods.get(pod_uid)
        pod = self.objects.get(pod_uid)
        if rt is None or pod is None:
            return
        if code != 0:
            self.stats["cni_add_failures"] += 1
            rt.next_cni_retry = now + (self.config.retry_backoff if self.config.wall_mode else 0.0)
            self._event(now, "cni_add_failed", pod, detail=out[:200])
            return
        rt.cni_added = True
        job = self.objects.get(rt.job_uid)
        if pod.phase is Phase.PENDING and rt.term_deadline is None and job is not None:
            rt.started_at = now
            rt.completes_at = now + float(job.spec.get("run_duration", 0.0))
            self._set_phase(now, pod, Phase.RUNNING)

    def _apply_cni_del(self, now: float, pod_uid: str, code: int) -> None:
        self.stats["cni_del_calls"] += 1
        rt = self._pods.get(pod_uid)
        pod = self.objects.get(pod_uid)
        if rt is None or pod is None:
            return
        if code != 0:
            rt.term_deadline = now + (self.config.retry_backoff if self.config.wall_mode else 0.0)
            self._event(now, "cni_del_failed", pod)
            return
        jr = self._jobs.get(rt.job_uid)
        if jr is not None:
            jr.live_pods.discard(pod_uid)
        self._pods.pop(pod_uid, None)
        self._remove_object(now, pod)

    def _complete_pods(self, now: float) -> int:
        n = 0
        for pod_uid in sorted(self._pods):
            rt = self._pods[pod_uid]
            pod = self.objects.get(pod_uid)
            if pod is None or rt.completes_at is None or now < rt.completes_at:
                continue
            if pod.phase is Phase.RUNNING:
                self._set_phase(now, pod, Phase.SUCCEEDED)
                rt.completes_at = None
                n += 1
            elif pod.phase is Phase.TERMINATING:
                # terminating pod finished on its own before the deadline
                rt.term_deadline = min(rt.term_deadline or now, now)
                rt.completes_at = None
                n += 1
        return n

    def _aggregate_jobs(self, now: float) -> int:
        n = 0
        for uid, jr in list(self._jobs.items()):
            job = self.objects.get(uid)
            if job is None or not jr.pods_created or not jr.pod_uids:
                continue
            live = [self.objects.get(p) for p in jr.pod_uids]
            phases = [p.phase for p in live if p is not None]
            if (not jr.started and phases
                    and all(ph is Phase.RUNNING for ph in phases)
                    and len(phases) == len(jr.pod_uids)):
                jr.started = True
                self._set_phase(now, job, Phase.RUNNING)
                rec = self.records.get(job.ref)
                if rec is not None and rec.started_at is None:
                    rec.started_at = now
                n += 1
            if (not jr.succeeded and not job.deletion_requested and phases
                    and len(phases) == len(jr.pod_uids)
                    and all(ph is Phase.SUCCEEDED for ph in phases)):
                jr.succeeded = True
                self.jobs_succeeded += 1
                self._set_phase(now, job, Phase.SUCCEEDED)
                rec = self.records.get(job.ref)
                if rec is not None and rec.completed_at is None:
                    rec.completed_at = now
                if job.spec.get("delete_after_completion"):
                    for pod_uid in jr.live_pods:
                        self._pods[pod_uid].term_deadline = now
                    job.deletion_requested = True
                    self._event(now, "delete_requested", job)
                    if uid in self._ctl:
                        self._ctl[uid].dirty = True
                        self._ctl[uid].next_retry = 0.0
                n += 1
        return n

    def _reap_parents(self, now: float) -> int:
        n = 0
        for uid in list(self.objects):
            obj = self.objects.get(uid)
            if obj is None or not obj.deletion_requested:
                continue
            if obj.kind == "Job":
                jr = self._jobs[uid]
                ctl = self._ctl.get(uid)
                if obj.phase is not Phase.TERMINATING:
                    self._set_phase(now, obj, Phase.TERMINATING)
                if jr.live_pods:
                    continue
                if ctl is not None and not ctl.finalized:
                    continue
                for crd in self._crds_of(_parent_owner_ref(obj)):
                    self._remove_object(now, crd)
                rec = self.records.get(obj.ref)
                if rec is not None and rec.deleted_at is None:
                    rec.deleted_at = now
                self.jobs_deleted += 1
                self._jobs.pop(uid, None)
                self._remove_object(now, obj)
                n += 1
            elif obj.kind == "VniClaim":
                ctl = self._ctl.get(uid)
                if obj.phase is not Phase.TERMINATING:
                    self._set_phase(now, obj, Phase.TERMINATING)
                if ctl is not None and not ctl.finalized:
                    continue
                for crd in self._crds_of(_parent_owner_ref(obj)):
                    self._remove_object(now, crd)
                self._remove_object(now, obj)
                n += 1
        return n

    # -- virtual-mode driving ----------------------------------------------------

    def _next_timer(self) -> Optional[float]:
        with self.lock:
            now = self.clock()
            times: list[float] = []
            for uid, ctl in self._ctl.items():
                if ctl.dirty and uid in self.objects:
                    times.append(max(now, ctl.next_retry))
            token_needed = False
            for pod_uid, rt in self._pods.items():
                pod = self.objects.get(pod_uid)
                if pod is None:
                    continue
                if rt.term_deadline is not None:
                    times.append(max(now, rt.term_deadline))
                    continue
                if rt.scheduled and not rt.cni_added and pod.phase is Phase.PENDING:
                    job = self.objects.get(rt.job_uid)
                    if job is not None and not job.deletion_requested:
                        times.append(max(now, rt.ready_at, rt.next_cni_retry))
                        token_needed = True
                if rt.completes_at is not None and pod.phase in (Phase.RUNNING, Phase.TERMINATING):
                    times.append(max(now, rt.completes_at))
            if token_needed and self.config.admission_rate is not None:
                times.append(self._next_token_at(now))
            return min(times) if times else None

    def run_until_quiescent(self, max_steps: int = 10000, step_dt: float = 0.05) -> ClusterSummary:
        """Alternate reconcile steps with virtual-clock advances until no
        work and no timers remain. Advances snap to the next pending timer
        when nothing was processed; busy steps (e.g. a stalled claim being
        re-finalized) still move time forward by step_dt so deadlines and
        run durations keep arriving."""
        if self.clock.mode != "virtual":
            raise ClusterError("run_until_quiescent drives the virtual clock")
        steps = 0
        while steps < max_steps:
            steps += 1
            processed = self.reconcile_step()
            t = self._next_timer()
            if not processed and t is None:
                return self._summary(steps)
            now = self.clock()
            if not processed:
                if t is not None and t > now:
                    self.clock.advance_to(t)
                else:
                    # work exists but nothing can make progress at this instant
                    raise NonQuiescent(max_steps)
            else:
                target = now + step_dt
                if t is not None and now < t < target:
                    target = t
                self.clock.advance_to(target)
        raise NonQuiescent(max_steps)

    def _summary(self, steps: int) -> ClusterSummary:
        with self.lock:
            return ClusterSummary(
                steps=steps,
                jobs_succeeded=self.jobs_succeeded,
                jobs_deleted=self.jobs_deleted,
                vnis_allocated=self.store.allocated_count() if self.store is not None else -1,
                cxi_services=self.fabric.service_count() if self.fabric is not None else -1,
                live_objects=len(self.objects),
            )

    def summary(self) -> ClusterSummary:
        return self._summary(0)

    # -- management API documents -------------------------------------------------

    def pod_doc(self, uid: str) -> Optional[dict]:
        with self.lock:
            pod = self.objects.get(uid)
            if pod is None or pod.kind != "Pod":
                return None
            rt = self._pods.get(uid)
            job = self.objects.get(rt.job_uid) if rt else None
            return {
                "uid": uid,
                "kind": "Pod",
                "namespace": pod.namespace,
                "name": pod.name,
                "phase": pod.phase.value,
                "node": rt.node if rt else None,
                "netns_path": f"{self.config.netns_dir}/{rt.netns_inode}" if rt and rt.netns_inode else None,
                "grace_period": pod.spec.get("grace_period"),
                "parent": job.ref if job else None,
                "annotations": dict(job.annotations) if job else {},
                "vni": self._bound_vni(job) if job else None,
            }

    def job_doc(self, namespace: str, name: str) -> Optional[dict]:
        with self.lock:
            uid = self._by_key.get(("Job", namespace, name))
            if uid is None:
                return None
            job = self.objects[uid]
            jr = self._jobs.get(uid)
            return {
                "uid": uid,
                "kind": "Job",
                "namespace": namespace,
                "name": name,
                "annotations": dict(job.annotations),
                "phase": job.phase.value,
                "deletion_requested": job.deletion_requested,
                "pods": list(jr.pod_uids) if jr else [],
                "vni": self._bound_vni(job),
            }

    def vnicrd_docs(self, owner: Optional[str] = None) -> list[dict]:
        with self.lock:
            crds = [o for o in self.objects.values() if o.kind == "VniCrd"]
            if owner is not None:
                crds = [c for c in crds if c.spec.get("parent") == owner]
            return [dict(self._crd_doc(c), parent=c.spec.get("parent")) for c in
                    sorted(crds, key=lambda c: (c.namespace, c.name))]


class ClusterApiServer(JsonHttpServer):
    """Read-only management plane: pods, jobs, and VNI CRD bindings."""

    def __init__(self, cluster: Cluster, host: str = "127.0.0.1", port: int = 0) -> None:
        self.cluster = cluster
        super().__init__(self._handle, host=host, port=port)
        cluster.config.mgmt_url = self.url

    def _handle(self, method: str, parts: list[str], query: dict, body: Any) -> tuple[int, Any]:
        if method != "GET" or not parts or parts[0] != "api":
            return 404, {"error": "no such route"}
        if len(parts) == 3 and parts[1] == "pods":
            doc = self.cluster.pod_doc(parts[2])
            return (200, doc) if doc else (404, {"error": "pod not found"})
        if len(parts) == 4 and parts[1] == "jobs":
            doc = self.cluster.job_doc(parts[2], parts[3])
            return (200, doc) if doc else (404, {"error": "job not found"})
        if len(parts) == 2 and parts[1] == "vnicrds":
            return 200, {"items": self.cluster.vnicrd_docs(query.get("owner"))}
        return 404, {"error": "no such route"}


class ClusterRunner:
    """Wall-mode loop: runs reconcile steps in a background thread."""

    def __init__(self, cluster: Cluster, idle_interval: float = 0.005) -> None:
        self.cluster = cluster
        self.idle_interval = idle_interval
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "ClusterRunner":
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            processed = self.cluster.reconcile_step()
            if processed == 0:
                self._stop.wait(self.idle_interval)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
