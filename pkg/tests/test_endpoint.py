"""VNI endpoint: sync/finalize semantics and the HTTP surface."""

import json
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from slingsim.endpoint import VniEndpoint, VniEndpointServer
from slingsim.store import AuditOp, QuarantinePolicy, VniState, VniStore


class FakeClock:
    def __init__(self, start=0.0):
        self.now = start

    def __call__(self):
        return self.now


@pytest.fixture
def world(tmp_path):
    clock = FakeClock()
    store = VniStore(str(tmp_path / "vni.db"), pool=(1024, 1100),
                     quarantine=QuarantinePolicy(30), clock=clock)
    endpoint = VniEndpoint(store, clock=clock)
    yield store, endpoint, clock
    store.close()


def sync_req(kind, ns, name, annotations=None, children=()):
    return {
        "parent": {"kind": kind, "namespace": ns, "name": name,
                   "annotations": annotations or {}},
        "children": list(children),
    }


class TestSync:
    def test_per_resource_job_gets_owning_child_with_first_pool_value(self, world):
        store, endpoint, _ = world
        resp = endpoint.handle_sync(sync_req("Job", "default", "vni-test-job",
                                             {"vni": "true"}))
        assert resp["children"] == [{
            "name": "vni-test-job-vni", "namespace": "default",
            "vni": 1024, "owning": True, "claim_name": None,
        }]
        assert store.lookup_owner("job:default/vni-test-job") == 1024

    def test_claim_then_redeeming_job(self, world):
        store, endpoint, _ = world
        claim_resp = endpoint.handle_sync(sync_req("VniClaim", "vnitest", "vni-claim-test"))
        claim_vni = claim_resp["children"][0]["vni"]
        job_resp = endpoint.handle_sync(sync_req("Job", "vnitest", "vni-test-job",
                                                 {"vni": "vni-claim-test"}))
        child = job_resp["children"][0]
        assert child["owning"] is False
        assert child["claim_name"] == "vni-claim-test"
        assert child["vni"] == claim_vni
        assert store.users(claim_vni) == frozenset({"job:vnitest/vni-test-job"})

    def test_unknown_claim_fails_job(self, world):
        _, endpoint, _ = world
        resp = endpoint.handle_sync(sync_req("Job", "a", "j", {"vni": "nonexistent-claim"}))
        assert resp["children"] == []
        assert resp["status"]["error"] == "ClaimNotFound"

    def test_replay_is_idempotent(self, world):
        store, endpoint, _ = world
        req = sync_req("Job", "a", "j", {"vni": "true"})
        first = endpoint.handle_sync(req)
        log_len = len(store.audit_log())
        for _ in range(5):
            assert endpoint.handle_sync(req) == first
        # no extra state-changing records from the replays
        assert len(store.audit_log()) == log_len

    def test_missing_annotation_is_malformed(self, world):
        _, endpoint, _ = world
        resp = endpoint.handle_sync(sync_req("Job", "a", "j"))
        assert resp["status"]["error"] == "MalformedAnnotation"

    def test_pool_exhausted_surfaces_in_status(self, tmp_path):
        store = VniStore(str(tmp_path / "tiny.db"), pool=(1024, 1024))
        try:
            endpoint = VniEndpoint(store, clock=FakeClock())
            endpoint.handle_sync(sync_req("Job", "a", "first", {"vni": "true"}))
            resp = endpoint.handle_sync(sync_req("Job", "a", "second", {"vni": "true"}))
            assert resp["status"]["error"] == "PoolExhausted"
            assert resp["children"] == []
        finally:
            store.close()


class TestFinalize:
    def test_owning_job_release_quarantines(self, world):
        store, endpoint, clock = world
        endpoint.handle_sync(sync_req("Job", "a", "j", {"vni": "true"}))
        clock.now = 50.0
        resp = endpoint.handle_finalize(sync_req("Job", "a", "j", {"vni": "true"}))
        assert resp["finalized"] is True and resp["children"] == []
        rec = store.record(1024)
        assert rec.state is VniState.QUARANTINED and rec.released_at == 50.0

    def test_claim_stalls_until_users_finalize(self, world):
        store, endpoint, _ = world
        endpoint.handle_sync(sync_req("VniClaim", "ns", "c"))
        for j in ("j1", "j2"):
            endpoint.handle_sync(sync_req("Job", "ns", j, {"vni": "c"}))
        stalled = endpoint.handle_finalize(sync_req("VniClaim", "ns", "c"))
        assert stalled["finalized"] is False
        assert stalled["children"][0]["owning"] is True  # keep the CRD while stalled
        endpoint.handle_finalize(sync_req("Job", "ns", "j1", {"vni": "c"}))
        still = endpoint.handle_finalize(sync_req("VniClaim", "ns", "c"))
        assert still["finalized"] is False
        endpoint.handle_finalize(sync_req("Job", "ns", "j2", {"vni": "c"}))
        done = endpoint.handle_finalize(sync_req("VniClaim", "ns", "c"))
        assert done["finalized"] is True
        assert store.lookup_owner("claim:ns/c") is None

    def test_unknown_parent_finalizes_trivially(self, world):
        store, endpoint, _ = world
        before = len(store.audit_log())
        resp = endpoint.handle_finalize(sync_req("Job", "ns", "ghost", {"vni": "true"}))
        assert resp["finalized"] is True
        assert len(store.audit_log()) == before

    def test_finalize_is_idempotent(self, world):
        store, endpoint, _ = world
        endpoint.handle_sync(sync_req("Job", "a", "j", {"vni": "true"}))
        endpoint.handle_finalize(sync_req("Job", "a", "j", {"vni": "true"}))
        resp = endpoint.handle_finalize(sync_req("Job", "a", "j", {"vni": "true"}))
        assert resp["finalized"] is True
        releases = [r for r in store.audit_log() if r.op is AuditOp.RELEASE]
        assert len(releases) == 1


class TestHttpSurface:
    @pytest.fixture
    def server(self, world):
        _, endpoint, _ = world
        srv = VniEndpointServer(endpoint).start()
        yield srv
        srv.stop()

    def test_healthz(self, server):
        r = requests.get(f"{server.url}/healthz", timeout=5)
        assert r.status_code == 200
        assert r.text == "ok"

    def test_malformed_json_is_400(self, server):
        r = requests.post(f"{server.url}/sync", data="{not json",
                          headers={"Content-Type": "application/json"}, timeout=5)
        assert r.status_code == 400

    def test_missing_parent_is_400(self, server):
        r = requests.post(f"{server.url}/sync", json={"children": []}, timeout=5)
        assert r.status_code == 400

    def test_unknown_route_404(self, server):
        assert requests.post(f"{server.url}/other", json={}, timeout=5).status_code == 404

    def test_concurrent_syncs_for_distinct_jobs_get_distinct_vnis(self, server):
        def do(i):
            r = requests.post(f"{server.url}/sync",
                              json=sync_req("Job", "ns", f"job-{i}", {"vni": "true"}),
                              timeout=10)
            assert r.status_code == 200
            return r.json()["children"][0]["vni"]

        with ThreadPoolExecutor(max_workers=16) as pool:
            vnis = list(pool.map(do, range(75)))
        assert len(set(vnis)) == 75

    def test_replayed_sync_bodies_are_byte_identical(self, server):
        body = json.dumps(sync_req("Job", "ns", "stable", {"vni": "true"}))
        payloads = set()
        for _ in range(5):
            r = requests.post(f"{server.url}/sync", data=body,
                              headers={"Content-Type": "application/json"}, timeout=5)
            payloads.add(r.content)
        assert len(payloads) == 1
