"""CXI fabric simulator: registries, authentication, VNI enforcement."""

import random

import pytest

from slingsim.fabric import (
    DropReason,
    EmptyVniSet,
    EndpointQuotaExceeded,
    Fabric,
    MemberKind,
    MemberSpec,
    PermissionDenied,
    ProcessContext,
    UnknownNode,
    UnknownService,
)


def ctx(uid=0, gid=0, netns=1):
    return ProcessContext(uid=uid, gid=gid, netns_inode=netns)


def netns_member(value):
    return MemberSpec(kind=MemberKind.NETNS, value=value)


class TestServiceRegistry:
    def test_first_service_on_empty_registry_gets_first_id(self):
        fabric = Fabric(["n0"])
        sid = fabric.create_service("n0", netns_member(4026531840), {1024})
        assert sid == 1

    def test_empty_vni_set_rejected(self):
        fabric = Fabric(["n0"])
        with pytest.raises(EmptyVniSet):
            fabric.create_service("n0", MemberSpec(MemberKind.UID, 1000), set())

    def test_two_creates_yield_distinct_retrievable_ids(self):
        fabric = Fabric(["n0"])
        ids = []
        for vni in (2000, 2001):
            ids.append(fabric.create_service("n0", netns_member(5), {vni}))
            # oracle: linear scan of the registry after each call
            assert sorted(s.id for s in fabric.list_services("n0")) == sorted(ids)
        assert len(set(ids)) == 2

    def test_delete_removes_from_listing(self):
        fabric = Fabric(["n0"])
        sid = fabric.create_service("n0", netns_member(5), {2000})
        fabric.delete_service("n0", sid)
        assert [s.id for s in fabric.list_services("n0")] == []

    def test_delete_unknown_service(self):
        fabric = Fabric(["n0"])
        with pytest.raises(UnknownService):
            fabric.delete_service("n0", 99)

    def test_unknown_node(self):
        fabric = Fabric(["n0"])
        with pytest.raises(UnknownNode):
            fabric.list_services("nope")
        with pytest.raises(UnknownNode):
            fabric.create_service("nope", netns_member(5), {2000})

    def test_listing_fresh_node_is_empty(self):
        fabric = Fabric(["n0"])
        assert fabric.list_services("n0") == []

    def test_listing_after_three_creates_one_delete(self):
        fabric = Fabric(["n0"])
        ids = [fabric.create_service("n0", netns_member(i), {2000 + i}) for i in range(3)]
        fabric.delete_service("n0", ids[1])
        assert len(fabric.list_services("n0")) == 2

    def test_random_trace_matches_shadow_set(self):
        # oracle: shadow set maintained alongside a 100-op random trace
        rng = random.Random(7)
        fabric = Fabric(["n0"])
        shadow = set()
        for _ in range(100):
            if shadow and rng.random() < 0.4:
                sid = rng.choice(sorted(shadow))
                fabric.delete_service("n0", sid)
                shadow.discard(sid)
            else:
                sid = fabric.create_service("n0", netns_member(rng.randrange(1, 50)),
                                            {rng.randrange(1024, 2048)})
                shadow.add(sid)
            assert {s.id for s in fabric.list_services("n0")} == shadow

    def test_service_ids_never_reused(self):
        fabric = Fabric(["n0"])
        a = fabric.create_service("n0", netns_member(1), {2000})
        fabric.delete_service("n0", a)
        b = fabric.create_service("n0", netns_member(1), {2000})
        assert b != a


class TestEndpointAuthentication:
    def test_netns_match_allocates(self):
        fabric = Fabric(["n0"])
        fabric.create_service("n0", netns_member(500), {2000})
        handle = fabric.alloc_endpoint("n0", ctx(uid=0, gid=0, netns=500), 2000)
        assert handle.vni == 2000

    def test_wrong_netns_denied_despite_matching_uid_gid(self):
        # uid/gid are freely forgeable inside a container; only the netns
        # inode is trusted, so a wrong inode must fail
        fabric = Fabric(["n0"])
        fabric.create_service("n0", netns_member(500), {2000})
        with pytest.raises(PermissionDenied):
            fabric.alloc_endpoint("n0", ctx(uid=0, gid=0, netns=501), 2000)

    def test_authentication_matrix_against_reference_predicate(self):
        # brute force over all 24 combinations: 3 member kinds x 8 contexts,
        # one VNI per service kind
        fabric = Fabric(["n0"])
        fabric.create_service("n0", MemberSpec(MemberKind.UID, 7), {10})
        fabric.create_service("n0", MemberSpec(MemberKind.GID, 7), {11})
        fabric.create_service("n0", MemberSpec(MemberKind.NETNS, 7), {12})

        def reference_allows(c, vni):
            if vni == 10:
                return c.uid == 7
            if vni == 11:
                return c.gid == 7
            if vni == 12:
                return c.netns_inode == 7
            return False

        successes = 0
        for uid in (7, 8):
            for gid in (7, 8):
                for netns in (7, 8):
                    for vni in (10, 11, 12):
                        c = ctx(uid=uid, gid=gid, netns=netns)
                        try:
                            handle = fabric.alloc_endpoint("n0", c, vni)
                            allowed = True
                            assert handle.vni == vni
                        except PermissionDenied:
                            allowed = False
                        assert allowed == reference_allows(c, vni), (c, vni)
                        successes += allowed
        assert successes == 12

    def test_credential_immunity_for_netns_services(self):
        # mutating uid/gid arbitrarily never changes the outcome against a
        # NETNS-kind service
        fabric = Fabric(["n0"])
        fabric.create_service("n0", netns_member(42), {2000})
        rng = random.Random(3)
        for _ in range(50):
            uid, gid = rng.randrange(0, 2**32), rng.randrange(0, 2**32)
            assert fabric.alloc_endpoint("n0", ctx(uid, gid, 42), 2000).vni == 2000
            with pytest.raises(PermissionDenied):
                fabric.alloc_endpoint("n0", ctx(uid, gid, 43), 2000)

    def test_endpoint_quota(self):
        fabric = Fabric(["n0"])
        fabric.create_service("n0", netns_member(5), {2000}, max_endpoints=2)
        fabric.alloc_endpoint("n0", ctx(netns=5), 2000)
        fabric.alloc_endpoint("n0", ctx(netns=5), 2000)
        with pytest.raises(EndpointQuotaExceeded):
            fabric.alloc_endpoint("n0", ctx(netns=5), 2000)

    def test_closing_endpoint_frees_quota(self):
        fabric = Fabric(["n0"])
        fabric.create_service("n0", netns_member(5), {2000}, max_endpoints=1)
        h = fabric.alloc_endpoint("n0", ctx(netns=5), 2000)
        fabric.close_endpoint(h)
        assert fabric.alloc_endpoint("n0", ctx(netns=5), 2000).endpoint_id != h.endpoint_id

    def test_invalid_process_context(self):
        with pytest.raises(ValueError):
            ProcessContext(uid=0, gid=0, netns_inode=0)


class TestTransmit:
    def _pair(self, fabric, vni_a=2000, vni_b=2000):
        sa = fabric.create_service("n0", netns_member(1), {vni_a})
        sb = fabric.create_service("n1", netns_member(2), {vni_b})
        ha = fabric.alloc_endpoint("n0", ctx(netns=1), vni_a)
        hb = fabric.alloc_endpoint("n1", ctx(netns=2), vni_b)
        return sa, sb, ha, hb

    def test_same_vni_delivers_and_queues_payload(self):
        fabric = Fabric(["n0", "n1"])
        _, _, ha, hb = self._pair(fabric)
        result = fabric.transmit(ha, hb, b"hello")
        assert result.delivered
        assert fabric.recv(hb) == b"hello"

    def test_vni_mismatch_dropped(self):
        # the switch only routes within a VNI when both sides hold it
        fabric = Fabric(["n0", "n1"])
        _, _, ha, hb = self._pair(fabric, vni_a=2000, vni_b=2001)
        result = fabric.transmit(ha, hb, b"x")
        assert not result.delivered
        assert result.reason is DropReason.VNI_MISMATCH

    def test_service_deletion_invalidates_endpoints(self):
        # create, alloc endpoint, delete service, transmit -> Dropped(NoService)
        fabric = Fabric(["n0", "n1"])
        sa, _, ha, hb = self._pair(fabric)
        fabric.delete_service("n0", sa)
        result = fabric.transmit(ha, hb, b"x")
        assert result.reason is DropReason.NO_SERVICE

    def test_matrix_delivery_iff_equal_and_live(self):
        # brute-force the {src vni, dst vni} in {a,b}^2 grid under both
        # service-deletion toggles: delivered iff equal-and-live
        a, b = 2000, 2001
        for src_vni in (a, b):
            for dst_vni in (a, b):
                for kill_src in (False, True):
                    fabric = Fabric(["n0", "n1"])
                    s_src = fabric.create_service("n0", netns_member(1), {src_vni})
                    fabric.create_service("n1", netns_member(2), {dst_vni})
                    h_src = fabric.alloc_endpoint("n0", ctx(netns=1), src_vni)
                    h_dst = fabric.alloc_endpoint("n1", ctx(netns=2), dst_vni)
                    if kill_src:
                        fabric.delete_service("n0", s_src)
                    result = fabric.transmit(h_src, h_dst, b"p")
                    expect = (src_vni == dst_vni) and not kill_src
                    assert result.delivered == expect, (src_vni, dst_vni, kill_src)

    def test_dead_endpoint_reason(self):
        fabric = Fabric(["n0", "n1"])
        _, _, ha, hb = self._pair(fabric)
        fabric.close_endpoint(ha)
        assert fabric.transmit(ha, hb, b"x").reason is DropReason.DEAD_ENDPOINT

    def test_isolation_under_random_interleavings(self):
        # different-VNI endpoints are never linked by transmit, whatever the
        # interleaving of service creates and deletes around them
        rng = random.Random(11)
        fabric = Fabric(["n0", "n1"])
        fabric.create_service("n0", netns_member(1), {3000})
        fabric.create_service("n1", netns_member(2), {3001})
        ha = fabric.alloc_endpoint("n0", ctx(netns=1), 3000)
        hb = fabric.alloc_endpoint("n1", ctx(netns=2), 3001)
        extra = []
        for _ in range(200):
            action = rng.random()
            if action < 0.4:
                extra.append(fabric.create_service("n0", netns_member(rng.randrange(3, 30)),
                                                   {rng.randrange(1024, 4000)}))
            elif extra and action < 0.7:
                fabric.delete_service("n0", extra.pop(rng.randrange(len(extra))))
            assert not fabric.transmit(ha, hb, b"x").delivered
