"""Simulated CXI NIC driver and Slingshot fabric.

A Fabric models the RDMA side of a cluster: one CXI service registry per
node, endpoint allocation guarded by member authentication, and a switch
that only delivers traffic between endpoints on the same VNI. Registry
operations are atomic per fabric; transmit observes a consistent snapshot.

VNIs are unsigned 16-bit values. Values below 1024 are conventionally the
globally accessible range; the fabric itself enforces only the 16-bit
bound (pool policy lives in the VNI store).
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

VNI_MAX = 0xFFFF


class FabricError(Exception):
    pass


class UnknownNode(FabricError):
    pass


class UnknownService(FabricError):
    pass


class EmptyVniSet(FabricError):
    pass


class InvalidVni(FabricError):
    pass


class PermissionDenied(FabricError):
    """No service on the node authorizes this context for the VNI."""


class EndpointQuotaExceeded(FabricError):
    pass


class MemberKind(str, Enum):
    UID = "uid"
    GID = "gid"
    NETNS = "netns"


@dataclass(frozen=True)
class MemberSpec:
    """The single identity a CXI service authenticates against.

    NETNS values are network-namespace inode numbers: opaque identifiers
    with no arithmetic meaning.
    """

    kind: MemberKind
    value: int

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError("member value must be unsigned")

    def matches(self, ctx: "ProcessContext") -> bool:
        if self.kind is MemberKind.UID:
            return ctx.uid == self.value
        if self.kind is MemberKind.GID:
            return ctx.gid == self.value
        return ctx.netns_inode == self.value


@dataclass(frozen=True)
class ProcessContext:
    """Credentials of a process requesting an RDMA endpoint.

    uid and gid are whatever the process claims inside its container; the
    netns inode is assigned by the kernel and is the only field a tenant
    cannot forge.
    """

    uid: int
    gid: int
    netns_inode: int

    def __post_init__(self) -> None:
        if self.netns_inode <= 0:
            raise ValueError("netns inode 0 is invalid")
        if self.uid < 0 or self.gid < 0:
            raise ValueError("uid/gid must be unsigned")


@dataclass
class CxiService:
    """Per-node access-control entry binding one member to a VNI set."""

    id: int
    node: str
    member: MemberSpec
    vnis: frozenset[int]
    max_endpoints: Optional[int] = None
    active_endpoints: int = 0


@dataclass(frozen=True)
class EndpointHandle:
    """Handle returned by alloc_endpoint; the only token needed to transmit."""

    node: str
    endpoint_id: int
    vni: int
    service_id: int


class DropReason(str, Enum):
    VNI_MISMATCH = "VniMismatch"
    NO_SERVICE = "NoService"
    DEAD_ENDPOINT = "DeadEndpoint"


@dataclass(frozen=True)
class TransmitResult:
    delivered: bool
    reason: Optional[DropReason] = None


def Delivered() -> TransmitResult:
    return TransmitResult(True, None)


def Dropped(reason: DropReason) -> TransmitResult:
    return TransmitResult(False, reason)


@dataclass
class _Endpoint:
    endpoint_id: int
    vni: int
    service_id: int
    live: bool = True
    rx: deque = field(default_factory=deque)


class _Node:
    def __init__(self, name: str) -> None:
        self.name = name
        self.services: dict[int, CxiService] = {}
        self.endpoints: dict[int, _Endpoint] = {}
        # ids are monotone and never reused within a run so stale handles
        # stay detectable
        self.next_service_id = 1
        self.next_endpoint_id = 1


def _check_vnis(vnis: Iterable[int]) -> frozenset[int]:
    out = frozenset(int(v) for v in vnis)
    if not out:
        raise EmptyVniSet("a CXI service needs at least one VNI")
    for v in out:
        if not 0 <= v <= VNI_MAX:
            raise InvalidVni(f"VNI {v} outside [0, {VNI_MAX}]")
    return out


class Fabric:
    """All nodes, services and endpoints of one simulated Slingshot fabric."""

    def __init__(self, nodes: Iterable[str] = ()) -> None:
        self._lock = threading.RLock()
        self._nodes: dict[str, _Node] = {}
        for n in nodes:
            self.add_node(n)

    # -- node registry ----------------------------------------------------

    def add_node(self, name: str) -> None:
        with self._lock:
            if name not in self._nodes:
                self._nodes[name] = _Node(name)

    def nodes(self) -> list[str]:
        with self._lock:
            return sorted(self._nodes)

    def _node(self, name: str) -> _Node:
        try:
            return self._nodes[name]
        except KeyError:
            raise UnknownNode(name) from None

    # -- service registry --------------------------------------------------

    def create_service(
        self,
        node: str,
        member: MemberSpec,
        vnis: Iterable[int],
        max_endpoints: Optional[int] = None,
    ) -> int:
        vniset = _check_vnis(vnis)
        with self._lock:
            n = self._node(node)
            sid = n.next_service_id
            n.next_service_id += 1
            n.services[sid] = CxiService(
                id=sid, node=node, member=member, vnis=vniset, max_endpoints=max_endpoints
            )
            return sid

    def delete_service(self, node: str, service_id: int) -> None:
        with self._lock:
            n = self._node(node)
            if service_id not in n.services:
                raise UnknownService(f"{node}/{service_id}")
            del n.services[service_id]

    def list_services(self, node: str) -> list[CxiService]:
        with self._lock:
            n = self._node(node)
            return [replace(s) for s in sorted(n.services.values(), key=lambda s: s.id)]

    def service_count(self) -> int:
        with self._lock:
            return sum(len(n.services) for n in self._nodes.values())

    # -- endpoints ----------------------------------------------------------

    def alloc_endpoint(self, node: str, ctx: ProcessContext, vni: int) -> EndpointHandle:
        """Authenticate ctx against the node's services and allocate an endpoint.

        A service authorizes the request iff its member matches the context
        field of the member's kind and its VNI set contains the requested
        VNI. Matching services are tried in ascending id order.
        """
        with self._lock:
            n = self._node(node)
            matched = False
            for svc in sorted(n.services.values(), key=lambda s: s.id):
                if vni not in svc.vnis or not svc.member.matches(ctx):
                    continue
                matched = True
                if svc.max_endpoints is not None and svc.active_endpoints >= svc.max_endpoints:
                    continue
                eid = n.next_endpoint_id
                n.next_endpoint_id += 1
                n.endpoints[eid] = _Endpoint(endpoint_id=eid, vni=vni, service_id=svc.id)
                svc.active_endpoints += 1
                return EndpointHandle(node=node, endpoint_id=eid, vni=vni, service_id=svc.id)
            if matched:
                raise EndpointQuotaExceeded(f"all services authorizing VNI {vni} are full")
            raise PermissionDenied(f"no service on {node} authorizes {ctx} for VNI {vni}")

    def close_endpoint(self, handle: EndpointHandle) -> None:
        with self._lock:
            n = self._node(handle.node)
            ep = n.endpoints.get(handle.endpoint_id)
            if ep is None or not ep.live:
                return
            ep.live = False
            svc = n.services.get(ep.service_id)
            if svc is not None and svc.active_endpoints > 0:
                svc.active_endpoints -= 1

    def transmit(self, src: EndpointHandle, dst: EndpointHandle, payload: bytes) -> TransmitResult:
        """Deliver payload iff both endpoints are live, both authorizing
        services still exist, and the VNIs match. Never raises: every
        failure is a Dropped result."""
        with self._lock:
            for h in (src, dst):
                node = self._nodes.get(h.node)
                ep = node.endpoints.get(h.endpoint_id) if node else None
                if ep is None or not ep.live:
                    return Dropped(DropReason.DEAD_ENDPOINT)
                if ep.service_id not in node.services:
                    return Dropped(DropReason.NO_SERVICE)
            if src.vni != dst.vni:
                return Dropped(DropReason.VNI_MISMATCH)
            self._nodes[dst.node].endpoints[dst.endpoint_id].rx.append(bytes(payload))
            return Delivered()

    def recv(self, handle: EndpointHandle) -> Optional[bytes]:
        """Pop the oldest payload from the endpoint's receive queue."""
        with self._lock:
            n = self._node(handle.node)
            ep = n.endpoints.get(handle.endpoint_id)
            if ep is None or not ep.rx:
                return None
            return ep.rx.popleft()
