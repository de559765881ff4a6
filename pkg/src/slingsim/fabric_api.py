"""Local management socket for the fabric's CXI service registries.

The CNI plugin runs as a separate process and manages services through
this HTTP+JSON API:

    POST   /nodes/{node}/services   {"member": {"kind": "netns", "value": 123},
                                     "vnis": [1024], "max_endpoints": 4}
    DELETE /nodes/{node}/services/{id}
    GET    /nodes/{node}/services
"""

from __future__ import annotations

from typing import Any, Optional

import requests

from . import fabric as fab
from ._http import BadRequest, JsonHttpServer


def _service_doc(svc: fab.CxiService) -> dict:
    return {
        "id": svc.id,
        "node": svc.node,
        "member": {"kind": svc.member.kind.value, "value": svc.member.value},
        "vnis": sorted(svc.vnis),
        "max_endpoints": svc.max_endpoints,
        "active_endpoints": svc.active_endpoints,
    }


def _parse_member(doc: Any) -> fab.MemberSpec:
    try:
        kind = fab.MemberKind(doc["kind"])
        value = int(doc["value"])
    except (KeyError, TypeError, ValueError):
        raise BadRequest(f"bad member spec: {doc!r}") from None
    return fab.MemberSpec(kind=kind, value=value)


class FabricApiServer(JsonHttpServer):
    """Serves one Fabric's registries on a loopback socket."""

    def __init__(self, fabric: fab.Fabric, host: str = "127.0.0.1", port: int = 0) -> None:
        self.fabric = fabric
        super().__init__(self._handle, host=host, port=port)

    def _handle(self, method: str, parts: list[str], query: dict, body: Any) -> tuple[int, Any]:
        # /nodes/{node}/services[/{id}]
        if len(parts) >= 3 and parts[0] == "nodes" and parts[2] == "services":
            node = parts[1]
            try:
                if method == "GET" and len(parts) == 3:
                    return 200, {"services": [_service_doc(s) for s in self.fabric.list_services(node)]}
                if method == "POST" and len(parts) == 3:
                    if not isinstance(body, dict):
                        raise BadRequest("JSON object body required")
                    member = _parse_member(body.get("member"))
                    vnis = body.get("vnis") or []
                    maxep = body.get("max_endpoints")
                    sid = self.fabric.create_service(
                        node, member, vnis, None if maxep is None else int(maxep)
                    )
                    return 201, {"id": sid}
                if method == "DELETE" and len(parts) == 4:
                    self.fabric.delete_service(node, int(parts[3]))
                    return 200, {"deleted": int(parts[3])}
            except fab.UnknownNode as exc:
                return 404, {"error": "UnknownNode", "node": str(exc)}
            except fab.UnknownService as exc:
                return 404, {"error": "UnknownService", "service": str(exc)}
            except (fab.EmptyVniSet, fab.InvalidVni, ValueError) as exc:
                return 400, {"error": type(exc).__name__, "detail": str(exc)}
        if method == "GET" and parts == ["healthz"]:
            return 200, b"ok"
        return 404, {"error": "no such route"}


class FabricClient:
    """requests-based client used by the CNI plugin and tests."""

    def __init__(self, base_url: str, session: Optional[requests.Session] = None, timeout: float = 5.0):
        self.base = base_url.rstrip("/")
        self.http = session or requests.Session()
        self.timeout = timeout

    def create_service(
        self,
        node: str,
        member_kind: str,
        member_value: int,
        vnis: list[int],
        max_endpoints: Optional[int] = None,
    ) -> int:
        r = self.http.post(
            f"{self.base}/nodes/{node}/services",
            json={
                "member": {"kind": member_kind, "value": member_value},
                "vnis": vnis,
                "max_endpoints": max_endpoints,
            },
            timeout=self.timeout,
        )
        r.raise_for_status()
        return r.json()["id"]

    def delete_service(self, node: str, service_id: int) -> bool:
        """Returns False when the service was already gone."""
        r = self.http.delete(f"{self.base}/nodes/{node}/services/{service_id}", timeout=self.timeout)
        if r.status_code == 404:
            return False
        r.raise_for_status()
        return True

    def list_services(self, node: str) -> list[dict]:
        r = self.http.get(f"{self.base}/nodes/{node}/services", timeout=self.timeout)
        r.raise_for_status()
        return r.json()["services"]
