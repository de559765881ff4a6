"""The VNI endpoint: webhook logic between the controller and the store.

Stateless translation of /sync and /finalize calls into store
transactions, under apply semantics: the response carries the desired
child VniCrd descriptions and the controller reconciles them.

Ownership models, keyed off the parent's `vni` annotation:

  * Job annotated vni: "true"      -> the job owns a freshly acquired VNI
                                      (one owning child).
  * VniClaim parent                -> the claim owns a freshly acquired VNI.
  * Job annotated vni: <claimname> -> the job redeems the claim: it is
                                      added as a user of the claim's VNI
                                      and gets one non-owning ("virtual")
                                      child referencing it.

Domain errors (ClaimNotFound, PoolExhausted, MalformedAnnotation) are
surfaced as a status error on the parent with HTTP 200; the controller
re-syncs on its own cadence. Only malformed JSON is a 400.

Request body:  {"parent": {"kind", "namespace", "name", "annotations",
                           "deletion_requested"?, "spec"?},
                "children": [ ...observed VniCrd docs... ]}
Response body: {"children": [...], "status": {...}} plus "finalized" for
/finalize. Child docs: {"name", "namespace", "vni", "owning",
"claim_name"}. Responses are byte-stable for identical store state.
"""

from __future__ import annotations

import argparse
import time
from typing import Any, Callable, Optional

from . import store as st
from ._http import BadRequest, JsonHttpServer

ANNOTATION_KEY = "vni"
PER_RESOURCE_VALUE = "true"


def job_ref(namespace: str, name: str) -> str:
    return f"job:{namespace}/{name}"


def claim_ref(namespace: str, name: str) -> str:
    return f"claim:{namespace}/{name}"


def child_doc(parent_name: str, namespace: str, vni: int, owning: bool,
              claim_name: Optional[str] = None) -> dict:
    # child identity is deterministic: "<parent>-vni" in the parent namespace
    return {
        "name": f"{parent_name}-vni",
        "namespace": namespace,
        "vni": vni,
        "owning": owning,
        "claim_name": claim_name,
    }


class VniEndpoint:
    """The webhook handlers; all state lives in the store."""

    def __init__(self, store: st.VniStore, clock: Callable[[], float] = time.time) -> None:
        self.store = store
        self.clock = clock

    @staticmethod
    def _parent(req: Any) -> dict:
        if not isinstance(req, dict) or not isinstance(req.get("parent"), dict):
            raise BadRequest("request must carry a parent object")
        parent = req["parent"]
        for key in ("kind", "namespace", "name"):
            if not parent.get(key):
                raise BadRequest(f"parent.{key} missing")
        return parent

    def handle_sync(self, req: Any, now: Optional[float] = None) -> dict:
        parent = self._parent(req)
        now = self.clock() if now is None else now
        kind = parent["kind"]
        ns, name = parent["namespace"], parent["name"]
        annotations = parent.get("annotations") or {}

        if kind == "VniClaim":
            try:
                vni = self.store.acquire(claim_ref(ns, name), now)
            except st.PoolExhausted:
                return {"children": [], "status": {"error": "PoolExhausted"}}
            return {"children": [child_doc(name, ns, vni, owning=True)],
                    "status": {"vni": vni}}

        if kind == "Job":
            value = annotations.get(ANNOTATION_KEY)
            if not value:
                return {"children": [], "status": {"error": "MalformedAnnotation"}}
            if value == PER_RESOURCE_VALUE:
                try:
                    vni = self.store.acquire(job_ref(ns, name), now)
                except st.PoolExhausted:
                    return {"children": [], "status": {"error": "PoolExhausted"}}
                return {"children": [child_doc(name, ns, vni, owning=True)],
                        "status": {"vni": vni}}
            # any other non-empty value names a claim in the same namespace
            vni = self.store.lookup_owner(claim_ref(ns, value))
            if vni is None:
                return {"children": [],
                        "status": {"error": "ClaimNotFound", "claim": value}}
            self.store.add_user(vni, job_ref(ns, name), now)
            return {"children": [child_doc(name, ns, vni, owning=False, claim_name=value)],
                    "status": {"vni": vni, "claim": value}}

        return {"children": [], "status": {"error": "UnsupportedKind", "kind": kind}}

    def handle_finalize(self, req: Any, now: Optional[float] = None) -> dict:
        parent = self._parent(req)
        now = self.clock() if now is None else now
        kind = parent["kind"]
        ns, name = parent["namespace"], parent["name"]
        annotations = parent.get("annotations") or {}

        if kind == "VniClaim":
            ref = claim_ref(ns, name)
            vni = self.store.lookup_owner(ref)
            if vni is None:
                return {"children": [], "status": {}, "finalized": True}
            users = self.store.users(vni)
            if users:
                # deletion stalls until every redeeming job has finalized
                return {
                    "children": [child_doc(name, ns, vni, owning=True)],
                    "status": {"vni": vni, "users": len(users)},
                    "finalized": False,
                }
            self.store.release(vni, ref, now)
            return {"children": [], "status": {}, "finalized": True}

        if kind == "Job":
            value = annotations.get(ANNOTATION_KEY)
            if value == PER_RESOURCE_VALUE:
                ref = job_ref(ns, name)
                vni = self.store.lookup_owner(ref)
                if vni is not None:
                    self.store.release(vni, ref, now)
            elif value:
                vni = self.store.lookup_owner(claim_ref(ns, value))
                if vni is not None:
                    self.store.remove_user(vni, job_ref(ns, name), now)
            return {"children": [], "status": {}, "finalized": True}

        # unknown parents finalize trivially
        return {"children": [], "status": {}, "finalized": True}


class VniEndpointServer(JsonHttpServer):
    """Serves /sync, /finalize and /healthz for one endpoint instance."""

    def __init__(self, endpoint: VniEndpoint, host: str = "127.0.0.1", port: int = 0) -> None:
        self.endpoint = endpoint
        super().__init__(self._handle, host=host, port=port)

    def _handle(self, method: str, parts: list[str], query: dict, body: Any) -> tuple[int, Any]:
        if method == "GET" and parts == ["healthz"]:
            return 200, b"ok"
        if method == "POST" and parts == ["sync"]:
            return 200, self.endpoint.handle_sync(body)
        if method == "POST" and parts == ["finalize"]:
            return 200, self.endpoint.handle_finalize(body)
        return 404, {"error": "no such route"}


def serve(db: str, host: str, port: int,
          pool: tuple[int, int] = st.DEFAULT_POOL,
          quarantine_s: float = st.DEFAULT_QUARANTINE_S) -> VniEndpointServer:
    store = st.VniStore(db, pool=pool, quarantine=st.QuarantinePolicy(quarantine_s))
    server = VniEndpointServer(VniEndpoint(store), host=host, port=port)
    server.start()
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vni-endpoint",
                                     description="VNI allocation webhook service")
    parser.add_argument("--db", required=True, help="store file path")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8742)
    parser.add_argument("--pool", default=None, help="VNI pool as LO:HI (default 1024:65535)")
    parser.add_argument("--quarantine", type=float, default=st.DEFAULT_QUARANTINE_S,
                        help="reuse quarantine in seconds")
    args = parser.parse_args(argv)
    pool = st.DEFAULT_POOL
    if args.pool:
        lo, hi = args.pool.split(":")
        pool = (int(lo), int(hi))
    server = serve(args.db, args.host, args.port, pool=pool, quarantine_s=args.quarantine)
    print(f"vni-endpoint listening on {server.url} (db={args.db})")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
