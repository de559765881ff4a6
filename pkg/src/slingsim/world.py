"""Wires one full simulated deployment together.

A SimWorld owns a fabric (with its management socket), a VNI store and
endpoint (with the webhook server), and a cluster (with its management
API), all sharing one clock. Tests, scenario files and the bench harness
build worlds instead of repeating the plumbing.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from typing import Optional

from .cluster import Cluster, ClusterApiServer, ClusterConfig, ClusterRunner, ResourceObject, SimClock
from .endpoint import VniEndpoint, VniEndpointServer
from .fabric import Fabric
from .fabric_api import FabricApiServer
from .store import DEFAULT_POOL, QuarantinePolicy, VniStore


class SimWorld:
    def __init__(
        self,
        nodes: tuple[str, ...] = ("n0", "n1"),
        mode: str = "virtual",
        vni_service: bool = True,
        pool: tuple[int, int] = DEFAULT_POOL,
        quarantine_s: float = 30.0,
        workdir: Optional[str] = None,
        endpoint_url_override: Optional[str] = None,
        **cluster_overrides,
    ) -> None:
        self._own_workdir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="slingsim-")
        os.makedirs(self.workdir, exist_ok=True)
        self.clock = SimClock(mode)
        self.fabric = Fabric(nodes)
        self.fabric_server = FabricApiServer(self.fabric).start()
        self.store: Optional[VniStore] = None
        self.endpoint: Optional[VniEndpoint] = None
        self.endpoint_server: Optional[VniEndpointServer] = None
        endpoint_url = None
        if vni_service:
            self.store = VniStore(
                os.path.join(self.workdir, "vni.db"),
                pool=pool,
                quarantine=QuarantinePolicy(quarantine_s),
                clock=self.clock,
            )
            self.endpoint = VniEndpoint(self.store, clock=self.clock)
            self.endpoint_server = VniEndpointServer(self.endpoint).start()
            endpoint_url = self.endpoint_server.url
        if endpoint_url_override is not None:
            endpoint_url = endpoint_url_override
        state_dir = os.path.join(self.workdir, "cni-state")
        os.makedirs(state_dir, exist_ok=True)
        config = ClusterConfig(
            nodes=tuple(nodes),
            endpoint_url=endpoint_url,
            cxi_url=self.fabric_server.url,
            state_dir=state_dir,
            wall_mode=(mode == "wall"),
            **cluster_overrides,
        )
        self.cluster = Cluster(config, fabric=self.fabric, store=self.store, clock=self.clock)
        self.mgmt_server = ClusterApiServer(self.cluster).start()
        self.runner: Optional[ClusterRunner] = None

    def start_runner(self) -> ClusterRunner:
        self.runner = ClusterRunner(self.cluster).start()
        return self.runner

    def run_virtual_until(self, t: float, step_dt: float = 0.05, max_steps: int = 200000) -> None:
        """Step the virtual world forward to time t (work permitting)."""
        for _ in range(max_steps):
            now = self.clock()
            if now >= t:
                return
            processed = self.cluster.reconcile_step()
            timer = self.cluster._next_timer()
            target = now + step_dt if processed else t
            if timer is not None and now < timer < target:
                target = timer
            self.clock.advance_to(min(target, t))
        raise RuntimeError(f"no quiescence while advancing to t={t}")

    def close(self) -> None:
        if self.runner is not None:
            self.runner.stop()
        self.mgmt_server.stop()
        if self.endpoint_server is not None:
            self.endpoint_server.stop()
        self.fabric_server.stop()
        self.cluster.close()
        if self.store is not None:
            self.store.close()
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> "SimWorld":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _obj_from_doc(doc: dict) -> ResourceObject:
    return ResourceObject(
        kind=doc["kind"],
        namespace=doc["namespace"],
        name=doc["name"],
        annotations=dict(doc.get("annotations") or {}),
        spec=dict(doc.get("spec") or {}),
    )


def run_scenario(scenario: dict, workdir: Optional[str] = None):
    """Execute a scenario document against a fresh virtual world.

    Scenario schema:
        {"nodes": [...], "pool": [lo, hi], "quarantine": seconds,
         "events": [{"at": t, "submit": {resource doc}} |
                    {"at": t, "delete": {"kind","namespace","name"}}],
         "max_steps": n}

    Returns (ClusterSummary, SimWorld-stats dict).
    """
    world = SimWorld(
        nodes=tuple(scenario.get("nodes") or ("n0", "n1")),
        mode="virtual",
        pool=tuple(scenario.get("pool") or DEFAULT_POOL),
        quarantine_s=float(scenario.get("quarantine", 30.0)),
        workdir=workdir,
    )
    try:
        events = sorted(scenario.get("events") or [], key=lambda e: e.get("at", 0.0))
        for event in events:
            world.run_virtual_until(float(event.get("at", 0.0)))
            if "submit" in event:
                world.cluster.submit(_obj_from_doc(event["submit"]))
            elif "delete" in event:
                target = event["delete"]
                world.cluster.request_delete(target["kind"], target["namespace"], target["name"])
        summary = world.cluster.run_until_quiescent(int(scenario.get("max_steps", 20000)))
        return summary, dict(world.cluster.stats)
    finally:
        world.close()


def run_scenario_file(path: str, workdir: Optional[str] = None):
    with open(path) as fh:
        return run_scenario(json.load(fh), workdir=workdir)
