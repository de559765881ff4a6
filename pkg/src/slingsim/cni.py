"""Chained CNI plugin managing CXI services for containers.

Wire protocol: command and identifiers arrive via environment variables
(CNI_COMMAND, CNI_CONTAINERID, CNI_NETNS, CNI_IFNAME, CNI_PATH), the
network configuration as JSON on stdin. Results go to stdout; failures
are CNI error JSON with a non-zero exit code.

Plugin-specific configuration keys (alongside the standard cniVersion /
name / type / prevResult):

    vniManagementApi  base URL of the cluster management plane
    cxiSocket         base URL of the node's CXI management socket
    stateDir          directory for the per-container state files
    podUid            pod backing this container (runtime-provided binding)

ADD resolves the pod through the management plane; pods whose parent
carries no `vni` annotation are passed through untouched. Annotated pods
get one CXI service with a NETNS member equal to the container's netns
inode and the VNI bound to the parent. The inode comes from stat() of
CNI_NETNS; paths that do not exist may encode the inode as their final
path component (simulator convention). The received prevResult is always
emitted unmodified - this plugin never rewrites interface results.

DEL removes every service recorded for the container and is idempotent.
State files survive management-plane outages, so DEL needs no API query.
"""

from __future__ import annotations

import fcntl
import json
import os
import re
import sys
import time
from contextlib import contextmanager
from typing import Any, Optional

import requests

from .fabric_api import FabricClient

SUPPORTED_VERSIONS = ["0.4.0", "1.0.0", "1.1.0"]
DEFAULT_VERSION = "1.0.0"
GRACE_PERIOD_CAP_S = 30.0

# error codes: 1-99 follow the CNI convention, 100+ are plugin-specific
ERR_INVALID_ENV = 4
ERR_INVALID_CONFIG = 7
ERR_VNI_UNAVAILABLE = 100
ERR_GRACE_PERIOD = 101
ERR_MANAGEMENT_API = 102
ERR_CXI_SOCKET = 103
ERR_NETNS_PATH = 104
ERR_CHECK_FAILED = 105


class CniError(Exception):
    def __init__(self, code: int, msg: str, details: str = "") -> None:
        super().__init__(msg)
        self.code = code
        self.msg = msg
        self.details = details


def _dumps(payload: Any) -> str:
    return json.dumps(payload, separators=(",", ":"))


def _safe_name(container_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", container_id)


def _state_path(state_dir: str, container_id: str) -> str:
    return os.path.join(state_dir, _safe_name(container_id) + ".json")


@contextmanager
def _state_lock(state_dir: str):
    os.makedirs(state_dir, exist_ok=True)
    with open(os.path.join(state_dir, ".lock"), "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _read_state(state_dir: str, container_id: str) -> Optional[dict]:
    try:
        with open(_state_path(state_dir, container_id)) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def _write_state(state_dir: str, container_id: str, state: dict) -> None:
    path = _state_path(state_dir, container_id)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(state, fh)
    os.replace(tmp, path)


def _drop_state(state_dir: str, container_id: str) -> None:
    try:
        os.unlink(_state_path(state_dir, container_id))
    except FileNotFoundError:
        pass


def netns_inode(netns_path: str) -> int:
    """Inode of the network-namespace file.

    stat() is authoritative; for simulated namespaces the path's final
    component carries the inode instead.
    """
    try:
        return os.stat(netns_path).st_ino
    except OSError:
        base = os.path.basename(netns_path.rstrip("/"))
        if base.isdigit() and int(base) > 0:
            return int(base)
        raise CniError(ERR_NETNS_PATH, f"cannot resolve netns inode from {netns_path!r}") from None


def _fetch_pod(config: dict) -> dict:
    api = config["vniManagementApi"].rstrip("/")
    uid = config["podUid"]
    try:
        r = requests.get(f"{api}/api/pods/{uid}", timeout=3.0)
    except requests.RequestException as exc:
        raise CniError(ERR_MANAGEMENT_API, "management plane unreachable", str(exc)) from None
    if r.status_code != 200:
        raise CniError(ERR_MANAGEMENT_API, f"management plane returned {r.status_code} for pod {uid}")
    return r.json()


def _prev_result(config: dict) -> Any:
    prev = config.get("prevResult")
    if prev is None:
        return {"cniVersion": config.get("cniVersion", DEFAULT_VERSION)}
    return prev


def _require_config(config: Any, keys: tuple[str, ...]) -> None:
    if not isinstance(config, dict):
        raise CniError(ERR_INVALID_CONFIG, "network config must be a JSON object")
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise CniError(ERR_INVALID_CONFIG, f"missing config keys: {', '.join(missing)}")


def cmd_version(config: Any) -> str:
    version = DEFAULT_VERSION
    if isinstance(config, dict) and config.get("cniVersion"):
        version = config["cniVersion"]
    return _dumps({"cniVersion": version, "supportedVersions": SUPPORTED_VERSIONS})


def cmd_add(env: dict, config: dict) -> str:
    container_id = env.get("CNI_CONTAINERID") or ""
    netns_path = env.get("CNI_NETNS") or ""
    if not container_id or not netns_path:
        raise CniError(ERR_INVALID_ENV, "ADD requires CNI_CONTAINERID and CNI_NETNS")
    _require_config(config, ("vniManagementApi", "cxiSocket", "stateDir", "podUid"))

    pod = _fetch_pod(config)
    annotations = pod.get("annotations") or {}
    passthrough = _dumps(_prev_result(config))
    if not annotations.get("vni"):
        # container requested no CXI capabilities: no further operations
        return passthrough

    grace = pod.get("grace_period")
    if grace is not None and float(grace) > GRACE_PERIOD_CAP_S:
        raise CniError(ERR_GRACE_PERIOD,
                       f"pod grace period {grace}s exceeds the {GRACE_PERIOD_CAP_S:.0f}s cap")
    vni = pod.get("vni")
    if vni is None:
        raise CniError(ERR_VNI_UNAVAILABLE, "no VNI bound for pod; container must fail to launch")
    node = pod.get("node")
    if not node:
        raise CniError(ERR_VNI_UNAVAILABLE, "pod has no assigned node")

    inode = netns_inode(netns_path)
    client = FabricClient(config["cxiSocket"])
    state_dir = config["stateDir"]
    with _state_lock(state_dir):
        state = _read_state(state_dir, container_id)
        if state is not None:
            try:
                live = {s["id"] for s in client.list_services(state["node"])}
            except requests.RequestException as exc:
                raise CniError(ERR_CXI_SOCKET, "CXI socket unreachable", str(exc)) from None
            if any(sid in live for sid in state["service_ids"]):
                return passthrough  # duplicate ADD: keep the existing service
        try:
            sid = client.create_service(node, "netns", inode, [int(vni)])
        except requests.RequestException as exc:
            raise CniError(ERR_CXI_SOCKET, "CXI socket unreachable", str(exc)) from None
        _write_state(state_dir, container_id, {
            "container_id": container_id,
            "node": node,
            "service_ids": [sid],
            "netns_inode": inode,
            "vni": int(vni),
        })
    return passthrough


def cmd_del(env: dict, config: dict) -> str:
    container_id = env.get("CNI_CONTAINERID") or ""
    if not container_id:
        raise CniError(ERR_INVALID_ENV, "DEL requires CNI_CONTAINERID")
    _require_config(config, ("cxiSocket", "stateDir"))
    state_dir = config["stateDir"]
    client = FabricClient(config["cxiSocket"])
    with _state_lock(state_dir):
        state = _read_state(state_dir, container_id)
        if state is None:
            return ""  # repeated DEL must succeed
        last_exc: Optional[Exception] = None
        for sid in state["service_ids"]:
            for attempt in range(3):
                try:
                    client.delete_service(state["node"], sid)
                    last_exc = None
                    break
                except requests.RequestException as exc:
                    last_exc = exc
                    time.sleep(0.1)
            if last_exc is not None:
                raise CniError(ERR_CXI_SOCKET, "CXI socket unreachable during DEL", str(last_exc))
        _drop_state(state_dir, container_id)
    return ""


def cmd_check(env: dict, config: dict) -> str:
    container_id = env.get("CNI_CONTAINERID") or ""
    if not container_id:
        raise CniError(ERR_INVALID_ENV, "CHECK requires CNI_CONTAINERID")
    _require_config(config, ("vniManagementApi", "stateDir", "podUid"))
    if _read_state(config["stateDir"], container_id) is not None:
        return ""
    pod = _fetch_pod(config)
    if (pod.get("annotations") or {}).get("vni"):
        raise CniError(ERR_CHECK_FAILED, f"no CXI state recorded for container {container_id}")
    return ""


def run(env: dict, stdin_text: str) -> tuple[int, str]:
    """Execute one plugin invocation; returns (exit_code, stdout_text).

    Shared by the console binary and in-process callers (the cluster
    simulator's runtime), so both take the identical code path.
    """
    config: Any = None
    if stdin_text.strip():
        try:
            config = json.loads(stdin_text)
        except ValueError:
            err = {"cniVersion": DEFAULT_VERSION, "code": ERR_INVALID_CONFIG,
                   "msg": "network config is not valid JSON", "details": ""}
            return 1, _dumps(err)
    command = env.get("CNI_COMMAND") or ""
    try:
        if command == "VERSION":
            return 0, cmd_version(config)
        if command == "ADD":
            return 0, cmd_add(env, config or {})
        if command == "DEL":
            return 0, cmd_del(env, config or {})
        if command == "CHECK":
            return 0, cmd_check(env, config or {})
        raise CniError(ERR_INVALID_ENV, f"unsupported CNI_COMMAND {command!r}")
    except CniError as exc:
        version = DEFAULT_VERSION
        if isinstance(config, dict) and config.get("cniVersion"):
            version = config["cniVersion"]
        err = {"cniVersion": version, "code": exc.code, "msg": exc.msg, "details": exc.details}
        return 1, _dumps(err)


def main() -> None:
    code, out = run(dict(os.environ), sys.stdin.read())
    if out:
        sys.stdout.write(out + "\n")
    sys.exit(code)


if __name__ == "__main__":
    main()
