"""Admission-overhead experiments: ramp and spike, with and without VNIs.

Both experiments run the cluster in wall-clock mode against real HTTP
services and measure per-job admission delay (start - submit); job rows
also carry completion and deletion stamps since jobs are configured to be
deleted immediately after completion.

Ramp: batches of n jobs every second, n ramping 1..10, holding 10 for 10
batches, then 9..1 (29 batches, 200 jobs per run). Spike: all jobs
submitted at once. Results aggregate over `runs` repetitions; the
VniEnabled and VniDisabled passes replay the same seeded schedule, so
delays are directly comparable.

The VniDisabled baseline submits unannotated jobs: the full control
plane, scheduler, admission-cost model and CNI chain still run; only the
VNI path (webhooks, CXI service creation) is bypassed. A concurrent
auditor tails the store's audit log during VniEnabled runs and replays it
against the reference state machine.

The simulator's absolute delays are not the paper's measured Kubernetes
delays; only the relative overhead between modes is meaningful here.
Spike runs default to a 3 s quarantine to keep desk-scale runtime low;
store invariants are duration-parametric, so this preserves their
meaning.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .cluster import ResourceObject
from .store import ReplayStateMachine, VniStore
from .world import SimWorld

NAMESPACE = "bench"
TIMELINE_DT = 0.25


class EnvironmentDown(Exception):
    pass


@dataclass
class RampConfig:
    start: int = 1
    peak: int = 10
    step: int = 1
    sustain_batches: int = 10
    batch_interval: float = 1.0
    runs: int = 5

    def __post_init__(self) -> None:
        if self.start > self.peak or self.step < 1:
            raise ValueError("need start <= peak and step >= 1")

    def batch_sizes(self) -> list[int]:
        up = list(range(self.start, self.peak + 1, self.step))
        sustain = [self.peak] * self.sustain_batches
        down = list(range(self.peak - self.step, self.start - 1, -self.step))
        return up + sustain + down


@dataclass
class SpikeConfig:
    job_count: int = 500
    runs: int = 5

    def __post_init__(self) -> None:
        if self.job_count < 1:
            raise ValueError("job_count must be >= 1")


@dataclass
class BenchEnv:
    """Knobs of the simulated control plane shared by both modes."""

    nodes: tuple[str, ...] = ("n0", "n1")
    base_admission_delay: float = 0.5
    admission_jitter: float = 0.1
    admission_rate: float = 80.0  # pod starts per second (control-plane throughput)
    admission_burst: float = 5.0
    job_duration: float = 0.2
    grace_period: float = 5.0
    wait_timeout: float = 180.0


@dataclass
class JobTiming:
    job_ref: str
    mode: str
    run: int
    batch: int
    submit: float
    start: Optional[float]
    complete: Optional[float]
    delete: Optional[float]


@dataclass
class RunSummary:
    mode: str
    runs: int
    jobs: list[JobTiming]
    per_batch_delay: list[dict]  # {"batch", "mean", "p10", "p90"}
    overall: dict  # {"median", "p10", "p90", "count"}
    active_jobs_timeline: list[dict]  # {"run", "t", "active"}
    audit: list[dict] = field(default_factory=list)  # one entry per run (vni mode)
    stats: list[dict] = field(default_factory=list)  # per-run cluster counters


def percentile(values: list[float], p: float) -> float:
    """Nearest-rank percentile; values need not be sorted."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def _stats(delays: list[float]) -> dict:
    return {
        "median": percentile(delays, 50),
        "p10": percentile(delays, 10),
        "p90": percentile(delays, 90),
        "count": len(delays),
    }


def overhead_ratio(vni: RunSummary, novni: RunSummary) -> float:
    base = novni.overall["median"]
    return (vni.overall["median"] - base) / base


class StoreAuditor(threading.Thread):
    """Tails the audit log during a run and replays it concurrently."""

    def __init__(self, store: VniStore, poll: float = 0.1) -> None:
        super().__init__(daemon=True)
        self.store = store
        self.poll = poll
        self.replay = ReplayStateMachine(store.quarantine.duration)
        self._since = 0
        self._done = threading.Event()

    def _drain(self) -> None:
        for rec in self.store.audit_log(self._since):
            self.replay.apply(rec)
            self._since = rec.seq

    def run(self) -> None:
        while not self._done.is_set():
            self._drain()
            self._done.wait(self.poll)

    def finish(self) -> "StoreAuditor":
        self._done.set()
        self.join(timeout=10)
        self._drain()
        return self


def _check_environment(world: SimWorld) -> None:
    urls = [f"{world.fabric_server.url}/healthz", f"{world.mgmt_server.url}/api/vnicrds"]
    if world.endpoint_server is not None:
        urls.append(f"{world.endpoint_server.url}/healthz")
    for url in urls:
        try:
            r = requests.get(url, timeout=3)
        except requests.RequestException as exc:
            raise EnvironmentDown(f"{url}: {exc}") from None
        if r.status_code != 200:
            raise EnvironmentDown(f"{url}: HTTP {r.status_code}")


def _job(name: str, mode: str, env: BenchEnv) -> ResourceObject:
    annotations = {"vni": "true"} if mode == "vni" else {}
    return ResourceObject(
        kind="Job", namespace=NAMESPACE, name=name, annotations=annotations,
        spec={
            "pods": 1,
            "command": "echo done",
            "run_duration": env.job_duration,
            "grace_period": env.grace_period,
            "delete_after_completion": True,
        },
    )


def _wait_all_deleted(world: SimWorld, expected: int, timeout: float) -> None:
    deadline = time.time() + timeout
    while time.time() < deadline:
        with world.cluster.lock:
            records = list(world.cluster.records.values())
        if len(records) >= expected and all(r.deleted_at is not None for r in records):
            return
        time.sleep(0.05)
    pending = [r.job_ref for r in records if r.deleted_at is None]
    raise EnvironmentDown(f"{len(pending)} jobs never finished (first: {pending[:5]})")


def _timeline(records: list, run: int, t0: float) -> list[dict]:
    """Sample the count of actively Running jobs on a fixed grid."""
    spans = [(r.started_at, r.completed_at) for r in records
             if r.started_at is not None and r.completed_at is not None]
    if not spans:
        return []
    end = max(s[1] for s in spans) - t0
    out = []
    steps = int(end / TIMELINE_DT) + 2
    for i in range(steps):
        t = i * TIMELINE_DT
        active = sum(1 for s, c in spans if s - t0 <= t < c - t0)
        out.append({"run": run, "t": round(t, 6), "active": active})
    return out


def _one_run(mode: str, run: int, batches: list[tuple[int, float, int]], env: BenchEnv,
             seed: int, quarantine_s: float) -> tuple[list[JobTiming], list[dict], Optional[dict]]:
    """Execute one run. batches: list of (batch_no, offset_s, size)."""
    world = SimWorld(
        nodes=env.nodes,
        mode="wall",
        vni_service=(mode == "vni"),
        quarantine_s=quarantine_s,
        base_admission_delay=env.base_admission_delay,
        admission_jitter=env.admission_jitter,
        admission_rate=env.admission_rate,
        admission_burst=env.admission_burst,
        seed=seed,
    )
    try:
        _check_environment(world)
        auditor = StoreAuditor(world.store) if mode == "vni" else None
        if auditor is not None:
            auditor.start()
        world.start_runner()
        batch_of: dict[str, int] = {}
        total = sum(size for _, _, size in batches)
        t0 = time.time()
        for batch_no, offset, size in batches:
            delay = t0 + offset - time.time()
            if delay > 0:
                time.sleep(delay)
            for i in range(size):
                name = f"r{run:02d}-b{batch_no:02d}-j{i:03d}"
                world.cluster.submit(_job(name, mode, env))
                batch_of[f"{NAMESPACE}/{name}"] = batch_no
        _wait_all_deleted(world, total, env.wait_timeout + batches[-1][1])
        with world.cluster.lock:
            records = sorted(world.cluster.records.values(), key=lambda r: r.job_ref)
        timings = [
            JobTiming(job_ref=r.job_ref, mode=mode, run=run, batch=batch_of[r.job_ref],
                      submit=r.submitted_at, start=r.started_at,
                      complete=r.completed_at, delete=r.deleted_at)
            for r in records
        ]
        timeline = _timeline(records, run, t0)
        audit_info = None
        if auditor is not None:
            auditor.finish()
            log = world.store.audit_log()
            audit_info = {
                "run": run,
                "acquire_ok": sum(1 for r in log if r.ok and r.op.value == "Acquire"),
                "release_ok": sum(1 for r in log if r.ok and r.op.value == "Release"),
                "violations": list(auditor.replay.violations),
                "replay_diffs": auditor.replay.matches_store(world.store),
                "allocated_at_end": world.store.allocated_count(),
            }
        run_stats = {"run": run, **world.cluster.stats}
        return timings, timeline, audit_info, run_stats
    finally:
        world.close()


def _aggregate(mode: str, runs: int, all_timings: list[JobTiming],
               all_timeline: list[dict], audits: list[dict],
               stats: list[dict]) -> RunSummary:
    delays = [t.start - t.submit for t in all_timings if t.start is not None]
    batches = sorted({t.batch for t in all_timings})
    per_batch = []
    for b in batches:
        bd = [t.start - t.submit for t in all_timings if t.batch == b and t.start is not None]
        per_batch.append({
            "batch": b,
            "mean": sum(bd) / len(bd),
            "p10": percentile(bd, 10),
            "p90": percentile(bd, 90),
        })
    return RunSummary(
        mode=mode, runs=runs, jobs=all_timings, per_batch_delay=per_batch,
        overall=_stats(delays), active_jobs_timeline=all_timeline, audit=audits,
        stats=stats,
    )


def _run_experiment(batches: list[tuple[int, float, int]], runs: int, mode: str,
                    env: BenchEnv, seed: int, quarantine_s: float) -> RunSummary:
    timings: list[JobTiming] = []
    timeline: list[dict] = []
    audits: list[dict] = []
    stats: list[dict] = []
    for run in range(runs):
        t, tl, audit, run_stats = _one_run(mode, run, batches, env,
                                           seed * 1000 + run, quarantine_s)
        timings.extend(t)
        timeline.extend(tl)
        stats.append(run_stats)
        if audit is not None:
            audits.append(audit)
    return _aggregate(mode, runs, timings, timeline, audits, stats)


def run_ramp(cfg: RampConfig, mode: str, env: Optional[BenchEnv] = None,
             seed: int = 0, quarantine_s: float = 30.0) -> RunSummary:
    env = env or BenchEnv()
    batches = [(i + 1, i * cfg.batch_interval, size)
               for i, size in enumerate(cfg.batch_sizes())]
    return _run_experiment(batches, cfg.runs, mode, env, seed, quarantine_s)


def run_spike(cfg: SpikeConfig, mode: str, env: Optional[BenchEnv] = None,
              seed: int = 0, quarantine_s: float = 3.0) -> RunSummary:
    env = env or BenchEnv(job_duration=8.0)
    batches = [(1, 0.0, cfg.job_count)]
    return _run_experiment(batches, cfg.runs, mode, env, seed, quarantine_s)


# -- output files -------------------------------------------------------------

def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def emit(summaries: list[RunSummary], outdir: str) -> dict[str, str]:
    """Write jobs.csv, summary.json and timeline.csv; deterministic bytes."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "jobs": os.path.join(outdir, "jobs.csv"),
        "summary": os.path.join(outdir, "summary.json"),
        "timeline": os.path.join(outdir, "timeline.csv"),
    }
    with open(paths["jobs"], "w") as fh:
        fh.write("job_ref,mode,submit,start,complete,delete,run,batch\n")
        for s in summaries:
            for t in sorted(s.jobs, key=lambda t: (t.mode, t.run, t.batch, t.job_ref)):
                fh.write(f"{t.job_ref},{t.mode},{_fmt(t.submit)},{_fmt(t.start)},"
                         f"{_fmt(t.complete)},{_fmt(t.delete)},{t.run},{t.batch}\n")
    with open(paths["timeline"], "w") as fh:
        fh.write("mode,run,t,active\n")
        for s in summaries:
            for row in s.active_jobs_timeline:
                fh.write(f"{s.mode},{row['run']},{row['t']:.6f},{row['active']}\n")
    doc = {"experiments": []}
    by_mode = {}
    for s in summaries:
        by_mode[s.mode] = s
        doc["experiments"].append({
            "mode": s.mode,
            "runs": s.runs,
            "overall": s.overall,
            "per_batch_delay": s.per_batch_delay,
            "audit": s.audit,
            "stats": s.stats,
        })
    if "vni" in by_mode and "novni" in by_mode:
        doc["overhead"] = {
            "admission_median_ratio": overhead_ratio(by_mode["vni"], by_mode["novni"]),
        }
    with open(paths["summary"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="job-admission overhead experiments")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in ("ramp", "spike"):
        p = sub.add_parser(name)
        p.add_argument("--mode", choices=("vni", "novni", "both"), default="both")
        p.add_argument("--runs", type=int, default=5)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quarantine", type=float, default=None,
                       help="reuse quarantine seconds (default: 30 ramp, 3 spike)")
        if name == "spike":
            p.add_argument("--jobs", type=int, default=500)
    args = parser.parse_args(argv)

    modes = ["vni", "novni"] if args.mode == "both" else [args.mode]
    summaries = []
    for mode in modes:
        if args.experiment == "ramp":
            cfg = RampConfig(runs=args.runs)
            q = 30.0 if args.quarantine is None else args.quarantine
            summary = run_ramp(cfg, mode, seed=args.seed, quarantine_s=q)
        else:
            cfg = SpikeConfig(job_count=args.jobs, runs=args.runs)
            q = 3.0 if args.quarantine is None else args.quarantine
            summary = run_spike(cfg, mode, seed=args.seed, quarantine_s=q)
        summaries.append(summary)
        print(f"{args.experiment} mode={mode}: {summary.overall['count']} jobs, "
              f"median delay {summary.overall['median']:.3f}s "
              f"(p10 {summary.overall['p10']:.3f}, p90 {summary.overall['p90']:.3f})")
    paths = emit(summaries, args.out)
    if len(summaries) == 2:
        ratio = overhead_ratio(summaries[0], summaries[1])
        print(f"admission overhead (median): {ratio * 100:.2f}%")
    print(f"wrote {paths['jobs']}, {paths['summary']}, {paths['timeline']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
