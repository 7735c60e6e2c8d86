"""Experiment execution: fresh cluster, setup, client, arm, workload, collect."""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass

from . import model
from .cluster import Cluster, app_deployment
from .config import Config
from .injector import InjectionSpec, Injector
from .kernel import LivelockError, derive_seed

WORKLOADS = ("deploy", "scale", "failover")
FAILED_NODE = "worker-1"
FAILURE_TAINT = {"key": "node-failure", "value": "simulated", "effect": "NoExecute"}


def experiment_seed(root_seed: int, experiment_id: str) -> int:
    return derive_seed(root_seed, experiment_id) % (2**63)


def app_names(workload: str, cfg: Config) -> list[str]:
    n = cfg.scale_deployments if workload == "scale" else cfg.deploy_deployments
    return [f"app-{i}" for i in range(1, n + 1)]


@dataclass
class ExperimentRecord:
    experiment_id: str
    workload: str
    seed: int
    spec: dict | None
    outcome: dict
    samples: list
    client: list
    user_errors: list
    errors: int
    trace_digest: str
    runaway: bool
    runaway_detail: str | None
    end_time: int
    workload_start: int
    workload_done: int | None
    workload_timed_out: bool
    teardown_at: int | None
    timing: dict
    app_restarts: list
    store: dict
    scheduler: dict
    kcm: dict
    dataplane: dict
    decisions: dict
    label: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**d)


class Run:
    """One experiment on a freshly built cluster."""

    def __init__(self, workload: str, seed: int, spec: InjectionSpec | None = None,
                 cfg: Config | None = None, teardown: bool = False, experiment_id: str = "adhoc",
                 actions=(), hook=None):
        if workload not in WORKLOADS:
            raise ValueError(f"unknown workload {workload!r}")
        self.cfg = cfg or Config()
        self.workload = workload
        self.seed = seed
        self.spec = spec
        self.teardown = teardown
        self.experiment_id = experiment_id
        # extra (offset from workload start, fn(cluster)) steps, e.g. operator actions
        self.actions = list(actions)
        # called with the freshly built cluster, before boot
        self.hook = hook
        self.injector: Injector | None = None
        self.cluster: Cluster | None = None
        self.apps = app_names(workload, self.cfg)
        self.t_client = self.cfg.client_start_ms
        self.t_arm = self.t_client + self.cfg.arm_offset_ms
        self.t_work = self.t_client + self.cfg.workload_offset_ms
        self.done_at: int | None = None
        self.timed_out = False
        self.teardown_at: int | None = None
        self.stop = False
        self.runaway = False
        self.runaway_detail: str | None = None

    # -- phases ------------------------------------------------------------------

    def build(self) -> Cluster:
        c = Cluster(self.cfg, self.seed)
        inj = Injector(c.kernel, c.schema)
        c.api.injector = inj
        c.injector = inj
        self.injector = inj
        self.cluster = c
        for a in self.apps:
            c.monitor.track(a)
        if self.hook is not None:
            self.hook(c)
        return c

    def _setup(self):
        c = self.cluster
        if self.workload in ("scale", "failover"):
            for a in self.apps:
                c.user_request("create", "Deployment", app_deployment(a, self.cfg.deploy_replicas))

    def _arm(self):
        if self.spec is not None:
            self.injector.arm(self.spec)

    def _work(self):
        c = self.cluster
        cfg = self.cfg
        if self.workload == "deploy":
            for a in self.apps:
                c.user_request("create", "Deployment", app_deployment(a, cfg.deploy_replicas))
        elif self.workload == "scale":
            for i, target in enumerate(cfg.scale_targets):
                c.kernel.schedule(i * cfg.scale_step_ms, "user", functools.partial(self._scale_step, target))
        else:
            c.taint_node(FAILED_NODE, FAILURE_TAINT)
        c.kernel.schedule(cfg.workload_timeout_ms, "user", self._timeout)
        c.kernel.schedule(500, "user", self._poll)

    def _scale_step(self, target):
        for a in self.apps:
            self.cluster.scale(a, target)

    def _complete(self) -> bool:
        c = self.cluster
        if self.workload == "scale" and c.kernel.now < self.t_work + (len(self.cfg.scale_targets) - 1) * \
                self.cfg.scale_step_ms:
            return False
        if not all(c.deployment_ready(a) for a in self.apps):
            return False
        if self.workload == "scale":
            want = self.cfg.scale_targets[-1]
            for a in self.apps:
                d = c.api.cache.get(("Deployment", "default", a))
                if d is None or model.spec(d[0]).get("replicas") != want:
                    return False
        if self.workload == "failover":
            for p in c.api.list("Pod"):
                if model.ns_of(p) == "default" and model.spec(p).get("node_name") == FAILED_NODE \
                        and not model.is_terminating(p):
                    return False
        return True

    def _poll(self):
        if self.done_at is not None or self.timed_out:
            return
        if self._complete():
            self.done_at = self.cluster.kernel.now
            self._after_workload()
            return
        self.cluster.kernel.schedule(500, "user", self._poll)

    def _timeout(self):
        if self.done_at is None:
            self.timed_out = True
            self.cluster.kernel.decide("user", "workload-timeout", f"{self.workload} not complete")
            self._after_workload()

    def _after_workload(self):
        if self.teardown and self.teardown_at is None:
            self.cluster.kernel.schedule(5_000, "user", self._teardown)

    def _teardown(self):
        c = self.cluster
        self.teardown_at = c.kernel.now
        for a in self.apps:
            c.delete("Deployment", "default", a)

    def _quiet_check(self):
        c = self.cluster
        now = c.kernel.now
        c.monitor._scan_activity()
        finished = (self.done_at is not None or self.timed_out) and now >= c.client.end_time
        if self.teardown:
            finished = finished and self.teardown_at is not None
        busy = any(comp.pending_work() for comp in c.control_plane())
        if finished and not busy and now - c.monitor.last_activity >= self.cfg.quiescence_ms:
            self.stop = True
            return
        c.kernel.schedule(1_000, "monitor", self._quiet_check)

    def execute(self) -> "ExperimentRecord":
        c = self.build()
        k = c.kernel
        c.boot()
        k.schedule_at(200, "user", self._setup)
        c.client.start(self.t_client)
        k.schedule_at(self.t_arm, "injector", self._arm)
        k.schedule_at(self.t_work, "user", self._work)
        for offset, fn in self.actions:
            k.schedule_at(self.t_work + offset, "user", functools.partial(fn, c))
        k.schedule_at(self.t_work + 1_000, "monitor", self._quiet_check)
        try:
            k.run_until(self.cfg.t_max_ms, stop=lambda: self.stop)
        except LivelockError as e:
            self.runaway = True
            self.runaway_detail = str(e)
            k.decide("kernel", "livelock", str(e))
        # one final sample so rules see the end state
        if not c.monitor.samples or c.monitor.samples[-1]["time"] != k.now:
            c.monitor.samples.append(c.monitor.sample())
        return self.collect()

    # -- collection ----------------------------------------------------------------

    def _timing(self) -> dict:
        dp = self.cluster.dataplane
        w = self.t_work
        starts = [s for s in dp.app_starts if s["created"] >= w]
        worst = max((s["startup"] for s in starts), default=0)
        creations = [model.meta(p).get("creation_timestamp", 0) for p in self.cluster.api.list("Pod")
                     if model.ns_of(p) == "default"]
        created_after = [t - w for t in creations if t >= w]
        # pods already deleted still count through their start records
        created_after += [s["created"] - w for s in starts]
        return {"worst_startup_ms": worst, "last_creation_ms": max(created_after, default=0)}

    def collect(self) -> ExperimentRecord:
        c = self.cluster
        k = c.kernel
        trace = k.trace.to_jsonl()
        dec_counts: dict[str, int] = {}
        for d in k.decisions:
            a = f"{d['component'].split(':')[0]}:{d['action']}"
            dec_counts[a] = dec_counts.get(a, 0) + 1
        sched = c.scheduler
        restarts = [d["time"] for d in k.decisions
                    if d["component"] == "scheduler" and d["action"] == "restart"]
        mismatch = [d["time"] for d in k.decisions
                    if d["component"] == "scheduler" and d["action"] == "cache-mismatch"]
        out = self.injector.outcome.to_dict() if self.spec is not None else {}
        target_life = self._target_life(out)
        return ExperimentRecord(
            experiment_id=self.experiment_id,
            workload=self.workload,
            seed=self.seed,
            spec=self.spec.to_dict() if self.spec else None,
            outcome=out,
            samples=c.monitor.samples,
            client=[r.to_dict() for r in c.client.records],
            user_errors=list(c.api.user_errors),
            errors=len(c.api.errors),
            trace_digest=hashlib.sha256(trace.encode()).hexdigest(),
            runaway=self.runaway,
            runaway_detail=self.runaway_detail,
            end_time=k.now,
            workload_start=self.t_work,
            workload_done=self.done_at,
            workload_timed_out=self.timed_out,
            teardown_at=self.teardown_at,
            timing=self._timing(),
            app_restarts=list(c.dataplane.app_restarts),
            store={"entries": len(c.store.entries), "max_entries": c.store.max_entries,
                   "stalled": c.store.stalled, "purged": list(c.store.purged),
                   "pod_creates": c.api.pod_creates, "revision": c.store.revision},
            scheduler={"restarts": restarts, "cache_mismatch": mismatch, "leader_since": sched.leader_since,
                       "binds": sched.binds},
            kcm={"evictions": c.kcm.evictions, "full_disruption": c.kcm.full_disruption,
                 "restarts": c.kcm.restarts, "target_pod": target_life},
            dataplane={"dns_zero_at": list(c.dataplane.dns_zero_at),
                       "netagent_outages": [list(o) for o in c.dataplane.outages(k.now)]},
            decisions=dict(sorted(dec_counts.items())),
        )

    def _target_life(self, out: dict) -> dict:
        """Deletion / recreation times of a tampered Pod, for timing analysis."""
        tgt = out.get("target") if out else None
        if not tgt or tgt[0] != "Pod":
            return {}
        key = tgt
        deleted = None
        for e in self.cluster.kernel.trace.entries:
            if e["channel"] == "ToStore" and e["key"] == key and e["operation"] == "delete" \
                    and e["outcome"] == "applied" and e["time"] >= (out.get("fired_at") or 0):
                deleted = e["time"]
                break
        return {"key": key, "deleted_at": deleted}


def run_experiment(workload: str, seed: int, spec: InjectionSpec | None = None, cfg: Config | None = None,
                   teardown: bool = False, experiment_id: str = "adhoc", keep: bool = False, actions=()):
    """Run one experiment; with ``keep`` the live Run is returned alongside the record."""
    run = Run(workload, seed, spec, cfg, teardown, experiment_id, actions)
    rec = run.execute()
    return (rec, run) if keep else rec
