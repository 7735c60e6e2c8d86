"""Periodic metric sampler.

Samples come from the apiserver cache (what an operator's dashboard would
show) plus data-plane ground truth for agent health.
"""
from __future__ import annotations

from . import model

APP_NS = "default"
SERVICE = ("default", "web")


def _ready(pod) -> bool:
    st = model.status(pod)
    return bool(st.get("ready")) and st.get("phase") == "Running" and not model.is_terminating(pod)


class Monitor:
    def __init__(self, ctx, deployments: list[str]):
        self.ctx = ctx
        self.kernel = ctx.kernel
        self.cfg = ctx.cfg
        self.deployments = list(deployments)
        self.samples: list[dict] = []
        self.last_activity = 0
        self._trace_pos = 0
        self._no_leader_since: dict[str, int] = {}

    def start(self, at: int):
        self.kernel.schedule_at(at, "monitor", self._tick)

    def track(self, name: str):
        if name not in self.deployments:
            self.deployments.append(name)

    def _scan_activity(self):
        entries = self.kernel.trace.entries
        for e in entries[self._trace_pos:]:
            ch = e["channel"]
            if not ch.startswith("ToApi:"):
                continue
            if e["key"][0] == "Node" and ch.startswith("ToApi:kubelet"):
                continue
            self.last_activity = max(self.last_activity, e["time"])
        self._trace_pos = len(entries)

    def _tick(self):
        self._scan_activity()
        self.samples.append(self.sample())
        self.kernel.schedule(self.cfg.metric_period_ms, "monitor", self._tick)

    def sample(self) -> dict:
        ctx = self.ctx
        api = ctx.api
        dp = ctx.dataplane
        now = self.kernel.now
        pods = api.list("Pod")
        ready: dict[str, int] = {d: 0 for d in self.deployments}
        active: dict[str, int] = {d: 0 for d in self.deployments}
        terminating = 0
        web_ready = 0
        for p in pods:
            if model.is_terminating(p):
                terminating += 1
            if model.ns_of(p) != APP_NS:
                continue
            app = model.labels(p).get("app", "")
            if app in ready:
                if model.status(p).get("phase") not in ("Failed", "Succeeded") and not model.is_terminating(p):
                    active[app] += 1
                if _ready(p):
                    ready[app] += 1
            if _ready(p) and model.labels(p).get("tier") == "web":
                web_ready += 1
        rs_ready = {}
        for rs in api.list("ReplicaSet"):
            if model.ns_of(rs) == APP_NS:
                rs_ready[model.name_of(rs)] = model.status(rs).get("ready_replicas", 0)
        ep = api.cache.get(("Endpoints",) + SERVICE)
        addrs = model.spec(ep[0]).get("addresses", []) if ep else []
        bad_nodes = sorted({a.get("node_name", "") for a in addrs
                            if a.get("node_name") and not dp.netagent_running(a.get("node_name"))})
        roles = {}
        for comp in ctx.control_plane():
            roles[comp.name] = {"leader": comp.leader, "pending": comp.pending_work(),
                                "last_applied": api.last_applied.get(comp.sender),
                                "last_request": api.last_request.get(comp.sender)}
        return {
            "time": now,
            "ready": ready,
            "active": active,
            "rs_ready": rs_ready,
            "endpoints": len(addrs),
            "web_ready": web_ready,
            "endpoint_nodes_down": bad_nodes,
            "dns_ready": dp.dns_ready(),
            "netagent_down": sorted(dp.netagent_down),
            "store_entries": len(ctx.store.entries),
            "pod_creates": api.pod_creates,
            "terminating": terminating,
            "roles": roles,
        }
