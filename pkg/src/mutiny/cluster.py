"""Fresh in-memory cluster construction and the scenario setup objects."""
from __future__ import annotations

import copy

from . import model
from .config import Config
from .dataplane import Client, DataPlane, Kubelet, Proxy
from .kernel import Kernel
from .monitor import SERVICE, Monitor
from .reconcilers import Kcm
from .scheduler import Scheduler
from .store import ApiServer, Store, UserError
from .wire import load_schema

SYSTEM_NODE = "worker-4"
SYSTEM_TAINT = {"key": "dedicated", "value": "system", "effect": "NoSchedule"}
TOLERATE_ALL = [{"operator": "Exists"}]
TOLERATE_SYSTEM = [{"key": "dedicated", "operator": "Exists"}]


def app_template(app: str) -> dict:
    c = model.container("app", "svc-app:1.0", "serve", 500, 256, 1000, 512, 8080)
    return model.pod_template({"app": app, "tier": "web"}, [c], priority=0)


def app_deployment(app: str, replicas: int) -> dict:
    return model.deployment(app, "default", replicas, app_template(app))


def system_objects(cfg: Config) -> list[tuple[str, dict]]:
    """Instances that exist before any workload: agents, DNS and the service."""
    netagent = model.daemonset("netagent", "kube-system", model.pod_template(
        {"app": "netagent"}, [model.container("agent", "netagent:1.0", "run", 100, 64)],
        priority=cfg.daemonset_priority, tolerations=TOLERATE_ALL))
    exporter = model.daemonset("node-exporter", "monitoring", model.pod_template(
        {"app": "node-exporter"}, [model.container("exporter", "node-exporter:1.0", "export", 100, 64)],
        priority=cfg.daemonset_priority, tolerations=TOLERATE_SYSTEM))
    dns = model.deployment("coredns", "kube-system", cfg.dns_replicas, model.pod_template(
        {"app": "coredns"}, [model.container("dns", "coredns:1.0", "dns", 100, 70, 200, 170, 53)],
        priority=cfg.dns_priority, tolerations=TOLERATE_SYSTEM, node_selector={"role": "system"}))
    web = model.service("web", "default", {"tier": "web"}, 80, 8080)
    return [("DaemonSet", netagent), ("DaemonSet", exporter), ("Deployment", dns), ("Service", web)]


class Cluster:
    """One control plane, ``cfg.workers`` worker nodes, the client on the last one."""

    def __init__(self, cfg: Config, seed: int, injector=None, schema=None):
        self.cfg = cfg
        self.seed = seed
        self.kernel = Kernel(seed, cfg.same_instant_cap)
        self.schema = schema or load_schema()
        self.store = Store(self.kernel, self.schema, cfg.store_capacity)
        self.injector = injector
        self.api = ApiServer(self.kernel, self.store, self.schema, injector=injector)
        self.dataplane = DataPlane(self.kernel)
        self.kcm = Kcm(self)
        self.scheduler = Scheduler(self)
        self.kubelets: dict[str, Kubelet] = {}
        for i in range(1, cfg.workers + 1):
            name = f"worker-{i}"
            system = name == SYSTEM_NODE or (i == cfg.workers and cfg.workers < 4)
            self.kubelets[name] = Kubelet(self, name, i, {"role": "system"} if system else {},
                                          [dict(SYSTEM_TAINT)] if system else [])
        self.client_node = f"worker-{cfg.workers}"
        self.proxy = Proxy(self, self.client_node, SERVICE)
        self.client = Client(self, self.proxy, self.client_node)
        self.monitor = Monitor(self, [])
        self.user_log: list[dict] = []

    def control_plane(self):
        return (self.kcm, self.scheduler)

    def boot(self):
        """Start every component at t=0; system instances are created shortly after."""
        k = self.kernel
        for kl in self.kubelets.values():
            k.schedule(0, kl.name, kl.start)
        k.schedule(0, "kcm", self.kcm.start)
        k.schedule(0, "scheduler", self.scheduler.start)
        k.schedule(0, self.proxy.name, self.proxy.start)
        k.schedule(100, "user", self._create_system)
        self.monitor.start(self.cfg.metric_period_ms)

    def _create_system(self):
        for kind, obj in system_objects(self.cfg):
            self.user_request("create", kind, obj)

    # -- the cluster user ----------------------------------------------------------

    def user_request(self, op: str, kind: str, obj: dict, subresource: str | None = None, key=None):
        res = self.api.request("user", op, kind, obj, key=key, subresource=subresource)
        self.user_log.append({"time": self.kernel.now, "op": op, "kind": kind,
                              "name": model.name_of(obj), "subresource": subresource,
                              "error": res.reason if isinstance(res, UserError) else None})
        return res

    def get(self, kind: str, ns: str, name: str) -> dict | None:
        got = self.api.cache_read((kind, ns, name))
        return copy.deepcopy(got) if got is not None else None

    def scale(self, name: str, replicas: int, ns: str = "default"):
        # a scale body carries only the identity from the request path and the count
        body = {"metadata": model.new_meta(name, ns), "spec": {"replicas": replicas}}
        return self.user_request("update", "Deployment", body, subresource="scale")

    def delete(self, kind: str, ns: str, name: str):
        body = {"metadata": model.new_meta(name, ns)}
        return self.user_request("delete", kind, body, key=(kind, ns, name))

    def delete_pods(self, ns: str, selector: dict) -> int:
        """Operator action: delete every pod in ``ns`` matching ``selector``."""
        n = 0
        for p in self.api.list("Pod"):
            if model.ns_of(p) == ns and model.selector_matches(selector, model.labels(p)):
                self.delete("Pod", ns, model.name_of(p))
                n += 1
        return n

    def silence_nodes(self, nodes) -> None:
        """Stop heartbeats and status reports from the given node agents."""
        for n in nodes:
            self.kubelets[n].silenced = True
        self.kernel.decide("user", "silence", "node agents silenced", nodes=sorted(nodes))

    def taint_node(self, node: str, taint: dict):
        cur = self.get("Node", "", node)
        if cur is None:
            return UserError("not found")
        cur["spec"].setdefault("taints", []).append(dict(taint))
        return self.user_request("update", "Node", cur)

    def deployment_ready(self, name: str, ns: str = "default") -> bool:
        d = self.api.cache.get(("Deployment", ns, name))
        if d is None:
            return False
        d = d[0]
        want = model.spec(d).get("replicas", 0)
        ready = 0
        for p in self.api.list("Pod"):
            if model.ns_of(p) == ns and model.labels(p).get("app") == name and not model.is_terminating(p):
                st = model.status(p)
                ready += bool(st.get("ready")) and st.get("phase") == "Running"
        return ready == want
