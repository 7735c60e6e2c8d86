"""Node agents, pod runtimes, per-node proxying and the application client.

``DataPlane`` is the ground truth of what actually runs where, independent of
what the store says.  The classifier reads it for the networking and DNS
rules, which concern real agent health rather than recorded state.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

from . import model
from .runtime import BackoffPolicy, Component

# image -> the command its entrypoint expects
IMAGES = {
    "svc-app:1.0": "serve",
    "netagent:1.0": "run",
    "coredns:1.0": "dns",
    "node-exporter:1.0": "export",
}
ROLES = {"svc-app:1.0": "app", "netagent:1.0": "netagent", "coredns:1.0": "dns"}


@dataclass
class PodRuntime:
    uid: str
    ns: str
    name: str
    node: str
    image: str
    role: str
    app: str = ""
    state: str = "waiting"  # waiting | running | crashloop | imagepull | failed | stopped
    ready: bool = False
    ip: str = ""
    restart_count: int = 0
    start_time: int = 0
    created: int = 0
    reason: str = ""
    terminating: bool = False
    busy_until: float = 0.0
    served: int = 0

    @property
    def serving(self) -> bool:
        return self.state == "running" and self.ready


class DataPlane:
    """Ground-truth registry of pod runtimes across nodes."""

    def __init__(self, kernel):
        self.kernel = kernel
        self.by_uid: dict[str, PodRuntime] = {}
        self.by_ip: dict[str, PodRuntime] = {}
        self.nodes: set[str] = set()
        self.dns_zero_at: list[int] = []
        self.netagent_down: dict[str, int] = {}  # node -> down since
        self.netagent_outages: list[tuple[str, int, int | None]] = []
        self.app_restarts: list[dict] = []
        self.app_starts: list[dict] = []
        self._dns_ready = 0
        self._netagent_nodes: set[str] = set()

    def add(self, rt: PodRuntime):
        self.by_uid[rt.uid] = rt

    def assign_ip(self, rt: PodRuntime, ip: str):
        rt.ip = ip
        self.by_ip[ip] = rt

    def remove(self, rt: PodRuntime):
        self.by_uid.pop(rt.uid, None)
        if rt.ip and self.by_ip.get(rt.ip) is rt:
            del self.by_ip[rt.ip]
        self.changed()

    def netagent_running(self, node: str) -> bool:
        return any(rt.role == "netagent" and rt.node == node and rt.state == "running"
                   for rt in self.by_uid.values())

    def dns_ready(self) -> int:
        # terminating DNS pods are already out of the DNS service's endpoints
        return sum(1 for rt in self.by_uid.values() if rt.role == "dns" and rt.serving and not rt.terminating)

    def changed(self):
        """Called after any runtime state transition to track agent outages."""
        now = self.kernel.now
        n = self.dns_ready()
        if n == 0 and self._dns_ready > 0:
            self.dns_zero_at.append(now)
        self._dns_ready = n
        running = {rt.node for rt in self.by_uid.values() if rt.role == "netagent" and rt.state == "running"}
        self._netagent_nodes |= running
        for node in sorted(self.nodes):
            if node in running:
                since = self.netagent_down.pop(node, None)
                if since is not None:
                    self.netagent_outages.append((node, since, now))
            elif node not in self.netagent_down and node in self._netagent_nodes:
                self.netagent_down[node] = now

    def outages(self, until: int) -> list[tuple[str, int, int]]:
        out = [(n, a, b) for n, a, b in self.netagent_outages]
        out += [(n, a, until) for n, a in sorted(self.netagent_down.items())]
        return out


class Kubelet(Component):
    kinds = ("Pod", "Node")

    def __init__(self, ctx, node: str, index: int, labels: dict | None = None,
                 taints: list | None = None):
        super().__init__(ctx, f"kubelet:{node}")
        self.node = node
        self.index = index
        self.node_labels = labels or {}
        self.node_taints = taints or []
        self.dp: DataPlane = ctx.dataplane
        self.local: dict[str, PodRuntime] = {}
        self.pods: dict[str, dict] = {}  # uid -> latest object seen
        self.silenced = False
        self.crash_backoff = BackoffPolicy(self.cfg.restart_backoff_base_ms, self.cfg.restart_backoff_cap_ms)
        self._next_ip = 2
        self.heartbeats = 0
        self.dp.nodes.add(node)

    def on_start(self):
        cfg = self.cfg
        if self.informer.get("Node", "", self.node) is None:
            obj = model.node(self.node, self.index, self.node_labels, self.node_taints)
            obj["status"]["last_heartbeat"] = self.kernel.now
            self.request("create", "Node", obj)
        for p in self.informer.list("Pod"):
            self._sync_pod(p)
        phase = self.rng.randrange(cfg.heartbeat_period_ms)
        self.after(phase, self._heartbeat)
        self.after(phase + cfg.heartbeat_period_ms // 2, self._status_tick)

    # -- heartbeats and status sync ------------------------------------------------

    def _heartbeat(self):
        node = self.informer.get("Node", "", self.node)
        if node is not None and not self.silenced:
            body = copy.deepcopy(node)
            cap = model.spec(node)
            body["status"] = {"ready": True, "last_heartbeat": self.kernel.now,
                              "address": f"192.168.0.{10 + self.index}",
                              "allocatable_cpu": cap.get("capacity_cpu", 0),
                              "allocatable_mem": cap.get("capacity_mem", 0)}
            self.heartbeats += 1
            self.request("update", "Node", body, subresource="status")
        self.after(self.cfg.heartbeat_period_ms, self._heartbeat)

    def _status_tick(self):
        # level-triggered repair of status updates that never landed
        for uid, rt in list(self.local.items()):
            self._report(rt, only_if_stale=True)
        self.after(self.cfg.heartbeat_period_ms, self._status_tick)

    def _desired_status(self, rt: PodRuntime) -> dict:
        st = {"phase": {"waiting": "Pending", "imagepull": "Pending", "running": "Running",
                        "crashloop": "Running", "failed": "Failed", "stopped": "Running"}[rt.state],
              "ready": rt.ready, "restart_count": rt.restart_count}
        if rt.ip:
            st["pod_ip"] = rt.ip
        if rt.reason:
            st["reason"] = rt.reason
        if rt.start_time:
            st["start_time"] = rt.start_time
        return st

    def _report(self, rt: PodRuntime, only_if_stale: bool = False):
        if self.silenced or rt.terminating:
            return
        pod = self.pods.get(rt.uid)
        if pod is None:
            return
        st = self._desired_status(rt)
        if only_if_stale and model.status(pod) == st:
            return
        body = copy.deepcopy(pod)
        body["status"] = st
        self.request("update", "Pod", body, subresource="status")

    # -- pod lifecycle -------------------------------------------------------------

    def on_event(self, etype, kind, old, obj):
        if kind == "Node":
            return
        uid = model.uid_of(obj)
        if etype == "DELETED":
            rt = self.local.get(uid)
            if rt is not None:
                self._stop(rt, "deleted")
            self.pods.pop(uid, None)
            return
        self._sync_pod(obj)

    def _sync_pod(self, pod):
        uid = model.uid_of(pod)
        node_name = model.spec(pod).get("node_name", "")
        rt = self.local.get(uid)
        if node_name != self.node:
            if rt is not None:
                # rebound elsewhere: stop locally without reporting
                self.kernel.decide(self.name, "pod-moved-away", f"node_name now {node_name!r}",
                                   pod=model.name_of(pod))
                self._stop(rt, "moved")
                self.pods.pop(uid, None)
            return
        self.pods[uid] = pod
        if model.is_terminating(pod):
            if rt is None:
                self.request("delete", "Pod", pod, subresource="force")
            elif not rt.terminating:
                rt.terminating = True
                self.dp.changed()
                self.after(self.cfg.termination_grace_ms, self._finish_termination, rt)
            return
        if rt is None:
            self._admit(pod)
            return
        c = (model.spec(pod).get("containers") or [{}])[0]
        if c.get("image") != rt.image or not self._command_ok(pod) and rt.state == "running":
            self.kernel.decide(self.name, "container-changed", "image or command changed", pod=rt.name)
            rt.image = c.get("image", "")
            self._start(rt)

    def _command_ok(self, pod) -> bool:
        cs = model.spec(pod).get("containers", [])
        return bool(cs) and all(IMAGES.get(c.get("image", "")) == c.get("command") for c in cs)

    def _admit(self, pod):
        now = self.kernel.now
        cs = model.spec(pod).get("containers", [])
        image = cs[0].get("image", "") if cs else ""
        rt = PodRuntime(model.uid_of(pod), model.ns_of(pod), model.name_of(pod), self.node, image,
                        ROLES.get(image, "other"), app=model.labels(pod).get("app", ""),
                        created=model.meta(pod).get("creation_timestamp", now))
        self.local[rt.uid] = rt
        self.dp.add(rt)
        node = self.informer.get("Node", "", self.node)
        if node is not None and not model.node_selector_matches(pod, node):
            return self._fail(rt, "NodeAffinity")
        cpu, mem = model.pod_requests(pod)
        used_cpu = used_mem = 0
        for other in self.local.values():
            if other is rt or other.state in ("failed", "stopped"):
                continue
            c, m = model.pod_requests(self.pods.get(other.uid, {}))
            used_cpu += c
            used_mem += m
        cap = model.spec(node) if node is not None else {}
        if used_cpu + cpu > cap.get("capacity_cpu", self.cfg.node_cpu_millicores):
            return self._fail(rt, "OutOfcpu")
        if used_mem + mem > cap.get("capacity_mem", self.cfg.node_mem_mib):
            return self._fail(rt, "OutOfmemory")
        self._start(rt)

    def _fail(self, rt, reason):
        self.kernel.decide(self.name, "pod-rejected", reason, pod=rt.name)
        rt.state, rt.ready, rt.reason = "failed", False, reason
        self.dp.changed()
        self._report(rt)

    def _start(self, rt: PodRuntime, delay: int = 0):
        pod = self.pods.get(rt.uid)
        if pod is None:
            return
        cs = model.spec(pod).get("containers", [])
        image = cs[0].get("image", "") if cs else ""
        rt.image = image
        if not cs or any(c.get("image", "") not in IMAGES for c in cs):
            rt.state, rt.ready, rt.reason = "imagepull", False, "ImagePullError"
            self.kernel.decide(self.name, "image-pull-error", f"unknown image {image!r}", pod=rt.name)
            self.dp.changed()
            self._report(rt)
            return
        rt.state, rt.ready = "waiting", False
        self.dp.changed()
        jitter = self.rng.randint(0, self.cfg.startup_jitter_ms)
        self.after(delay + self.cfg.startup_delay_ms + jitter, self._started, rt, rt.restart_count)

    def _started(self, rt: PodRuntime, generation: int):
        if self.local.get(rt.uid) is not rt or rt.terminating or rt.restart_count != generation:
            return
        pod = self.pods.get(rt.uid)
        if pod is None:
            return
        now = self.kernel.now
        if not rt.ip:
            self.dp.assign_ip(rt, f"10.244.{self.index}.{self._next_ip}")
            self._next_ip = 2 + (self._next_ip - 1) % 252
        if not self._command_ok(pod):
            rt.restart_count += 1
            rt.state, rt.ready, rt.reason = "crashloop", False, "CrashLoopBackOff"
            self.kernel.decide(self.name, "container-crash", "command not runnable", pod=rt.name,
                               restarts=rt.restart_count)
            if rt.role == "app":
                self.dp.app_restarts.append({"time": now, "pod": rt.name})
            self.dp.changed()
            self._report(rt)
            self.after(self.crash_backoff.delay(rt.restart_count), self._retry_start, rt, rt.restart_count)
            return
        rt.state, rt.ready, rt.reason = "running", True, ""
        rt.start_time = rt.start_time or now
        if rt.role == "app":
            self.dp.app_starts.append({"time": now, "pod": rt.name, "app": rt.app,
                                       "created": rt.created, "startup": now - rt.created})
        self.dp.changed()
        self._report(rt)

    def _retry_start(self, rt, generation):
        if self.local.get(rt.uid) is rt and rt.restart_count == generation and not rt.terminating:
            self._start(rt)

    def _finish_termination(self, rt: PodRuntime):
        pod = self.pods.get(rt.uid)
        self._stop(rt, "terminated")
        if pod is not None and not self.silenced:
            self.request("delete", "Pod", pod, subresource="force")

    def _stop(self, rt: PodRuntime, why: str):
        rt.state, rt.ready = "stopped", False
        self.local.pop(rt.uid, None)
        self.dp.remove(rt)

    def on_stop(self):
        # a kubelet restart keeps containers running; only its view is rebuilt
        pass


class Proxy(Component):
    """Per-node proxy holding a watch-fed view of one service's endpoints."""

    kinds = ("Endpoints",)

    def __init__(self, ctx, node: str, service: tuple[str, str]):
        super().__init__(ctx, f"proxy:{node}")
        self.node = node
        self.service = service
        self.addresses: list[dict] = []

    def on_event(self, etype, kind, old, obj):
        if self.informer.ident(obj) != self.service:
            return
        self.addresses = [] if etype == "DELETED" else list(model.spec(obj).get("addresses", []))

    def on_start(self):
        ep = self.informer.get("Endpoints", *self.service)
        self.addresses = list(model.spec(ep).get("addresses", [])) if ep else []


@dataclass
class ClientRecord:
    send_time_ms: int
    latency_ms: float
    error_kind: str | None

    def to_dict(self):
        return {"send_time_ms": self.send_time_ms, "latency_ms": self.latency_ms,
                "error_kind": self.error_kind}


class Client:
    """Fixed-rate client probing the service through its node's proxy."""

    def __init__(self, ctx, proxy: Proxy, node: str):
        self.ctx = ctx
        self.kernel = ctx.kernel
        self.cfg = ctx.cfg
        self.proxy = proxy
        self.node = node
        self.dp: DataPlane = ctx.dataplane
        self.records: list[ClientRecord] = []
        self.rr = 0
        rng = self.kernel.rng("client")
        # one per-run offset: host background load cycles slowly and each run
        # lands on a random phase of that cycle
        phase = rng.uniform(0.0, 2.0 * math.pi)
        self.service_time = self.cfg.service_time_ms + self.cfg.service_offset_ms * math.sin(phase)
        self.start_time: int | None = None
        self.end_time: int | None = None

    def start(self, at: int):
        cfg = self.cfg
        n = cfg.client_rate * cfg.client_duration_ms // 1000
        period = 1000 // cfg.client_rate
        self.start_time = at
        self.end_time = at + n * period
        for i in range(n):
            self.kernel.schedule_at(at + i * period, "client", self._send)

    def route_request(self, t: int) -> tuple[float, str | None]:
        addrs = self.proxy.addresses
        if not addrs:
            return 0.0, "no_endpoint"
        target = addrs[self.rr % len(addrs)]
        self.rr += 1
        rt = self.dp.by_ip.get(target.get("ip", ""))
        node = rt.node if rt is not None else target.get("node_name", "")
        if node and not self.dp.netagent_running(node):
            return 0.0, "net_partition"
        if rt is None or not rt.serving:
            return 0.0, "conn_refused"
        start = max(float(t), rt.busy_until)
        rt.busy_until = start + self.service_time
        latency = rt.busy_until - t
        if latency > self.cfg.request_timeout_ms:
            return 0.0, "timeout"
        rt.served += 1
        return latency, None

    def _send(self):
        t = self.kernel.now
        latency, err = self.route_request(t)
        self.records.append(ClientRecord(t, round(latency, 6), err))
