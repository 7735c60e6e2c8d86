"""Controller manager: deployment, replica-set, daemon-set, endpoints,
node-lifecycle, pod GC and garbage-collector loops in one leader-elected
component.
"""
from __future__ import annotations

import copy
import string

from . import model
from .runtime import BackoffPolicy, Component, Expectations, TokenBucket, WorkQueue

_NAME_CHARS = string.ascii_lowercase + string.digits


def _ready(pod: dict) -> bool:
    st = model.status(pod)
    return bool(st.get("ready")) and st.get("phase") == "Running"


def _active(pod: dict) -> bool:
    return not model.is_terminating(pod) and model.status(pod).get("phase") not in ("Failed", "Succeeded")


def _node_ready(node: dict) -> bool:
    return bool(model.status(node).get("ready"))


class Kcm(Component):
    kinds = ("Pod", "ReplicaSet", "Deployment", "DaemonSet", "Service", "Endpoints", "Node")

    def __init__(self, ctx, name: str = "kcm"):
        super().__init__(ctx, name)
        cfg = self.cfg
        self.bucket = TokenBucket(cfg.kcm_qps, cfg.kcm_burst)
        qp = BackoffPolicy(cfg.queue_backoff_base_ms, cfg.queue_backoff_cap_ms)
        self.dq = WorkQueue(self, "deployment", self.sync_deployment, qp)
        self.rq = WorkQueue(self, "replicaset", self.sync_replicaset, qp)
        self.dsq = WorkQueue(self, "daemonset", self.sync_daemonset, qp)
        self.eq = WorkQueue(self, "endpoints", self.sync_endpoints, qp)
        self.gcq = WorkQueue(self, "gc", self.sync_gc, qp)
        self.queues = (self.dq, self.rq, self.dsq, self.eq, self.gcq)
        self.exp = Expectations(cfg.expectations_ttl_ms)
        self.status_memo: dict = {}
        self.unhealthy_since: dict[str, int] = {}
        self.evicted: set = set()
        self.orphan_seen: dict[str, int] = {}
        self.evictions = 0
        self.full_disruption = False

    # -- lifecycle ---------------------------------------------------------------

    def on_start(self):
        for q in self.queues:
            q.reset()
        self.exp.clear()
        self.status_memo.clear()
        self.evicted.clear()
        self.resync()
        self.after(self.cfg.resync_period_ms, self._resync_tick)
        self.after(self.cfg.node_monitor_period_ms, self._node_tick)
        self.after(self.cfg.podgc_period_ms, self._podgc_tick)

    def pending_work(self) -> int:
        return self.inflight + sum(len(q) for q in self.queues) + self.exp.pending() + len(self.orphan_seen)

    def resync(self):
        inf = self.informer
        for d in inf.list("Deployment"):
            self.dq.add(inf.ident(d))
        for r in inf.list("ReplicaSet"):
            self.rq.add(inf.ident(r))
            if model.owners(r):
                self.gcq.add(("ReplicaSet",) + inf.ident(r))
        for ds in inf.list("DaemonSet"):
            self.dsq.add(inf.ident(ds))
        for s in inf.list("Service"):
            self.eq.add(inf.ident(s))
        for p in inf.list("Pod"):
            if model.owners(p):
                self.gcq.add(("Pod",) + inf.ident(p))

    def _resync_tick(self):
        self.resync()
        self.after(self.cfg.resync_period_ms, self._resync_tick)

    # -- event routing -------------------------------------------------------------

    def on_event(self, etype, kind, old, obj):
        inf = self.informer
        ident = inf.ident(obj)
        if kind == "Deployment":
            self.dq.add(ident)
        elif kind == "ReplicaSet":
            self.rq.add(ident)
            ref = model.controller_ref(obj)
            if ref and ref.get("kind") == "Deployment":
                self.dq.add((ident[0], ref.get("name", "")))
            if model.owners(obj) and etype != "DELETED":
                self.gcq.add(("ReplicaSet",) + ident)
            if etype == "DELETED":
                self._queue_dependents("Pod", obj)
        elif kind == "Pod":
            self._on_pod(etype, old, obj)
        elif kind == "DaemonSet":
            self.dsq.add(ident)
            if etype == "DELETED":
                self._queue_dependents("Pod", obj)
        elif kind == "Service":
            self.eq.add(ident)
        elif kind == "Endpoints":
            if inf.get("Service", *ident) is not None or etype == "DELETED":
                self.eq.add(ident)
        elif kind == "Node":
            changed = old is None or etype == "DELETED" or (
                model.spec(old) != model.spec(obj) or model.labels(old) != model.labels(obj)
                or _node_ready(old) != _node_ready(obj))
            if changed:
                for ds in inf.list("DaemonSet"):
                    self.dsq.add(inf.ident(ds))
                self._taint_evict(obj)
        if kind == "Deployment" and etype == "DELETED":
            self._queue_dependents("ReplicaSet", obj)

    def _queue_dependents(self, kind, owner):
        for dep in self.informer.owned_by(kind, model.uid_of(owner)):
            self.gcq.add((kind,) + self.informer.ident(dep))

    def _on_pod(self, etype, old, pod):
        inf = self.informer
        ns = model.ns_of(pod)
        ref = model.controller_ref(pod)
        if ref is not None:
            okey = (ref.get("kind", ""), ns, ref.get("name", ""))
            if etype == "ADDED":
                self.exp.observe_add(okey)
            if etype == "DELETED" or (model.is_terminating(pod) and (old is None or not model.is_terminating(old))):
                self.exp.observe_del(okey)
            if okey[0] == "ReplicaSet":
                self.rq.add((ns, okey[2]))
            elif okey[0] == "DaemonSet":
                self.dsq.add((ns, okey[2]))
            if etype != "DELETED":
                self.gcq.add(("Pod",) + inf.ident(pod))
        else:
            lbls = model.labels(pod)
            for rs in inf.in_ns("ReplicaSet", ns):
                if model.selector_matches(model.spec(rs).get("selector", {}), lbls):
                    self.rq.add(inf.ident(rs))
        for svc in inf.in_ns("Service", ns):
            self.eq.add(inf.ident(svc))
        if etype != "DELETED":
            node = inf.get("Node", "", model.spec(pod).get("node_name", ""))
            if node is not None and model.spec(node).get("taints"):
                self._taint_evict(node, [pod])

    # -- request helpers -------------------------------------------------------

    def _memo_hit(self, memo_key, value, obj) -> bool:
        # a write we have not observed yet; expires so a lost write gets repaired
        m = self.status_memo.get(memo_key)
        return (m is not None and m[0] == value and m[1] == model.meta(obj).get("resource_version")
                and self.kernel.now - m[2] < self.cfg.resync_period_ms)

    def _memo_set(self, memo_key, value, obj):
        self.status_memo[memo_key] = (value, model.meta(obj).get("resource_version"), self.kernel.now)

    def _write_status(self, kind, obj, status, queue, qkey):
        memo_key = (kind,) + self.informer.ident(obj)
        if status == model.status(obj) or self._memo_hit(memo_key, status, obj):
            return
        body = copy.deepcopy(obj)
        body["status"] = status
        self._memo_set(memo_key, status, obj)

        def failed(_):
            self.status_memo.pop(memo_key, None)
            queue.retry(qkey)
        self.request("update", kind, body, subresource="status", on_err=failed)

    def _create_pods(self, owner_kind, owner, pods, qkey, queue):
        okey = (owner_kind,) + self.informer.ident(owner)
        self.exp.expect(okey, self.kernel.now, adds=len(pods))
        for pod in pods:
            self.kernel.decide(self.name, "create-pod", f"{owner_kind} {model.name_of(owner)} below desired",
                               pod=model.name_of(pod))

            def failed(_, okey=okey):
                self.exp.observe_add(okey)
                queue.retry(qkey)
            self.request("create", "Pod", pod, on_err=failed)

    def _delete(self, kind, obj, reason, okey=None, queue=None, qkey=None, force=False):
        self.kernel.decide(self.name, f"delete-{kind.lower()}", reason, name=model.name_of(obj))

        def failed(_):
            if okey is not None:
                self.exp.observe_del(okey)
            if queue is not None:
                queue.retry(qkey)
        self.request("delete", kind, obj, subresource="force" if force else None, on_err=failed)

    def _rand_suffix(self) -> str:
        return "".join(self.rng.choice(_NAME_CHARS) for _ in range(5))

    # -- deployment controller ---------------------------------------------------

    def sync_deployment(self, ident):
        inf = self.informer
        dep = inf.get("Deployment", *ident)
        if dep is None or model.is_terminating(dep):
            return
        ns, name = ident
        s = model.spec(dep)
        template = s.get("template", {})
        h = model.template_hash(template)
        rs_name = f"{name}-{h}"
        owned = [rs for rs in inf.owned_by("ReplicaSet", model.uid_of(dep)) if model.ns_of(rs) == ns]
        replicas = s.get("replicas", 0)
        current = None
        for rs in owned:
            if model.name_of(rs) == rs_name:
                current = rs
            elif model.spec(rs).get("replicas", 0) != 0:
                body = copy.deepcopy(rs)
                body["spec"]["replicas"] = 0
                self.request("update", "ReplicaSet", body, on_err=lambda _: self.dq.retry(ident))
        if current is None:
            tmpl = copy.deepcopy(template)
            tmpl.setdefault("metadata", {}).setdefault("labels", {})["pod-template-hash"] = h
            sel = dict(s.get("selector", {}))
            sel["pod-template-hash"] = h
            lbls = dict(tmpl["metadata"]["labels"])
            rs = {"metadata": model.new_meta(rs_name, ns, lbls, None, ("Deployment", dep)),
                  "spec": {"replicas": replicas, "selector": sel, "template": tmpl},
                  "status": {"replicas": 0, "ready_replicas": 0}}
            self.kernel.decide(self.name, "create-replicaset", "no replica set for current template",
                               deployment=name, replicaset=rs_name)
            self.request("create", "ReplicaSet", rs, on_err=lambda _: self.dq.retry(ident))
            return
        if model.spec(current).get("replicas", 0) != replicas:
            body = copy.deepcopy(current)
            body["spec"]["replicas"] = replicas
            self.kernel.decide(self.name, "scale-replicaset", "replica count differs from deployment",
                               replicaset=rs_name, replicas=replicas)
            self.request("update", "ReplicaSet", body, on_err=lambda _: self.dq.retry(ident))
            return
        self.dq.forget(ident)
        st = model.status(current)
        total = sum(model.status(rs).get("replicas", 0) for rs in owned)
        ready = sum(model.status(rs).get("ready_replicas", 0) for rs in owned)
        status = {"replicas": total, "ready_replicas": ready,
                  "updated_replicas": st.get("ready_replicas", 0),
                  "observed_generation": model.meta(dep).get("generation", 0)}
        self._write_status("Deployment", dep, status, self.dq, ident)

    # -- replica-set controller ----------------------------------------------------

    def sync_replicaset(self, ident):
        inf = self.informer
        rs = inf.get("ReplicaSet", *ident)
        if rs is None or model.is_terminating(rs):
            return
        ns, name = ident
        okey = ("ReplicaSet", ns, name)
        now = self.kernel.now
        if not self.exp.satisfied(okey, now):
            return
        s = model.spec(rs)
        sel = s.get("selector", {})
        uid = model.uid_of(rs)
        owned = []
        for p in inf.matching("Pod", ns, sel):
            ref = model.controller_ref(p)
            if ref is not None and ref.get("uid") == uid and _active(p):
                owned.append(p)
        for p in inf.orphans_in("Pod", ns):
            if _active(p) and model.selector_matches(sel, model.labels(p)):
                body = copy.deepcopy(p)
                body["metadata"]["owner_references"] = [
                    {"kind": "ReplicaSet", "name": name, "uid": uid, "controller": True}]
                self.kernel.decide(self.name, "adopt-pod", "orphan matches selector", pod=model.name_of(p))
                self.request("update", "Pod", body, on_err=lambda _: self.rq.retry(ident))
                owned.append(p)
        diff = s.get("replicas", 0) - len(owned)
        if diff > 0:
            tmpl = s.get("template", {})
            pods = [model.pod_from_template(f"{name}-{self._rand_suffix()}", ns, tmpl, "ReplicaSet", rs)
                    for _ in range(min(diff, 500))]
            self._create_pods("ReplicaSet", rs, pods, ident, self.rq)
        elif diff < 0:
            victims = sorted(owned, key=lambda p: (bool(model.spec(p).get("node_name")), _ready(p),
                                                    -model.meta(p).get("creation_timestamp", 0),
                                                    model.name_of(p)))[:-diff]
            self.exp.expect(okey, now, dels=len(victims))
            for p in victims:
                self._delete("Pod", p, f"ReplicaSet {name} above desired", okey, self.rq, ident)
        else:
            self.rq.forget(ident)
        status = {"replicas": len(owned), "ready_replicas": sum(1 for p in owned if _ready(p)),
                  "observed_generation": model.meta(rs).get("generation", 0)}
        self._write_status("ReplicaSet", rs, status, self.rq, ident)

    # -- daemon-set controller -----------------------------------------------------

    def _eligible(self, template_spec: dict, node: dict) -> bool:
        probe = {"spec": template_spec}
        if not model.node_selector_matches(probe, node):
            return False
        return not model.untolerated_taints(probe, node)

    def sync_daemonset(self, ident):
        inf = self.informer
        ds = inf.get("DaemonSet", *ident)
        if ds is None or model.is_terminating(ds):
            return
        ns, name = ident
        okey = ("DaemonSet", ns, name)
        now = self.kernel.now
        if not self.exp.satisfied(okey, now):
            return
        s = model.spec(ds)
        sel = s.get("selector", {})
        tmpl = s.get("template", {})
        h = model.template_hash(tmpl)
        nodes = {model.name_of(n): n for n in inf.list("Node")}
        eligible = sorted(n for n, node in nodes.items() if self._eligible(tmpl.get("spec", {}), node))
        by_node: dict[str, list] = {}
        uid = model.uid_of(ds)
        for p in inf.matching("Pod", ns, sel):
            ref = model.controller_ref(p)
            if ref is None or ref.get("uid") != uid or not _active(p):
                continue
            target = model.spec(p).get("node_selector", {}).get("hostname") or model.spec(p).get("node_name", "")
            by_node.setdefault(target, []).append(p)
        creates, deletes = [], []
        for node_name in eligible:
            pods = by_node.get(node_name, [])
            current = [p for p in pods if model.annotations(p).get(model.TEMPLATE_HASH) == h]
            outdated = [p for p in pods if model.annotations(p).get(model.TEMPLATE_HASH) != h]
            deletes += outdated + sorted(current, key=model.name_of)[1:]
            if not current and not outdated:
                creates.append(model.pod_from_template(
                    f"{name}-{self._rand_suffix()}", ns, tmpl, "DaemonSet", ds,
                    extra_annotations={model.TEMPLATE_HASH: h}, node_selector={"hostname": node_name}))
        for node_name, pods in by_node.items():
            if node_name not in eligible:
                deletes += pods
        if creates or deletes:
            self.exp.expect(okey, now, adds=len(creates), dels=len(deletes))
            for p in deletes:
                self._delete("Pod", p, f"DaemonSet {name} pod outdated or misplaced", okey, self.dsq, ident)
            for pod in creates:
                self.kernel.decide(self.name, "create-pod", f"DaemonSet {name} missing pod on node",
                                   pod=model.name_of(pod))

                def failed(_):
                    self.exp.observe_add(okey)
                    self.dsq.retry(ident)
                self.request("create", "Pod", pod, on_err=failed)
        else:
            self.dsq.forget(ident)
        placed = [n for n in eligible if by_node.get(n)]
        status = {"desired_number_scheduled": len(eligible),
                  "current_number_scheduled": len(placed),
                  "number_ready": sum(1 for n in placed if any(_ready(p) for p in by_node[n])),
                  "observed_generation": model.meta(ds).get("generation", 0)}
        self._write_status("DaemonSet", ds, status, self.dsq, ident)

    # -- endpoints controller --------------------------------------------------------

    def sync_endpoints(self, ident):
        inf = self.informer
        ns, name = ident
        svc = inf.get("Service", ns, name)
        ep = inf.get("Endpoints", ns, name)
        if svc is None:
            if ep is not None:
                self._delete("Endpoints", ep, "service gone")
            return
        sel = model.spec(svc).get("selector", {})
        addrs = []
        for p in inf.serving_in(ns):
            if not (_active(p) and model.selector_matches(sel, model.labels(p))):
                continue
            ip = model.status(p).get("pod_ip", "")
            if not ip:
                continue
            addrs.append({"ip": ip, "node_name": model.spec(p).get("node_name", ""),
                          "target_ref": {"kind": "Pod", "namespace": ns, "name": model.name_of(p),
                                         "uid": model.uid_of(p)}})
        addrs.sort(key=lambda a: (a["ip"], a["target_ref"]["name"]))
        spec = {}
        if addrs:
            spec["addresses"] = addrs
        ports = [{"name": p.get("name", ""), "port": p.get("target_port", p.get("port", 0)),
                  "protocol": p.get("protocol", "TCP")} for p in model.spec(svc).get("ports", [])]
        if ports:
            spec["ports"] = ports
        if ep is None:
            body = {"metadata": model.new_meta(name, ns, model.labels(svc)), "spec": spec, "status": {}}
            self.request("create", "Endpoints", body, on_err=lambda _: self.eq.retry(ident))
            return
        if model.spec(ep) == spec or self._memo_hit(("Endpoints", ns, name), spec, ep):
            self.eq.forget(ident)
            return
        body = copy.deepcopy(ep)
        body["spec"] = spec
        self._memo_set(("Endpoints", ns, name), spec, ep)

        def failed(_):
            self.status_memo.pop(("Endpoints", ns, name), None)
            self.eq.retry(ident)
        self.request("update", "Endpoints", body, on_err=failed)

    # -- garbage collector -------------------------------------------------------------

    def sync_gc(self, qkey):
        kind, ns, name = qkey
        obj = self.informer.get(kind, ns, name)
        if obj is None or model.is_terminating(obj):
            return
        refs = model.owners(obj)
        if not refs:
            return
        for ref in refs:
            okind = ref.get("kind", "")
            if okind not in model.KINDS:
                self.kernel.decide(self.name, "gc-unresolvable", f"unknown owner kind {okind!r}",
                                   name=name)
                return
            owner = self.api.cache_read((okind, "" if okind in model.CLUSTER_SCOPED else ns,
                                         ref.get("name", "")))
            if owner is not None and model.uid_of(owner) == ref.get("uid"):
                return
        self._delete(kind, obj, "all owners absent")

    # -- node lifecycle and taint eviction --------------------------------------------

    def _node_tick(self):
        now = self.kernel.now
        cfg = self.cfg
        nodes = self.informer.list("Node")
        unhealthy = []
        reporting = 0
        for n in nodes:
            name = model.name_of(n)
            hb = model.status(n).get("last_heartbeat", 0)
            # heartbeats are phase-shifted per node, so judge disruption on who still reports
            reporting += now - hb <= 2 * cfg.heartbeat_period_ms
            if now - hb > cfg.heartbeat_grace_ms:
                unhealthy.append(name)
                self.unhealthy_since.setdefault(name, now)
                if _node_ready(n):
                    body = copy.deepcopy(n)
                    body["status"]["ready"] = False
                    self.kernel.decide(self.name, "node-not-ready", "heartbeat grace exceeded", node=name)
                    self.request("update", "Node", body, subresource="status")
            else:
                self.unhealthy_since.pop(name, None)
        full = bool(unhealthy) and reporting == 0
        if full != self.full_disruption:
            self.full_disruption = full
            self.kernel.decide(self.name, "full-disruption", "no node is reporting" if full else "recovered")
        if not full:
            for name in unhealthy:
                if now - self.unhealthy_since[name] >= cfg.eviction_delay_ms:
                    for p in self.informer.on_node(name):
                        self._evict(p, f"node {name} unhealthy")
        self.after(cfg.node_monitor_period_ms, self._node_tick)

    def _evict(self, pod, reason):
        uid = model.uid_of(pod)
        if uid in self.evicted or model.is_terminating(pod):
            return
        self.evicted.add(uid)
        self.evictions += 1
        self.kernel.decide(self.name, "evict", reason, pod=model.name_of(pod),
                           node=model.spec(pod).get("node_name", ""))
        self.request("delete", "Pod", pod)

    def _taint_evict(self, node, pods=None):
        taints = [t for t in model.spec(node).get("taints", []) if t.get("effect") == "NoExecute"]
        if not taints:
            return
        for p in pods if pods is not None else self.informer.on_node(model.name_of(node)):
            if model.spec(p).get("node_name") != model.name_of(node):
                continue
            if model.untolerated_taints(p, node, ("NoExecute",)):
                self._evict(p, f"NoExecute taint on {model.name_of(node)}")

    # -- pod GC: pods bound to nodes that do not exist ------------------------------

    def _podgc_tick(self):
        now = self.kernel.now
        nodes = {model.name_of(n) for n in self.informer.list("Node")}
        seen = set()
        for node_name, idents in list(self.informer.by_node.items()):
            if node_name in nodes or not idents:
                continue
            for p in self.informer.on_node(node_name):
                uid = model.uid_of(p)
                seen.add(uid)
                first = self.orphan_seen.setdefault(uid, now)
                if now - first >= self.cfg.podgc_quarantine_ms:
                    self.orphan_seen.pop(uid, None)
                    self.kernel.decide(self.name, "podgc", f"bound to nonexistent node {node_name!r}",
                                       pod=model.name_of(p))
                    self.request("delete", "Pod", p, subresource="force")
        for uid in list(self.orphan_seen):
            if uid not in seen:
                del self.orphan_seen[uid]
        self.after(self.cfg.podgc_period_ms, self._podgc_tick)
