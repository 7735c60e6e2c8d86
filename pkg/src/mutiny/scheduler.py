"""Pod scheduler: most-free-capacity placement, priority preemption and the
cache-mismatch restart."""
from __future__ import annotations

import copy

from . import model
from .runtime import BackoffPolicy, Component, TokenBucket


def _schedulable(pod: dict) -> bool:
    return (not model.spec(pod).get("node_name") and not model.is_terminating(pod)
            and model.status(pod).get("phase", "Pending") == "Pending")


def _counts(pod: dict) -> bool:
    return model.status(pod).get("phase") not in ("Failed", "Succeeded")


class Scheduler(Component):
    kinds = ("Pod", "Node")

    def __init__(self, ctx, name: str = "scheduler"):
        super().__init__(ctx, name)
        cfg = self.cfg
        self.bucket = TokenBucket(cfg.scheduler_qps, cfg.scheduler_burst)
        self.backoff = BackoffPolicy(cfg.schedule_backoff_base_ms, cfg.schedule_backoff_cap_ms)
        self.active: set = set()
        self.waiting: dict = {}  # ident -> attempt number being waited out
        self.attempts: dict = {}
        self._last_flush = -10**9
        self._flush_pending = False
        self.assumed: dict[str, tuple[str, dict]] = {}  # uid -> (node, pod)
        self.confirmed: dict[str, str] = {}  # uid -> node
        self.binds = 0
        self._cycle_scheduled = False
        self.node_used: dict[str, list] = {}  # node -> [cpu, mem] of bound, counted pods
        # placement signatures known to fail until capacity frees up
        self.failed: set = set()
        # preemptors waiting for their victims: ident -> (node, cpu, mem, priority)
        self.nominated: dict = {}

    def on_start(self):
        self.active.clear()
        self.waiting.clear()
        self.attempts.clear()
        self.assumed.clear()
        self.confirmed.clear()
        self._cycle_scheduled = False
        self._flush_pending = False
        self.node_used = {}
        self.failed = set()
        self.nominated = {}
        for p in self.informer.list("Pod"):
            self._account(p, 1)
            n = model.spec(p).get("node_name", "")
            if n:
                self.confirmed[model.uid_of(p)] = n
            elif _schedulable(p):
                self.active.add(self.informer.ident(p))
        self._kick()

    def pending_work(self) -> int:
        return self.inflight + len(self.active) + len(self.waiting)

    # -- events ------------------------------------------------------------------

    def on_event(self, etype, kind, old, obj):
        if kind == "Node":
            if old is None or etype == "DELETED" or model.spec(old) != model.spec(obj) or \
                    model.labels(old) != model.labels(obj) or \
                    model.status(old).get("ready") != model.status(obj).get("ready"):
                self._flush_waiting()
            return
        if old is not None:
            self._account(old, -1)
        if etype != "DELETED":
            self._account(obj, 1)
        uid = model.uid_of(obj)
        ident = self.informer.ident(obj)
        if etype == "DELETED":
            self.confirmed.pop(uid, None)
            self.assumed.pop(uid, None)
            self._forget(ident)
            self._flush_waiting()
            return
        node = model.spec(obj).get("node_name", "")
        known = self.confirmed.get(uid) or (self.assumed.get(uid) or (None,))[0]
        if known is not None and node != known:
            self.kernel.decide(self.name, "cache-mismatch",
                               f"pod {model.name_of(obj)} moved from {known!r} to {node!r}")
            self.restart(f"cache mismatch on pod {model.name_of(obj)}")
            return
        if node:
            self.confirmed[uid] = node
            self.assumed.pop(uid, None)
            self._forget(ident)
            if model.is_terminating(obj) and (old is None or not model.is_terminating(old)):
                self._flush_waiting()
        elif _schedulable(obj):
            if ident not in self.waiting:
                self.active.add(ident)
                self._kick()
        else:
            self._forget(ident)

    def _forget(self, ident):
        self.nominated.pop(ident, None)
        self.active.discard(ident)
        self.waiting.pop(ident, None)
        self.attempts.pop(ident, None)

    def _flush_waiting(self):
        """Retry unschedulable pods after a cluster change, at most once per backoff base."""
        self.failed.clear()
        if not self.waiting:
            return
        now = self.kernel.now
        gap = self.cfg.schedule_backoff_base_ms
        if now - self._last_flush < gap:
            self._kick(gap - (now - self._last_flush), flush=True)
            return
        self._last_flush = now
        self.active.update(self.waiting)
        self.waiting.clear()
        self._kick()

    def _kick(self, delay: int = 1, flush: bool = False):
        if flush:
            self._flush_pending = True
        if not self._cycle_scheduled:
            self._cycle_scheduled = True
            self.after(delay, self._cycle)

    # -- placement -----------------------------------------------------------------

    def _account(self, pod, sign: int):
        n = model.spec(pod).get("node_name", "")
        if not n or not _counts(pod):
            return
        c, m = model.pod_requests(pod)
        u = self.node_used.setdefault(n, [0, 0])
        u[0] += sign * c
        u[1] += sign * m

    def _usage(self):
        used: dict[str, list] = {n: list(u) for n, u in self.node_used.items()}
        for n in self.informer.list("Node"):
            used.setdefault(model.name_of(n), [0, 0])
        for node_name, pod in self.assumed.values():
            u = used.setdefault(node_name, [0, 0])
            c, m = model.pod_requests(pod)
            u[0] += c
            u[1] += m
        return used

    def _view(self, used, ident, prio):
        """Usage as seen by one pod: room nominated for equal or higher priority preemptors is taken."""
        held = [(n, c, m) for i, (n, c, m, p) in self.nominated.items() if i != ident and p >= prio]
        if not held:
            return used
        view = {n: list(u) for n, u in used.items()}
        for n, c, m in held:
            u = view.setdefault(n, [0, 0])
            u[0] += c
            u[1] += m
        return view

    def _passes_predicates(self, pod, node) -> bool:
        st = model.status(node)
        if not st.get("ready") or model.spec(node).get("unschedulable"):
            return False
        if not model.node_selector_matches(pod, node):
            return False
        return not model.untolerated_taints(pod, node)

    def _free(self, node, used):
        s = model.status(node)
        cpu = s.get("allocatable_cpu", model.spec(node).get("capacity_cpu", 0))
        mem = s.get("allocatable_mem", model.spec(node).get("capacity_mem", 0))
        u = used.get(model.name_of(node), [0, 0])
        return cpu - u[0], mem - u[1]

    def schedule_pod(self, pod, used) -> str | None:
        """Feasible node with the most free CPU, ties broken by name."""
        cpu, mem = model.pod_requests(pod)
        best = None
        for node in sorted(self.informer.list("Node"), key=model.name_of):
            if not self._passes_predicates(pod, node):
                continue
            fc, fm = self._free(node, used)
            if fc >= cpu and fm >= mem and (best is None or fc > best[0]):
                best = (fc, model.name_of(node))
        return best[1] if best else None

    def _preempt(self, pod, used) -> str | None:
        """Evict lower-priority pods so the pod fits.

        Returns "preempted" when victims were chosen, "draining" when earlier
        victims will make room, None when nothing can be done.
        """
        prio = model.spec(pod).get("priority", 0)
        cpu, mem = model.pod_requests(pod)
        best = None
        for node in sorted(self.informer.list("Node"), key=model.name_of):
            if not self._passes_predicates(pod, node):
                continue
            fc, fm = self._free(node, used)
            residents = [p for p in self.informer.on_node(model.name_of(node)) if _counts(p)]
            # victims already terminating will free room soon; wait rather than preempt more
            draining = [p for p in residents if model.is_terminating(p)]
            dc = sum(model.pod_requests(p)[0] for p in draining)
            dm = sum(model.pod_requests(p)[1] for p in draining)
            if draining and fc + dc >= cpu and fm + dm >= mem:
                return "draining"
            cands = sorted((p for p in residents if not model.is_terminating(p)
                            and model.spec(p).get("priority", 0) < prio),
                           key=lambda p: (model.spec(p).get("priority", 0),
                                          model.status(p).get("restart_count", 0), model.name_of(p)))
            victims = []
            fc, fm = fc + dc, fm + dm
            for v in cands:
                if fc >= cpu and fm >= mem:
                    break
                victims.append(v)
                c, m = model.pod_requests(v)
                fc += c
                fm += m
            if fc >= cpu and fm >= mem and victims:
                rank = (max(model.spec(v).get("priority", 0) for v in victims), len(victims),
                        model.name_of(node))
                if best is None or rank < best[0]:
                    best = (rank, model.name_of(node), victims)
        if best is None:
            return None
        self.nominated[self.informer.ident(pod)] = (best[1], cpu, mem, prio)
        for v in best[2]:
            self.kernel.decide(self.name, "preempt", f"make room for {model.name_of(pod)} (priority {prio})",
                               victim=model.name_of(v), node=best[1])
            self.request("delete", "Pod", v)
        return "preempted"

    def _cycle(self):
        self._cycle_scheduled = False
        if not self.leader:
            return
        if self._flush_pending:
            self._flush_pending = False
            self._last_flush = self.kernel.now
            self.active.update(self.waiting)
            self.waiting.clear()
        batch = [self.informer.get("Pod", *i) for i in self.active]
        self.active.clear()
        batch = [p for p in batch if p is not None and _schedulable(p)]
        batch.sort(key=lambda p: (-model.spec(p).get("priority", 0),
                                  model.meta(p).get("creation_timestamp", 0), model.name_of(p)))
        used = self._usage() if batch else {}
        for pod in batch:
            ident = self.informer.ident(pod)
            ps = model.spec(pod)
            sig = (ps.get("priority", 0), model.pod_requests(pod), repr(ps.get("node_selector")),
                   repr(ps.get("tolerations")))
            if sig in self.failed:
                self._wait(ident)
                continue
            view = self._view(used, ident, ps.get("priority", 0))
            node = self.schedule_pod(pod, view)
            if node is None:
                if self._preempt(pod, view) is None:
                    self.failed.add(sig)
                self._wait(ident)
                continue
            self.nominated.pop(ident, None)
            self._bind(pod, node)
            c, m = model.pod_requests(pod)
            used[node][0] += c
            used[node][1] += m

    def _wait(self, ident):
        n = self.attempts.get(ident, 0) + 1
        self.attempts[ident] = n
        self.waiting[ident] = n
        self.after(self.backoff.delay(n), self._retry, ident, n)

    def _retry(self, ident, n):
        if self.waiting.get(ident) == n:
            del self.waiting[ident]
            self.active.add(ident)
            self._kick()

    def _bind(self, pod, node):
        uid = model.uid_of(pod)
        self.assumed[uid] = (node, pod)
        self.binds += 1
        self.kernel.decide(self.name, "bind", "most free capacity", pod=model.name_of(pod), node=node)
        body = copy.deepcopy(pod)
        body["spec"]["node_name"] = node
        ident = self.informer.ident(pod)

        def failed(_):
            self.assumed.pop(uid, None)
            self._wait(ident)
        self.request("update", "Pod", body, subresource="binding", on_err=failed)
