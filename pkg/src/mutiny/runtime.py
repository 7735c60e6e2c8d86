"""Shared machinery for simulated control-plane and node components."""
from __future__ import annotations

import math
import traceback
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

from . import model
from .store import Ack, UserError


@dataclass(frozen=True)
class BackoffPolicy:
    base: int
    cap: int
    factor: int = 2

    def delay(self, n: int) -> int:
        """Delay before the n-th retry, n >= 1."""
        if n < 1:
            raise ValueError("n must be >= 1")
        # avoid building huge ints once the cap is clearly reached
        if n > 64:
            return self.cap
        return min(self.base * self.factor ** (n - 1), self.cap)


class TokenBucket:
    """Client-side rate limiter; ``reserve`` returns the earliest send time."""

    def __init__(self, qps: float, burst: int):
        self.qps = qps
        self.burst = burst
        self.tokens = float(burst)
        self.last = 0

    def reserve(self, now: int) -> int:
        self.tokens = min(self.burst, self.tokens + (now - self.last) * self.qps / 1000.0)
        self.last = now
        self.tokens -= 1.0
        if self.tokens >= 0:
            return now
        return now + math.ceil(-self.tokens * 1000.0 / self.qps)


class Informer:
    """A component's local view, keyed by the identity decoded from each object.

    Keying by decoded (namespace, name) rather than by store key means an
    instance whose identity fields change leaves its old entry behind.
    """

    def __init__(self):
        self.objs: dict[str, dict[tuple, dict]] = defaultdict(dict)
        self.by_ns: dict[tuple, dict[str, dict]] = defaultdict(dict)
        # dicts used as ordered sets so iteration order never depends on hashing
        self.owned: dict[tuple, dict] = defaultdict(dict)  # (kind, controller uid) -> identities
        self.by_node: dict[str, dict] = defaultdict(dict)  # node -> pod identities
        self.by_label: dict[tuple, dict] = defaultdict(dict)  # (kind, ns, key, value) -> identities
        self.orphans: dict[tuple, dict] = defaultdict(dict)  # (kind, ns) -> identities without controller
        self.serving: dict[str, dict] = defaultdict(dict)  # ns -> ready, live pod identities

    def clear(self):
        self.__init__()

    @staticmethod
    def ident(obj: dict) -> tuple[str, str]:
        m = obj.get("metadata", {})
        return (m.get("namespace", ""), m.get("name", ""))

    def get(self, kind: str, ns: str, name: str) -> dict | None:
        return self.objs[kind].get((ns, name))

    def list(self, kind: str) -> list[dict]:
        return list(self.objs[kind].values())

    def in_ns(self, kind: str, ns: str) -> list[dict]:
        return list(self.by_ns[(kind, ns)].values())

    def owned_by(self, kind: str, uid: str) -> list[dict]:
        out = []
        for ident in self.owned.get((kind, uid), ()):
            o = self.objs[kind].get(ident)
            if o is not None:
                out.append(o)
        return out

    def _resolve(self, kind, idents) -> list[dict]:
        objs = self.objs[kind]
        return [o for i in idents if (o := objs.get(i)) is not None]

    def matching(self, kind: str, ns: str, selector: dict) -> list[dict]:
        """Objects in ``ns`` whose labels satisfy ``selector`` (empty selects nothing)."""
        if not selector:
            return []
        buckets = [self.by_label.get((kind, ns, k, v), {}) for k, v in selector.items()]
        smallest = min(buckets, key=len)
        return [o for o in self._resolve(kind, smallest) if model.selector_matches(selector, model.labels(o))]

    def orphans_in(self, kind: str, ns: str) -> list[dict]:
        return self._resolve(kind, self.orphans.get((kind, ns), ()))

    def serving_in(self, ns: str) -> list[dict]:
        return self._resolve("Pod", self.serving.get(ns, ()))

    def on_node(self, node: str) -> list[dict]:
        return [o for i in self.by_node.get(node, ()) if (o := self.objs["Pod"].get(i)) is not None]

    def _index(self, kind, ident, obj, add: bool):
        ns = ident[0]
        ref = model.controller_ref(obj)
        idx = [self.orphans[(kind, ns)] if ref is None else self.owned[(kind, ref.get("uid", ""))]]
        idx += [self.by_label[(kind, ns, k, v)] for k, v in model.labels(obj).items()]
        if kind == "Pod":
            st = model.status(obj)
            if st.get("ready") and st.get("phase") == "Running" and not model.is_terminating(obj):
                idx.append(self.serving[ns])
            n = model.spec(obj).get("node_name", "")
            if n:
                idx.append(self.by_node[n])
        for d in idx:
            if add:
                d[ident] = None
            else:
                d.pop(ident, None)

    def apply(self, etype: str, kind: str, obj: dict) -> dict | None:
        """Apply a watch event; returns the previous object under that identity."""
        ident = self.ident(obj)
        old = self.objs[kind].get(ident)
        if old is not None:
            self._index(kind, ident, old, False)
        if etype == "DELETED":
            self.objs[kind].pop(ident, None)
            self.by_ns[(kind, ident[0])].pop(ident[1], None)
        else:
            self.objs[kind][ident] = obj
            self.by_ns[(kind, ident[0])][ident[1]] = obj
            self._index(kind, ident, obj, True)
        return old


class Component:
    """Base for watch-driven components with leadership and crash restarts."""

    kinds: tuple = ()

    def __init__(self, ctx, name: str):
        self.ctx = ctx
        self.kernel = ctx.kernel
        self.api = ctx.api
        self.cfg = ctx.cfg
        self.name = name
        self.sender = name
        self.rng = self.kernel.rng(name)
        self.informer = Informer()
        self.sub = None
        self.leader = False
        self.alive = False
        self.epoch = 0
        self.restarts = 0
        self.leader_since: list[int] = []
        self.bucket: TokenBucket | None = None
        self.inflight = 0

    # -- lifecycle ---------------------------------------------------------------

    def start(self):
        self.epoch += 1
        self.alive = True
        self.sub = self.api.subscribe(self.name, self._on_event, self.kinds,
                                      self.cfg.watch_latency_ms, self.cfg.watch_jitter_ms)
        for kind in self.kinds:
            for obj in self.api.list(kind):
                self.informer.apply("ADDED", kind, obj)
        self.leader = True
        self.leader_since.append(self.kernel.now)
        self.kernel.decide(self.name, "leader", "acquired leadership")
        self.on_start()

    def stop(self, reason: str):
        self.epoch += 1
        self.alive = False
        self.leader = False
        if self.sub is not None:
            self.api.unsubscribe(self.sub)
            self.sub = None
        self.informer.clear()
        self.inflight = 0
        self.on_stop()
        self.kernel.decide(self.name, "stop", reason)

    def restart(self, reason: str, delay: int | None = None):
        """Drop leadership and local state; a new leader starts after the election delay."""
        self.restarts += 1
        self.stop(reason)
        delay = self.cfg.leader_election_delay_ms if delay is None else delay
        self.kernel.decide(self.name, "restart", reason, new_leader_at=self.kernel.now + delay)
        self.kernel.schedule(delay, self.name, self.start)

    def on_start(self):
        pass

    def on_stop(self):
        pass

    # -- plumbing ----------------------------------------------------------------

    def after(self, delay: int, fn: Callable, *args):
        epoch = self.epoch

        def fire():
            if self.alive and self.epoch == epoch:
                self.guard(fn, *args)
        return self.kernel.schedule(max(0, int(delay)), self.name, fire)

    def guard(self, fn, *args):
        try:
            return fn(*args)
        except Exception as e:  # unexpected data crashes the component, as in a real process
            detail = "".join(traceback.format_exception_only(type(e), e)).strip()
            self.kernel.decide(self.name, "crash", detail)
            self.restart(f"crash: {detail}", delay=self.cfg.leader_election_delay_ms)

    def _on_event(self, etype, key, obj):
        if not self.alive:
            return
        self.guard(self._handle_event, etype, key, obj)

    def _handle_event(self, etype, key, obj):
        kind = key[0]
        old = self.informer.apply(etype, kind, obj)
        self.on_event(etype, kind, old, obj)

    def on_event(self, etype, kind, old, obj):
        pass

    def request(self, op: str, kind: str, obj: dict, key=None, subresource=None,
                on_ok: Callable | None = None, on_err: Callable | None = None):
        """Rate-limited request to the apiserver; callbacks fire on the outcome."""
        now = self.kernel.now
        at = self.bucket.reserve(now) if self.bucket else now
        self.inflight += 1

        def send():
            self.inflight -= 1
            res = self.api.request(self.sender, op, kind, obj, key=key, subresource=subresource)
            if isinstance(res, UserError):
                self.kernel.decide(self.name, "request-failed", res.reason, op=op, kind=kind,
                                   name=obj.get("metadata", {}).get("name", ""))
                if on_err:
                    on_err(res)
            elif on_ok:
                on_ok(res)

        if at <= now:
            self.guard(send)
        else:
            self.after(at - now, send)

    def pending_work(self) -> int:
        return self.inflight


class WorkQueue:
    """Deduplicating queue with per-key exponential retry backoff."""

    def __init__(self, comp: Component, name: str, handler: Callable, policy: BackoffPolicy):
        self.comp = comp
        self.name = name
        self.handler = handler
        self.policy = policy
        self.queued: set = set()
        self.failures: dict = {}

    def add(self, key, delay: int = 1):
        if key in self.queued:
            return
        self.queued.add(key)
        self.comp.after(delay, self._process, key)

    def retry(self, key):
        n = self.failures.get(key, 0) + 1
        self.failures[key] = n
        self.add(key, self.policy.delay(n))

    def forget(self, key):
        self.failures.pop(key, None)

    def _process(self, key):
        self.queued.discard(key)
        self.handler(key)

    def reset(self):
        self.queued.clear()
        self.failures.clear()

    def __len__(self):
        # keys parked in error backoff are retrying, not waiting to be worked on
        return sum(1 for k in self.queued if k not in self.failures)


class Expectations:
    """Outstanding creates/deletes per controller, so reconciles do not double-act."""

    def __init__(self, ttl: int):
        self.ttl = ttl
        self.items: dict = {}

    def expect(self, key, now: int, adds: int = 0, dels: int = 0):
        self.items[key] = [adds, dels, now]

    def satisfied(self, key, now: int) -> bool:
        e = self.items.get(key)
        if e is None:
            return True
        if (e[0] <= 0 and e[1] <= 0) or now - e[2] > self.ttl:
            return True
        return False

    def observe_add(self, key):
        e = self.items.get(key)
        if e is not None:
            e[0] -= 1

    def observe_del(self, key):
        e = self.items.get(key)
        if e is not None:
            e[1] -= 1

    def clear(self):
        self.items.clear()

    def pending(self) -> int:
        return sum(1 for e in self.items.values() if e[0] > 0 or e[1] > 0)


def is_ack(res) -> bool:
    return isinstance(res, Ack)
