"""State store and apiserver front-end.

The store holds encoded bytes only.  The apiserver decodes, validates and
admits requests arriving on ``ToApi:<sender>`` channels, forwards them as
``ToStore`` transactions and fans watch events out to components through a
cache that it keeps in sync from the store's own watch.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Callable

from . import model
from .kernel import Kernel
from .wire import Schema, Undecodable, WireMessage, decode, encode

DEFAULT_CAPACITY = 20_000
NAMESPACES = ("default", "kube-system", "monitoring")


@dataclass
class TxResult:
    status: str  # applied | rejected | deleted-undecodable
    resource_version: int = 0
    reason: str = ""


@dataclass
class Ack:
    resource_version: int = 0
    object: dict | None = None


@dataclass
class UserError:
    reason: str


def _strip_version(obj: dict) -> dict:
    obj = copy.deepcopy(obj)
    obj.get("metadata", {}).pop("resource_version", None)
    return obj


def _with_version(obj: dict, rv: int) -> dict:
    obj["metadata"]["resource_version"] = rv
    return obj


class Store:
    """Key to bytes map with a global revision counter and one watch stream."""

    def __init__(self, kernel: Kernel, schema: Schema, capacity: int = DEFAULT_CAPACITY):
        self.kernel = kernel
        self.schema = schema
        self.capacity = capacity
        self.entries: dict[tuple, list] = {}  # key -> [bytes, resource_version]
        self.revision = 0
        self.stalled = False
        self.stalled_at: int | None = None
        self.purged: list[dict] = []
        self.max_entries = 0
        self._watchers: list[Callable] = []

    def watch(self, callback: Callable) -> None:
        self._watchers.append(callback)

    def _decode(self, key, data) -> dict | Undecodable:
        return decode(data, self.schema, self.schema.message_for_kind(key[0]))

    def _notify(self, etype, key, obj, rv):
        for w in self._watchers:
            w(etype, key, obj, rv)

    def _purge(self, key, reason: str) -> int:
        self.entries.pop(key, None)
        self.revision += 1
        self.purged.append({"time": self.kernel.now, "key": list(key), "reason": reason})
        self.kernel.decide("store", "delete-undecodable", reason, key=list(key))
        self._notify("DELETED", key, None, self.revision)
        return self.revision

    def apply_transaction(self, msg: WireMessage) -> TxResult:
        key = tuple(msg.key)
        cur = self.entries.get(key)
        if msg.expected_version is not None and (cur is None or cur[1] != msg.expected_version):
            return TxResult("rejected", reason="conflict: stale resource_version")
        if msg.operation == "delete":
            if cur is None:
                return TxResult("rejected", reason="not found")
            del self.entries[key]
            self.revision += 1
            self._notify("DELETED", key, None, self.revision)
            return TxResult("applied", self.revision)
        if msg.operation == "create" and cur is not None:
            return TxResult("rejected", reason="already exists")
        if msg.operation == "update" and cur is None:
            return TxResult("rejected", reason="not found")
        if cur is None and len(self.entries) >= self.capacity:
            if not self.stalled:
                self.stalled, self.stalled_at = True, self.kernel.now
                self.kernel.decide("store", "stall", "capacity reached", entries=len(self.entries))
            return TxResult("rejected", reason="store stalled: capacity reached")
        self.revision += 1
        self.entries[key] = [msg.data, self.revision]
        self.max_entries = max(self.max_entries, len(self.entries))
        obj = self._decode(key, msg.data)
        if isinstance(obj, Undecodable):
            rv = self._purge(key, f"offset {obj.offset}: {obj.reason}")
            return TxResult("deleted-undecodable", rv, obj.reason)
        self._notify("ADDED" if cur is None else "MODIFIED", key, obj, self.revision)
        return TxResult("applied", self.revision)

    def read(self, key) -> tuple[dict, int] | None:
        """Quorum-style read; undecodable entries are deleted on the way."""
        cur = self.entries.get(tuple(key))
        if cur is None:
            return None
        obj = self._decode(key, cur[0])
        if isinstance(obj, Undecodable):
            self._purge(tuple(key), f"offset {obj.offset}: {obj.reason}")
            return None
        return obj, cur[1]

    def list(self, kind: str | None = None) -> list[tuple[tuple, dict, int]]:
        out = []
        for key in sorted(self.entries):
            if kind is not None and key[0] != kind:
                continue
            got = self.read(key)
            if got is not None:
                out.append((key, got[0], got[1]))
        return out

    def corrupt_at_rest(self, key, data: bytes) -> None:
        # silent: no revision bump, no watch event
        self.entries[tuple(key)][0] = data

    def dump_jsonl(self) -> str:
        lines = []
        for key in sorted(self.entries):
            data, rv = self.entries[key]
            lines.append(json.dumps({"key": list(key), "resource_version": rv, "bytes": data.hex()},
                                    sort_keys=True))
        return "".join(line + "\n" for line in lines)


@dataclass
class Subscription:
    name: str
    callback: Callable
    kinds: frozenset
    latency: int
    jitter: int
    last: int = 0
    delivered: int = 0


class ApiServer:
    """Admission, validation and watch fan-out in front of the store."""

    def __init__(self, kernel: Kernel, store: Store, schema: Schema, namespaces=NAMESPACES,
                 injector=None, uids: model.UidSource | None = None):
        self.kernel = kernel
        self.store = store
        self.schema = schema
        self.namespaces = set(namespaces)
        self.injector = injector
        self.uids = uids or model.UidSource()
        self.cache: dict[tuple, tuple[dict, int]] = {}
        self.subs: list[Subscription] = []
        self.user_errors: list[dict] = []
        self.errors: list[dict] = []
        self.rejections = 0
        self.applied_by: dict[str, int] = {}
        self.last_applied: dict[str, int] = {}
        self.last_request: dict[str, int] = {}
        self.pod_creates = 0
        self._rng = kernel.rng("apiserver")
        store.watch(self._on_store_event)

    # -- watch plumbing ----------------------------------------------------

    def subscribe(self, name: str, callback: Callable, kinds, latency: int = 2, jitter: int = 3):
        sub = Subscription(name, callback, frozenset(kinds), latency, jitter)
        self.subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        if sub in self.subs:
            self.subs.remove(sub)

    def _on_store_event(self, etype, key, obj, rv):
        old = self.cache.get(key)
        if etype == "DELETED":
            self.cache.pop(key, None)
            if old is None:
                return
            obj = old[0]
        else:
            obj = _with_version(obj, rv)
            self.cache[key] = (obj, rv)
        for sub in self.subs:
            if key[0] not in sub.kinds:
                continue
            t = max(sub.last, self.kernel.now + sub.latency + self._rng.randint(0, sub.jitter))
            sub.last = t
            self.kernel.schedule_at(t, sub.name, self._deliver(sub, etype, key, obj))

    def _deliver(self, sub, etype, key, obj):
        def fire():
            if sub not in self.subs:
                return
            sub.delivered += 1
            if self.injector is not None:
                self.injector.on_read(key)
            sub.callback(etype, key, obj)
        return fire

    # -- reads -----------------------------------------------------------------

    def cache_read(self, key) -> dict | None:
        key = tuple(key)
        hit = self.cache.get(key)
        if hit is None:
            got = self.store.read(key)
            if got is None:
                return None
            hit = self.cache[key] = (_with_version(got[0], got[1]), got[1])
        if self.injector is not None:
            self.injector.on_read(key)
        return hit[0]

    get = cache_read

    def list(self, kind: str) -> list[dict]:
        return [v[0] for k, v in sorted(self.cache.items()) if k[0] == kind]

    def restart(self) -> None:
        """Rebuild the cache from a full store relist."""
        self.cache = {key: (_with_version(obj, rv), rv) for key, obj, rv in self.store.list()}
        self.kernel.decide("apiserver", "restart", "cache rebuilt from store")

    # -- writes ----------------------------------------------------------------

    def request(self, sender: str, operation: str, kind: str, obj: dict,
                key: tuple | None = None, subresource: str | None = None) -> Ack | UserError:
        """Encode a component's request and submit it on its ToApi channel."""
        if key is None:
            key = (kind, obj["metadata"].get("namespace", ""), obj["metadata"].get("name", ""))
        body = _strip_version(obj) if operation != "update" or subresource else copy.deepcopy(obj)
        try:
            data = encode(body, self.schema, self.schema.message_for_kind(kind))
        except Exception as e:  # a component holding a malformed instance
            return UserError(f"encode: {e}")
        msg = WireMessage(f"ToApi:{sender}", tuple(key), operation, data, body, subresource)
        return self.handle_request(msg)

    def _fail(self, entry, msg, reason) -> UserError:
        entry["outcome"] = "rejected"
        self.rejections += 1
        sender = msg.channel.split(":", 1)[1]
        rec = {"time": self.kernel.now, "sender": sender, "key": list(msg.key),
               "operation": msg.operation, "reason": reason}
        self.errors.append(rec)
        if sender == "user":
            self.user_errors.append(rec)
        return UserError(reason)

    def handle_request(self, msg: WireMessage) -> Ack | UserError:
        now = self.kernel.now
        self.last_request[msg.channel.split(":", 1)[1]] = now
        entry = self.kernel.trace.record(now, msg.channel, msg.key, msg.operation, "applied")
        if self.injector is not None:
            tampered = self.injector.intercept(msg)
            if tampered is None:
                entry["outcome"] = "dropped"
                return Ack()
            msg = tampered
        key = tuple(msg.key)
        kind = key[0]
        obj = decode(msg.data, self.schema, self.schema.message_for_kind(kind))
        if isinstance(obj, Undecodable):
            self._fail(entry, msg, f"decode: offset {obj.offset}: {obj.reason}")
            entry["outcome"] = "undecodable"
            return UserError(f"decode: {obj.reason}")
        if kind not in model.CLUSTER_SCOPED and key[1] not in self.namespaces:
            return self._fail(entry, msg, f"namespace {key[1]!r} not found")
        sub = msg.subresource
        if msg.operation != "delete":
            verdict = (model.validate_subresource(kind, obj, key, sub) if sub in ("status", "binding", "scale")
                       else model.validate_instance(kind, obj, key))
            if not verdict.ok:
                return self._fail(entry, msg, verdict.reason)

        hit = self.cache.get(key)
        if hit is None and msg.operation != "create":
            got = self.store.read(key)
            hit = (got[0], got[1]) if got else None
        cur, cur_rv = (copy.deepcopy(hit[0]), hit[1]) if hit else (None, None)
        op = msg.operation

        if op == "create":
            if cur is not None or self.store.entries.get(key) is not None:
                return self._fail(entry, msg, "already exists")
            new = _strip_version(obj)
            m = new["metadata"]
            m["uid"] = self.uids()
            m["creation_timestamp"] = now
            m["generation"] = 1
            if kind == "Pod":
                new.setdefault("status", {}).setdefault("phase", "Pending")
            out_op, expected = "create", None
        else:
            if cur is None:
                return self._fail(entry, msg, "not found")
            cm = cur["metadata"]
            bm = obj.get("metadata", {})
            if bm.get("uid") and bm["uid"] != cm.get("uid"):
                return self._fail(entry, msg, "precondition failed: uid mismatch")
            cur = _strip_version(cur)
            expected = cur_rv
            out_op = "update"
            if op == "delete":
                terminating = model.is_terminating(cur)
                if kind == "Pod" and sub != "force" and model.spec(cur).get("node_name"):
                    if terminating:
                        entry["outcome"] = "applied"
                        return Ack(cur_rv, hit[0])
                    new = cur
                    new["metadata"]["deletion_timestamp"] = max(now, 1)
                else:
                    new, out_op = cur, "delete"
            elif sub == "status":
                new = cur
                new["status"] = obj.get("status", {})
            elif sub == "binding":
                if model.spec(cur).get("node_name"):
                    return self._fail(entry, msg, f"conflict: already bound to {cur['spec']['node_name']!r}")
                new = cur
                new.setdefault("spec", {})["node_name"] = model.spec(obj).get("node_name", "")
            elif sub == "scale":
                new = cur
                new.setdefault("spec", {})["replicas"] = model.spec(obj).get("replicas", 0)
                new["metadata"]["generation"] = cm.get("generation", 0) + 1
            else:
                rv = bm.get("resource_version", 0)
                if rv and rv != cur_rv:
                    return self._fail(entry, msg, "conflict: stale resource_version")
                new = _strip_version(obj)
                nm = new["metadata"]
                for f in ("uid", "creation_timestamp", "deletion_timestamp"):
                    if f in cm:
                        nm[f] = cm[f]
                nm["generation"] = cm.get("generation", 0) + (new.get("spec") != cur.get("spec"))
                if "status" in cur:
                    new["status"] = cur["status"]
                else:
                    new.pop("status", None)

        sender = msg.channel.split(":", 1)[1]
        if out_op == "delete":
            data = msg.data if op == "delete" else encode(new, self.schema, self.schema.message_for_kind(kind))
            out = WireMessage("ToStore", key, "delete", data, new, expected_version=expected)
        else:
            data = encode(new, self.schema, self.schema.message_for_kind(kind))
            out = WireMessage("ToStore", key, out_op, data, new, expected_version=expected)
        res = self._to_store(out)
        if res.status == "rejected":
            return self._fail(entry, msg, res.reason)
        self.applied_by[sender] = self.applied_by.get(sender, 0) + 1
        self.last_applied[sender] = now
        hit = self.cache.get(key)
        return Ack(res.resource_version, hit[0] if hit else None)

    def _to_store(self, msg: WireMessage) -> TxResult:
        now = self.kernel.now
        entry = self.kernel.trace.record(now, "ToStore", msg.key, msg.operation, "applied")
        if self.injector is not None:
            tampered = self.injector.intercept(msg)
            if tampered is None:
                entry["outcome"] = "dropped"
                return TxResult("applied")
            msg = tampered
        res = self.store.apply_transaction(msg)
        entry["outcome"] = {"applied": "applied", "rejected": "rejected",
                            "deleted-undecodable": "undecodable"}[res.status]
        if res.status != "rejected":
            if msg.operation == "create" and msg.kind == "Pod":
                self.pod_creates += 1
            if self.injector is not None and res.status == "applied":
                self.injector.after_store_write(msg, self.store)
        return res
