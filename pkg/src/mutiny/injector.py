"""Single-shot fault injector on the wire channels.

A spec names where (channel, kind, field path or raw offset), what (BitFlip,
ValueSet, Drop) and when (occurrence index of messages about one instance).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any

from . import model
from .wire import (NotApplicable, Schema, Undecodable, WireMessage, decode, flip_bit_in_field,
                   flip_raw_byte, get_path, load_schema, set_field)

ACTIONS = ("BitFlip", "ValueSet", "Drop")
VERBS = ("create", "update", "delete", "update/status", "update/binding", "update/scale", "delete/force")
CHANNELS = ("ToStore", "AtRest", "ToApi", "ToApi:kcm", "ToApi:scheduler", "ToApi:user")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InjectionSpec:
    channel: str
    kind: str
    action: str
    when: int = 1
    path: str | None = None
    offset: int | None = None
    bit: int | None = None
    value: Any = None
    # optional narrowing of which instances are counted
    namespace: str | None = None
    name: str | None = None
    # request verb, e.g. "create", "update", "update/status", "update/binding", "delete"
    verb: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "InjectionSpec":
        return cls.from_dict(json.loads(text))

    @property
    def id(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def describe(self) -> str:
        where = self.path if self.path is not None else f"byte {self.offset}"
        what = self.action
        if self.action == "BitFlip":
            what = f"BitFlip({self.bit})"
        elif self.action == "ValueSet":
            what = f"ValueSet({self.value!r})" if not isinstance(self.value, str) or len(self.value) < 20 \
                else f"ValueSet(<{len(self.value)} chars>)"
        return f"{self.channel} {self.kind} {where if self.action != 'Drop' else ''} {what} when={self.when}" \
            .replace("  ", " ")


def check_spec(spec: InjectionSpec, schema: Schema | None = None) -> None:
    """Raise ConfigError for a spec that cannot be armed."""
    schema = schema or load_schema()
    if spec.action not in ACTIONS:
        raise ConfigError(f"unknown action {spec.action!r}")
    if spec.channel not in CHANNELS and not spec.channel.startswith("ToApi:kubelet"):
        raise ConfigError(f"unknown channel {spec.channel!r}")
    if spec.kind not in model.KINDS:
        raise ConfigError(f"unknown kind {spec.kind!r}")
    if spec.verb is not None and spec.verb not in VERBS:
        raise ConfigError(f"unknown verb {spec.verb!r}")
    if not isinstance(spec.when, int) or spec.when < 1:
        raise ConfigError("when must be an integer >= 1")
    if spec.action == "Drop":
        if spec.channel == "AtRest":
            raise ConfigError("Drop has no meaning at rest")
        if spec.path is not None or spec.offset is not None:
            raise ConfigError("Drop takes neither a path nor an offset")
        return
    if (spec.path is None) == (spec.offset is None):
        raise ConfigError("exactly one of path / offset is required")
    if spec.path is not None:
        try:
            schema.resolve(spec.kind, spec.path)
        except KeyError as e:
            raise ConfigError(str(e)) from None
        if spec.action == "BitFlip" and (spec.bit is None or spec.bit < 1):
            raise ConfigError("field BitFlip needs a 1-based bit")
    else:
        if spec.action != "BitFlip":
            raise ConfigError("raw offsets only support BitFlip")
        if spec.offset < 0 or spec.bit is None or not 0 <= spec.bit <= 7:
            raise ConfigError("raw BitFlip needs offset >= 0 and bit in 0..7")


@dataclass
class InjectionOutcome:
    armed: bool = False
    armed_at: int | None = None
    status: str = "pending"  # pending | fired | not_applicable
    fired_at: int | None = None
    target: list | None = None
    operation: str | None = None
    channel: str | None = None
    pre_bytes: str | None = None
    post_bytes: str | None = None
    pre_value: Any = None
    post_value: Any = None
    activated: bool = False
    activated_at: int | None = None
    undecodable: bool = False
    reason: str | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _value_of(obj, path):
    try:
        return get_path(obj, path)
    except (NotApplicable, KeyError, IndexError, ValueError):
        return None


def _verb(msg: WireMessage) -> str:
    return f"{msg.operation}/{msg.subresource}" if msg.subresource else msg.operation


class Injector:
    def __init__(self, kernel, schema: Schema | None = None):
        self.kernel = kernel
        self.schema = schema or load_schema()
        self.spec: InjectionSpec | None = None
        self.outcome = InjectionOutcome()
        self.counts: dict[tuple, int] = {}
        self._live = False

    def arm(self, spec: InjectionSpec) -> None:
        if self.spec is not None:
            raise ConfigError("injector already armed")
        check_spec(spec, self.schema)
        self.spec = spec
        self._live = True
        self.outcome.armed = True
        self.outcome.armed_at = self.kernel.now
        self.kernel.decide("injector", "arm", spec.describe())

    @property
    def fired(self) -> bool:
        return self.outcome.status != "pending"

    def _matches(self, channel: str, key, verb: str | None = None) -> bool:
        s = self.spec
        if s.verb is not None and verb != s.verb:
            return False
        if s.channel == "ToApi":
            if not channel.startswith("ToApi:"):
                return False
        elif s.channel == "AtRest":
            if channel != "ToStore":
                return False
        elif s.channel == "ToApi:kubelet":
            # any node agent
            if not channel.startswith("ToApi:kubelet"):
                return False
        elif s.channel != channel:
            return False
        if key[0] != s.kind:
            return False
        if s.namespace is not None and key[1] != s.namespace:
            return False
        return s.name is None or key[2] == s.name

    def _count(self, channel, key) -> bool:
        k = (channel, tuple(key))
        n = self.counts.get(k, 0) + 1
        self.counts[k] = n
        return n == self.spec.when

    def _tamper(self, msg: WireMessage) -> WireMessage:
        s = self.spec
        if s.offset is not None:
            return flip_raw_byte(msg, s.offset, s.bit)
        if s.action == "BitFlip":
            return flip_bit_in_field(msg, s.path, s.bit, self.schema)
        return set_field(msg, s.path, s.value, self.schema)

    def _fire(self, msg: WireMessage) -> WireMessage | None:
        s = self.spec
        out = self.outcome
        out.fired_at = self.kernel.now
        out.target = list(msg.key)
        out.operation = msg.operation
        out.channel = msg.channel
        out.pre_bytes = msg.data.hex()
        if s.action == "Drop":
            out.status = "fired"
            self.kernel.decide("injector", "drop", s.describe(), key=list(msg.key))
            return None
        pre = msg.decoded if msg.decoded is not None else decode(msg.data, self.schema,
                                                                  self.schema.message_for_kind(msg.kind))
        if s.path is not None and not isinstance(pre, Undecodable):
            out.pre_value = _value_of(pre, s.path)
        try:
            new = self._tamper(msg)
        except NotApplicable as e:
            out.status = "not_applicable"
            out.reason = str(e)
            self.kernel.decide("injector", "not-applicable", str(e), key=list(msg.key))
            return msg
        out.status = "fired"
        out.post_bytes = new.data.hex()
        post = decode(new.data, self.schema, self.schema.message_for_kind(msg.kind))
        if isinstance(post, Undecodable):
            out.undecodable = True
        elif s.path is not None:
            out.post_value = _value_of(post, s.path)
        self.kernel.decide("injector", "tamper", s.describe(), key=list(msg.key))
        return new

    # -- hooks called by the apiserver ---------------------------------------------

    def intercept(self, msg: WireMessage) -> WireMessage | None:
        if not self._live or self.fired or self.spec.channel == "AtRest":
            return msg
        if not self._matches(msg.channel, msg.key, _verb(msg)):
            return msg
        if not self._count(msg.channel, msg.key):
            return msg
        return self._fire(msg)

    def after_store_write(self, msg: WireMessage, store) -> None:
        if not self._live or self.fired or self.spec.channel != "AtRest":
            return
        if msg.operation == "delete" or not self._matches(msg.channel, msg.key, _verb(msg)):
            return
        if not self._count("AtRest", msg.key):
            return
        cur = store.entries.get(tuple(msg.key))
        if cur is None:
            return
        stored = WireMessage("AtRest", tuple(msg.key), "update", cur[0])
        new = self._fire(stored)
        if new is not None and self.outcome.status == "fired":
            store.corrupt_at_rest(msg.key, new.data)

    def on_read(self, key) -> None:
        out = self.outcome
        if out.status != "fired" or out.activated or out.target is None:
            return
        if list(key) == out.target and self.kernel.now >= out.fired_at:
            out.activated = True
            out.activated_at = self.kernel.now


def value_catalog(semantic_type: str, path: str = "", kind: str = "", semantic: bool = True) -> list:
    """ValueSet values for a field: generic per-type values plus field-specific ones."""
    if semantic_type == "int":
        vals: list = [0, -1, 2**31 - 1]
    elif semantic_type == "string":
        vals = ["", "UNSUPPORTED", "x" * 256]
    elif semantic_type == "bool":
        vals = []  # inversion is a BitFlip
    else:
        vals = []
    if semantic:
        leaf = path.rsplit(".", 1)[-1]
        if leaf == "node_name":
            vals.append("worker-3x")
        elif leaf == "namespace":
            vals.append("kube-system")
        elif leaf == "uid":
            vals.append("u-99999999")
    return vals
