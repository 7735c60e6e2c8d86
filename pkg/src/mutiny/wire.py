"""Protobuf-like wire encoding of resource instances.

Only two wire types are produced: varint (0) and length-delimited (2).
Messages are plain dicts ("field maps").  Fields the schema does not know,
or whose wire type disagrees with the schema, are kept under the
``"_unknown"`` key as ``[field_number, wire_type, raw_bytes]`` triples so a
decode/encode cycle never loses them.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

VARINT = 0
FIXED64 = 1
LENGTH_DELIMITED = 2
FIXED32 = 5

UNKNOWN = "_unknown"

_WIRE_TYPE = {"int": VARINT, "bool": VARINT, "string": LENGTH_DELIMITED,
              "nested": LENGTH_DELIMITED, "map": LENGTH_DELIMITED}


class EncodeError(ValueError):
    pass


class NotApplicable(LookupError):
    """The injection target does not exist in this message."""


@dataclass(frozen=True)
class Undecodable:
    offset: int
    reason: str


@dataclass(frozen=True)
class FieldDescriptor:
    field_number: int
    name: str
    type: str  # int | string | bool | nested | map
    required: bool = False
    repeated: bool = False
    message: str | None = None

    @property
    def wire_type(self) -> int:
        return _WIRE_TYPE[self.type]


@dataclass
class Schema:
    messages: dict[str, list[FieldDescriptor]]
    kinds: dict[str, str]
    _by_number: dict[str, dict[int, FieldDescriptor]] = field(default_factory=dict, repr=False)
    _by_name: dict[str, dict[str, FieldDescriptor]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for mname, fields in self.messages.items():
            nums = [f.field_number for f in fields]
            if len(set(nums)) != len(nums):
                raise ValueError(f"duplicate field number in {mname}")
            self._by_number[mname] = {f.field_number: f for f in fields}
            self._by_name[mname] = {f.name: f for f in fields}

    def fields(self, message: str) -> list[FieldDescriptor]:
        return self.messages[message]

    def by_number(self, message: str) -> dict[int, FieldDescriptor]:
        return self._by_number[message]

    def by_name(self, message: str) -> dict[str, FieldDescriptor]:
        return self._by_name[message]

    def message_for_kind(self, kind: str) -> str:
        try:
            return self.kinds[kind]
        except KeyError:
            raise KeyError(f"unknown kind {kind!r}") from None

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        messages = {
            name: [FieldDescriptor(**fd) for fd in fields]
            for name, fields in doc["messages"].items()
        }
        return cls(messages=messages, kinds=dict(doc["kinds"]))

    def resolve(self, kind: str, path: str) -> tuple[FieldDescriptor, str]:
        """Return the descriptor a dotted path ends in and its semantic type.

        Map keys and list indexes are free path segments.
        """
        msg = self.message_for_kind(kind)
        parts = path.split(".")
        i = 0
        fd = None
        while i < len(parts):
            fd = self.by_name(msg).get(parts[i])
            if fd is None:
                raise KeyError(f"{kind}: no field {parts[i]!r} in {path!r}")
            i += 1
            if fd.type == "map":
                if i != len(parts) - 1:
                    raise KeyError(f"{kind}: map path {path!r} needs exactly one key")
                return fd, "string"
            if fd.repeated:
                if i >= len(parts) or not parts[i].isdigit():
                    raise KeyError(f"{kind}: repeated field in {path!r} needs an index")
                i += 1
            if fd.type == "nested":
                msg = fd.message
                if i == len(parts):
                    raise KeyError(f"{kind}: {path!r} ends on a message")
            elif i != len(parts):
                raise KeyError(f"{kind}: {path!r} continues past a scalar")
        return fd, fd.type


_schema: Schema | None = None


def load_schema() -> Schema:
    global _schema
    if _schema is None:
        text = resources.files("mutiny").joinpath("schema.json").read_text()
        _schema = Schema.from_dict(json.loads(text))
    return _schema


# -- varints -----------------------------------------------------------------

def encode_varint(v: int) -> bytes:
    if v < 0:
        raise EncodeError(f"varint must be non-negative, got {v}")
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    """Return (value, new_pos); raises _Malformed on truncation or overlong input."""
    result = 0
    shift = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise _Malformed(start, "truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            break
        shift += 7
        if shift >= 70:
            raise _Malformed(start, "varint longer than 10 bytes")
    if result >= 1 << 64:
        raise _Malformed(start, "varint overflows 64 bits")
    return result, pos


def _int_to_wire(v: int) -> int:
    if v < -(1 << 63) or v >= 1 << 63:
        raise EncodeError(f"integer {v} outside int64")
    return v + (1 << 64) if v < 0 else v


def _int_from_wire(v: int) -> int:
    return v - (1 << 64) if v >= 1 << 63 else v


class _Malformed(Exception):
    def __init__(self, offset, reason):
        super().__init__(reason)
        self.offset = offset
        self.reason = reason


# -- messages ----------------------------------------------------------------

def _tag(field_number: int, wire_type: int) -> bytes:
    return encode_varint((field_number << 3) | wire_type)


def _encode_scalar(fd: FieldDescriptor, value: Any, schema: Schema, where: str) -> bytes:
    if fd.type == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise EncodeError(f"{where}: expected int, got {value!r}")
        return _tag(fd.field_number, VARINT) + encode_varint(_int_to_wire(value))
    if fd.type == "bool":
        if not isinstance(value, bool):
            raise EncodeError(f"{where}: expected bool, got {value!r}")
        return _tag(fd.field_number, VARINT) + encode_varint(int(value))
    if fd.type == "string":
        if not isinstance(value, str):
            raise EncodeError(f"{where}: expected str, got {value!r}")
        data = value.encode("utf-8")
    elif fd.type == "nested":
        if not isinstance(value, dict):
            raise EncodeError(f"{where}: expected message, got {value!r}")
        data = _encode_message(value, fd.message, schema, where)
    else:
        raise EncodeError(f"{where}: bad type {fd.type}")
    return _tag(fd.field_number, LENGTH_DELIMITED) + encode_varint(len(data)) + data


def _encode_map_entry(fd: FieldDescriptor, k: Any, v: Any, where: str) -> bytes:
    if not isinstance(k, str) or not isinstance(v, str):
        raise EncodeError(f"{where}: map entries must be str->str")
    kb, vb = k.encode(), v.encode()
    entry = (_tag(1, LENGTH_DELIMITED) + encode_varint(len(kb)) + kb
             + _tag(2, LENGTH_DELIMITED) + encode_varint(len(vb)) + vb)
    return _tag(fd.field_number, LENGTH_DELIMITED) + encode_varint(len(entry)) + entry


def _encode_message(obj: dict, message: str, schema: Schema, where: str = "") -> bytes:
    by_name = schema.by_name(message)
    chunks: list[tuple[int, int, bytes]] = []
    for name, value in obj.items():
        if name == UNKNOWN:
            continue
        fd = by_name.get(name)
        if fd is None:
            raise EncodeError(f"{where}{message}: unknown field {name!r}")
        path = f"{where}{name}"
        if fd.type == "map":
            if not isinstance(value, dict):
                raise EncodeError(f"{path}: expected map")
            data = b"".join(_encode_map_entry(fd, k, value[k], path) for k in sorted(value))
        elif fd.repeated:
            if not isinstance(value, list):
                raise EncodeError(f"{path}: expected list")
            data = b"".join(_encode_scalar(fd, v, schema, f"{path}.{i}.") for i, v in enumerate(value))
        else:
            data = _encode_scalar(fd, value, schema, path + ".")
        chunks.append((fd.field_number, 0, data))
    for i, (num, wt, raw) in enumerate(obj.get(UNKNOWN, ())):
        chunks.append((num, 1, _tag(num, wt) + raw))
    for fd in schema.fields(message):
        if fd.required and fd.name not in obj:
            raise EncodeError(f"{where}{message}: required field {fd.name!r} missing")
    # stable: known field before unknown with the same number, unknowns keep order
    chunks.sort(key=lambda c: (c[0], c[1]))
    return b"".join(c[2] for c in chunks)


def encode(instance: dict, schema: Schema, message: str) -> bytes:
    """Canonical bytes: ascending field numbers, minimal varints, sorted map keys."""
    return _encode_message(instance, message, schema)


def _read_field(buf: bytes, pos: int) -> tuple[int, int, Any, bytes, int]:
    """Read one field; returns (number, wire_type, value, raw_value_bytes, new_pos)."""
    start = pos
    key, pos = decode_varint(buf, pos)
    number, wt = key >> 3, key & 7
    if number == 0:
        raise _Malformed(start, "field number 0")
    vstart = pos
    if wt == VARINT:
        value, pos = decode_varint(buf, pos)
    elif wt == LENGTH_DELIMITED:
        n, pos = decode_varint(buf, pos)
        if pos + n > len(buf):
            raise _Malformed(vstart, f"length {n} overruns buffer")
        value = buf[pos:pos + n]
        pos += n
    elif wt == FIXED64:
        if pos + 8 > len(buf):
            raise _Malformed(vstart, "truncated fixed64")
        value = buf[pos:pos + 8]
        pos += 8
    elif wt == FIXED32:
        if pos + 4 > len(buf):
            raise _Malformed(vstart, "truncated fixed32")
        value = buf[pos:pos + 4]
        pos += 4
    else:
        raise _Malformed(start, f"unsupported wire type {wt}")
    return number, wt, value, buf[vstart:pos], pos


def _decode_message(buf: bytes, message: str, schema: Schema, base: int) -> dict:
    by_number = schema.by_number(message)
    out: dict = {}
    pos = 0
    while pos < len(buf):
        start = pos
        try:
            number, wt, value, raw, pos = _read_field(buf, pos)
        except _Malformed as e:
            raise _Malformed(base + e.offset, e.reason) from None
        fd = by_number.get(number)
        if fd is None or fd.wire_type != wt:
            out.setdefault(UNKNOWN, []).append([number, wt, raw])
            continue
        vbase = base + pos - len(value) if wt == LENGTH_DELIMITED else base + start
        if fd.type == "int":
            v = _int_from_wire(value)
        elif fd.type == "bool":
            v = value != 0
        elif fd.type == "string":
            try:
                v = value.decode("utf-8")
            except UnicodeDecodeError:
                raise _Malformed(vbase, f"invalid utf-8 in {fd.name}") from None
        elif fd.type == "map":
            entry = _decode_map_entry(value, vbase, fd.name)
            out.setdefault(fd.name, {}).update([entry])
            continue
        else:
            v = _decode_message(value, fd.message, schema, vbase)
        if fd.repeated:
            out.setdefault(fd.name, []).append(v)
        else:
            out[fd.name] = v
    for fd in schema.fields(message):
        if fd.required and fd.name not in out:
            raise _Malformed(base + len(buf), f"{message}: required field {fd.name!r} missing")
    return out


def _decode_map_entry(buf: bytes, base: int, name: str) -> tuple[str, str]:
    k = v = None
    pos = 0
    while pos < len(buf):
        try:
            number, wt, value, _, pos = _read_field(buf, pos)
        except _Malformed as e:
            raise _Malformed(base + e.offset, e.reason) from None
        if wt != LENGTH_DELIMITED or number not in (1, 2):
            raise _Malformed(base, f"bad map entry in {name}")
        try:
            s = value.decode("utf-8")
        except UnicodeDecodeError:
            raise _Malformed(base, f"invalid utf-8 in {name}") from None
        if number == 1:
            k = s
        else:
            v = s
    return (k or "", v or "")


def decode(data: bytes, schema: Schema, message: str) -> dict | Undecodable:
    try:
        return _decode_message(bytes(data), message, schema, 0)
    except _Malformed as e:
        return Undecodable(e.offset, e.reason)


# -- wire messages and tampering -------------------------------------------------

@dataclass
class WireMessage:
    channel: str
    key: tuple[str, str, str]  # (kind, namespace, name)
    operation: str  # create | update | delete
    data: bytes
    decoded: dict | None = None
    subresource: str | None = None
    expected_version: int | None = None

    @property
    def kind(self) -> str:
        return self.key[0]

    def hex(self) -> str:
        return self.data.hex()

    def replace(self, data: bytes, decoded: dict | None) -> "WireMessage":
        return WireMessage(self.channel, self.key, self.operation, data, decoded,
                           self.subresource, self.expected_version)


def make_message(channel: str, key, operation: str, instance: dict,
                 schema: Schema | None = None, **kw) -> WireMessage:
    schema = schema or load_schema()
    data = encode(instance, schema, schema.message_for_kind(key[0]))
    return WireMessage(channel, tuple(key), operation, data, instance, **kw)


def _walk(obj: dict, path: str, create: bool = False):
    """Return (container, last_key) for a dotted path into a decoded message."""
    parts = path.split(".")
    cur: Any = obj
    for p in parts[:-1]:
        if isinstance(cur, list):
            idx = int(p)
            if idx >= len(cur):
                raise NotApplicable(path)
            cur = cur[idx]
        elif isinstance(cur, dict):
            if p not in cur:
                if not create:
                    raise NotApplicable(path)
                cur[p] = {}
            cur = cur[p]
        else:
            raise NotApplicable(path)
    last = parts[-1]
    if isinstance(cur, list):
        last = int(last)
        if last >= len(cur):
            raise NotApplicable(path)
    elif not isinstance(cur, dict) or (last not in cur and not create):
        raise NotApplicable(path)
    return cur, last


def get_path(obj: dict, path: str) -> Any:
    container, last = _walk(obj, path)
    return container[last]


def set_path(obj: dict, path: str, value: Any) -> None:
    container, last = _walk(obj, path, create=True)
    container[last] = value


def flip_value(value: Any, bit_index: int) -> Any:
    """Flip one bit of a decoded scalar.

    Integers: bit ``bit_index`` counted from 1 at the least-significant bit.
    Strings: least-significant bit of character number ``bit_index``.
    Booleans are inverted.
    """
    if bit_index < 1:
        raise ValueError("bit_index is 1-based")
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value ^ (1 << (bit_index - 1))
    if isinstance(value, str):
        raw = bytearray(value.encode("utf-8"))
        if bit_index > len(raw):
            raise NotApplicable(f"string shorter than {bit_index} characters")
        raw[bit_index - 1] ^= 0x01
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise NotApplicable("flip breaks utf-8") from None
    raise NotApplicable(f"cannot flip {type(value).__name__}")


def _decoded_or_raise(msg: WireMessage, schema: Schema) -> dict:
    if msg.decoded is not None:
        return copy.deepcopy(msg.decoded)
    obj = decode(msg.data, schema, schema.message_for_kind(msg.kind))
    if isinstance(obj, Undecodable):
        raise NotApplicable(f"message undecodable: {obj.reason}")
    return obj


def flip_bit_in_field(msg: WireMessage, path: str, bit_index: int,
                      schema: Schema | None = None) -> WireMessage:
    schema = schema or load_schema()
    obj = _decoded_or_raise(msg, schema)
    set_path(obj, path, flip_value(get_path(obj, path), bit_index))
    return msg.replace(encode(obj, schema, schema.message_for_kind(msg.kind)), obj)


def set_field(msg: WireMessage, path: str, value: Any, schema: Schema | None = None) -> WireMessage:
    schema = schema or load_schema()
    obj = _decoded_or_raise(msg, schema)
    get_path(obj, path)  # path must already exist
    set_path(obj, path, value)
    try:
        data = encode(obj, schema, schema.message_for_kind(msg.kind))
    except EncodeError as e:
        raise NotApplicable(str(e)) from None
    return msg.replace(data, obj)


def flip_raw_byte(msg: WireMessage, offset: int, bit: int) -> WireMessage:
    if not 0 <= bit <= 7:
        raise ValueError("bit must be in 0..7")
    if not 0 <= offset < len(msg.data):
        raise NotApplicable(f"offset {offset} outside {len(msg.data)} bytes")
    data = bytearray(msg.data)
    data[offset] ^= 1 << bit
    return msg.replace(bytes(data), None)


def flatten_fields(obj: dict, kind: str, schema: Schema | None = None) -> list[tuple[str, str]]:
    """All scalar leaf paths of a decoded instance with their semantic type."""
    schema = schema or load_schema()
    out: list[tuple[str, str]] = []

    def walk(o: dict, message: str, prefix: str):
        by_name = schema.by_name(message)
        for name, value in o.items():
            fd = by_name.get(name)
            if fd is None:
                continue
            p = prefix + name
            if fd.type == "map":
                out.extend((f"{p}.{k}", "string") for k in value)
            elif fd.repeated:
                for i, v in enumerate(value):
                    if fd.type == "nested":
                        walk(v, fd.message, f"{p}.{i}.")
                    else:
                        out.append((f"{p}.{i}", fd.type))
            elif fd.type == "nested":
                walk(value, fd.message, p + ".")
            else:
                out.append((p, fd.type))

    walk(obj, schema.message_for_kind(kind), "")
    return out
