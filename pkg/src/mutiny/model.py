"""Resource instances, label relationships and apiserver validation rules.

Instances are decoded field maps (see ``wire``).  Empty maps and lists are
omitted from canonical instances, so readers go through the small accessors
below instead of indexing directly.
"""
from __future__ import annotations

import copy
import json
import re
import zlib
from dataclasses import dataclass

KINDS = ("Pod", "ReplicaSet", "Deployment", "DaemonSet", "Service", "Endpoints", "Node")
CLUSTER_SCOPED = {"Node"}
WORKLOAD_KINDS = {"ReplicaSet", "Deployment", "DaemonSet"}

NODE_CPU_MILLICORES = 8000
NODE_MEMORY_MIB = 4096

POD_PHASES = {"Pending", "Running", "Terminating", "Failed", "Succeeded"}
TAINT_EFFECTS = {"NoSchedule", "NoExecute", "PreferNoSchedule"}
PROTOCOLS = {"TCP", "UDP", "SCTP"}

TEMPLATE_HASH = "template-hash"

_DNS_LABEL = re.compile(r"^[a-z0-9]([-a-z0-9]*[a-z0-9])?$")
_DNS_SUBDOMAIN = re.compile(r"^[a-z0-9]([-a-z0-9.]*[a-z0-9])?$")
_LABEL_NAME = re.compile(r"^[A-Za-z0-9]([-A-Za-z0-9_.]*[A-Za-z0-9])?$")
_IPV4 = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")


# -- accessors ---------------------------------------------------------------

def meta(obj: dict) -> dict:
    return obj["metadata"]


def name_of(obj: dict) -> str:
    return obj["metadata"]["name"]


def ns_of(obj: dict) -> str:
    return obj["metadata"]["namespace"]


def uid_of(obj: dict) -> str:
    return obj["metadata"].get("uid", "")


def labels(obj: dict) -> dict:
    return obj["metadata"].get("labels", {})


def annotations(obj: dict) -> dict:
    return obj["metadata"].get("annotations", {})


def owners(obj: dict) -> list[dict]:
    return obj["metadata"].get("owner_references", [])


def spec(obj: dict) -> dict:
    return obj.get("spec", {})


def status(obj: dict) -> dict:
    return obj.get("status", {})


def key_of(kind: str, obj: dict) -> tuple[str, str, str]:
    return (kind, ns_of(obj), name_of(obj))


def is_terminating(obj: dict) -> bool:
    return obj["metadata"].get("deletion_timestamp", 0) > 0


def controller_ref(obj: dict) -> dict | None:
    for ref in owners(obj):
        if ref.get("controller"):
            return ref
    return None


def owned_by(obj: dict, owner: dict) -> bool:
    uid = uid_of(owner)
    return bool(uid) and any(ref.get("uid") == uid for ref in owners(obj))


def selector_matches(selector: dict, lbls: dict) -> bool:
    """True iff every selector pair is present in ``lbls``; empty selects nothing."""
    if not selector:
        return False
    return all(lbls.get(k) == v for k, v in selector.items())


def template_hash(template: dict) -> str:
    return format(zlib.crc32(json.dumps(template, sort_keys=True).encode()), "08x")


def pod_requests(pod: dict) -> tuple[int, int]:
    cpu = mem = 0
    for c in spec(pod).get("containers", []):
        cpu += c.get("cpu_request", 0)
        mem += c.get("mem_request", 0)
    return cpu, mem


def tolerates(pod: dict, taint: dict) -> bool:
    for tol in spec(pod).get("tolerations", []):
        if tol.get("effect", "") not in ("", taint.get("effect")):
            continue
        if tol.get("operator") == "Exists" and tol.get("key", "") in ("", taint.get("key")):
            return True
        if tol.get("key") == taint.get("key"):
            return True
    return False


def untolerated_taints(pod: dict, node: dict, effects=("NoSchedule", "NoExecute")) -> list[dict]:
    return [t for t in spec(node).get("taints", [])
            if t.get("effect") in effects and not tolerates(pod, t)]


def node_selector_matches(pod: dict, node: dict) -> bool:
    sel = spec(pod).get("node_selector", {})
    return all(labels(node).get(k) == v for k, v in sel.items())


# -- constructors --------------------------------------------------------------

def new_meta(name: str, namespace: str, lbls: dict | None = None,
             annots: dict | None = None, owner: tuple[str, dict] | None = None) -> dict:
    m = {"name": name, "namespace": namespace, "uid": ""}
    if lbls:
        m["labels"] = dict(lbls)
    if annots:
        m["annotations"] = dict(annots)
    if owner:
        kind, o = owner
        m["owner_references"] = [{"kind": kind, "name": name_of(o), "uid": uid_of(o),
                                  "controller": True}]
    return m


def container(name: str, image: str, command: str, cpu: int, mem: int,
              cpu_limit: int | None = None, mem_limit: int | None = None, port: int | None = None) -> dict:
    c = {"name": name, "image": image, "command": command, "cpu_request": cpu,
         "mem_request": mem, "cpu_limit": cpu_limit if cpu_limit is not None else cpu,
         "mem_limit": mem_limit if mem_limit is not None else mem}
    if port:
        c["port"] = port
    return c


def pod_template(lbls: dict, containers: list[dict], priority: int = 0,
                 tolerations: list[dict] | None = None, node_selector: dict | None = None) -> dict:
    ps = {"containers": containers, "priority": priority}
    if tolerations:
        ps["tolerations"] = tolerations
    if node_selector:
        ps["node_selector"] = dict(node_selector)
    return {"metadata": {"labels": dict(lbls)}, "spec": ps}


def pod_from_template(name: str, namespace: str, template: dict, owner_kind: str,
                      owner: dict, extra_labels: dict | None = None,
                      extra_annotations: dict | None = None, node_selector: dict | None = None) -> dict:
    tmeta = template.get("metadata", {})
    lbls = dict(tmeta.get("labels", {}))
    lbls.update(extra_labels or {})
    annots = dict(tmeta.get("annotations", {}))
    annots.update(extra_annotations or {})
    pspec = copy.deepcopy(template.get("spec", {}))
    pspec["node_name"] = ""
    if node_selector:
        sel = dict(pspec.get("node_selector", {}))
        sel.update(node_selector)
        pspec["node_selector"] = sel
    return {"metadata": new_meta(name, namespace, lbls, annots, (owner_kind, owner)),
            "spec": pspec, "status": {"phase": "Pending", "ready": False}}


def deployment(name: str, namespace: str, replicas: int, template: dict) -> dict:
    sel = dict(template["metadata"]["labels"])
    return {"metadata": new_meta(name, namespace, sel),
            "spec": {"replicas": replicas, "selector": sel, "template": template},
            "status": {"replicas": 0, "ready_replicas": 0}}


def daemonset(name: str, namespace: str, template: dict) -> dict:
    sel = dict(template["metadata"]["labels"])
    return {"metadata": new_meta(name, namespace, sel),
            "spec": {"selector": sel, "template": template},
            "status": {"desired_number_scheduled": 0, "number_ready": 0}}


def service(name: str, namespace: str, selector: dict, port: int, target_port: int) -> dict:
    return {"metadata": new_meta(name, namespace),
            "spec": {"selector": dict(selector),
                     "ports": [{"name": "http", "protocol": "TCP", "port": port,
                                "target_port": target_port}],
                     "cluster_ip": "10.96.0.10"},
            "status": {}}


def node(name: str, index: int, lbls: dict | None = None, taints: list[dict] | None = None) -> dict:
    ns = {"capacity_cpu": NODE_CPU_MILLICORES, "capacity_mem": NODE_MEMORY_MIB,
          "pod_cidr": f"10.244.{index}.0/24"}
    if taints:
        ns["taints"] = taints
    return {"metadata": new_meta(name, "", {"hostname": name, **(lbls or {})}),
            "spec": ns,
            "status": {"ready": True, "last_heartbeat": 0, "address": f"192.168.0.{10 + index}",
                       "allocatable_cpu": NODE_CPU_MILLICORES,
                       "allocatable_mem": NODE_MEMORY_MIB}}


class UidSource:
    """Deterministic uids: ``u-`` plus a zero-padded counter."""

    def __init__(self):
        self.n = 0

    def __call__(self) -> str:
        self.n += 1
        return f"u-{self.n:08d}"


# -- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""


ACCEPT = Verdict(True)


def _reject(reason: str) -> Verdict:
    return Verdict(False, reason)


def _check_labels(lbls: dict, where: str) -> str | None:
    for k, v in lbls.items():
        name = k.rsplit("/", 1)[-1]
        prefix = k[: -len(name) - 1] if "/" in k else ""
        if not name or len(name) > 63 or not _LABEL_NAME.match(name):
            return f"{where}: invalid label key {k!r}"
        if prefix and not _DNS_SUBDOMAIN.match(prefix):
            return f"{where}: invalid label key prefix {k!r}"
        if len(v) > 63 or (v and not _LABEL_NAME.match(v)):
            return f"{where}: invalid label value {v!r}"
    return None


def _check_port(p, where: str) -> str | None:
    if not 1 <= p <= 65535:
        return f"{where}: port {p} outside 1..65535"
    return None


def _check_ip(ip: str, where: str) -> str | None:
    m = _IPV4.match(ip)
    if not m or any(int(g) > 255 for g in m.groups()):
        return f"{where}: invalid IP {ip!r}"
    return None


def _check_pod_spec(ps: dict, where: str) -> str | None:
    cs = ps.get("containers", [])
    if not cs:
        return f"{where}.containers: required"
    for i, c in enumerate(cs):
        w = f"{where}.containers.{i}"
        if not c.get("name") or not _DNS_LABEL.match(c["name"]):
            return f"{w}.name: invalid {c.get('name')!r}"
        if not c.get("image"):
            return f"{w}.image: required"
        for res in ("cpu", "mem"):
            req, lim = c.get(f"{res}_request", 0), c.get(f"{res}_limit", 0)
            if req < 0 or lim < 0:
                return f"{w}: negative {res}"
            if lim and req > lim:
                return f"{w}: {res} request {req} exceeds limit {lim}"
        if "port" in c and (err := _check_port(c["port"], w)):
            return err
    node_name = ps.get("node_name", "")
    if node_name and (len(node_name) > 253 or not _DNS_SUBDOMAIN.match(node_name)):
        return f"{where}.node_name: invalid {node_name!r}"
    for t in ps.get("tolerations", []):
        if t.get("operator", "") not in ("", "Exists", "Equal"):
            return f"{where}.tolerations: bad operator {t.get('operator')!r}"
        if t.get("effect", "") not in TAINT_EFFECTS | {""}:
            return f"{where}.tolerations: bad effect {t.get('effect')!r}"
    if err := _check_labels(ps.get("node_selector", {}), f"{where}.node_selector"):
        return err
    return None


def _check_template_owner(kind: str, s: dict) -> str | None:
    sel = s.get("selector", {})
    if not sel:
        return f"{kind}.spec.selector: required"
    if err := _check_labels(sel, f"{kind}.spec.selector"):
        return err
    tmpl = s.get("template", {})
    tlabels = tmpl.get("metadata", {}).get("labels", {})
    if err := _check_labels(tlabels, f"{kind}.spec.template.labels"):
        return err
    if not selector_matches(sel, tlabels):
        return f"{kind}: selector does not match template labels"
    return _check_pod_spec(tmpl.get("spec", {}), f"{kind}.spec.template.spec")


def validate_instance(kind: str, obj: dict, key: tuple[str, str, str]) -> Verdict:
    """Apiserver-style field validation of a decoded instance sent under ``key``.

    Catches malformed values and self-inconsistency; wrong-but-valid values pass.
    """
    m = obj.get("metadata", {})
    name, namespace = m.get("name", ""), m.get("namespace", "")
    if not name:
        return _reject("metadata.name: required")
    if len(name) > 253 or not _DNS_SUBDOMAIN.match(name):
        return _reject(f"metadata.name: invalid {name!r}")
    if kind in CLUSTER_SCOPED:
        if namespace:
            return _reject(f"metadata.namespace: {kind} is cluster-scoped")
    else:
        if not namespace:
            return _reject("metadata.namespace: required")
        if len(namespace) > 63 or not _DNS_LABEL.match(namespace):
            return _reject(f"metadata.namespace: invalid {namespace!r}")
    if namespace != key[1]:
        return _reject(f"namespace {namespace!r} does not match the URL namespace {key[1]!r}")
    if name != key[2]:
        return _reject(f"name {name!r} does not match the URL name {key[2]!r}")
    if err := _check_labels(m.get("labels", {}), "metadata.labels"):
        return _reject(err)
    for k in m.get("annotations", {}):
        if err := _check_labels({k: ""}, "metadata.annotations"):
            return _reject(err)
    for ref in m.get("owner_references", []):
        if not ref.get("kind") or not ref.get("name") or not ref.get("uid"):
            return _reject("metadata.owner_references: kind, name and uid required")
    if m.get("resource_version", 0) < 0 or m.get("generation", 0) < 0:
        return _reject("metadata: negative version")

    s, st = obj.get("spec", {}), obj.get("status", {})
    err = None
    if kind == "Pod":
        err = _check_pod_spec(s, "Pod.spec")
        if not err and st.get("phase", "Pending") not in POD_PHASES:
            err = f"Pod.status.phase: unsupported {st.get('phase')!r}"
        if not err and st.get("pod_ip"):
            err = _check_ip(st["pod_ip"], "Pod.status.pod_ip")
        if not err and st.get("restart_count", 0) < 0:
            err = "Pod.status.restart_count: negative"
    elif kind in ("ReplicaSet", "Deployment"):
        if s.get("replicas", 0) < 0:
            err = f"{kind}.spec.replicas: negative"
        else:
            err = _check_template_owner(kind, s)
    elif kind == "DaemonSet":
        err = _check_template_owner(kind, s)
    elif kind == "Service":
        err = _check_labels(s.get("selector", {}), "Service.spec.selector")
        for p in s.get("ports", []):
            if err:
                break
            if p.get("protocol", "TCP") not in PROTOCOLS:
                err = f"Service.spec.ports: unsupported protocol {p.get('protocol')!r}"
            else:
                err = _check_port(p.get("port", 0), "Service.spec.ports") or _check_port(
                    p.get("target_port", p.get("port", 0)), "Service.spec.ports.target_port")
    elif kind == "Endpoints":
        for a in s.get("addresses", []):
            if err := _check_ip(a.get("ip", ""), "Endpoints.addresses"):
                break
        for p in s.get("ports", []):
            if err:
                break
            if p.get("protocol", "TCP") not in PROTOCOLS:
                err = f"Endpoints.ports: unsupported protocol {p.get('protocol')!r}"
            else:
                err = _check_port(p.get("port", 0), "Endpoints.ports")
    elif kind == "Node":
        for t in s.get("taints", []):
            if not t.get("key"):
                err = "Node.spec.taints: key required"
            elif t.get("effect") not in TAINT_EFFECTS:
                err = f"Node.spec.taints: unsupported effect {t.get('effect')!r}"
            if err:
                break
        if not err and (s.get("capacity_cpu", 0) < 0 or s.get("capacity_mem", 0) < 0):
            err = "Node.spec: negative capacity"
    return _reject(err) if err else ACCEPT


def validate(msg, context: tuple[str, str, str] | None = None) -> Verdict:
    """Validate a decoded wire message against its request key."""
    key = context or msg.key
    return validate_instance(msg.kind, msg.decoded, key)


def validate_subresource(kind: str, body: dict, key: tuple[str, str, str], subresource: str) -> Verdict:
    """Validate a status, binding or scale request.

    Only the request's identity and the fields the subresource may change are
    checked; the rest of the stored instance is trusted as already validated.
    """
    m = body.get("metadata", {})
    if m.get("namespace", "") != key[1]:
        return _reject(f"namespace {m.get('namespace')!r} does not match the URL namespace {key[1]!r}")
    if m.get("name", "") != key[2]:
        return _reject(f"name {m.get('name')!r} does not match the URL name {key[2]!r}")
    s, st = body.get("spec", {}), body.get("status", {})
    err = None
    if subresource == "scale":
        if s.get("replicas", 0) < 0:
            err = f"{kind}.spec.replicas: negative"
    elif subresource == "binding":
        n = s.get("node_name", "")
        if not n or len(n) > 253 or not _DNS_SUBDOMAIN.match(n):
            err = f"binding: invalid node name {n!r}"
    elif subresource == "status" and kind == "Pod":
        if st.get("phase", "Pending") not in POD_PHASES:
            err = f"Pod.status.phase: unsupported {st.get('phase')!r}"
        elif st.get("pod_ip"):
            err = _check_ip(st["pod_ip"], "Pod.status.pod_ip")
        elif st.get("restart_count", 0) < 0:
            err = "Pod.status.restart_count: negative"
    elif subresource == "status":
        for k, v in st.items():
            if isinstance(v, int) and not isinstance(v, bool) and v < 0 and k != "last_heartbeat":
                err = f"{kind}.status.{k}: negative"
                break
    return _reject(err) if err else ACCEPT
