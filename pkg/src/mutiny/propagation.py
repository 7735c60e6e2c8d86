"""Injections on component-to-apiserver channels: is the wrong value blocked, stored, or noticed?"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .classifier import GoldenBaseline, classify
from .config import Config
from .injector import InjectionSpec
from .wire import NotApplicable, get_path
from .workloads import WORKLOADS, Run, experiment_seed

SOURCES = ("kcm", "scheduler", "kubelet")

# decisions that mean some component logged an error
ERROR_ACTIONS = frozenset({
    "request-failed", "pod-rejected", "image-pull-error", "container-crash", "crash", "cache-mismatch",
    "gc-unresolvable", "delete-undecodable", "livelock", "stall",
})


def _s(source, kind, action, path, value=None, bit=None, when=1, namespace=None, verb=None):
    ch = "ToApi:kubelet" if source == "kubelet" else f"ToApi:{source}"
    return InjectionSpec(ch, kind, action, when, path=path, value=value, bit=bit, namespace=namespace,
                         verb=verb)


# (scenario name, spec); names are stable so tests can look results up
SCENARIOS: tuple[tuple[str, InjectionSpec], ...] = (
    ("kcm-pod-namespace-valueset", _s("kcm", "Pod", "ValueSet", "metadata.namespace", "kube-system",
                                      namespace="default", verb="create")),
    ("kcm-pod-namespace-bitflip", _s("kcm", "Pod", "BitFlip", "metadata.namespace", bit=1, namespace="default",
                                     verb="create")),
    ("kcm-rs-selector-create", _s("kcm", "ReplicaSet", "BitFlip", "spec.selector.app", bit=1,
                                  namespace="default", verb="create")),
    ("kcm-rs-selector-update", _s("kcm", "ReplicaSet", "BitFlip", "spec.selector.app", bit=1,
                                  namespace="default", verb="update")),
    ("kcm-rs-template-label-create", _s("kcm", "ReplicaSet", "BitFlip", "spec.template.metadata.labels.app",
                                        bit=1, namespace="default", verb="create")),
    ("kcm-rs-template-label-update", _s("kcm", "ReplicaSet", "BitFlip", "spec.template.metadata.labels.app",
                                        bit=1, namespace="default", verb="update")),
    ("kcm-pod-owner-uid-valueset", _s("kcm", "Pod", "ValueSet", "metadata.owner_references.0.uid",
                                      "u-99999999", namespace="default", verb="create")),
    ("scheduler-bind-node-valueset", _s("scheduler", "Pod", "ValueSet", "spec.node_name", "worker-3x",
                                        namespace="default", verb="update/binding")),
    ("scheduler-bind-node-bitflip", _s("scheduler", "Pod", "BitFlip", "spec.node_name", bit=1,
                                       namespace="default", verb="update/binding")),
    ("scheduler-bind-node-empty", _s("scheduler", "Pod", "ValueSet", "spec.node_name", "", namespace="default",
                                     verb="update/binding")),
    ("kubelet-node-ready-bitflip", _s("kubelet", "Node", "BitFlip", "status.ready", bit=1, when=3)),
    ("kubelet-node-heartbeat-zero", _s("kubelet", "Node", "ValueSet", "status.last_heartbeat", 0, when=3)),
    ("kubelet-node-cpu-zero", _s("kubelet", "Node", "ValueSet", "status.allocatable_cpu", 0, when=3)),
    ("kubelet-node-cpu-negative", _s("kubelet", "Node", "ValueSet", "status.allocatable_cpu", -1, when=3)),
    ("kubelet-node-address-bitflip", _s("kubelet", "Node", "BitFlip", "status.address", bit=2, when=3)),
    ("kubelet-pod-phase-bitflip", _s("kubelet", "Pod", "BitFlip", "status.phase", bit=1, namespace="default")),
    ("kubelet-pod-ip-bitflip", _s("kubelet", "Pod", "BitFlip", "status.pod_ip", bit=1, namespace="default")),
    ("kubelet-pod-ready-bitflip", _s("kubelet", "Pod", "BitFlip", "status.ready", bit=1, namespace="default")),
    ("kubelet-pod-restarts-negative", _s("kubelet", "Pod", "ValueSet", "status.restart_count", -1,
                                         namespace="default")),
)


def source_of(spec: InjectionSpec) -> str:
    src = spec.channel.split(":", 1)[1] if ":" in spec.channel else ""
    if src.startswith("kubelet"):
        return "kubelet"
    if src not in SOURCES:
        raise ValueError(f"{spec.channel!r} does not name a source component")
    return src


@dataclass
class PropagationRecord:
    scenario: str
    source: str
    workload: str
    spec: dict
    fired: bool
    blocked: bool
    propagated: bool
    errored: bool
    reason: str | None
    label: dict | None
    experiment_id: str

    def to_dict(self) -> dict:
        return asdict(self)


class _StoreTap:
    """Watches store writes for the injected value landing on the target key."""

    def __init__(self):
        self.run: Run | None = None
        self.propagated = False

    def __call__(self, cluster):
        cluster.store.watch(self._on_write)

    def _on_write(self, etype, key, obj, rv):
        if self.propagated or etype == "DELETED" or obj is None:
            return
        inj = self.run.injector
        out = inj.outcome if inj else None
        if out is None or out.status != "fired" or out.target is None or list(key) != out.target:
            return
        path = inj.spec.path
        if path is None:
            return
        try:
            val = get_path(obj, path)
        except (NotApplicable, KeyError, IndexError, ValueError):
            val = None
        if val == out.post_value:
            self.propagated = True


def _error_events(run: Run, since: int) -> list[tuple]:
    c = run.cluster
    out = [("api", tuple(e["key"]), e["reason"]) for e in c.api.errors if e["time"] >= since]
    out += [(d["component"], d["action"], d["reason"]) for d in c.kernel.decisions
            if d["time"] >= since and d["action"] in ERROR_ACTIONS]
    return out


def _blocked(run: Run) -> tuple[bool, str | None]:
    out = run.injector.outcome
    for e in run.cluster.kernel.trace.entries:
        if e["time"] == out.fired_at and e["channel"] == out.channel and list(e["key"]) == out.target \
                and e["outcome"] in ("rejected", "undecodable"):
            reasons = [x["reason"] for x in run.cluster.api.errors
                       if x["time"] == out.fired_at and x["key"] == out.target]
            return True, reasons[0] if reasons else e["outcome"]
    return False, None


def run_propagation(workload: str, scenarios=SCENARIOS, baseline: GoldenBaseline | None = None,
                    root_seed: int = 0, cfg: Config | None = None) -> list[PropagationRecord]:
    """Run each scenario once on ``workload``; all share one seed and one uninjected counterfactual."""
    cfg = cfg or Config()
    seed = experiment_seed(root_seed, f"propagation-{workload}")
    ref = Run(workload, seed, None, cfg)
    ref.execute()
    records = []
    for name, spec in scenarios:
        source = source_of(spec)
        tap = _StoreTap()
        run = Run(workload, seed, spec, cfg, experiment_id=f"propagation-{workload}-{name}", hook=tap)
        tap.run = run
        rec = run.execute()
        out = run.injector.outcome
        fired = out.status == "fired"
        blocked, reason = _blocked(run) if fired else (False, None)
        errored = False
        if fired:
            mine = _error_events(run, out.fired_at)
            base = _error_events(ref, out.fired_at)
            errored = blocked or any(e[1] == tuple(out.target) for e in mine) or len(mine) > len(base)
        label = classify(rec, baseline, cfg).to_dict() if baseline is not None else None
        records.append(PropagationRecord(name, source, workload, spec.to_dict(), fired, blocked,
                                         tap.propagated and not blocked, errored,
                                         reason or out.reason, label, run.experiment_id))
    return records


def run_suite(baselines: dict | None = None, workloads=WORKLOADS, root_seed: int = 0,
              cfg: Config | None = None) -> list[PropagationRecord]:
    out = []
    for w in workloads:
        out += run_propagation(w, baseline=(baselines or {}).get(w), root_seed=root_seed, cfg=cfg)
    return out


def summarize(records) -> dict:
    """Injected / propagated / errored counts per source and workload."""
    table: dict = {}
    for r in records:
        if not r.fired:
            continue
        row = table.setdefault(r.source, {}).setdefault(r.workload, {"inj": 0, "prop": 0, "err": 0})
        row["inj"] += 1
        row["prop"] += r.propagated
        row["err"] += r.errored
    return table


def summary_markdown(summary: dict) -> str:
    workloads = sorted({w for rows in summary.values() for w in rows})
    head = "| source | " + " | ".join(f"{w} Inj. | {w} Prop | {w} Err" for w in workloads) + " |"
    lines = [head, "|" + "---|" * (1 + 3 * len(workloads))]
    for src in SOURCES:
        if src not in summary:
            continue
        cells = []
        for w in workloads:
            row = summary[src].get(w, {"inj": 0, "prop": 0, "err": 0})
            cells += [str(row["inj"]), str(row["prop"]), str(row["err"])]
        lines.append(f"| {src} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def summary_json(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=2)
