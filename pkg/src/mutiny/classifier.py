"""Orchestration-level (OF) and client-level (CF) failure classification."""
from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, field

from .config import Config

OF_LABELS = ("No", "Tim", "LeR", "MoR", "Net", "Sta", "Out")
CF_LABELS = ("NSI", "HRT", "IA", "SU")
SEVERITY = {label: i for i, label in enumerate(OF_LABELS)}


class ClassificationError(ValueError):
    pass


def mae(series, baseline) -> float:
    if len(series) != len(baseline):
        raise ClassificationError(f"length mismatch: {len(series)} vs {len(baseline)}")
    if not series:
        return 0.0
    return math.fsum(abs(a - b) for a, b in zip(series, baseline)) / len(series)


def z_score(x: float, mu: float, sigma: float) -> float:
    if sigma == 0:
        return 0.0 if x == mu else (math.inf if x > mu else -math.inf)
    return (x - mu) / sigma


def most_severe(labels) -> str:
    return max(labels, key=SEVERITY.__getitem__, default="No")


def padded_latencies(client: list[dict]) -> list[float]:
    """Latency series with failed requests padded with 0."""
    return [0.0 if r["error_kind"] else r["latency_ms"] for r in client]


@dataclass
class Dist:
    mu: float
    sigma: float
    n: int

    @classmethod
    def of(cls, xs) -> "Dist":
        xs = list(xs)
        if len(xs) < 2:
            raise ClassificationError("a distribution needs at least 2 samples")
        return cls(statistics.fmean(xs), statistics.pstdev(xs), len(xs))

    def z(self, x: float) -> float:
        return z_score(x, self.mu, self.sigma)


@dataclass
class GoldenBaseline:
    workload: str
    series: list
    mae: Dist
    mae_samples: list
    startup: Dist
    last_creation: Dist
    ready_min: dict
    ready_max: dict
    active_max: dict
    pod_creates_max: int
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GoldenBaseline":
        d = dict(d)
        for k in ("mae", "startup", "last_creation"):
            d[k] = Dist(**d[k])
        return cls(**d)

    @classmethod
    def build(cls, workload: str, records: list) -> "GoldenBaseline":
        if len(records) < 2:
            raise ClassificationError("a baseline needs at least 2 golden runs")
        series_all = [padded_latencies(r.client) for r in records]
        n = len(series_all[0])
        if any(len(s) != n for s in series_all):
            raise ClassificationError("golden series differ in length")
        base = [math.fsum(s[i] for s in series_all) / len(series_all) for i in range(n)]
        maes = [mae(s, base) for s in series_all]
        final = [r.samples[-1] for r in records]
        apps = sorted({a for f in final for a in f["ready"]})
        b = cls(
            workload=workload,
            series=base,
            mae=Dist.of(maes),
            mae_samples=maes,
            startup=Dist.of(r.timing["worst_startup_ms"] for r in records),
            last_creation=Dist.of(r.timing["last_creation_ms"] for r in records),
            ready_min={a: min(f["ready"].get(a, 0) for f in final) for a in apps},
            ready_max={a: max(f["ready"].get(a, 0) for f in final) for a in apps},
            active_max={a: max(f["active"].get(a, 0) for f in final) for a in apps},
            pod_creates_max=max(r.store["pod_creates"] for r in records),
        )
        for name in ("mae", "startup", "last_creation"):
            if getattr(b, name).sigma == 0:
                b.warnings.append(f"degenerate golden distribution for {name}: sigma = 0")
        return b


@dataclass
class FailureLabel:
    of: str
    cf: str
    z_mae: float
    evidence: list

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.z_mae):
            d["z_mae"] = "inf" if self.z_mae > 0 else "-inf"
        return d


# -- orchestration-level rules -------------------------------------------------------

def _after(samples, t):
    return [s for s in samples if s["time"] >= t]


def _runs(flags) -> int:
    """Longest run of consecutive True values."""
    best = cur = 0
    for f in flags:
        cur = cur + 1 if f else 0
        best = max(best, cur)
    return best


def rule_tim(rec, base: GoldenBaseline, cfg: Config):
    out = []
    if rec.app_restarts:
        out.append(("Tim", "app-pod-restart", {"count": len(rec.app_restarts)}))
    zs = base.startup.z(rec.timing["worst_startup_ms"])
    zc = base.last_creation.z(rec.timing["last_creation_ms"])
    if zs > cfg.tim_z:
        out.append(("Tim", "startup-z", {"z": zs, "value": rec.timing["worst_startup_ms"]}))
    if zc > cfg.tim_z:
        out.append(("Tim", "last-creation-z", {"z": zc, "value": rec.timing["last_creation_ms"]}))
    return out


def _stable_final(samples, key, app, k):
    tail = samples[-k:]
    if len(tail) < k:
        return None
    vals = {s[key].get(app, 0) for s in tail}
    return vals.pop() if len(vals) == 1 else None


def rule_resources(rec, base: GoldenBaseline, cfg: Config):
    out = []
    samples = rec.samples
    k = cfg.stable_samples
    for app in sorted(base.ready_min):
        ready = _stable_final(samples, "ready", app, k)
        if ready is not None and ready < base.ready_min[app]:
            out.append(("LeR", "ready-below-golden", {"app": app, "ready": ready,
                                                      "golden_min": base.ready_min[app]}))
        active = _stable_final(samples, "active", app, k)
        if active is not None and active > base.active_max[app]:
            out.append(("MoR", "active-above-golden", {"app": app, "active": active,
                                                       "golden_max": base.active_max[app]}))
    return out


def rule_net(rec, base: GoldenBaseline, cfg: Config):
    samples = _after(rec.samples, rec.workload_start)
    flags = [s["endpoints"] < s["web_ready"] or bool(s["endpoint_nodes_down"]) for s in samples]
    n = _runs(flags)
    if n >= cfg.net_samples:
        return [("Net", "endpoints-unusable", {"samples": n})]
    return []


def _stuck(samples, cfg: Config):
    out = []
    roles = sorted({r for s in samples for r in s["roles"]})
    for role in roles:
        no_leader_since = None
        for s in samples:
            info = s["roles"].get(role)
            if info is None:
                continue
            t = s["time"]
            if not info["leader"]:
                no_leader_since = t if no_leader_since is None else no_leader_since
                if t - no_leader_since >= cfg.stuck_window_ms:
                    out.append(("Sta", "no-leader", {"role": role, "since": no_leader_since}))
                    break
                continue
            no_leader_since = None
            # a component that keeps issuing requests, even failing ones, is live
            last = info.get("last_request", info["last_applied"])
            if info["pending"] > 0 and (last is None or t - last >= cfg.stuck_window_ms) \
                    and t - samples[0]["time"] >= cfg.stuck_window_ms:
                out.append(("Sta", "stuck", {"role": role, "pending": info["pending"], "at": t}))
                break
    return out


def rule_sta(rec, base: GoldenBaseline, cfg: Config):
    out = []
    creates = rec.store["pod_creates"]
    if creates > base.pod_creates_max + cfg.spawn_margin:
        out.append(("Sta", "uncontrolled-spawn", {"pod_creates": creates, "golden_max": base.pod_creates_max}))
    if rec.runaway:
        out.append(("Sta", "runaway", {"detail": rec.runaway_detail}))
    if rec.store["stalled"]:
        out.append(("Sta", "store-stalled", {"max_entries": rec.store["max_entries"]}))
    out.extend(_stuck(_after(rec.samples, rec.workload_start), cfg))
    for node, a, b in rec.dataplane["netagent_outages"]:
        if b - a >= cfg.netagent_down_ms:
            out.append(("Sta", "netagent-down", {"node": node, "from": a, "to": b}))
            break
    return out


def rule_out(rec, base: GoldenBaseline, cfg: Config):
    out = []
    samples = _after(rec.samples, rec.workload_start)
    flags = [bool(s["rs_ready"]) and all(v == 0 for v in s["rs_ready"].values())
             and s["web_ready"] == 0 for s in samples]
    n = _runs(flags)
    if n >= cfg.net_samples and _seen_ready(rec):
        out.append(("Out", "all-replicasets-unready", {"samples": n}))
    arm = (rec.outcome or {}).get("armed_at") or rec.workload_start
    dns = [t for t in rec.dataplane["dns_zero_at"] if t >= arm]
    if dns:
        out.append(("Out", "dns-down", {"at": dns[0]}))
    partition = sum(1 for r in rec.client if r["error_kind"] == "net_partition")
    long_outage = any(b - a >= cfg.netagent_down_ms for _, a, b in rec.dataplane["netagent_outages"])
    if partition and long_outage:
        out.append(("Out", "network-disruption", {"net_partition_errors": partition}))
    return out


def _seen_ready(rec) -> bool:
    return any(v > 0 for s in rec.samples for v in s["rs_ready"].values())


OF_RULES = (rule_tim, rule_resources, rule_net, rule_sta, rule_out)


def classify_of(rec, base: GoldenBaseline, cfg: Config | None = None) -> tuple[str, list]:
    cfg = cfg or Config()
    evidence = []
    for rule in OF_RULES:
        evidence.extend(rule(rec, base, cfg))
    return most_severe(e[0] for e in evidence), evidence


# -- client-level rules ---------------------------------------------------------------

def error_suffix(client: list[dict]) -> int:
    n = 0
    for r in reversed(client):
        if not r["error_kind"]:
            break
        n += 1
    return n


def intermittent(client: list[dict]) -> bool:
    """A non-timeout error after the first success that is followed by another success."""
    seen_ok = False
    pending_err = False
    for r in client:
        if r["error_kind"] is None:
            if pending_err:
                return True
            seen_ok = True
        elif seen_ok and r["error_kind"] != "timeout":
            pending_err = True
    return False


def classify_cf(rec, base: GoldenBaseline, cfg: Config | None = None) -> tuple[str, float]:
    cfg = cfg or Config()
    z = base.mae.z(mae(padded_latencies(rec.client), base.series))
    suffix = error_suffix(rec.client)
    if suffix and suffix >= min(cfg.su_min_suffix, len(rec.client)):
        return "SU", z
    if intermittent(rec.client):
        return "IA", z
    if z > cfg.hrt_z:
        return "HRT", z
    return "NSI", z


def classify(rec, base: GoldenBaseline, cfg: Config | None = None) -> FailureLabel:
    cfg = cfg or Config()
    of, evidence = classify_of(rec, base, cfg)
    cf, z = classify_cf(rec, base, cfg)
    return FailureLabel(of, cf, z, [[e[0], e[1], e[2]] for e in evidence])
