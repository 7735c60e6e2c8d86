"""Control-plane and data-plane behaviour on a booted, uninjected cluster."""
from collections import Counter

import pytest

from mutiny import model
from mutiny.cluster import SYSTEM_NODE, Cluster, app_deployment
from mutiny.config import Config


def _cluster(seed=1, apps=3, until=8_000):
    c = Cluster(Config(), seed)
    c.boot()
    c.kernel.schedule_at(200, "user", lambda: [c.user_request("create", "Deployment", app_deployment(f"app-{i}", 2))
                                                for i in range(1, apps + 1)])
    c.kernel.run_until(until)
    return c


@pytest.fixture(scope="module")
def booted():
    return _cluster()


def _placement(c):
    out = {}
    for p in c.api.list("Pod"):
        out.setdefault(model.spec(p).get("node_name", ""), []).append(
            (model.ns_of(p), model.labels(p).get("app")))
    return out


def test_app_pods_spread_two_per_worker(booted):
    where = _placement(booted)
    per_node = Counter(n for n, ps in where.items() for ns, app in ps if ns == "default" for _ in [0])
    assert per_node == {"worker-1": 2, "worker-2": 2, "worker-3": 2}


def test_system_pods_placed(booted):
    where = _placement(booted)
    for node in booted.kubelets:
        apps = Counter(a for _, a in where[node])
        assert apps["netagent"] == 1 and apps["node-exporter"] == 1
    assert Counter(a for _, a in where[SYSTEM_NODE])["coredns"] == 2


def test_replicasets_own_pods_and_endpoints_list_them(booted):
    c = booted
    rss = [rs for rs in c.api.list("ReplicaSet") if model.ns_of(rs) == "default"]
    assert len(rss) == 3
    for rs in rss:
        pods = [p for p in c.api.list("Pod") if (model.controller_ref(p) or {}).get("uid") == model.uid_of(rs)]
        assert len(pods) == 2
        assert model.status(rs).get("ready_replicas") == 2
    ep = c.get("Endpoints", "default", "web")
    ips = sorted(a["ip"] for a in ep["spec"]["addresses"])
    web = sorted(model.status(p)["pod_ip"] for p in c.api.list("Pod") if model.labels(p).get("tier") == "web")
    assert ips == web and len(ips) == 6


def test_steady_state_is_idempotent():
    c = _cluster(seed=4, until=20_000)
    before = len(c.kernel.trace.entries)
    c.kernel.run_until(40_000)
    writes = [e for e in c.kernel.trace.entries[before:]
              if e["channel"] in ("ToApi:kcm", "ToApi:scheduler")]
    assert writes == []


def test_scale_up_and_down():
    c = _cluster(seed=2, apps=1, until=8_000)
    c.scale("app-1", 5)
    c.kernel.run_until(20_000)
    assert c.deployment_ready("app-1")
    c.scale("app-1", 1)
    c.kernel.run_until(30_000)
    live = [p for p in c.api.list("Pod") if model.labels(p).get("app") == "app-1"]
    assert len(live) == 1 and c.deployment_ready("app-1")


def test_preemption_evicts_one_victim_per_preemptor():
    c = _cluster(seed=1)
    big = model.deployment("big", "default", 3, model.pod_template(
        {"app": "big"}, [model.container("c", "svc-app:1.0", "serve", 7000, 256, 7000, 512, 8080)], priority=2000))
    c.user_request("create", "Deployment", big)
    c.kernel.run_until(30_000)
    victims = [d["victim"] for d in c.kernel.decisions if d["action"] == "preempt"]
    assert len(victims) == len(set(victims)) == 3
    bigs = [p for p in c.api.list("Pod") if model.labels(p).get("app") == "big"]
    assert sorted(model.spec(p)["node_name"] for p in bigs) == ["worker-1", "worker-2", "worker-3"]
    assert all(model.status(p).get("phase") == "Running" for p in bigs)


def test_daemonset_skips_tainted_system_node_without_toleration():
    c = _cluster(seed=3, apps=0)
    ds = model.daemonset("plain", "monitoring", model.pod_template(
        {"app": "plain"}, [model.container("x", "node-exporter:1.0", "export", 50, 32)]))
    c.user_request("create", "DaemonSet", ds)
    c.kernel.run_until(20_000)
    nodes = sorted(model.spec(p)["node_name"] for p in c.api.list("Pod") if model.labels(p).get("app") == "plain")
    assert nodes == ["worker-1", "worker-2", "worker-3"]


def test_delete_deployment_cascades():
    c = _cluster(seed=5, apps=1)
    c.delete("Deployment", "default", "app-1")
    c.kernel.run_until(30_000)
    assert not [o for k in ("ReplicaSet", "Pod") for o in c.api.list(k) if model.ns_of(o) == "default"]


def test_client_gets_served(booted):
    c = booted
    c.client.start(c.kernel.now + 100)
    c.kernel.run_until(c.kernel.now + 31_000)
    recs = c.client.records
    assert len(recs) == 600
    assert all(r.error_kind is None for r in recs)
    assert all(24 <= r.latency_ms <= 40 for r in recs)


def test_netagent_graceful_replacement_has_no_outage():
    c = _cluster(seed=6)
    dp = c.dataplane
    assert all(dp.netagent_running(n) for n in c.kubelets)
    for p in c.api.list("Pod"):
        if model.labels(p).get("app") == "netagent" and model.spec(p)["node_name"] == "worker-2":
            c.delete("Pod", "kube-system", model.name_of(p))
    c.kernel.run_until(c.kernel.now + 10_000)
    # the replacement starts before the old agent's grace period ends
    assert dp.outages(c.kernel.now) == []


def test_netagent_force_delete_causes_short_outage():
    c = _cluster(seed=6)
    dp = c.dataplane
    for p in c.api.list("Pod"):
        if model.labels(p).get("app") == "netagent" and model.spec(p)["node_name"] == "worker-2":
            c.api.request("user", "delete", "Pod", p, subresource="force")
    c.kernel.run_until(c.kernel.now + 500)
    assert not dp.netagent_running("worker-2")
    c.kernel.run_until(c.kernel.now + 10_000)
    assert dp.netagent_running("worker-2")
    outs = dp.outages(c.kernel.now)
    assert [o[0] for o in outs] == ["worker-2"]
    assert 1_000 <= outs[0][2] - outs[0][1] < 5_000
