import pytest

from mutiny.injector import InjectionSpec
from mutiny.propagation import (SCENARIOS, PropagationRecord, run_propagation, source_of, summarize,
                                summary_markdown)


def test_source_of():
    assert source_of(InjectionSpec("ToApi:kcm", "Pod", "Drop")) == "kcm"
    assert source_of(InjectionSpec("ToApi:kubelet:worker-1", "Pod", "Drop")) == "kubelet"
    assert source_of(InjectionSpec("ToApi:kubelet", "Pod", "Drop")) == "kubelet"
    with pytest.raises(ValueError):
        source_of(InjectionSpec("ToStore", "Pod", "Drop"))


def test_scenario_names_unique():
    names = [n for n, _ in SCENARIOS]
    assert len(names) == len(set(names))


@pytest.fixture(scope="module")
def deploy_records():
    picked = [s for s in SCENARIOS if s[0] in ("kcm-pod-namespace-bitflip", "scheduler-bind-node-valueset",
                                               "kubelet-node-cpu-negative", "kubelet-node-cpu-zero")]
    return {r.scenario: r for r in run_propagation("deploy", picked)}


def test_url_mismatch_blocked(deploy_records):
    r = deploy_records["kcm-pod-namespace-bitflip"]
    assert r.fired and r.blocked and not r.propagated and r.errored
    assert "URL" in r.reason


def test_valid_wrong_node_propagates(deploy_records):
    r = deploy_records["scheduler-bind-node-valueset"]
    assert r.fired and not r.blocked and r.propagated


def test_negative_status_blocked_zero_propagates(deploy_records):
    assert deploy_records["kubelet-node-cpu-negative"].blocked
    r = deploy_records["kubelet-node-cpu-zero"]
    assert r.propagated and not r.blocked


def test_blocked_never_propagated(deploy_records):
    assert all(not (r.blocked and r.propagated) for r in deploy_records.values())


def test_summary_counts_fired_only():
    def rec(src, w, fired, prop, err):
        return PropagationRecord("x", src, w, {}, fired, False, prop, err, None, None, "id")
    recs = [rec("kcm", "deploy", True, True, False), rec("kcm", "deploy", True, False, True),
            rec("kcm", "deploy", False, False, False), rec("kubelet", "scale", True, True, True)]
    s = summarize(recs)
    assert s == {"kcm": {"deploy": {"inj": 2, "prop": 1, "err": 1}},
                 "kubelet": {"scale": {"inj": 1, "prop": 1, "err": 1}}}
    md = summary_markdown(s)
    assert md.splitlines()[2].startswith("| kcm | 2 | 1 | 1 | 0 | 0 | 0 |")
