import copy

from hypothesis import given, strategies as st

from mutiny import model, wire
from mutiny.model import selector_matches, validate, validate_instance


def app_template():
    return model.pod_template(
        {"app": "app-1", "tier": "web"},
        [model.container("app", "svc-app:1.0", "serve", 500, 256, 1000, 512, port=8080)])


def app_pod(name="p1", ns="default"):
    d = model.deployment("app-1", ns, 2, app_template())
    d["metadata"]["uid"] = "u-00000001"
    return model.pod_from_template(name, ns, app_template(), "ReplicaSet", d)


def test_selector_examples():
    assert selector_matches({"app": "web"}, {"app": "web", "tier": "fe"})
    assert not selector_matches({"app": "web"}, {"app": "we`"})
    assert not selector_matches({}, {"app": "web"})
    assert not selector_matches({}, {})


@given(st.dictionaries(st.sampled_from("abcd"), st.sampled_from("xyz"), max_size=4),
       st.dictionaries(st.sampled_from("abcd"), st.sampled_from("xyz"), max_size=4))
def test_selector_is_subset_check(sel, lbls):
    expected = bool(sel) and set(sel.items()) <= set(lbls.items())
    assert selector_matches(sel, lbls) == expected


def test_nominal_instances_accepted_and_encodable():
    s = wire.load_schema()
    d = model.deployment("app-1", "default", 2, app_template())
    ds = model.daemonset("netagent", "kube-system", model.pod_template(
        {"app": "netagent"}, [model.container("agent", "netagent:1.0", "run", 100, 64)],
        tolerations=[{"operator": "Exists"}]))
    svc = model.service("web", "default", {"tier": "web"}, 80, 8080)
    n = model.node("worker-1", 1, taints=[{"key": "k", "value": "v", "effect": "NoExecute"}])
    for kind, obj in [("Deployment", d), ("DaemonSet", ds), ("Service", svc), ("Node", n),
                      ("Pod", app_pod())]:
        obj = copy.deepcopy(obj)
        obj["metadata"]["uid"] = "u-1"
        msg = wire.make_message("ToApi:user", model.key_of(kind, obj), "create", obj)
        assert validate(msg) == model.ACCEPT, kind
        assert wire.decode(msg.data, s, wire.load_schema().message_for_kind(kind)) == obj


def test_corrupted_namespace_rejected():
    pod = app_pod()
    pod["metadata"]["namespace"] = "defaul|"
    v = validate_instance("Pod", pod, ("Pod", "default", "p1"))
    assert not v.ok
    # a syntactically valid namespace is still caught by the URL check
    pod["metadata"]["namespace"] = "eefault"
    v = validate_instance("Pod", pod, ("Pod", "default", "p1"))
    assert not v.ok and "URL" in v.reason


def test_zero_replicas_accepted_negative_rejected():
    d = model.deployment("app-1", "default", 0, app_template())
    assert validate_instance("Deployment", d, ("Deployment", "default", "app-1")).ok
    d["spec"]["replicas"] = -1
    assert not validate_instance("Deployment", d, ("Deployment", "default", "app-1")).ok


def test_nonexistent_node_name_passes():
    pod = app_pod()
    pod["spec"]["node_name"] = "worker-3x"
    assert validate_instance("Pod", pod, ("Pod", "default", "p1")).ok


def test_selector_template_mismatch_rejected():
    d = model.deployment("app-1", "default", 2, app_template())
    d["spec"]["template"]["metadata"]["labels"]["app"] = "aqp-1"
    v = validate_instance("Deployment", d, ("Deployment", "default", "app-1"))
    assert not v.ok and "selector" in v.reason


def test_border_cases_rejected():
    key = ("Pod", "default", "p1")
    for mutate in [
        lambda p: p["spec"]["containers"][0].update(port=0),
        lambda p: p["spec"]["containers"][0].update(port=70000),
        lambda p: p["spec"]["containers"][0].update(image=""),
        lambda p: p["spec"]["containers"][0].update(cpu_request=5000),
        lambda p: p["metadata"].update(name=""),
        lambda p: p["metadata"]["labels"].update(app="`pp"),
        lambda p: p["status"].update(phase="UNSUPPORTED"),
        lambda p: p["spec"].update(containers=[]),
    ]:
        pod = app_pod()
        mutate(pod)
        assert not validate_instance("Pod", pod, key).ok


def test_label_value_flip_that_stays_valid_passes():
    pod = app_pod()
    pod["metadata"]["labels"]["app"] = "aqp-1"
    assert validate_instance("Pod", pod, ("Pod", "default", "p1")).ok


def test_uid_source_format():
    u = model.UidSource()
    assert [u(), u()] == ["u-00000001", "u-00000002"]


def test_template_hash_changes_with_template():
    t = app_template()
    h = model.template_hash(t)
    t2 = copy.deepcopy(t)
    t2["metadata"]["labels"]["app"] = "aqp-1"
    assert h == model.template_hash(copy.deepcopy(t)) and h != model.template_hash(t2)


def test_taint_toleration():
    pod = app_pod()
    taint = {"key": "dedicated", "value": "system", "effect": "NoSchedule"}
    node = model.node("worker-4", 4, taints=[taint])
    assert model.untolerated_taints(pod, node) == [taint]
    pod["spec"]["tolerations"] = [{"key": "dedicated", "operator": "Exists"}]
    assert model.untolerated_taints(pod, node) == []
    pod["spec"]["tolerations"] = [{"key": "other", "operator": "Exists", "effect": "NoSchedule"}]
    assert model.untolerated_taints(pod, node) == [taint]
