import pytest
from hypothesis import given
from hypothesis import strategies as st

from mutiny import model, wire
from mutiny.injector import ConfigError, InjectionSpec, Injector, check_spec, value_catalog
from mutiny.kernel import Kernel
from mutiny.store import ApiServer, Store, UserError


def setup(spec=None):
    k = Kernel(7)
    s = wire.load_schema()
    store = Store(k, s)
    inj = Injector(k, s)
    api = ApiServer(k, store, s, injector=inj)
    if spec is not None:
        inj.arm(spec)
    return k, store, api, inj


def deployment(name="d1", replicas=2):
    t = model.pod_template({"app": name}, [model.container("c", "svc-app:1.0", "serve", 100, 64)])
    return model.deployment(name, "default", replicas, t)


@pytest.mark.parametrize("spec, msg", [
    (InjectionSpec("ToStore", "Pod", "Explode", path="spec.priority"), "unknown action"),
    (InjectionSpec("Sideways", "Pod", "Drop"), "unknown channel"),
    (InjectionSpec("ToStore", "Widget", "Drop"), "unknown kind"),
    (InjectionSpec("ToStore", "Pod", "Drop", when=0), "when"),
    (InjectionSpec("AtRest", "Pod", "Drop"), "at rest"),
    (InjectionSpec("ToStore", "Pod", "Drop", path="spec.priority"), "neither"),
    (InjectionSpec("ToStore", "Pod", "BitFlip", bit=1), "exactly one"),
    (InjectionSpec("ToStore", "Pod", "BitFlip", path="spec.priority", offset=3, bit=1), "exactly one"),
    (InjectionSpec("ToStore", "Pod", "BitFlip", path="spec.nonsense", bit=1), "nonsense"),
    (InjectionSpec("ToStore", "Pod", "BitFlip", path="spec.priority", bit=0), "1-based"),
    (InjectionSpec("ToStore", "Pod", "ValueSet", offset=3, value=1), "raw offsets"),
    (InjectionSpec("ToStore", "Pod", "BitFlip", offset=3, bit=8), "0..7"),
    (InjectionSpec("ToStore", "Pod", "Drop", verb="patch"), "verb"),
])
def test_check_spec_rejects(spec, msg):
    with pytest.raises(ConfigError, match=msg):
        check_spec(spec)


def test_spec_json_round_trip_and_stable_id():
    s = InjectionSpec("ToStore", "Pod", "ValueSet", 2, path="spec.node_name", value="worker-3x")
    again = InjectionSpec.from_json(s.to_json())
    assert again == s and again.id == s.id and len(s.id) == 12
    assert InjectionSpec("ToStore", "Pod", "ValueSet", 3, path="spec.node_name", value="worker-3x").id != s.id


def test_arm_twice_fails():
    _, _, _, inj = setup(InjectionSpec("ToStore", "Pod", "Drop"))
    with pytest.raises(ConfigError):
        inj.arm(InjectionSpec("ToStore", "Pod", "Drop"))


def test_fires_on_nth_message_about_the_instance():
    spec = InjectionSpec("ToStore", "Deployment", "ValueSet", 2, path="spec.replicas", value=0)
    k, store, api, inj = setup(spec)
    api.request("user", "create", "Deployment", deployment())
    assert store.read(("Deployment", "default", "d1"))[0]["spec"]["replicas"] == 2
    api.request("user", "update", "Deployment", {"metadata": model.new_meta("d1", "default"),
                                                  "spec": {"replicas": 3}}, subresource="scale")
    got = store.read(("Deployment", "default", "d1"))[0]
    assert "replicas" not in got["spec"] or got["spec"]["replicas"] == 0
    out = inj.outcome
    assert out.status == "fired" and out.pre_value == 3 and out.post_value == 0
    assert out.target == ["Deployment", "default", "d1"] and out.operation == "update"
    # single shot
    api.request("user", "update", "Deployment", {"metadata": model.new_meta("d1", "default"),
                                                  "spec": {"replicas": 4}}, subresource="scale")
    assert store.read(("Deployment", "default", "d1"))[0]["spec"]["replicas"] == 4


def test_drop_acknowledges_but_loses_write():
    k, store, api, inj = setup(InjectionSpec("ToStore", "Deployment", "Drop"))
    api.request("user", "create", "Deployment", deployment())
    assert store.read(("Deployment", "default", "d1")) is None
    assert k.trace.entries[-1]["outcome"] == "dropped"
    assert inj.outcome.status == "fired"


def test_not_applicable_consumes_the_shot():
    spec = InjectionSpec("ToStore", "Deployment", "BitFlip", 1, path="metadata.annotations.missing", bit=1)
    k, store, api, inj = setup(spec)
    api.request("user", "create", "Deployment", deployment())
    assert inj.outcome.status == "not_applicable"
    assert store.read(("Deployment", "default", "d1")) is not None


def test_user_channel_namespace_corruption_is_rejected():
    spec = InjectionSpec("ToApi:user", "Deployment", "BitFlip", 1, path="metadata.namespace", bit=1)
    k, store, api, inj = setup(spec)
    res = api.request("user", "create", "Deployment", deployment())
    assert isinstance(res, UserError) and "URL" in res.reason
    assert api.user_errors and store.read(("Deployment", "default", "d1")) is None


def test_at_rest_corruption_activates_on_read():
    spec = InjectionSpec("AtRest", "Deployment", "ValueSet", 1, path="spec.replicas", value=7)
    k, store, api, inj = setup(spec)
    api.request("user", "create", "Deployment", deployment())
    assert inj.outcome.status == "fired" and not inj.outcome.activated
    assert store.read(("Deployment", "default", "d1"))[0]["spec"]["replicas"] == 7
    api.cache.clear()
    api.cache_read(("Deployment", "default", "d1"))
    assert inj.outcome.activated


def test_raw_flip_to_undecodable_is_recorded():
    # the last byte of a message is a varint or string byte; setting its top bit breaks it
    k, store, api, inj = setup()
    data = wire.encode(deployment(), api.schema, "Deployment")
    spec = InjectionSpec("ToStore", "Deployment", "BitFlip", 1, offset=len(data) - 1, bit=7)
    inj.arm(spec)
    api.request("user", "create", "Deployment", deployment())
    assert inj.outcome.undecodable
    assert store.read(("Deployment", "default", "d1")) is None
    assert api.list("Deployment") == []


def test_kubelet_channel_matches_any_node_agent():
    inj = Injector(Kernel(1))
    inj.arm(InjectionSpec("ToApi:kubelet", "Node", "Drop", verb="update/status"))
    assert inj._matches("ToApi:kubelet:worker-2", ("Node", "", "worker-2"), "update/status")
    assert not inj._matches("ToApi:kubelet:worker-2", ("Node", "", "worker-2"), "create")
    assert not inj._matches("ToApi:kcm", ("Node", "", "worker-2"), "update/status")


@given(st.sampled_from(["int", "string", "bool"]),
       st.sampled_from(["spec.node_name", "metadata.namespace", "metadata.uid", "spec.replicas"]))
def test_value_catalog_semantic_extends_generic(t, path):
    generic = value_catalog(t, path, semantic=False)
    full = value_catalog(t, path)
    assert full[:len(generic)] == generic
    assert len(full) - len(generic) <= 1
