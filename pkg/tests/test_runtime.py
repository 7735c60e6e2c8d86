import pytest
from hypothesis import given
from hypothesis import strategies as st

from mutiny import model
from mutiny.runtime import BackoffPolicy, Expectations, Informer, TokenBucket


@given(st.integers(1, 10_000), st.integers(1, 10**7), st.integers(1, 200))
def test_backoff_monotone_and_capped(base, cap, n):
    b = BackoffPolicy(base, cap)
    assert b.delay(n) <= max(cap, base)
    assert b.delay(n + 1) >= b.delay(n)


def test_backoff_doubles_then_caps():
    b = BackoffPolicy(10_000, 300_000)
    assert [b.delay(i) for i in range(1, 7)] == [10_000, 20_000, 40_000, 80_000, 160_000, 300_000]
    with pytest.raises(ValueError):
        b.delay(0)


def test_token_bucket_burst_then_rate():
    tb = TokenBucket(qps=10, burst=3)
    times = [tb.reserve(0) for _ in range(5)]
    assert times[:3] == [0, 0, 0]
    # beyond the burst, one token every 100 ms
    assert times[3:] == [100, 200]


def test_expectations_block_until_observed_or_expired():
    e = Expectations(ttl=1000)
    k = ("ReplicaSet", "default", "rs")
    assert e.satisfied(k, 0)
    e.expect(k, 0, adds=2)
    assert not e.satisfied(k, 10) and e.pending() == 1
    e.observe_add(k)
    assert not e.satisfied(k, 10)
    e.observe_add(k)
    assert e.satisfied(k, 10) and e.pending() == 0
    e.expect(k, 0, dels=1)
    assert e.satisfied(k, 1001)


def _pod(name, ns="default", node=""):
    t = model.pod_template({"app": "a"}, [model.container("c", "svc-app:1.0", "serve", 100, 64)])
    p = model.pod_from_template(name, ns, t, "ReplicaSet", {"metadata": {"name": "rs", "uid": "u-1"}})
    p["metadata"]["uid"] = f"u-{name}"
    p["spec"]["node_name"] = node
    return p


def test_informer_keys_by_decoded_identity():
    inf = Informer()
    p = _pod("p1", node="worker-1")
    inf.apply("ADDED", "Pod", p)
    assert inf.get("Pod", "default", "p1") is not None
    assert [model.name_of(x) for x in inf.on_node("worker-1")] == ["p1"]
    assert [model.name_of(x) for x in inf.owned_by("Pod", "u-1")] == ["p1"]
    # an update whose decoded namespace changed lands under a new identity; the old entry stays
    q = _pod("p1", ns="eefault", node="worker-1")
    inf.apply("MODIFIED", "Pod", q)
    assert inf.get("Pod", "default", "p1") is not None
    assert inf.get("Pod", "eefault", "p1") is not None
