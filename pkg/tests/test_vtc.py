import pytest
from hypothesis import given, settings, strategies as st

from coserve.engine import EngineConfig, run
from coserve.scenarios import adversarial_tenants_trace
from coserve.vtc import (NotApplicable, TenantLedger, VtcPolicy, charge, check_fairness_bound,
                         fairness_bound, leave, max_pairwise_gap, on_arrival, select_next)


class TestLifting:
    def test_rejoin_empty_system(self):
        led = TenantLedger()
        on_arrival(led, "l", 1)
        led.counters["l"] = 500
        leave(led, "l", 1)
        led.counters["u"] = 100
        on_arrival(led, "u", 2)
        assert led.counters["u"] == 500

    def test_already_queued(self):
        led = TenantLedger()
        on_arrival(led, "a", 1)
        on_arrival(led, "b", 2)
        led.counters.update(a=10, b=300)
        on_arrival(led, "a", 3)
        assert led.counters["a"] == 10

    def test_min_of_active(self):
        led = TenantLedger()
        for t, c in (("x", 200), ("y", 300)):
            on_arrival(led, t, t)
            led.counters[t] = c
        led.counters["z"] = 50
        on_arrival(led, "z", "z")
        assert led.counters["z"] == 200

    def test_never_lowers(self):
        led = TenantLedger()
        on_arrival(led, "x", 1)
        led.counters["z"] = 900
        on_arrival(led, "z", 2)
        assert led.counters["z"] == 900


class TestSelect:
    def test_smallest(self):
        led = TenantLedger()
        led.counters.update(A=10, B=5)
        assert select_next(led, ["A", "B"]) == "B"

    def test_single(self):
        assert select_next(TenantLedger(), ["A"]) == "A"

    def test_tie(self):
        led = TenantLedger()
        led.counters.update(B=7, A=7)
        assert select_next(led, ["B", "A"]) == "A"

    def test_none(self):
        assert select_next(TenantLedger(), []) is None


class TestCharge:
    def test_weights(self):
        led = TenantLedger(w_p=1, w_q=2, w_r=0.5)
        assert charge(led, "t", "admit", 100).counters["t"] == 100
        assert charge(led, "t", "decode", 5).counters["t"] == 110
        assert charge(led, "t", "finetune", 64).counters["t"] == 142
        assert led.service["t"] == 142

    def test_unknown_event(self):
        with pytest.raises(KeyError):
            charge(TenantLedger(), "t", "eat", 1)


def test_bound_plug_in():
    assert fairness_bound(1, 1, 1, 512, 256) == 1024
    assert TenantLedger(1, 1, 1, max_tokens=256, max_input=512).bound == 512


class TestCheckBound:
    HIST = [(0, {"f": 0, "g": 0}, {"f", "g"}), (1, {"f": 10, "g": 10}, {"f", "g"}),
            (2, {"f": 30, "g": 10}, {"f", "g"}), (3, {"f": 30, "g": 40}, {"f"})]

    def test_symmetric(self):
        assert check_fairness_bound(self.HIST[:2], 0, 1, "f", "g", 5) == (0, 5, True)

    def test_exceeds(self):
        assert check_fairness_bound(self.HIST, 0, 2, "f", "g", 5)[2] is False

    def test_not_backlogged(self):
        with pytest.raises(NotApplicable):
            check_fairness_bound(self.HIST + [(4, {"f": 30, "g": 40}, {"f"})], 0, 4, "f", "g", 100)

    def test_no_rows(self):
        with pytest.raises(NotApplicable):
            check_fairness_bound(self.HIST, 10, 20, "f", "g", 1)

    def test_pairwise_gap_closes_segment(self):
        gap, ok = max_pairwise_gap(self.HIST, 25)
        # D goes 0, 0, 20, then -10 at the closing checkpoint
        assert gap == 30 and not ok


@given(st.lists(st.tuples(st.sampled_from("fg"), st.integers(0, 50)), max_size=40))
@settings(max_examples=100)
def test_pairwise_gap_matches_brute_force(steps):
    serv = {"f": 0, "g": 0}
    hist = [(0, dict(serv), frozenset("fg"))]
    for i, (t, n) in enumerate(steps, 1):
        serv[t] += n
        hist.append((i, dict(serv), frozenset("fg")))
    brute = max((check_fairness_bound(hist, a, b, "f", "g", 0)[0]
                 for a in range(len(hist)) for b in range(a, len(hist))), default=0)
    assert max_pairwise_gap(hist, 0)[0] == brute


@pytest.mark.parametrize("n_tenants", [2, 3, 4])
def test_counter_spread_on_adversarial_mix(n_tenants):
    pol = VtcPolicy()
    pol.record_history = True
    run(adversarial_tenants_trace(7, n_tenants, duration_s=20), pol,
        config=EngineConfig(drain_finetune=False), seed=7)
    assert pol.spread_violations == 0 and pol.max_spread <= pol.ledger.bound
    assert max_pairwise_gap(pol.history, 2 * pol.ledger.bound)[1]


def test_light_tenant_is_never_starved():
    tr = adversarial_tenants_trace(3, 3, duration_s=20, light_rps=2.0)
    m = run(tr, VtcPolicy(), config=EngineConfig(drain_finetune=False), seed=3)
    waits = {}
    for r in m.requests:
        if r.kind == "inf":
            assert r.admitted_ns is not None
            waits.setdefault(r.tenant, []).append(r.admitted_ns - r.arrival_ns)
    heavy_median = min(sorted(v)[len(v) // 2] for t, v in waits.items() if t != "light")
    assert max(waits["light"]) < 0.25 * heavy_median


def test_m_follows_engine():
    pol = VtcPolicy()
    run(adversarial_tenants_trace(1, 2, duration_s=1), pol, config=EngineConfig(total_pages=100), seed=1)
    assert pol.ledger.max_tokens >= 100 * 16
    assert VtcPolicy(max_tokens=256).describe()["M"] == 256
