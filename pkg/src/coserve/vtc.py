"""Virtual token counters for fair multi-tenant co-serving."""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterator

from .cost import max_total_tokens
from .scheduler import IterationPlan, add_finetune_window, plan_inference


class NotApplicable(ValueError):
    pass


@dataclass
class TenantLedger:
    w_p: float = 1.0
    w_q: float = 2.0
    w_r: float = 1.0
    max_tokens: int = 4096  # M
    max_input: int = 4096  # L_input
    counters: dict = field(default_factory=lambda: defaultdict(float))
    service: dict = field(default_factory=lambda: defaultdict(float))
    queues: dict = field(default_factory=lambda: defaultdict(deque))
    last_left: str | None = None

    @property
    def bound(self) -> float:
        """U = max(w_p * L_input, max(w_q, w_r) * M)."""
        return max(self.w_p * self.max_input, max(self.w_q, self.w_r) * self.max_tokens)

    def active(self) -> list[str]:
        return sorted(t for t, q in self.queues.items() if q)

    def copy(self) -> "TenantLedger":
        led = TenantLedger(self.w_p, self.w_q, self.w_r, self.max_tokens, self.max_input)
        led.counters = defaultdict(float, self.counters)
        led.service = defaultdict(float, self.service)
        led.queues = defaultdict(deque, {t: deque(q) for t, q in self.queues.items()})
        led.last_left = self.last_left
        return led

    def spread(self) -> float:
        act = self.active()
        if not act:
            return 0.0
        vals = [self.counters[t] for t in act]
        return max(vals) - min(vals)


def on_arrival(led: TenantLedger, tenant: str, item) -> TenantLedger:
    """Lift the tenant's counter if it is rejoining, then enqueue ``item``."""
    if not led.queues[tenant]:
        act = led.active()
        if not act:
            if led.last_left is not None:
                led.counters[tenant] = max(led.counters[tenant], led.counters[led.last_left])
        else:
            led.counters[tenant] = max(led.counters[tenant], min(led.counters[t] for t in act))
    led.queues[tenant].append(item)
    return led


def leave(led: TenantLedger, tenant: str, item) -> None:
    """Remove ``item`` from the tenant queue (admitted or finished)."""
    q = led.queues[tenant]
    q.remove(item)
    if not q:
        led.last_left = tenant


def select_next(led: TenantLedger, candidates) -> str | None:
    """Tenant with the smallest counter among ``candidates``; ties go to the lowest id."""
    cands = sorted(set(candidates))
    if not cands:
        return None
    return min(cands, key=lambda t: (led.counters[t], t))


def charge(led: TenantLedger, tenant: str, event: str, tokens: float) -> TenantLedger:
    w = {"admit": led.w_p, "decode": led.w_q, "finetune": led.w_r}[event]
    led.counters[tenant] += w * tokens
    led.service[tenant] += w * tokens
    return led


# ---------------------------------------------------------------------------
# fairness checks


def fairness_bound(w_p, w_q, w_r, max_input, max_tokens) -> float:
    return 2 * max(w_p * max_input, max(w_q, w_r) * max_tokens)


def check_fairness_bound(history, t1: int, t2: int, f: str, g: str,
                         bound: float) -> tuple[float, float, bool]:
    """|W_f - W_g| over [t1, t2) from a history of (t, service dict, backlogged set) rows."""
    rows = [h for h in history if t1 <= h[0] <= t2]
    if not rows:
        raise NotApplicable("no checkpoints in interval")
    for _, _, backlogged in rows[:-1]:
        if f not in backlogged or g not in backlogged:
            raise NotApplicable(f"{f} and {g} are not both backlogged on the interval")
    first, last = rows[0][1], rows[-1][1]
    diff = abs((last.get(f, 0) - first.get(f, 0)) - (last.get(g, 0) - first.get(g, 0)))
    return diff, bound, diff <= bound + 1e-9


def max_pairwise_gap(history, bound: float) -> tuple[float, bool]:
    """Worst |W_f(t1,t2) - W_g(t1,t2)| over all jointly backlogged segments.

    Within a segment the worst interval is the range of D(t) = W_f(t) - W_g(t),
    so one pass per pair suffices instead of enumerating all (t1, t2).
    """
    worst = 0.0
    tenants = sorted({t for _, s, _ in history for t in s})
    for i, f in enumerate(tenants):
        for g in tenants[i + 1:]:
            lo = hi = None
            for _, serv, back in history:
                if f in back and g in back:
                    d = serv.get(f, 0) - serv.get(g, 0)
                    lo = d if lo is None else min(lo, d)
                    hi = d if hi is None else max(hi, d)
                    worst = max(worst, hi - lo)
                else:
                    # the closing checkpoint of a segment still counts
                    if lo is not None:
                        d = serv.get(f, 0) - serv.get(g, 0)
                        worst = max(worst, max(hi, d) - min(lo, d))
                    lo = hi = None
    return worst, worst <= bound + 1e-9


# ---------------------------------------------------------------------------
# policy


class VtcPolicy:
    """Co-serving where tenants are picked by smallest virtual counter."""
    name = "vtc"
    slo_safe = True

    def __init__(self, w_p: float = 1.0, w_q: float = 2.0, w_r: float = 1.0,
                 max_input: int = 4096, max_tokens: int | None = None):
        self.ledger = TenantLedger(w_p, w_q, w_r, max_tokens or 0, max_input)
        self._fixed_m = max_tokens is not None
        self.active_ft: dict[str, int] = {}
        self.spread_violations = 0
        self.max_spread = 0.0
        self.history: list = []
        self.record_history = False

    def bind(self, eng) -> None:
        if not self._fixed_m:
            # the analysis needs M to cap the tokens in flight: KV pool or one iteration's tokens
            cap = max_total_tokens(eng.profile, eng.cfg.tpot_slo_ms)
            self.ledger.max_tokens = max(eng.mem.total_pages * eng.mem.page_size, cap)

    # engine callbacks -------------------------------------------------------
    def on_arrival(self, eng, r) -> None:
        on_arrival(self.ledger, r.tenant, r.id)

    def on_requeue(self, eng, r) -> None:
        on_arrival(self.ledger, r.tenant, r.id)

    def _admission_order(self, eng, led: TenantLedger) -> Iterator:
        by_id = {r.id: r for r in eng.queue}
        ft_tenants = set(self._ft_candidates(eng))
        while True:
            tenants = [t for t, q in led.queues.items() if any(i in by_id for i in q)]
            k = select_next(led, set(tenants) | ft_tenants)
            if k is None or k not in tenants:
                # the smallest counter belongs to finetuning work; it goes first
                return
            rid = next(i for i in led.queues[k] if i in by_id)
            r = by_id.pop(rid)
            charge(led, k, "admit", r.prefill_target)
            leave(led, k, rid)
            yield r

    def _ft_candidates(self, eng) -> dict[str, object]:
        out = {}
        for tenant, q in self.ledger.queues.items():
            for rid in q:
                if rid in eng.ft_requests:
                    out[tenant] = eng.ft_state_for(rid)
                    break
        return out

    def plan(self, eng) -> IterationPlan:
        led = self.ledger.copy()
        plan = plan_inference(self._admission_order(eng, led), eng.running, eng.profile, eng.cfg,
                              eng.mem.free_pages, eng.mem.page_size)
        cands = self._ft_candidates(eng)
        k = select_next(self.ledger, cands)
        if k is not None:
            # never lift a finetuning tenant more than U above the active minimum
            act = self.ledger.active()
            floor = min(self.ledger.counters[t] for t in act) if act else 0.0
            room = floor + self.ledger.bound - self.ledger.counters[k]
            cap = int(room / self.ledger.w_r) if self.ledger.w_r > 0 else None
            if cap is None or cap > 0:
                add_finetune_window(plan, cands[k], eng.profile, eng.cfg, cost_cap=cap)
        return plan

    def on_iteration(self, eng, plan, stats) -> None:
        led = self.ledger
        for rid in plan.admit:
            r = eng.requests[rid]
            charge(led, r.tenant, "admit", r.prefill_target)
            leave(led, r.tenant, rid)
        for tenant, n in stats["emitted_by_tenant"].items():
            charge(led, tenant, "decode", n)
        for w in plan.windows:
            r = eng.requests[w.request_id]
            charge(led, r.tenant, "finetune", w.cost_tokens)
        for rid in stats["ft_finished"]:
            r = eng.requests[rid]
            leave(led, r.tenant, rid)
        spread = led.spread()
        self.max_spread = max(self.max_spread, spread)
        if spread > led.bound + 1e-9:
            self.spread_violations += 1
        if self.record_history:
            self.history.append((eng.now, dict(led.service), frozenset(led.active())))

    def describe(self) -> dict:
        led = self.ledger
        return {"policy": self.name, "w_p": led.w_p, "w_q": led.w_q, "w_r": led.w_r,
                "L_input": led.max_input, "M": led.max_tokens}
