"""Deterministic discrete-event engine replaying a trace against a policy.

Time is kept in integer nanoseconds so runs are exactly reproducible. Each
loop turn injects arrivals, asks the policy for an IterationPlan, charges
its predicted latency, and advances request and finetuning state.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .baselines import DtsPolicy, TemporalPolicy, isolate_policy, spatial_policy
from .cost import LatencyProfile, MemoryModel
from .scheduler import (DECODE, DONE, PREFILL, QUEUED, CoservePolicy, FinetuneState, IterationPlan,
                        Request, SchedulerConfig, advance_finetune, consume_cost, enforce_dependencies,
                        growth_reservation)
from .vtc import VtcPolicy
from .workload import Trace

FIDELITY_NOTE = ("backward finetuning windows are charged through the same latency model as "
                 "inference tokens (no two-stream overlap); each backward layer-token costs "
                 "bw_factor/layers token-equivalents")

METRIC_COLUMNS = ["request_id", "tenant", "kind", "arrival_ms", "prompt_len", "gen_len", "seq_len",
                  "first_token_ms", "completion_ms", "ttft_ms", "tpot_ms", "evictions", "rejected",
                  "slo_ok"]
TIMELINE_COLUMNS = ["iteration", "start_ms", "duration_ms", "predicted_ms", "c", "decode_tokens",
                    "prefill_tokens", "admitted", "s", "s_cost", "ft_phase", "ft_layer",
                    "side_ft_cost", "queue_depth", "running", "free_pages"]


class InvariantViolation(AssertionError):
    pass


@dataclass
class EngineConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    total_pages: int = 4608
    page_size: int = 16
    drain_finetune: bool = True
    timeline_cap: int = 10 ** 7

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def make_policy(spec: str, *, w_p: float = 1.0, w_q: float = 2.0, w_r: float = 1.0,
                gamma: float = 1.15, dts_f_p: float = 64.0):
    """Parse ``coserve``, ``isolate:<rho>``, ``temporal:<n>``, ``dts``, ``spatial:<rho>``, ``vtc``."""
    name, _, arg = spec.partition(":")
    try:
        if name == "coserve" and not arg:
            return CoservePolicy()
        if name == "vtc" and not arg:
            return VtcPolicy(w_p, w_q, w_r)
        if name == "dts" and not arg:
            return DtsPolicy(dts_f_p)
        if name == "temporal":
            n = math.inf if arg in ("inf", "∞") else int(arg)
            return TemporalPolicy(n)
        if name == "spatial":
            return spatial_policy(float(arg), gamma)
        if name == "isolate":
            return isolate_policy(float(arg))
    except ValueError as e:
        raise ValueError(f"bad policy {spec!r}: {e}") from None
    raise ValueError(f"unknown policy {spec!r}")


@dataclass
class SimMetrics:
    requests: list[Request]
    timeline: list[list]
    summary: dict

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.requests:
            w.writerow(_metric_row(r, self.summary))
        return buf.getvalue()

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        w.writerows(self.timeline)
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        for name, text in (("metrics.csv", self.metrics_csv()), ("timeline.csv", self.timeline_csv()),
                           ("summary.json", self.summary_json())):
            with open(os.path.join(outdir, name), "w", newline="") as fh:
                fh.write(text)


def _ms(ns) -> str:
    return "" if ns is None else f"{ns / 1e6:.3f}"


def ttft_ns(r: Request) -> int | None:
    return None if r.first_token_ns is None else r.first_token_ns - r.arrival_ns


def tpot_ns(r: Request) -> float | None:
    if r.done_ns is None or r.first_token_ns is None:
        return None
    if r.gen_len <= 1:
        return 0.0
    return (r.done_ns - r.first_token_ns) / (r.gen_len - 1)


def slo_ok(r: Request, tpot_slo_ms: float, ttft_slo_ms: float) -> bool:
    if r.kind != "inf" or r.done_ns is None or r.rejected:
        return False
    tpot_budget = round(tpot_slo_ms * 1e6) * max(r.gen_len - 1, 0)
    return (r.done_ns - r.first_token_ns) <= tpot_budget and ttft_ns(r) <= round(ttft_slo_ms * 1e6)


def _metric_row(r: Request, summary: dict) -> list:
    cfg = summary["config"]["scheduler"]
    if r.kind == "ft":
        return [r.id, r.tenant, "ft", _ms(r.arrival_ns), "", "", r.seq_len, "", _ms(r.done_ns),
                "", "", "", "", ""]
    t = tpot_ns(r)
    rejected = r.rejected
    return [r.id, r.tenant, "inf", _ms(r.arrival_ns), r.prompt_len, r.gen_len, "",
            _ms(r.first_token_ns), _ms(r.done_ns), _ms(ttft_ns(r)), "" if t is None else f"{t / 1e6:.3f}",
            r.evictions, int(rejected), int(slo_ok(r, cfg["tpot_slo_ms"], cfg["ttft_slo_ms"]))]


class Engine:
    def __init__(self, trace: Trace, policy, profile: LatencyProfile, config: EngineConfig | None = None,
                 seed: int = 0, observers=()):
        self.trace = trace
        self.policy = policy
        self.profile = profile
        self.config = config or EngineConfig()
        self.cfg = self.config.scheduler
        self.seed = seed
        kv = getattr(policy, "kv_fraction", 1.0)
        self.mem = MemoryModel(int(self.config.total_pages * kv), self.config.page_size)
        self.observers = list(observers)
        self.now = 0
        self.requests: dict[int, Request] = {}
        self._arrivals: list[Request] = []
        for i, rec in enumerate(trace.records):
            r = Request(i, rec.tenant, rec.kind, round(rec.time_ms * 1e6),
                        rec.prompt_len or 0, rec.gen_len or 0, rec.seq_len or 0)
            self.requests[i] = r
            self._arrivals.append(r)
        self._next = 0
        self.queue: list[Request] = []
        self.running: list[Request] = []
        self.ft_queue: list[int] = []
        self.ft_requests: set[int] = set()
        self.ft_states: dict[int, FinetuneState] = {}
        self.ft_work = 0
        self.minibatches = 0
        self.iterations = 0
        self.timeline: list[list] = []
        self._stride = 1
        self._arrived_since = 0
        self.slo_unsafe_iterations = 0
        self._inf_left = sum(1 for r in self._arrivals if r.kind == "inf")
        self._last_inf_done = None
        self._ft_work_at_last_inf = 0
        if hasattr(policy, "bind"):
            policy.bind(self)

    # -- views used by policies ------------------------------------------------
    def next_arrival_ns(self) -> int | None:
        if self._next < len(self._arrivals):
            return self._arrivals[self._next].arrival_ns
        return None

    def ft_state_for(self, rid: int) -> FinetuneState:
        st = self.ft_states.get(rid)
        if st is None:
            st = FinetuneState.start(rid, self.requests[rid].seq_len, self.cfg.layers)
            self.ft_states[rid] = st
        return st

    def active_finetune(self) -> FinetuneState | None:
        if not self.ft_queue:
            return None
        return self.ft_state_for(self.ft_queue[0])

    # -- loop -------------------------------------------------------------------
    def _inject(self) -> None:
        while self._next < len(self._arrivals) and self._arrivals[self._next].arrival_ns <= self.now:
            r = self._arrivals[self._next]
            self._next += 1
            self._arrived_since += 1
            if r.kind == "ft":
                self.ft_queue.append(r.id)
                self.ft_requests.add(r.id)
            else:
                need = self.mem.pages_for(r.prompt_len) + self.mem.pages_for(growth_reservation(r, self.cfg))
                if need > self.mem.total_pages:
                    r.rejected = True
                    r.state = DONE
                    self._inference_finished(r)
                    continue
                self.queue.append(r)
            if hasattr(self.policy, "on_arrival"):
                self.policy.on_arrival(self, r)

    def _inference_finished(self, r: Request) -> None:
        self._inf_left -= 1
        self._last_inf_done = self.now
        self._ft_work_at_last_inf = self.ft_work

    def _inference_pending(self) -> bool:
        return self._inf_left > 0

    def run(self) -> SimMetrics:
        budget = self.cfg.tpot_slo_ms
        while True:
            self._inject()
            if not self.config.drain_finetune and not self._inference_pending():
                break
            plan = self.policy.plan(self)
            if plan.empty:
                nxt = self.next_arrival_ns()
                if nxt is None:
                    if self.queue or self.running:
                        raise InvariantViolation("work remains but the policy planned nothing")
                    break
                self.now = max(self.now, nxt)
                continue
            if plan.windows:
                enforce_dependencies(plan, {w.request_id: self.ft_state_for(w.request_id)
                                            for w in plan.windows})
            if plan.inference_active and plan.predicted_ms > budget + 1e-9:
                self.slo_unsafe_iterations += 1
                if self.policy.slo_safe:
                    raise InvariantViolation(
                        f"planned {plan.predicted_ms:.3f} ms > budget {budget} ms with inference active")
            dur = max(1, round(plan.predicted_ms * 1e6))
            start = self.now
            self.now = start + dur
            stats = self._apply(plan)
            stats["arrivals"] = self._arrived_since
            self._arrived_since = 0
            self.iterations += 1
            self._log(start, dur, plan)
            self.policy.on_iteration(self, plan, stats)
            for obs in self.observers:
                obs(self, plan, stats)
        return self._metrics()

    def _apply(self, plan: IterationPlan) -> dict:
        emitted = defaultdict(int)
        stats = {"completions": 0, "emitted_by_tenant": emitted, "ft_finished": [], "evicted": []}
        if plan.admit:
            ids = set(plan.admit)
            admitted = [self.requests[i] for i in plan.admit]
            self.queue = [r for r in self.queue if r.id not in ids]
            for r in admitted:
                if not self.mem.try_admit(r.id, r.prefill_target, growth_reservation(r, self.cfg)):
                    raise InvariantViolation(f"admission of request {r.id} did not fit")
                r.state = PREFILL
                if r.admitted_ns is None:
                    r.admitted_ns = self.now
                self.running.append(r)
        decodes = [self.requests[i] for i in plan.decode]
        for rid, n in plan.prefill:
            r = self.requests[rid]
            r.prefilled += n
            if r.prefilled > r.prefill_target:
                raise InvariantViolation("prefill overran the prompt")
            if r.prefilled == r.prefill_target:
                r.state = DECODE
                self._emit(r, stats)
        for r in decodes:
            if r.state == DECODE:
                self._emit(r, stats)
        for w in plan.windows:
            st = self.ft_state_for(w.request_id)
            before = st.work_tokens
            if w.phase == "block":
                st, _ = consume_cost(st, math.inf, self.cfg.bw_factor)
            else:
                st = advance_finetune(st, w.tokens)
            self.ft_work += st.work_tokens - before
            self._store_ft(st, stats)
            if st.done:
                break
        cost = plan.side_cost_tokens
        while cost > 0:
            st = self.active_finetune()
            if st is None:
                break
            before = st.work_tokens
            st, cost = consume_cost(st, cost, self.cfg.bw_factor)
            self.ft_work += st.work_tokens - before
            self._store_ft(st, stats)
            if not st.done:
                break
        return stats

    def _store_ft(self, st: FinetuneState, stats) -> None:
        self.ft_states[st.request_id] = st
        if st.done:
            L, N = st.seq_len, st.layers
            if st.fwd_tokens != L or st.bwd_tokens != N * L or st.optimizer_steps != 1:
                raise InvariantViolation(f"mini-batch {st.request_id} token accounting is off")
            self.ft_queue.remove(st.request_id)
            self.ft_requests.discard(st.request_id)
            self.requests[st.request_id].done_ns = self.now
            self.requests[st.request_id].state = DONE
            self.minibatches += 1
            stats["ft_finished"].append(st.request_id)

    def _emit(self, r: Request, stats) -> None:
        r.emitted += 1
        stats["emitted_by_tenant"][r.tenant] += 1
        if r.first_token_ns is None:
            r.first_token_ns = self.now
        if r.emitted >= r.gen_len:
            r.state = DONE
            r.done_ns = self.now
            self.mem.release(r.id)
            self.running.remove(r)
            stats["completions"] += 1
            self._inference_finished(r)
            return
        if not self.mem.grow(r.id, r.prompt_len + r.emitted):
            self._evict(r, stats)

    def _evict(self, r: Request, stats) -> None:
        self.mem.release(r.id)
        self.running.remove(r)
        r.state = QUEUED
        r.prefilled = 0
        r.prefill_target = r.prompt_len + r.emitted
        r.evictions += 1
        self.queue.insert(0, r)
        stats["evicted"].append(r.id)
        if hasattr(self.policy, "on_requeue"):
            self.policy.on_requeue(self, r)

    def _log(self, start: int, dur: int, plan: IterationPlan) -> None:
        if (self.iterations - 1) % self._stride:
            return
        w = plan.windows[0] if plan.windows else None
        self.timeline.append([
            self.iterations - 1, _ms(start), _ms(dur), f"{plan.predicted_ms:.3f}", plan.c, len(plan.decode),
            sum(n for _, n in plan.prefill), len(plan.admit), plan.s, plan.s_cost,
            w.phase if w else "", w.layer if w else "", f"{plan.side_cost_tokens:.1f}",
            len(self.queue), len(self.running), self.mem.free_pages])
        if len(self.timeline) >= self.config.timeline_cap:
            self.timeline = self.timeline[::2]
            self._stride *= 2

    # -- results ----------------------------------------------------------------
    def _metrics(self) -> SimMetrics:
        reqs = [self.requests[i] for i in sorted(self.requests)]
        inf = [r for r in reqs if r.kind == "inf"]
        cfg = self.cfg
        ok = [slo_ok(r, cfg.tpot_slo_ms, cfg.ttft_slo_ms) for r in inf]
        emitted = sum(r.emitted for r in inf)
        if inf and self._last_inf_done is not None:
            window_ns, ft_work = self._last_inf_done, self._ft_work_at_last_inf
        else:
            window_ns, ft_work = self.now, self.ft_work
        window_s = window_ns / 1e9
        tpots = [tpot_ns(r) for r in inf if tpot_ns(r) is not None]
        ttfts = [ttft_ns(r) for r in inf if ttft_ns(r) is not None]
        tenants = {}
        for t in sorted({r.tenant for r in reqs}):
            mine = [r for r in inf if r.tenant == t]
            ft_mine = [r for r in reqs if r.tenant == t and r.kind == "ft"]
            tenants[t] = {
                "inference_requests": len(mine),
                "slo_attainment": _ratio(sum(slo_ok(r, cfg.tpot_slo_ms, cfg.ttft_slo_ms) for r in mine),
                                         len(mine)),
                "tokens_emitted": sum(r.emitted for r in mine),
                "finetune_requests": len(ft_mine),
                "minibatches_completed": sum(r.done_ns is not None for r in ft_mine),
            }
            led = getattr(self.policy, "ledger", None)
            if led is not None:
                tenants[t]["vtc_service"] = round(led.service.get(t, 0.0), 6)
                tenants[t]["vtc_counter"] = round(led.counters.get(t, 0.0), 6)
        summary = {
            "policy": self.policy.describe(),
            "seed": self.seed,
            "config": {**self.config.to_dict(),
                       "profile": {"t0_ms": self.profile.t0_ms,
                                   "slope_ms_per_token": self.profile.slope_ms_per_token,
                                   "knee_tokens": self.profile.knee_tokens}},
            "trace": {**self.trace.meta, "records": len(self.trace.records)},
            "fidelity_note": FIDELITY_NOTE,
            "inference_requests": len(inf),
            "completed": sum(r.done_ns is not None and not r.rejected for r in inf),
            "rejected": sum(r.rejected for r in inf),
            "slo_attainment": _ratio(sum(ok), len(inf)),
            "mean_ttft_ms": round(sum(ttfts) / len(ttfts) / 1e6, 6) if ttfts else 0.0,
            "mean_tpot_ms": round(sum(tpots) / len(tpots) / 1e6, 6) if tpots else 0.0,
            "inference_throughput_tps": round(emitted / window_s, 6) if window_s > 0 else 0.0,
            "finetune_throughput_tps": round(ft_work / (1 + cfg.layers) / window_s, 6) if window_s > 0 else 0.0,
            "finetune_work_tokens": self.ft_work,
            "minibatches_completed": self.minibatches,
            "evicted_requests": sum(r.evictions > 0 for r in inf),
            "eviction_pct": round(100.0 * _ratio(sum(r.evictions > 0 for r in inf), len(inf)), 6),
            "iterations": self.iterations,
            "slo_unsafe_iterations": self.slo_unsafe_iterations,
            "window_ms": round(window_ns / 1e6, 6),
            "sim_end_ms": round(self.now / 1e6, 6),
            "tenants": tenants,
        }
        return SimMetrics(reqs, self.timeline, summary)


def _ratio(a, b) -> float:
    return round(a / b, 6) if b else 1.0


def run(trace: Trace, policy, profile: LatencyProfile | None = None, mem: EngineConfig | None = None,
        config: EngineConfig | None = None, seed: int = 0, observers=()) -> SimMetrics:
    """Replay ``trace`` under ``policy`` (a policy object or a policy string)."""
    if isinstance(policy, str):
        policy = make_policy(policy)
    return Engine(trace, policy, profile or LatencyProfile(), config or mem, seed, observers).run()


COMPARE_COLUMNS = ["rate_rps", "policy", "seed", "slo_attainment", "inference_throughput_tps",
                   "finetune_throughput_tps", "eviction_pct", "minibatches_completed", "mean_tpot_ms",
                   "mean_ttft_ms"]


def compare(traces: dict, policies: list[str], profile: LatencyProfile | None = None,
            config: EngineConfig | None = None, seed: int = 0, policy_kwargs: dict | None = None) -> list[dict]:
    """Run every policy on every (rate -> trace) point; one row per pair."""
    rows = []
    for rate in sorted(traces):
        for spec in policies:
            pol = make_policy(spec, **(policy_kwargs or {}))
            m = run(traces[rate], pol, profile, config=config, seed=seed)
            s = m.summary
            rows.append({"rate_rps": rate, "policy": spec, "seed": seed,
                         **{k: s[k] for k in COMPARE_COLUMNS[3:]}})
    return rows


def compare_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
