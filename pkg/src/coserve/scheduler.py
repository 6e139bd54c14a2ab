"""Hybrid token scheduler: iteration-level inference batching with chunked
prefill, topped up with token-level finetuning windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from .cost import LatencyProfile, latency, max_finetune_tokens, max_total_tokens

QUEUED, PREFILL, DECODE, DONE = "queued", "prefill", "decode", "done"
FORWARD, BACKWARD = "forward", "backward"


class PlannerBug(AssertionError):
    """A plan broke a scheduling invariant."""


@dataclass
class Request:
    id: int
    tenant: str
    kind: str  # "inf" or "ft"
    arrival_ns: int
    prompt_len: int = 0
    gen_len: int = 0
    seq_len: int = 0
    state: str = QUEUED
    prefilled: int = 0
    prefill_target: int = 0
    emitted: int = 0
    first_token_ns: int | None = None
    done_ns: int | None = None
    evictions: int = 0
    admitted_ns: int | None = None
    rejected: bool = False

    def __post_init__(self):
        if self.kind == "inf" and not self.prefill_target:
            self.prefill_target = self.prompt_len

    @property
    def prefill_left(self) -> int:
        return self.prefill_target - self.prefilled


@dataclass(frozen=True)
class FinetuneState:
    """Progress of one finetuning mini-batch (one sequence) through its forward, backward and update phases."""
    request_id: int
    seq_len: int
    layers: int
    phase: str = FORWARD
    l: int = 0  # forward position
    layer: int = -1  # backward layer, counts down from layers - 1
    l_j: int = 0  # backward window end within the layer
    fwd_tokens: int = 0
    bwd_tokens: int = 0
    optimizer_steps: int = 0

    @classmethod
    def start(cls, request_id: int, seq_len: int, layers: int) -> "FinetuneState":
        if seq_len < 1 or layers < 1:
            raise ValueError("finetuning needs seq_len >= 1 and layers >= 1")
        return cls(request_id, seq_len, layers)

    @property
    def done(self) -> bool:
        return self.phase == DONE

    @property
    def remaining_in_phase(self) -> int:
        if self.phase == FORWARD:
            return self.seq_len - self.l
        if self.phase == BACKWARD:
            return self.l_j
        return 0

    @property
    def work_tokens(self) -> int:
        return self.fwd_tokens + self.bwd_tokens


def advance_finetune(ft: FinetuneState, s: int) -> FinetuneState:
    """Move the mini-batch forward by one window of ``s`` tokens (clipped to the phase)."""
    if s < 0:
        raise ValueError("window size must be non-negative")
    if s == 0 or ft.done:
        return ft
    s = min(s, ft.remaining_in_phase)
    if ft.phase == FORWARD:
        l = ft.l + s
        ft = replace(ft, l=l, fwd_tokens=ft.fwd_tokens + s)
        if l == ft.seq_len:
            ft = replace(ft, phase=BACKWARD, layer=ft.layers - 1, l_j=ft.seq_len)
        return ft
    l_j = ft.l_j - s
    ft = replace(ft, l_j=l_j, bwd_tokens=ft.bwd_tokens + s)
    if l_j == 0:
        if ft.layer == 0:
            # all layers done: Adam step closes the mini-batch
            ft = replace(ft, phase=DONE, layer=-1, optimizer_steps=ft.optimizer_steps + 1)
        else:
            ft = replace(ft, layer=ft.layer - 1, l_j=ft.seq_len)
    return ft


def window_cost(ft: FinetuneState, tokens: int, bw_factor: float) -> int:
    """Token-equivalents charged through f for a window.

    A backward window covers one layer, so each token costs bw_factor / N of
    a full forward token.
    """
    if ft.phase == BACKWARD:
        return math.ceil(tokens * bw_factor / ft.layers)
    return tokens


def tokens_for_cost(ft: FinetuneState, cost: int, bw_factor: float) -> int:
    if ft.phase == BACKWARD:
        return int(cost * ft.layers // bw_factor)
    return cost


def block_cost(seq_len: int, bw_factor: float) -> int:
    """Whole mini-batch in one block: forward L plus backward N*L layer tokens at bw/N each."""
    return seq_len + math.ceil(seq_len * bw_factor)


def consume_cost(ft: FinetuneState, cost: float, bw_factor: float) -> tuple[FinetuneState, float]:
    """Advance through as many windows as ``cost`` token-equivalents pay for."""
    while cost > 0 and not ft.done:
        want = window_cost(ft, ft.remaining_in_phase, bw_factor)
        if cost >= want:
            ft = advance_finetune(ft, ft.remaining_in_phase)
            cost -= want
        else:
            n = tokens_for_cost(ft, math.floor(cost), bw_factor)
            if n <= 0:
                break
            ft = advance_finetune(ft, n)
            cost = 0
    return ft, cost


@dataclass(frozen=True)
class SchedulerConfig:
    max_batch: int = 64
    chunk_size: int = 512
    tpot_slo_ms: float = 50.0
    ttft_slo_ms: float = 5000.0
    layers: int = 32
    bw_factor: float = 2.0
    reserve_fraction: float = 1.0

    def __post_init__(self):
        if self.max_batch < 1 or self.chunk_size < 1 or self.tpot_slo_ms <= 0 or self.layers < 1:
            raise ValueError("invalid scheduler configuration")
        if not 0 <= self.reserve_fraction <= 1:
            raise ValueError("reserve_fraction must be in [0, 1]")


@dataclass
class FtWindow:
    request_id: int
    phase: str  # forward, backward, or block (whole mini-batch)
    layer: int
    tokens: int
    cost_tokens: int


@dataclass
class IterationPlan:
    decode: list[int] = field(default_factory=list)
    prefill: list[tuple[int, int]] = field(default_factory=list)
    admit: list[int] = field(default_factory=list)
    windows: list[FtWindow] = field(default_factory=list)
    predicted_ms: float = 0.0
    inference_active: bool = False
    # finetuning that runs on a separate resource share during this iteration
    side_cost_tokens: float = 0.0

    @property
    def c(self) -> int:
        return len(self.decode) + sum(n for _, n in self.prefill)

    @property
    def s(self) -> int:
        return sum(w.tokens for w in self.windows)

    @property
    def s_cost(self) -> int:
        return sum(w.cost_tokens for w in self.windows)

    @property
    def empty(self) -> bool:
        return not (self.decode or self.prefill or self.windows or self.side_cost_tokens > 0)


def growth_reservation(r: Request, cfg: SchedulerConfig) -> int:
    return math.ceil(cfg.reserve_fraction * (r.gen_len - r.emitted))


def plan_inference(queue: Iterable[Request], running: list[Request], profile: LatencyProfile,
                   cfg: SchedulerConfig, free_pages: int | None = None, page_size: int = 16) -> IterationPlan:
    """Decodes, admissions, and prefill chunks under the per-iteration token cap."""
    plan = IterationPlan()
    plan.decode = [r.id for r in running if r.state == DECODE]
    cap = max_total_tokens(profile, cfg.tpot_slo_ms)
    avail = cap - len(plan.decode)
    slots = cfg.max_batch - len(running)
    pages = free_pages
    admitted: list[Request] = []
    it: Iterator[Request] = iter(queue)
    while slots > 0:
        r = next(it, None)
        if r is None:
            break
        if pages is not None:
            need = -(-r.prefill_target // page_size) + -(-growth_reservation(r, cfg) // page_size)
            if need > pages:
                break  # head-of-line: keep admission order
            pages -= need
        admitted.append(r)
        slots -= 1
    plan.admit = [r.id for r in admitted]
    for r in [r for r in running if r.state == PREFILL] + admitted:
        if avail <= 0:
            break
        n = min(cfg.chunk_size, r.prefill_left, avail)
        if n > 0:
            plan.prefill.append((r.id, n))
            avail -= n
    plan.inference_active = bool(running or admitted)
    plan.predicted_ms = latency(profile, plan.c, 0) if plan.c else 0.0
    return plan


def add_finetune_window(plan: IterationPlan, ft: FinetuneState | None, profile: LatencyProfile,
                        cfg: SchedulerConfig, cost_cap: int | None = None) -> IterationPlan:
    """Top the plan up with s = argmax f(c, s) <= budget finetuning tokens.

    A forward window stays within the forward pass. In the backward pass,
    leftover budget after finishing a layer flows into the next lower layer
    of the same mini-batch, since those windows run in dependency order.
    """
    if ft is not None and not ft.done:
        budget = max_finetune_tokens(profile, plan.c, cfg.tpot_slo_ms)
        if cost_cap is not None:
            budget = min(budget, cost_cap)
        start_phase = ft.phase
        while budget > 0 and ft.phase == start_phase:
            n = min(tokens_for_cost(ft, budget, cfg.bw_factor), ft.remaining_in_phase)
            if n <= 0:
                break
            cost = window_cost(ft, n, cfg.bw_factor)
            plan.windows.append(FtWindow(ft.request_id, ft.phase, ft.layer, n, cost))
            budget -= cost
            ft = advance_finetune(ft, n)
            if ft.phase == FORWARD:
                break
    if plan.c or plan.windows:
        plan.predicted_ms = latency(profile, plan.c, plan.s_cost)
    return plan


def plan_iteration(queue: Iterable[Request], running: list[Request], ft: FinetuneState | None,
                   profile: LatencyProfile, cfg: SchedulerConfig, free_pages: int | None = None,
                   page_size: int = 16) -> IterationPlan:
    plan = plan_inference(queue, running, profile, cfg, free_pages, page_size)
    return add_finetune_window(plan, ft, profile, cfg)


def enforce_dependencies(plan: IterationPlan, ft_states: dict[int, FinetuneState]) -> IterationPlan:
    """Reject plans that break forward/backward ordering or mix mini-batches.

    Several backward windows of one mini-batch are allowed when they walk
    the layers downward in order; a plan may not contain backward work for
    a mini-batch whose forward pass is still incomplete when the plan starts.
    """
    ids = {w.request_id for w in plan.windows}
    if len(ids) > 1:
        raise PlannerBug(f"plan mixes finetuning mini-batches {sorted(ids)}")
    if not plan.windows:
        return plan
    st = ft_states.get(plan.windows[0].request_id)
    if st is None or st.done:
        raise PlannerBug(f"window for unknown or finished mini-batch {plan.windows[0].request_id}")
    if plan.windows[0].phase == "block":
        if len(plan.windows) > 1 or st.phase != FORWARD or st.l != 0:
            raise PlannerBug("a full finetuning block needs a fresh mini-batch and nothing else")
        return plan
    if st.phase == FORWARD and len(plan.windows) > 1:
        raise PlannerBug("only one forward window per iteration")
    for w in plan.windows:
        if st.done:
            raise PlannerBug("window after the mini-batch finished")
        if w.phase == BACKWARD and st.phase != BACKWARD:
            raise PlannerBug(f"backward window before forward finished (l={st.l} of {st.seq_len})")
        if w.phase != st.phase:
            raise PlannerBug(f"window phase {w.phase} does not match state {st.phase}")
        if w.phase == BACKWARD and w.layer != st.layer:
            raise PlannerBug(f"backward window at layer {w.layer}, expected {st.layer}")
        if w.tokens < 1 or w.tokens > st.remaining_in_phase:
            raise PlannerBug("window size outside the remaining phase")
        st = advance_finetune(st, w.tokens)
    return plan


class CoservePolicy:
    """Hybrid token scheduler with FIFO admission and one active mini-batch."""
    name = "coserve"
    slo_safe = True

    def plan(self, eng) -> IterationPlan:
        ft = eng.active_finetune()
        plan = plan_iteration(eng.queue, eng.running, ft, eng.profile, eng.cfg,
                              eng.mem.free_pages, eng.mem.page_size)
        return plan

    def on_iteration(self, eng, plan, stats) -> None:
        pass

    def describe(self) -> dict:
        return {"policy": self.name}
