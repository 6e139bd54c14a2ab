"""Comparison policies: fixed and dynamic temporal sharing, spatial sharing, isolation."""
from __future__ import annotations

from dataclasses import dataclass, field

from .cost import LatencyProfile, latency
from .scheduler import (FtWindow, IterationPlan, SchedulerConfig, block_cost, plan_inference)

DTS_MIN, DTS_MAX, DTS_FLOOR = 64, 512, 64 + 16


@dataclass
class DtsState:
    Q: list = field(default_factory=list)
    B: list = field(default_factory=list)
    r_a: float = 0.0
    r_c: float = 0.0
    s: float = 64
    f_p: float = 64.0
    d: int = 0
    recomputes: int = 0

    def reset_stats(self) -> None:
        self.Q.clear()
        self.B.clear()
        self.r_a = 0.0
        self.r_c = 0.0


def dts_pressure(state: DtsState) -> float:
    q_bar = sum(state.Q) / len(state.Q)
    q_max = max(state.Q)
    lam = state.r_a / len(state.Q)
    mu = state.r_c / len(state.Q)
    p_q = min(1.0, q_bar / 20.0)
    p_s = min(0.5, q_max / 25.0)
    p_b = max(0.0, (lam - mu) / 8.0)
    return p_q + p_s + p_b


def dts_raw_interval(p: float) -> float:
    """Interval before the stabilization factor."""
    if p <= 0.8:
        return 64.0
    if p >= 2.0:
        return 512.0
    p_n = (p - 0.8) / 1.2
    return 64 + p_n * 0.6 * (512 - 64)


def dts_compute_interval(state: DtsState) -> float:
    if not state.Q:
        return 64
    f = dts_raw_interval(dts_pressure(state))
    f = f * 1.35
    f_s = (f + 2 * state.f_p) / 3
    state.f_p = f_s
    f_s = max(f_s, DTS_FLOOR)
    return min(max(f_s, DTS_MIN), DTS_MAX)


def dts_step(state: DtsState, q: float, b: float, a: float, c: float) -> bool:
    """One inference scheduler step; True means switch to finetuning now."""
    state.r_a += a
    state.r_c += c
    state.Q.append(q)
    state.B.append(b)
    state.s -= 1
    if state.s <= 0:
        state.d += 1
        if state.d >= 3:
            state.s = dts_compute_interval(state)
            state.recomputes += 1
            state.d = 0
        else:
            state.s = min(512, state.f_p * 1.1)
        state.reset_stats()
        return True
    return False


# ---------------------------------------------------------------------------
# temporal sharing


def _block_plan(eng, ft) -> IterationPlan:
    cost = block_cost(ft.seq_len, eng.cfg.bw_factor)
    plan = IterationPlan()
    plan.windows.append(FtWindow(ft.request_id, "block", ft.layers - 1, ft.seq_len, cost))
    plan.predicted_ms = latency(eng.profile, 0, cost)
    return plan


def _fresh_finetune(eng):
    ft = eng.active_finetune()
    if ft is None or ft.l != 0 or ft.phase != "forward":
        return None
    return ft


class TemporalPolicy:
    """n inference iterations, then one whole finetuning mini-batch as a block."""
    slo_safe = False

    def __init__(self, n: float):
        if n < 1:
            raise ValueError("inference frequency must be >= 1")
        self.n = n
        self.count = 0
        self.name = f"temporal:{n:g}" if n != float("inf") else "temporal:inf"

    def _switch_due(self) -> bool:
        return self.count >= self.n

    def plan(self, eng) -> IterationPlan:
        idle = not eng.running and not eng.queue
        ft = _fresh_finetune(eng) if self.n != float("inf") else None
        if ft is not None and (idle or self._switch_due()):
            self.count = 0
            return _block_plan(eng, ft)
        return plan_inference(eng.queue, eng.running, eng.profile, eng.cfg,
                              eng.mem.free_pages, eng.mem.page_size)

    def on_iteration(self, eng, plan, stats) -> None:
        if plan.c:
            self.count += 1

    def describe(self) -> dict:
        return {"policy": self.name, "inference_frequency": self.n}


class DtsPolicy(TemporalPolicy):
    """Temporal sharing whose interval adapts to queue pressure."""

    def __init__(self, f_p_init: float = 64.0):
        super().__init__(1)
        self.state = DtsState(s=64, f_p=f_p_init)
        self.switch = False
        self.name = "dts"

    def _switch_due(self) -> bool:
        if self.switch:
            self.switch = False
            return True
        return False

    def on_iteration(self, eng, plan, stats) -> None:
        if not plan.c:
            return
        # queue length and batch size are sampled after admission
        if dts_step(self.state, len(eng.queue), len(plan.decode) + len(plan.prefill),
                    stats["arrivals"], stats["completions"]):
            self.switch = True

    def describe(self) -> dict:
        return {"policy": self.name, "f_p_init": 64.0}


# ---------------------------------------------------------------------------
# spatial sharing and isolation


@dataclass(frozen=True)
class SpatialSplit:
    rho: float
    gamma: float = 1.15

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("inference fraction must be in (0, 1)")
        if self.gamma < 1:
            raise ValueError("interference coefficient must be >= 1")

    def inference_profile(self, p: LatencyProfile) -> LatencyProfile:
        return p.scaled(t0_factor=self.gamma, slope_factor=self.gamma / self.rho)

    def finetune_rate(self) -> float:
        """Share of a full device's token rate left for finetuning."""
        return (1 - self.rho) / self.gamma


class SpatialPolicy:
    """Both workloads advance every tick on fixed resource shares."""
    slo_safe = False

    def __init__(self, split: SpatialSplit, kv_fraction: float = 1.0, name: str | None = None):
        self.split = split
        self.kv_fraction = kv_fraction
        self.name = name or f"spatial:{split.rho:g}"

    def plan(self, eng) -> IterationPlan:
        prof = self.split.inference_profile(eng.profile)
        plan = plan_inference(eng.queue, eng.running, prof, eng.cfg,
                              eng.mem.free_pages, eng.mem.page_size)
        has_ft = eng.active_finetune() is not None
        if not plan.c:
            if not has_ft:
                return plan
            tick = eng.cfg.tpot_slo_ms
            nxt = eng.next_arrival_ns()
            if nxt is not None:
                tick = min(tick, max((nxt - eng.now) / 1e6, 1e-3))
            plan.predicted_ms = tick
        if has_ft:
            plan.side_cost_tokens = (plan.predicted_ms * self.split.finetune_rate()
                                     / eng.profile.slope_ms_per_token)
        return plan

    def on_iteration(self, eng, plan, stats) -> None:
        pass

    def describe(self) -> dict:
        return {"policy": self.name, "rho": self.split.rho, "gamma": self.split.gamma,
                "kv_fraction": self.kv_fraction}


def isolate_policy(rho: float) -> SpatialPolicy:
    """Dedicated shares without interference; inference only sees ρ of the KV pool."""
    return SpatialPolicy(SpatialSplit(rho, gamma=1.0), kv_fraction=rho, name=f"isolate:{rho:g}")


def spatial_policy(rho: float, gamma: float = 1.15) -> SpatialPolicy:
    return SpatialPolicy(SpatialSplit(rho, gamma))


__all__ = ["DtsState", "dts_step", "dts_compute_interval", "TemporalPolicy", "DtsPolicy",
           "SpatialSplit", "SpatialPolicy", "isolate_policy", "spatial_policy", "SchedulerConfig"]
