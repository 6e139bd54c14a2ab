"""Shared simulation scenarios used by the acceptance suite, the CLI and the README.

The burst scenario is a 300 s sinusoidally modulated Poisson stream (60 s
period, 50% amplitude) with a finetuning backlog big enough that no policy
runs out of finetuning work before the inference stream ends.
"""
from __future__ import annotations

import numpy as np

from .engine import EngineConfig
from .scheduler import SchedulerConfig
from .workload import Burst, Record, Trace, generate

RATE_POINTS = (4, 8, 12, 16, 20)
BURST = Burst(period_s=60.0, amplitude=0.5)
DURATION_S = 300.0
FT_PER_SECOND = 8


def burst_trace(seed: int, rate_rps: float, duration_s: float = DURATION_S,
                ft_per_second: float = FT_PER_SECOND) -> Trace:
    return generate(seed, duration_s, rate_rps, BURST, ft_sequences=int(duration_s * ft_per_second))


def scenario_config(reserve_fraction: float = 1.0, **overrides) -> EngineConfig:
    """Engine settings for rate sweeps.

    Runs stop once the last inference request finishes so finetuning
    throughput is measured over the inference window only.
    """
    sched = SchedulerConfig(max_batch=256, reserve_fraction=reserve_fraction)
    return EngineConfig(scheduler=sched, drain_finetune=False, **overrides)


def adversarial_tenants_trace(seed: int, n_tenants: int = 2, duration_s: float = 60.0,
                              rate_rps: float = 40.0, light_rps: float = 0.0) -> Trace:
    """Overloaded multi-tenant mix for fairness checks.

    Tenant ``a`` sends only long prompts with one output token, ``b`` sends
    short prompts with long generations, ``c`` brings a finetuning backlog
    and ``d`` mixes both request shapes. Every tenant stays backlogged.
    A positive ``light_rps`` adds tenant ``light`` sending small requests
    far below its fair share.
    """
    if not 2 <= n_tenants <= 4:
        raise ValueError("between 2 and 4 tenants")
    rng = np.random.default_rng(seed)
    names = "abcd"[:n_tenants]
    recs = []
    if "c" in names:
        recs += [Record(0.0, "c", "ft", seq_len=int(s)) for s in rng.integers(256, 4096, 400)]
    inf = [t for t in names if t != "c"]
    n = rng.poisson(rate_rps * duration_s)
    times = np.sort(rng.uniform(0, duration_s, n))
    who = rng.choice(len(inf), n)
    for t, w in zip(times, who):
        tenant = inf[int(w)]
        shape = tenant if tenant != "d" else "ab"[int(rng.integers(2))]
        if shape == "a":
            p, g = int(rng.integers(1024, 4096)), 1
        else:
            p, g = int(rng.integers(8, 64)), int(rng.integers(256, 1024))
        recs.append(Record(round(float(t) * 1e3, 3), tenant, "inf", p, g))
    for t in np.sort(rng.uniform(0, duration_s, rng.poisson(light_rps * duration_s))):
        recs.append(Record(round(float(t) * 1e3, 3), "light", "inf", int(rng.integers(16, 128)),
                           int(rng.integers(8, 64))))
    recs.sort(key=lambda r: r.time_ms)
    return Trace(recs, {"seed": seed, "duration_s": duration_s, "rate_rps": rate_rps})
