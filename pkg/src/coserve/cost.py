"""Latency profile f(c, s), its inverse, and the paged KV memory model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class LatencyProfile:
    """Piecewise-linear step latency in the total number of scheduled tokens.

    The slope doubles past ``knee_tokens`` (compute saturation).
    """
    t0_ms: float = 10.0
    slope_ms_per_token: float = 0.025
    knee_tokens: float = 8192
    degree: int = 1

    def __post_init__(self):
        if self.t0_ms <= 0 or self.slope_ms_per_token <= 0 or self.knee_tokens < 0:
            raise ValueError("profile needs t0 > 0, slope > 0, knee >= 0")

    def scaled(self, t0_factor: float = 1.0, slope_factor: float = 1.0) -> "LatencyProfile":
        return LatencyProfile(self.t0_ms * t0_factor, self.slope_ms_per_token * slope_factor,
                              self.knee_tokens, self.degree)

    def to_json(self) -> str:
        return json.dumps({"t0_ms": self.t0_ms, "slope_ms_per_token": self.slope_ms_per_token,
                           "knee_tokens": self.knee_tokens}, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyProfile":
        knee = d.get("knee_tokens", math.inf)
        return cls(float(d["t0_ms"]), float(d["slope_ms_per_token"]),
                   math.inf if knee is None else float(knee))

    @classmethod
    def load(cls, path) -> "LatencyProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def latency(profile: LatencyProfile, c: float, s: float) -> float:
    """t0 + b*min(n, k) + 2b*max(0, n - k) with n = c + s."""
    if c < 0 or s < 0:
        raise ValueError("token counts must be non-negative")
    n = c + s
    b, k = profile.slope_ms_per_token, profile.knee_tokens
    return profile.t0_ms + b * min(n, k) + 2 * b * max(0.0, n - k)


def max_total_tokens(profile: LatencyProfile, budget_ms: float) -> int:
    """Largest integer n with f(n) <= budget (−1 if even n = 0 does not fit)."""
    b, k, t0 = profile.slope_ms_per_token, profile.knee_tokens, profile.t0_ms
    if budget_ms < t0:
        return -1
    if t0 + b * k >= budget_ms:
        n = math.floor((budget_ms - t0) / b)
    else:
        n = math.floor(k + (budget_ms - t0 - b * k) / (2 * b))
    # guard against floating-point rounding at the boundary
    while n >= 0 and latency(profile, n, 0) > budget_ms:
        n -= 1
    while latency(profile, n + 1, 0) <= budget_ms:
        n += 1
    return n


def max_finetune_tokens(profile: LatencyProfile, c: int, slo_step_ms: float) -> int:
    """Largest s >= 0 with latency(c, s) <= slo_step_ms; 0 when even s = 0 overshoots."""
    if slo_step_ms <= 0:
        raise ValueError("step budget must be positive")
    n = max_total_tokens(profile, slo_step_ms)
    return max(0, n - c)


@dataclass
class MemoryModel:
    """Paged KV cache. Pages are reserved per request at admission."""
    total_pages: int
    page_size: int = 16
    activation_budget_bytes: int = 0
    weight_bytes: int = 0
    occupancy: dict = field(default_factory=dict)  # request id -> pages held

    def __post_init__(self):
        if self.total_pages < 0 or self.page_size < 1:
            raise ValueError("need total_pages >= 0 and page_size >= 1")

    @property
    def used_pages(self) -> int:
        return sum(self.occupancy.values())

    @property
    def free_pages(self) -> int:
        return self.total_pages - self.used_pages

    def pages_for(self, tokens: int) -> int:
        return -(-max(tokens, 0) // self.page_size)

    def try_admit(self, rid, prompt_tokens: int, growth_tokens: int = 0) -> bool:
        need = self.pages_for(prompt_tokens) + self.pages_for(growth_tokens)
        if need > self.free_pages:
            return False
        self.occupancy[rid] = self.occupancy.get(rid, 0) + need
        return True

    def grow(self, rid, tokens_held: int) -> bool:
        """Make sure ``rid`` holds pages for ``tokens_held`` tokens; False when the pool is exhausted."""
        need = self.pages_for(tokens_held) - self.occupancy.get(rid, 0)
        if need <= 0:
            return True
        if need > self.free_pages:
            return False
        self.occupancy[rid] = self.occupancy.get(rid, 0) + need
        return True

    def release(self, rid) -> int:
        return self.occupancy.pop(rid, 0)

    def config(self) -> dict:
        d = asdict(self)
        d.pop("occupancy")
        return d


def try_admit(mem: MemoryModel, prompt_tokens: int, growth_tokens: int = 0, rid=None) -> bool:
    """Admit iff the whole prompt plus reserved growth fits; reserve atomically."""
    if rid is None:
        rid = ("anon", len(mem.occupancy), mem.used_pages)
    return mem.try_admit(rid, prompt_tokens, growth_tokens)
