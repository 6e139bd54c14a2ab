"""Synthetic bursty traces and the trace CSV format."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

HEADER = ["time_ms", "tenant", "kind", "prompt_len", "gen_len", "seq_len"]
MAX_FT_SEQ = 8192


@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float
    lo: int
    hi: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.lognormal(self.mu, self.sigma, size=n)
        return np.clip(np.rint(x), self.lo, self.hi).astype(np.int64)

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.sigma ** 2 / 2)


@dataclass(frozen=True)
class LenDists:
    prompt: LogNormal = LogNormal(5.5, 0.8, 16, 4096)
    gen: LogNormal = LogNormal(4.5, 0.7, 8, 1024)
    finetune: LogNormal = LogNormal(7.6, 0.5, 64, MAX_FT_SEQ)


@dataclass(frozen=True)
class Burst:
    period_s: float = 60.0
    amplitude: float = 0.0


@dataclass(frozen=True)
class Record:
    time_ms: float
    tenant: str
    kind: str  # "inf" or "ft"
    prompt_len: int | None = None
    gen_len: int | None = None
    seq_len: int | None = None

    def __post_init__(self):
        if self.kind == "inf":
            if not (self.prompt_len and self.prompt_len >= 1 and self.gen_len and self.gen_len >= 1):
                raise ValueError("inference records need prompt_len, gen_len >= 1")
        elif self.kind == "ft":
            if not (self.seq_len and 1 <= self.seq_len <= MAX_FT_SEQ):
                raise ValueError(f"finetuning seq_len must be in [1, {MAX_FT_SEQ}]")
        else:
            raise ValueError(f"unknown record kind {self.kind!r}")


@dataclass
class Trace:
    records: list[Record]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = [r.time_ms for r in self.records]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trace times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def inference(self) -> list[Record]:
        return [r for r in self.records if r.kind == "inf"]

    @property
    def duration_ms(self) -> float:
        return float(self.meta.get("duration_s", 0)) * 1e3 or (self.records[-1].time_ms if self.records else 0.0)


def _arrival_times(rng, duration_s: float, rate: float, burst: Burst) -> np.ndarray:
    """Inhomogeneous Poisson arrivals by thinning a rate*(1+amplitude) process."""
    if rate == 0 or duration_s <= 0:
        return np.empty(0)
    lam_max = rate * (1 + burst.amplitude)
    n = rng.poisson(lam_max * duration_s)
    t = np.sort(rng.uniform(0.0, duration_s, size=n))
    if burst.amplitude == 0:
        return t
    lam = rate * (1 + burst.amplitude * np.sin(2 * np.pi * t / burst.period_s))
    keep = rng.uniform(0.0, lam_max, size=n) < lam
    return t[keep]


def generate(seed: int, duration_s: float, rate_rps: float, burst: Burst = Burst(),
             len_dists: LenDists = LenDists(), tenants: dict[str, float] | None = None,
             ft_sequences: int = 0, ft_tenant: str = "ft") -> Trace:
    """Bursty inference arrivals plus an optional finetuning dataset queued at t = 0.

    ``tenants`` maps tenant ids to arrival shares (default one tenant "t0").
    """
    if rate_rps < 0:
        raise ValueError("rate must be non-negative")
    if not 0 <= burst.amplitude <= 1:
        raise ValueError("burst amplitude must be in [0, 1] (rate must stay non-negative)")
    if burst.period_s <= 0:
        raise ValueError("burst period must be positive")
    rng = np.random.default_rng(seed)
    times = _arrival_times(rng, duration_s, rate_rps, burst)
    n = len(times)
    prompts = len_dists.prompt.sample(rng, n)
    gens = len_dists.gen.sample(rng, n)
    tenants = tenants or {"t0": 1.0}
    names = sorted(tenants)
    shares = np.array([tenants[t] for t in names], dtype=float)
    who = rng.choice(len(names), size=n, p=shares / shares.sum()) if n else np.empty(0, int)
    recs = [Record(0.0, ft_tenant, "ft", seq_len=int(s))
            for s in len_dists.finetune.sample(rng, ft_sequences)]
    recs += [Record(round(float(t) * 1e3, 3), names[int(w)], "inf", int(p), int(g))
             for t, w, p, g in zip(times, who, prompts, gens)]
    recs.sort(key=lambda r: r.time_ms)
    meta = {"seed": seed, "duration_s": duration_s, "rate_rps": rate_rps,
            "burst_period_s": burst.period_s, "burst_amplitude": burst.amplitude,
            "ft_sequences": ft_sequences}
    return Trace(recs, meta)


def rescale(trace: Trace, factor: float) -> Trace:
    """Divide arrival times by ``factor`` (factor 2 doubles the arrival rate)."""
    if not factor > 0:
        raise ValueError("rescale factor must be positive")
    recs = [replace(r, time_ms=round(r.time_ms / factor, 3)) for r in trace.records]
    meta = dict(trace.meta)
    if "duration_s" in meta:
        meta["duration_s"] = meta["duration_s"] / factor
    if "rate_rps" in meta:
        meta["rate_rps"] = meta["rate_rps"] * factor
    return Trace(recs, meta)


def _cell(v) -> str:
    return "" if v is None else str(v)


def dumps(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in trace.records:
        w.writerow([f"{r.time_ms:.3f}", r.tenant, r.kind, _cell(r.prompt_len), _cell(r.gen_len),
                    _cell(r.seq_len)])
    return buf.getvalue()


def loads(text: str) -> Trace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != HEADER:
        raise ValueError(f"trace header must be {','.join(HEADER)}")
    recs = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise ValueError(f"line {i}: expected {len(HEADER)} columns")
        t, tenant, kind, p, g, s = row
        as_int = lambda x: int(x) if x != "" else None  # noqa: E731
        try:
            recs.append(Record(float(t), tenant, kind, as_int(p), as_int(g), as_int(s)))
        except ValueError as e:
            raise ValueError(f"line {i}: {e}") from None
    return Trace(recs)


def write(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(dumps(trace))


def read(path) -> Trace:
    with open(path, newline="") as fh:
        return loads(fh.read())
