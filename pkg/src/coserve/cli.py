"""Command-line entry point.

Every subcommand accepts ``--config file.json``; keys use the flag names
with dashes replaced by underscores, and explicit flags win over the file.

Exit codes: 0 success, 1 bad input, 2 a checked invariant or tolerance failed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

from .cost import LatencyProfile
from .engine import EngineConfig, InvariantViolation, compare, compare_csv, make_policy, run
from .pcg import PcgError
from .scheduler import PlannerBug, SchedulerConfig
from .workload import Burst, LenDists, LogNormal, generate, read, rescale, write


class UsageError(Exception):
    """Bad command line or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


GEN_DEFAULTS = {
    "rate": 4.0, "duration_s": 300.0, "burst_period_s": 60.0, "burst_amplitude": 0.0,
    "ft_sequences": 0, "tenants": None,
    "prompt_mu": 5.5, "prompt_sigma": 0.8, "gen_mu": 4.5, "gen_sigma": 0.7,
    "ft_mu": 7.6, "ft_sigma": 0.5,
}


@dataclass
class RunConfig:
    """Fully resolved settings for ``run`` and ``compare``; echoed into summary.json."""
    seed: int
    policy: str = "coserve"
    trace: str | None = None
    profile: str | None = None
    out: str = "out"
    # scheduler
    tpot_slo_ms: float = 50.0
    ttft_slo_ms: float = 5000.0
    max_batch: int = 64
    chunk_size: int = 512
    layers: int = 32
    bw_factor: float = 2.0
    reserve_fraction: float = 1.0
    # memory
    total_pages: int = 4608
    page_size: int = 16
    drain_finetune: bool = True
    # policies
    wp: float = 1.0
    wq: float = 2.0
    wr: float = 1.0
    gamma: float = 1.15
    # trace generation when no trace file is given
    generate: dict = field(default_factory=lambda: dict(GEN_DEFAULTS))

    def validate(self) -> None:
        for p in (self.trace, self.profile):
            if p is not None and not os.path.isfile(p):
                raise UsageError(f"file not found: {p}")
        if self.max_batch < 1 or self.chunk_size < 1 or self.layers < 1:
            raise UsageError("max_batch, chunk_size and layers must be >= 1")
        if self.tpot_slo_ms <= 0 or self.ttft_slo_ms <= 0:
            raise UsageError("SLO budgets must be positive")
        if not 0 <= self.reserve_fraction <= 1:
            raise UsageError("reserve_fraction must be in [0, 1]")
        if self.total_pages < 1 or self.page_size < 1:
            raise UsageError("total_pages and page_size must be >= 1")
        if min(self.wp, self.wq, self.wr) < 0 or self.bw_factor < 0 or self.gamma < 1:
            raise UsageError("weights and bw_factor must be >= 0; gamma must be >= 1")

    def engine_config(self) -> EngineConfig:
        sched = SchedulerConfig(self.max_batch, self.chunk_size, self.tpot_slo_ms, self.ttft_slo_ms,
                                self.layers, self.bw_factor, self.reserve_fraction)
        return EngineConfig(sched, self.total_pages, self.page_size, self.drain_finetune)

    def latency_profile(self) -> LatencyProfile:
        return LatencyProfile.load(self.profile) if self.profile else LatencyProfile()

    def policy_kwargs(self) -> dict:
        return {"w_p": self.wp, "w_q": self.wq, "w_r": self.wr, "gamma": self.gamma}


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: {e}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _merge(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("cmd", "config", "func")}
    out = dict(defaults)
    out.update(_load_json(getattr(args, "config", None)))
    out.update(flags)
    return out


def _gen_params(cfg: dict) -> dict:
    gen = dict(GEN_DEFAULTS)
    gen.update(cfg.get("generate") or {})
    for k in GEN_DEFAULTS:
        if k in cfg:
            gen[k] = cfg[k]
    return gen


def _run_config(cfg: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    gen = _gen_params(cfg)
    unknown = set(cfg) - known - set(GEN_DEFAULTS) - {"rates", "policies", "jobs", "rescale"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if cfg.get("seed") is None:
        raise UsageError("--seed is required")
    rc = RunConfig(**{k: v for k, v in cfg.items() if k in known and k != "generate"}, generate=gen)
    rc.validate()
    return rc


def _parse_tenants(spec) -> dict | None:
    if spec is None or isinstance(spec, dict):
        return spec
    out = {}
    for part in str(spec).split(","):
        name, _, share = part.partition(":")
        out[name.strip()] = float(share or 1.0)
    return out


def _make_trace(gen: dict, seed: int, rate: float | None = None):
    dists = LenDists(LogNormal(gen["prompt_mu"], gen["prompt_sigma"], 16, 4096),
                     LogNormal(gen["gen_mu"], gen["gen_sigma"], 8, 1024),
                     LogNormal(gen["ft_mu"], gen["ft_sigma"], 64, 8192))
    return generate(seed, float(gen["duration_s"]), float(gen["rate"] if rate is None else rate),
                    Burst(float(gen["burst_period_s"]), float(gen["burst_amplitude"])), dists,
                    _parse_tenants(gen["tenants"]), int(gen["ft_sequences"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_trace(args) -> int:
    cfg = _merge({"seed": 0, "out": "trace.csv", "rescale": 1.0}, args)
    gen = _gen_params(cfg)
    tr = _make_trace(gen, int(cfg["seed"]))
    if float(cfg["rescale"]) != 1.0:
        tr = rescale(tr, float(cfg["rescale"]))
    write(tr, cfg["out"])
    print(f"wrote {len(tr)} records ({len(tr.inference)} inference) to {cfg['out']}")
    return 0


def cmd_parallelize(args) -> int:
    from .parallelize import (MachineSpec, enumerate_candidates, estimate_cost, parallelize_model,
                              row_parallel_boundary, select_best, shard_equivalence)
    from .pcg import build_lora_block, load_model

    cfg = _merge({"model": None, "degree": 2, "budget": 1, "tokens": 8, "hidden": 16,
                  "out_features": 16, "rank": 4, "throughput_tflops": 100.0, "bandwidth_gbps": 100.0,
                  "out": None, "check": True}, args)
    spec = MachineSpec(int(cfg["degree"]), cfg["throughput_tflops"] * 1e12, cfg["bandwidth_gbps"] * 1e9)
    if cfg["model"]:
        if not os.path.isfile(cfg["model"]):
            raise UsageError(f"file not found: {cfg['model']}")
        with open(cfg["model"]) as fh:
            model = load_model(fh.read())
        result = parallelize_model(model.backbone, model.bypasses, spec, int(cfg["budget"]))
        worst = 0.0
    else:
        # LoRA next to a row-parallel linear whose input is split on the hidden dim
        xs, ys, shapes = row_parallel_boundary(cfg["tokens"], cfg["hidden"], cfg["out_features"],
                                               spec.degree)
        lora = build_lora_block(cfg["hidden"], cfg["rank"], "Y", source="X",
                                out_features=cfg["out_features"], tokens=cfg["tokens"], name="lora")
        cands = enumerate_candidates(lora, {"X": xs, "Y": ys}, spec.degree, int(cfg["budget"]), shapes)
        worst = 0.0
        for c in cands:
            estimate_cost(c, spec)
            if cfg["check"]:
                worst = max(worst, shard_equivalence(c, lora, spec.degree, shapes=shapes))
        entry = {"bypass": lora.output, "attach_in": "X", "attach_out": "Y",
                 "candidates": [c.to_dict() for c in cands], "chosen": None}
        if cands:
            entry["chosen"] = cands.index(select_best(cands))
        result = [entry]
    for e in result:
        print(f"{e['bypass']}: {len(e['candidates'])} candidate(s)")
        for i, c in enumerate(e["candidates"]):
            mark = "*" if i == e["chosen"] else " "
            print(f" {mark} [{i}] {c['cost_ms']:.6f} ms  {c['describe']}")
    if cfg["check"] and not cfg["model"]:
        print(f"max shard-equivalence relative error: {worst:.3e}")
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(result, fh, indent=2)
    if any(e["chosen"] is None for e in result):
        print("no valid strategy for some bypass", file=sys.stderr)
        return 2
    return 2 if worst > 1e-12 else 0


def cmd_prune(args) -> int:
    from .blocks import mlp_lora, transformer_block
    from .pcg import load_model
    from .pruning import account_memory, prune, unsatisfied

    cfg = _merge({"model": None, "graph": "block", "seqlen": 1024, "hidden": 4096, "heads": 32,
                  "ffn": 14336, "rank": 16, "threshold": None, "window": 128, "out": None}, args)
    if cfg["model"]:
        if not os.path.isfile(cfg["model"]):
            raise UsageError(f"file not found: {cfg['model']}")
        with open(cfg["model"]) as fh:
            g = load_model(fh.read()).merged()
        seqlen = None
    elif cfg["graph"] == "mlp":
        g, seqlen = mlp_lora().merged(), None
    elif cfg["graph"] == "block":
        g = transformer_block(cfg["seqlen"], cfg["hidden"], cfg["heads"], cfg["ffn"], cfg["rank"]).merged()
        seqlen = cfg["seqlen"]
    else:
        raise UsageError(f"unknown graph {cfg['graph']!r} (block or mlp)")
    plan = prune(g, threshold=cfg["threshold"])
    report = account_memory(plan, seqlen, window=int(cfg["window"]))
    print("memorized:       ", ", ".join(sorted(plan.memorized)))
    print("rematerialized:  ", ", ".join(sorted(plan.rematerialized)) or "-")
    print("compressed:      ", ", ".join(sorted(plan.compressed)) or "-")
    for stage in ("pruning", "remat", "token_level"):
        print(f"activation reduction after {stage:<11}: {100 * report.reduction(stage):.2f}%")
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "plan.json"), "w") as fh:
            json.dump(plan.to_dict(), fh, indent=2)
        with open(os.path.join(cfg["out"], "memory.csv"), "w") as fh:
            fh.write(report.to_csv())
    missing = unsatisfied(plan)
    if missing:
        print(f"unsatisfied backward inputs: {missing}", file=sys.stderr)
        return 2
    return 0


def cmd_verify_grad(args) -> int:
    from .numeric import verify_equivalence

    cfg = _merge({"depth": 2, "hidden": 16, "seqlen": 32, "rank": 2, "vocab": 64, "heads": 1,
                  "trials": 50, "seed": 0, "tol": 1e-10}, args)
    if min(cfg["depth"], cfg["hidden"], cfg["seqlen"], cfg["rank"], cfg["vocab"]) < 1:
        raise UsageError("depth, hidden, seqlen, rank and vocab must be >= 1")
    reports = verify_equivalence(cfg["depth"], cfg["hidden"], cfg["seqlen"], cfg["rank"], cfg["vocab"],
                                 cfg["trials"], cfg["seed"], cfg["heads"])
    worst = max(r.max_err for r in reports)
    shapes = all(r.shapes_ok for r in reports)
    print(f"partitions checked: {len(reports)}")
    print(f"max relative error: {worst:.3e}")
    print(f"window gradient shapes ok: {shapes}")
    return 0 if worst <= cfg["tol"] and shapes else 2


def cmd_run(args) -> int:
    cfg = _merge({}, args)
    rc = _run_config(cfg)
    trace = read(rc.trace) if rc.trace else _make_trace(rc.generate, rc.seed)
    pol = make_policy(rc.policy, **rc.policy_kwargs())
    m = run(trace, pol, rc.latency_profile(), config=rc.engine_config(), seed=rc.seed)
    m.summary["run_config"] = asdict(rc)
    m.write(rc.out)
    s = m.summary
    print(f"{rc.policy}: slo={s['slo_attainment']:.4f} inf_tps={s['inference_throughput_tps']:.1f} "
          f"ft_tps={s['finetune_throughput_tps']:.1f} evictions={s['eviction_pct']:.2f}% "
          f"-> {rc.out}")
    return 0


def _compare_point(job):
    rc, rate, trace_path, factor, policies = job
    if trace_path:
        tr = read(trace_path)
        if factor != 1.0:
            tr = rescale(tr, factor)
    else:
        tr = _make_trace(rc.generate, rc.seed, rate)
    return compare({rate: tr}, policies, rc.latency_profile(), rc.engine_config(), rc.seed,
                   rc.policy_kwargs())


def cmd_compare(args) -> int:
    cfg = _merge({"policies": "coserve,temporal:128", "rates": None, "rescale": None, "jobs": 1}, args)
    policies = [p.strip() for p in str(cfg["policies"]).split(",") if p.strip()]
    for p in policies:
        make_policy(p)
    rc = _run_config({**cfg, "policy": policies[0]})
    jobs = []
    if rc.trace:
        factors = [float(x) for x in str(cfg["rescale"] or "1").split(",")]
        base = read(rc.trace)
        dur_s = max(base.records[-1].time_ms / 1e3, 1e-9) if base.records else 1.0
        base_rate = len(base.inference) / dur_s
        for f in factors:
            jobs.append((rc, round(base_rate * f, 6), rc.trace, f, policies))
    else:
        rates = cfg["rates"] if cfg["rates"] is not None else str(rc.generate["rate"])
        for r in (rates if isinstance(rates, list) else str(rates).split(",")):
            jobs.append((rc, float(r), None, 1.0, policies))
    if int(cfg["jobs"]) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(int(cfg["jobs"])) as ex:
            parts = list(ex.map(_compare_point, jobs))
    else:
        parts = [_compare_point(j) for j in jobs]
    rows = [row for part in parts for row in part]
    os.makedirs(rc.out, exist_ok=True)
    path = os.path.join(rc.out, "compare.csv")
    with open(path, "w", newline="") as fh:
        fh.write(compare_csv(rows))
    with open(os.path.join(rc.out, "summary.json"), "w") as fh:
        json.dump({"run_config": asdict(rc), "policies": policies, "rows": rows}, fh, indent=2,
                  sort_keys=True)
    width = max(len(p) for p in policies)
    for row in rows:
        print(f"{row['rate_rps']:>8g} {row['policy']:<{width}} slo={row['slo_attainment']:.4f} "
              f"ft_tps={row['finetune_throughput_tps']:.1f}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="required")
    p.add_argument("--trace", default=S, help="trace CSV; generated from the flags below if absent")
    p.add_argument("--profile", default=S, help="latency profile JSON")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--tpot-slo-ms", dest="tpot_slo_ms", type=float, default=S)
    p.add_argument("--ttft-slo-ms", dest="ttft_slo_ms", type=float, default=S)
    p.add_argument("--max-batch", dest="max_batch", type=int, default=S)
    p.add_argument("--chunk-size", dest="chunk_size", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--bw-factor", dest="bw_factor", type=float, default=S)
    p.add_argument("--reserve-fraction", dest="reserve_fraction", type=float, default=S)
    p.add_argument("--total-pages", dest="total_pages", type=int, default=S)
    p.add_argument("--page-size", dest="page_size", type=int, default=S)
    p.add_argument("--drain-finetune", dest="drain_finetune", action=argparse.BooleanOptionalAction,
                   default=S)
    p.add_argument("--wp", type=float, default=S)
    p.add_argument("--wq", type=float, default=S)
    p.add_argument("--wr", type=float, default=S)
    p.add_argument("--gamma", type=float, default=S, help="spatial interference coefficient")
    _add_gen_flags(p)


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--rate", type=float, default=S, help="mean arrivals per second")
    p.add_argument("--duration-s", dest="duration_s", type=float, default=S)
    p.add_argument("--burst-period-s", dest="burst_period_s", type=float, default=S)
    p.add_argument("--burst-amplitude", dest="burst_amplitude", type=float, default=S)
    p.add_argument("--ft-sequences", dest="ft_sequences", type=int, default=S)
    p.add_argument("--tenants", default=S, help="name:share,... (default one tenant t0)")
    for k in ("prompt_mu", "prompt_sigma", "gen_mu", "gen_sigma", "ft_mu", "ft_sigma"):
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    ap = _Parser(prog="coserve", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-trace", help="write a synthetic trace CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--rescale", type=float, default=S)
    _add_gen_flags(p)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("parallelize", help="enumerate and rank bypass parallelization candidates")
    p.add_argument("--config", default=None)
    p.add_argument("--model", default=S, help="PEFT model JSON (default: LoRA beside a row-parallel linear)")
    p.add_argument("--degree", type=int, default=S)
    p.add_argument("--budget", type=int, default=S)
    p.add_argument("--tokens", type=int, default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--out-features", dest="out_features", type=int, default=S)
    p.add_argument("--rank", type=int, default=S)
    p.add_argument("--throughput-tflops", dest="throughput_tflops", type=float, default=S)
    p.add_argument("--bandwidth-gbps", dest="bandwidth_gbps", type=float, default=S)
    p.add_argument("--check", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--out", default=S, help="write candidates as JSON")
    p.set_defaults(func=cmd_parallelize)

    p = sub.add_parser("prune", help="prune the backward graph and report activation memory")
    p.add_argument("--config", default=None)
    p.add_argument("--model", default=S, help="PEFT model JSON")
    p.add_argument("--graph", choices=["block", "mlp"], default=S)
    for k in ("seqlen", "hidden", "heads", "ffn", "rank", "window"):
        p.add_argument("--" + k, type=int, default=S)
    p.add_argument("--threshold", type=float, default=S, help="rematerialization FLOP threshold")
    p.add_argument("--out", default=S, help="directory for plan.json and memory.csv")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("verify-grad", help="check token-level gradients against a full-sequence pass")
    p.add_argument("--config", default=None)
    for k in ("depth", "hidden", "seqlen", "rank", "vocab", "heads", "trials", "seed"):
        p.add_argument("--" + k, type=int, default=S)
    p.add_argument("--tol", type=float, default=S)
    p.set_defaults(func=cmd_verify_grad)

    p = sub.add_parser("run", help="simulate one policy on one trace")
    p.add_argument("--config", default=None)
    p.add_argument("--policy", default=S,
                   help="coserve | vtc | dts | temporal:<n> | spatial:<rho> | isolate:<rho>")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="sweep policies over rate points")
    p.add_argument("--config", default=None)
    p.add_argument("--policies", default=S, help="comma-separated policy list")
    p.add_argument("--rates", default=S, help="comma-separated rates for generated traces")
    p.add_argument("--rescale", default=S, help="comma-separated rescale factors for --trace")
    p.add_argument("--jobs", type=int, default=S, help="parallel engine runs")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not getattr(args, "func", None):
            ap.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InvariantViolation, PlannerBug) as e:
        print(f"invariant failed: {e}", file=sys.stderr)
        return 2
    except (ValueError, PcgError, OSError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
