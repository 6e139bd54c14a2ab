"""Dependent parallelization of bypass networks.

The backbone layout is fixed. For each bypass we insert parallelization
operators on its edges and pick layouts for its weights, keep the
combinations whose inferred states reach the backbone's states at both
attachment points, and rank them with an analytic cost model.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .pcg import (COMM_OPS, NP, Dim, DimState, OpKind, OperatorNode, ParallelComputationGraph,
                  ParallelTensor, PcgError, State, StateInferenceError, BypassNetwork, infer_states,
                  part, prered, validate_pcg)
from .numeric.graph_eval import eval_op


class NoStrategy(PcgError):
    pass


@dataclass(frozen=True)
class MachineSpec:
    degree: int = 2
    throughput_flops: float = 100e12  # per device
    bandwidth_bytes: float = 100e9  # per link
    dtype_bytes: int = 2

    def __post_init__(self):
        if self.degree < 1:
            raise PcgError("degree must be >= 1")


@dataclass(frozen=True)
class Insertion:
    edge: str  # "<tensor>-><consumer op>"
    kind: OpKind
    dim: int | None = None

    def label(self) -> str:
        d = "" if self.dim is None else f"@{self.dim}"
        return f"{self.edge}:{self.kind.value}{d}"


@dataclass
class CandidatePcg:
    insertions: tuple[Insertion, ...]
    weight_states: dict[str, tuple[DimState, ...]]
    graph: ParallelComputationGraph
    boundary: dict[str, tuple[DimState, ...]]
    output: str
    cost_ms: float = 0.0
    cost_terms: dict[str, float] = field(default_factory=dict)

    @property
    def n_comm(self) -> int:
        return sum(i.kind in COMM_OPS for i in self.insertions)

    def key(self) -> tuple:
        return (tuple(i.label() for i in self.insertions),
                tuple((w, "".join(str(s) for s in st)) for w, st in sorted(self.weight_states.items())))

    def describe(self) -> str:
        ops = ", ".join(i.label() for i in self.insertions) or "no inserted ops"
        ws = ", ".join(f"{w}[{','.join(str(s) for s in st)}]" for w, st in sorted(self.weight_states.items()))
        return f"{ops} | {ws}"

    def to_dict(self) -> dict:
        return {
            "insertions": [i.label() for i in self.insertions],
            "weight_states": {w: [str(s) for s in st] for w, st in sorted(self.weight_states.items())},
            "cost_ms": self.cost_ms,
            "cost_terms": dict(sorted(self.cost_terms.items())),
            "comm_ops": self.n_comm,
            "describe": self.describe(),
        }


def _fmt(states) -> str:
    return ",".join(str(s) for s in states)


def _edge_options(states: tuple[DimState, ...], degree: int, budget: int) -> list[tuple[OpKind, int | None]]:
    """Sequences (length <= budget) of legal parallelization ops for a tensor in ``states``."""
    singles: list[tuple[OpKind, int | None]] = []
    if degree >= 2:
        singles += [(OpKind.PARTITION, d) for d in range(1, len(states))]
        singles += [(OpKind.COMBINE, d) for d in range(len(states))]
        singles.append((OpKind.REPLICATE, 0))
        singles.append((OpKind.REDUCE, None))
    out: list[list] = [[]]
    frontier = [([], states)]
    for _ in range(budget):
        nxt = []
        for seq, st in frontier:
            for kind, dim in singles:
                try:
                    new = _apply_parallel(kind, dim, st, degree)
                except StateInferenceError:
                    continue
                nxt.append((seq + [(kind, dim)], new))
        out += [s for s, _ in nxt]
        frontier = nxt
    return out


def _apply_parallel(kind: OpKind, dim, states, degree):
    attrs = {"degree": degree}
    if dim is not None:
        attrs["dim"] = dim
    op = OperatorNode("_", kind, ("_",), ("_",), attrs=attrs)
    return infer_states(op, [states])[0]


def _weight_layouts(t: ParallelTensor, degree: int) -> list[tuple[DimState, ...]]:
    layouts = [tuple(NP for _ in t.dims)]
    if degree >= 2:
        for i, d in enumerate(t.dims):
            if d.extent % degree == 0:
                s = [NP] * len(t.dims)
                s[i] = part(degree)
                layouts.append(tuple(s))
    return layouts


def enumerate_candidates(bypass: BypassNetwork, backbone_states: dict[str, tuple[DimState, ...]],
                         degree: int, budget: int = 1,
                         tensor_shapes: dict[str, tuple[int, ...]] | None = None) -> list[CandidatePcg]:
    """All bypass layouts compatible with the backbone states at its boundaries.

    ``backbone_states`` maps the attach-in and attach-out tensor ids to their
    fixed states. Candidates are sorted by their inserted-op sequence.
    """
    if degree < 1:
        raise PcgError("degree must be >= 1")
    if budget < 0:
        raise PcgError("insertion budget must be >= 0")
    x_in, y_out = bypass.attach_in, bypass.attach_out
    for t in (x_in, y_out):
        if t not in backbone_states:
            raise PcgError(f"missing backbone state for boundary tensor {t!r}")
    shapes = dict(tensor_shapes or {})
    for t in bypass.tensors.values():
        shapes.setdefault(t.id, t.shape)
    if x_in not in shapes:
        src_op = bypass.operators[0]
        raise PcgError(f"shape of attach-in tensor {x_in!r} (read by {src_op.id}) is unknown")
    shapes.setdefault(y_out, shapes[bypass.output])

    weights = [t for t in bypass.tensors.values() if t.kind == "weight"]
    layout_choices = [_weight_layouts(w, degree) for w in weights]
    results: list[CandidatePcg] = []
    for layout in itertools.product(*layout_choices):
        wstates = {w.id: st for w, st in zip(weights, layout)}
        _search(bypass, backbone_states, degree, budget, shapes, wstates, results)
    results.sort(key=CandidatePcg.key)
    seen, unique = set(), []
    for c in results:
        k = c.key()
        if k not in seen:
            seen.add(k)
            unique.append(c)
    return unique


def _search(bypass, backbone_states, degree, budget, shapes, wstates, results):
    """Depth-first over bypass edges in operator order."""
    ops = list(bypass.operators)
    target_states = tuple(backbone_states[bypass.attach_out])

    def rec(i, env, insertions):
        if i == len(ops):
            out_states = env[bypass.output]
            for seq in _edge_options(out_states, degree, budget):
                st = out_states
                try:
                    for kind, dim in seq:
                        st = _apply_parallel(kind, dim, st, degree)
                except StateInferenceError:
                    continue
                if st != target_states:
                    continue
                ins = insertions + tuple(Insertion(f"{bypass.output}->merge", k, d) for k, d in seq)
                results.append(_materialize(bypass, backbone_states, degree, shapes, wstates, ins))
            return
        op = ops[i]
        act_inputs = [t for t in op.inputs if t not in wstates]
        per_input = [_edge_options(env[t], degree, budget) for t in act_inputs]
        for combo in itertools.product(*per_input):
            new_env = dict(env)
            new_ins = insertions
            ok = True
            for t, seq in zip(act_inputs, combo):
                st = env[t]
                try:
                    for kind, dim in seq:
                        st = _apply_parallel(kind, dim, st, degree)
                except StateInferenceError:
                    ok = False
                    break
                new_env[(t, op.id)] = st
                new_ins = new_ins + tuple(Insertion(f"{t}->{op.id}", k, d) for k, d in seq)
            if not ok:
                continue
            in_states = [new_env.get((t, op.id), new_env.get(t)) for t in op.inputs]
            try:
                out = infer_states(op, in_states)
            except StateInferenceError:
                continue
            for t, st in zip(op.outputs, out):
                new_env[t] = st
            rec(i + 1, new_env, new_ins)

    env = {bypass.attach_in: tuple(backbone_states[bypass.attach_in])}
    env.update(wstates)
    rec(0, env, ())


def _materialize(bypass, backbone_states, degree, shapes, wstates, insertions) -> CandidatePcg:
    """Build the state-annotated candidate graph (including the merge Add)."""
    by_edge: dict[str, list[Insertion]] = {}
    for ins in insertions:
        by_edge.setdefault(ins.edge, []).append(ins)
    tensors: dict[str, ParallelTensor] = {}

    def add_tensor(tid, shape_of, states):
        tensors[tid] = ParallelTensor(tid, tuple(Dim(e, s) for e, s in zip(shapes[shape_of], states)),
                                      "weight" if tid in wstates else "activation")

    add_tensor(bypass.attach_in, bypass.attach_in, backbone_states[bypass.attach_in])
    for w, st in wstates.items():
        add_tensor(w, w, st)
    ops: list[OperatorNode] = []
    states = {bypass.attach_in: tuple(backbone_states[bypass.attach_in]), **wstates}

    def route(t, consumer):
        cur = t
        for n, ins in enumerate(by_edge.get(f"{t}->{consumer}", [])):
            st = _apply_parallel(ins.kind, ins.dim, states[cur], degree)
            nt = f"{t}@{ins.kind.value.lower()}{n}>{consumer}"
            attrs = {"degree": degree}
            if ins.dim is not None:
                attrs["dim"] = ins.dim
            ops.append(OperatorNode(f"{ins.kind.value.lower()}:{t}>{consumer}:{n}", ins.kind, (cur,), (nt,),
                                    attrs=attrs))
            states[nt] = st
            add_tensor(nt, t, st)
            cur = nt
        return cur

    for op in bypass.operators:
        inputs = tuple(route(t, op.id) if t not in wstates else t for t in op.inputs)
        out = infer_states(op, [states[t] for t in inputs])
        for t, st in zip(op.outputs, out):
            states[t] = st
            add_tensor(t, t, st)
        ops.append(OperatorNode(op.id, op.kind, inputs, op.outputs, op.trainable, op.attrs))
    z = route(bypass.output, "merge")
    base = f"{bypass.attach_out}@base"
    add_tensor(base, bypass.attach_out, backbone_states[bypass.attach_out])
    add_tensor(bypass.attach_out, bypass.attach_out, backbone_states[bypass.attach_out])
    ops.append(OperatorNode("merge", OpKind.ADD, (base, z), (bypass.attach_out,)))
    g = ParallelComputationGraph(tensors, ops, grad_sinks=())
    boundary = {bypass.attach_in: tuple(backbone_states[bypass.attach_in]),
                bypass.attach_out: states[z]}
    return CandidatePcg(tuple(insertions), dict(wstates), g, boundary, z)


# ---------------------------------------------------------------------------
# cost model


def _splits_work(states) -> bool:
    return any(s.state in (State.PARTITIONED, State.PRE_REDUCE) for s in states)


def op_cost_ms(g: ParallelComputationGraph, op: OperatorNode, spec: MachineSpec) -> tuple[str, float]:
    d = spec.degree
    out = g.tensors[op.outputs[0]]
    nbytes = out.numel * spec.dtype_bytes
    if op.kind is OpKind.COMBINE:
        return "comm", nbytes * (d - 1) / d / spec.bandwidth_bytes * 1e3
    if op.kind is OpKind.REDUCE:
        return "comm", 2 * nbytes * (d - 1) / d / spec.bandwidth_bytes * 1e3
    if op.kind is OpKind.REPLICATE:
        return "comm", nbytes * (d - 1) / d / spec.bandwidth_bytes * 1e3
    if op.kind is OpKind.PARTITION:
        return "comm", 0.0
    if op.kind is OpKind.MATMUL:
        b = g.tensors[op.inputs[1]]
        kdim = b.shape[-1] if op.attrs.get("transpose_b") else b.shape[0]
        flops = 2.0 * out.numel * kdim
    else:
        flops = float(out.numel)
    div = d if _splits_work(out.states) else 1
    return "compute", flops / div / spec.throughput_flops * 1e3


def grad_sync_ms(g: ParallelComputationGraph, op: OperatorNode, spec: MachineSpec) -> float:
    """All-reduce of an unsharded trainable weight whose gradient is computed from split work.

    Devices holding different rows of the activation produce partial weight
    gradients that must be summed (data-parallel semantics).
    """
    if not op.trainable or op.kind is not OpKind.MATMUL or spec.degree < 2:
        return 0.0
    w = g.tensors[op.inputs[1]]
    if w.kind != "weight" or any(s.parallel for s in w.states):
        return 0.0
    x = g.tensors[op.inputs[0]]
    if not any(s.state in (State.PARTITIONED, State.REPLICATED) for s in x.states[:1]):
        return 0.0
    if x.states[0].state is State.REPLICATED:
        return 0.0  # every replica already sees all rows
    d = spec.degree
    return 2 * w.numel * spec.dtype_bytes * (d - 1) / d / spec.bandwidth_bytes * 1e3


def estimate_cost(c: CandidatePcg, spec: MachineSpec) -> CandidatePcg:
    terms = {"compute": 0.0, "comm": 0.0, "grad_sync": 0.0}
    for op in c.graph.operators:
        if op.id == "merge":
            continue
        kind, ms = op_cost_ms(c.graph, op, spec)
        terms[kind] += ms
        terms["grad_sync"] += grad_sync_ms(c.graph, op, spec)
    c.cost_terms = terms
    c.cost_ms = sum(terms.values())
    return c


def select_best(candidates: list[CandidatePcg], cost_model=None) -> CandidatePcg:
    """Lowest cost; ties go to fewer communication ops, then enumeration order.

    ``cost_model`` is a callable candidate -> ms, a MachineSpec, or None to
    use the already attached ``cost_ms``.
    """
    if not candidates:
        raise NoStrategy("no valid parallelization candidate")
    if isinstance(cost_model, MachineSpec):
        for c in candidates:
            estimate_cost(c, cost_model)
        costs = [c.cost_ms for c in candidates]
    elif cost_model is None:
        costs = [c.cost_ms for c in candidates]
    else:
        costs = [float(cost_model(c)) for c in candidates]
    best = min(range(len(candidates)), key=lambda i: (costs[i], candidates[i].n_comm, i))
    return candidates[best]


# ---------------------------------------------------------------------------
# numeric shard simulation


@dataclass
class Sharded:
    """Per-device arrays of one logical tensor laid out by ``states``."""
    parts: list[np.ndarray]
    states: tuple[DimState, ...]


def scatter(value: np.ndarray, states, degree: int, rng: np.random.Generator) -> Sharded:
    parts = [value.copy() for _ in range(degree)]
    for i, s in enumerate(states):
        if s.state is State.PARTITIONED:
            parts = [np.array_split(p, degree, axis=i)[k] for k, p in enumerate(parts)]
        elif s.state is State.PRE_REDUCE:
            noise = [rng.standard_normal(value.shape) for _ in range(degree - 1)]
            parts = noise + [value - sum(noise)]
    return Sharded(parts, tuple(states))


def gather(x: Sharded) -> np.ndarray:
    parts = x.parts
    for i, s in enumerate(x.states):
        if s.state is State.PARTITIONED:
            return np.concatenate(parts, axis=i)
        if s.state is State.PRE_REDUCE:
            return sum(parts[1:], parts[0].copy())
    return parts[0]


def _run_parallel(op: OperatorNode, x: Sharded, out_states, degree: int) -> Sharded:
    k = op.kind
    if k is OpKind.COMBINE:
        dim = int(op.attrs["dim"])
        full = np.concatenate(x.parts, axis=dim)
        return Sharded([full.copy() for _ in range(degree)], out_states)
    if k is OpKind.REDUCE:
        full = sum(x.parts[1:], x.parts[0].copy())
        return Sharded([full.copy() for _ in range(degree)], out_states)
    if k is OpKind.PARTITION:
        dim = int(op.attrs["dim"])
        return Sharded([np.array_split(p, degree, axis=dim)[i] for i, p in enumerate(x.parts)], out_states)
    return Sharded([p.copy() for p in x.parts], out_states)  # Replicate: each device keeps a replica


def simulate(c: CandidatePcg, inputs: dict[str, np.ndarray], degree: int, seed: int = 0) -> np.ndarray:
    """Run the candidate on ``degree`` simulated devices; return the gathered bypass output."""
    rng = np.random.default_rng(seed)
    g = c.graph
    env: dict[str, Sharded] = {}
    for tid, v in inputs.items():
        if tid in g.tensors:
            env[tid] = scatter(v, g.tensors[tid].states, degree, rng)
    for op in g.topo_order():
        if op.id == "merge":
            continue
        out_states = g.tensors[op.outputs[0]].states
        if op.kind in (OpKind.PARTITION, OpKind.COMBINE, OpKind.REPLICATE, OpKind.REDUCE):
            env[op.outputs[0]] = _run_parallel(op, env[op.inputs[0]], out_states, degree)
            continue
        parts = [eval_op(op, [env[t].parts[i] for t in op.inputs])[0] for i in range(degree)]
        env[op.outputs[0]] = Sharded(parts, out_states)
    return gather(env[c.output])


def reference(bypass: BypassNetwork, inputs: dict[str, np.ndarray]) -> np.ndarray:
    env = dict(inputs)
    for op in bypass.operators:
        env[op.outputs[0]] = eval_op(op, [env[t] for t in op.inputs])[0]
    return env[bypass.output]


def shard_equivalence(c: CandidatePcg, bypass: BypassNetwork, degree: int, seed: int = 0,
                      shapes: dict[str, tuple[int, ...]] | None = None) -> float:
    """Relative error of the simulated sharded run against single-device evaluation."""
    rng = np.random.default_rng(seed)
    shapes = dict(shapes or {})
    shapes.setdefault(bypass.attach_in, c.graph.tensors[bypass.attach_in].shape)
    inputs = {bypass.attach_in: rng.standard_normal(shapes[bypass.attach_in])}
    for t in bypass.tensors.values():
        if t.kind == "weight":
            inputs[t.id] = rng.standard_normal(t.shape)
    ref = reference(bypass, inputs)
    got = simulate(c, inputs, degree, seed)
    return float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300))


# ---------------------------------------------------------------------------
# example backbone


def row_parallel_boundary(tokens: int, hidden: int, out_features: int, degree: int):
    """Boundary states of a row-parallel linear ``Y = Reduce(X[m, k|d] W[k|d, n])``.

    Returns (attach-in states, attach-out states, shapes) for X and Y.
    """
    x_states = (NP, part(degree)) if degree > 1 else (NP, NP)
    return x_states, (NP, NP), {"X": (tokens, hidden), "Y": (tokens, out_features)}


def row_parallel_backbone(tokens: int, hidden: int, out_features: int, degree: int) -> ParallelComputationGraph:
    xs, _, _ = row_parallel_boundary(tokens, hidden, out_features, degree)
    ws = (part(degree), NP) if degree > 1 else (NP, NP)
    ps = (NP, prered(degree)) if degree > 1 else (NP, NP)
    t = {
        "X": ParallelTensor("X", (Dim(tokens, NP, "tokens"), Dim(hidden, xs[1]))),
        "W": ParallelTensor("W", (Dim(hidden, ws[0]), Dim(out_features)), "weight"),
        "Yp": ParallelTensor("Yp", (Dim(tokens, NP, "tokens"), Dim(out_features, ps[1]))),
        "Y": ParallelTensor("Y", (Dim(tokens, NP, "tokens"), Dim(out_features))),
    }
    ops = [OperatorNode("linear", OpKind.MATMUL, ("X", "W"), ("Yp",))]
    if degree > 1:
        ops.append(OperatorNode("allreduce", OpKind.REDUCE, ("Yp",), ("Y",)))
    else:
        ops.append(OperatorNode("passthrough", OpKind.IDENTITY, ("Yp",), ("Y",)))
    g = ParallelComputationGraph(t, ops, loss="Y")
    if validate_pcg(g):
        raise PcgError(f"row-parallel backbone invalid: {validate_pcg(g)}")
    return g


def parallelize_model(backbone: ParallelComputationGraph, bypasses, spec: MachineSpec,
                      budget: int = 1) -> list[dict]:
    """Pick a strategy per bypass using the backbone's boundary states."""
    out = []
    for b in bypasses:
        states = {b.attach_in: backbone.tensors[b.attach_in].states,
                  b.attach_out: backbone.tensors[b.attach_out].states}
        shapes = {t: backbone.tensors[t].shape for t in (b.attach_in, b.attach_out)}
        cands = enumerate_candidates(b, states, spec.degree, budget, shapes)
        for c in cands:
            estimate_cost(c, spec)
        entry = {"bypass": b.output, "attach_in": b.attach_in, "attach_out": b.attach_out,
                 "candidates": [c.to_dict() for c in cands], "chosen": None}
        if cands:
            best = select_best(cands)
            entry["chosen"] = cands.index(best)
        out.append(entry)
    return out
