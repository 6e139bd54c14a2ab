"""Parallel computation graphs.

Tensors carry one layout state per dimension (non-parallel ``-``,
partitioned ``|``, replicated ``=``, pre-reduce ``+``). Operators are drawn
from a small closed vocabulary so that autodiff and state-inference rules
stay enumerable. A PEFT model is a frozen backbone graph plus additive
bypass networks, ``Y = f_B(X) + f_A(X)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class PcgError(ValueError):
    """Malformed graph, tensor, or bypass description."""


class InvalidConfiguration(PcgError):
    pass


class NotRewritable(PcgError):
    pass


class StateInferenceError(PcgError):
    pass


class State(str, Enum):
    NON_PARALLEL = "-"
    PARTITIONED = "|"
    REPLICATED = "="
    PRE_REDUCE = "+"


@dataclass(frozen=True)
class DimState:
    state: State = State.NON_PARALLEL
    degree: int = 1

    def __post_init__(self):
        object.__setattr__(self, "state", State(self.state))
        if not isinstance(self.degree, int) or self.degree < 1:
            raise PcgError(f"degree must be a positive integer, got {self.degree!r}")
        if self.state is State.NON_PARALLEL and self.degree != 1:
            raise PcgError("non-parallel dimensions have degree 1")
        if self.state is not State.NON_PARALLEL and self.degree < 2:
            raise PcgError(f"state {self.state.value!r} needs degree >= 2")

    @property
    def parallel(self) -> bool:
        return self.state is not State.NON_PARALLEL

    def __str__(self):
        if self.state is State.NON_PARALLEL:
            return "-"
        return f"{self.state.value}{self.degree}"


NP = DimState()


def part(d: int) -> DimState:
    return DimState(State.PARTITIONED, d)


def repl(d: int) -> DimState:
    return DimState(State.REPLICATED, d)


def prered(d: int) -> DimState:
    return DimState(State.PRE_REDUCE, d)


@dataclass(frozen=True)
class Dim:
    extent: int
    state: DimState = NP
    # symbolic axis name; "tokens" marks sequence axes for memory scaling
    name: str | None = None

    def __post_init__(self):
        if not isinstance(self.extent, int) or self.extent < 1:
            raise PcgError(f"extent must be a positive integer, got {self.extent!r}")


TENSOR_KINDS = ("activation", "weight", "gradient", "loss")


@dataclass(frozen=True)
class ParallelTensor:
    id: str
    dims: tuple[Dim, ...]
    kind: str = "activation"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.kind not in TENSOR_KINDS:
            raise PcgError(f"tensor {self.id}: unknown kind {self.kind!r}")
        if sum(d.state.state is State.PRE_REDUCE for d in self.dims) > 1:
            raise PcgError(f"tensor {self.id}: at most one pre-reduce dimension")

    @property
    def states(self) -> tuple[DimState, ...]:
        return tuple(d.state for d in self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.extent for d in self.dims)

    @property
    def numel(self) -> int:
        n = 1
        for d in self.dims:
            n *= d.extent
        return n

    def with_states(self, states: Sequence[DimState], id: str | None = None) -> "ParallelTensor":
        dims = tuple(Dim(d.extent, s, d.name) for d, s in zip(self.dims, states))
        return ParallelTensor(id or self.id, dims, self.kind)


class OpKind(str, Enum):
    MATMUL = "MatMul"
    ADD = "Add"
    ELEM_MUL = "ElemMul"
    RELU = "ReLU"
    SOFTMAX = "Softmax"
    EMBEDDING = "Embedding"
    IDENTITY = "Identity"
    PREFIX = "Prefix"
    PARTITION = "Partition"
    COMBINE = "Combine"
    REPLICATE = "Replicate"
    REDUCE = "Reduce"


PARALLEL_OPS = frozenset({OpKind.PARTITION, OpKind.COMBINE, OpKind.REPLICATE, OpKind.REDUCE})
COMM_OPS = frozenset({OpKind.COMBINE, OpKind.REPLICATE, OpKind.REDUCE})


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    trainable: bool = False
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", OpKind(self.kind))
        except ValueError:
            raise PcgError(f"operator {self.id}: unsupported kind {self.kind!r}") from None
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "attrs", dict(self.attrs))


# ---------------------------------------------------------------------------
# state inference


def _all_np(states: Iterable[DimState]) -> bool:
    return all(not s.parallel for s in states)


def _has_prered(states: Iterable[DimState]) -> bool:
    return any(s.state is State.PRE_REDUCE for s in states)


def _matmul_states(x: Sequence[DimState], w: Sequence[DimState], transpose_b: bool,
                   heads: int = 0, merge_heads: bool = False):
    if heads or len(x) != 2 or len(w) != 2:
        if _all_np(x) and _all_np(w):
            # multi-head operands are split to [heads, tokens, head_dim]
            rank = max(len(x), len(w), 3 if heads else 0)
            return tuple(NP for _ in range(2 if merge_heads else rank))
        raise StateInferenceError("batched MatMul only supports non-parallel operands")
    xm, xk = x
    wk, wn = (w[1], w[0]) if transpose_b else (w[0], w[1])
    if _has_prered((xm, xk, wk, wn)):
        raise StateInferenceError("MatMul cannot consume a pre-reduce tensor")
    if _all_np((xm, xk, wk, wn)):
        return (NP, NP)
    if xk.state is State.PARTITIONED and wk == xk and not xm.parallel and not wn.parallel:
        # split-K: every device holds a partial sum of the full output
        return (NP, prered(xk.degree))
    if xm.state is State.PARTITIONED and not xk.parallel and not wk.parallel and not wn.parallel:
        return (xm, NP)
    if xm.state is State.REPLICATED and not xk.parallel and not wk.parallel:
        if wn.state is State.PARTITIONED and wn.degree == xm.degree:
            return (NP, wn)
        if not wn.parallel:
            return (xm, NP)
    raise StateInferenceError(
        f"no MatMul rule for x={[str(s) for s in x]} w={[str(s) for s in w]}")


def _broadcast_equal(states: Sequence[Sequence[DimState]]) -> tuple[DimState, ...]:
    longest = max(states, key=len)
    n = len(longest)
    for s in states:
        if tuple(s) != tuple(longest[n - len(s):]):
            if len(s) < n and _all_np(s) and _all_np(longest[n - len(s):]):
                continue
            raise StateInferenceError(
                f"elementwise inputs disagree: {[[str(x) for x in t] for t in states]}")
    return tuple(longest)


def infer_states(op: OperatorNode, input_states: Sequence[Sequence[DimState]]) -> list[tuple[DimState, ...]]:
    """Output dimension states of ``op`` given the states of its inputs.

    Raises StateInferenceError when the input layout is not legal for the
    operator (for example a Replicate on a partitioned tensor).
    """
    k = op.kind
    ins = [tuple(s) for s in input_states]
    n_out = len(op.outputs)
    if k is OpKind.MATMUL:
        return [_matmul_states(ins[0], ins[1], bool(op.attrs.get("transpose_b")),
                               int(op.attrs.get("heads", 0)), bool(op.attrs.get("merge_heads")))]
    if k is OpKind.ADD:
        out = _broadcast_equal(ins)
        return [out] * n_out
    if k is OpKind.ELEM_MUL:
        if any(_has_prered(s) for s in ins):
            raise StateInferenceError("ElemMul cannot consume a pre-reduce tensor")
        return [_broadcast_equal(ins)] * n_out
    if k in (OpKind.RELU, OpKind.IDENTITY):
        if k is OpKind.RELU and _has_prered(ins[0]):
            raise StateInferenceError("ReLU cannot consume a pre-reduce tensor")
        return [ins[0]] * n_out
    if k is OpKind.SOFTMAX:
        s = ins[0]
        if _has_prered(s) or (s and s[-1].parallel):
            raise StateInferenceError("Softmax needs complete rows")
        return [s]
    if k is OpKind.EMBEDDING:
        if not all(_all_np(s) for s in ins):
            raise StateInferenceError("Embedding only supports non-parallel operands")
        return [(NP, NP)]
    if k is OpKind.PREFIX:
        if not all(_all_np(s) for s in ins):
            raise StateInferenceError("Prefix only supports non-parallel operands")
        return [ins[0]]
    if k in PARALLEL_OPS:
        return [_parallel_transition(op, ins[0])]
    raise StateInferenceError(f"no state rule for {k.value}")


def _parallel_transition(op: OperatorNode, s: tuple[DimState, ...]) -> tuple[DimState, ...]:
    k = op.kind
    s = list(s)
    if k is OpKind.REDUCE:
        idx = [i for i, d in enumerate(s) if d.state is State.PRE_REDUCE]
        if not idx:
            raise StateInferenceError("Reduce needs a pre-reduce dimension")
        s[idx[0]] = NP
        return tuple(s)
    dim = int(op.attrs.get("dim", 0 if k is OpKind.REPLICATE else len(s) - 1))
    if not 0 <= dim < len(s):
        raise StateInferenceError(f"{k.value}: dim {dim} out of range")
    if k is OpKind.COMBINE:
        if s[dim].state is not State.PARTITIONED:
            raise StateInferenceError("Combine needs a partitioned dimension")
        s[dim] = NP
        return tuple(s)
    degree = int(op.attrs.get("degree", 2))
    if not _all_np(s):
        raise StateInferenceError(f"{k.value} needs a fully non-parallel tensor")
    s[dim] = part(degree) if k is OpKind.PARTITION else repl(degree)
    return tuple(s)


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class ParallelComputationGraph:
    tensors: dict[str, ParallelTensor]
    operators: tuple[OperatorNode, ...]
    loss: str | None = None
    # tensors whose gradient is consumed outside this graph (e.g. earlier layers)
    grad_sinks: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "grad_sinks", tuple(self.grad_sinks))
        producers: dict[str, str] = {}
        for op in self.operators:
            for t in op.inputs + op.outputs:
                if t not in self.tensors:
                    raise PcgError(f"operator {op.id} references unknown tensor {t!r}")
            for t in op.outputs:
                if t in producers:
                    raise PcgError(f"tensor {t!r} produced by both {producers[t]} and {op.id}")
                producers[t] = op.id
        if len({op.id for op in self.operators}) != len(self.operators):
            raise PcgError("duplicate operator ids")
        object.__setattr__(self, "_producers", producers)

    def op(self, op_id: str) -> OperatorNode:
        for o in self.operators:
            if o.id == op_id:
                return o
        raise KeyError(op_id)

    def producer(self, tensor_id: str) -> OperatorNode | None:
        pid = self._producers.get(tensor_id)
        return None if pid is None else self.op(pid)

    def consumers(self, tensor_id: str) -> list[OperatorNode]:
        return [o for o in self.operators if tensor_id in o.inputs]

    def edges(self) -> set[tuple[str, str]]:
        """(n1, n2) such that some output of n1 is an input of n2."""
        out = set()
        for a in self.operators:
            oa = set(a.outputs)
            for b in self.operators:
                if oa & set(b.inputs):
                    out.add((a.id, b.id))
        return out

    def topo_order(self) -> list[OperatorNode]:
        """Operators in dependency order; raises PcgError on a cycle."""
        indeg = {o.id: 0 for o in self.operators}
        succ: dict[str, list[str]] = {o.id: [] for o in self.operators}
        for a, b in sorted(self.edges()):
            succ[a].append(b)
            indeg[b] += 1
        ready = [o.id for o in self.operators if indeg[o.id] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for m in succ[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
        if len(order) != len(self.operators):
            raise PcgError("graph has a cycle")
        return [self.op(i) for i in order]

    def weights(self) -> list[str]:
        return [t for t, v in self.tensors.items() if v.kind == "weight"]

    def trainable_weights(self) -> list[str]:
        out = []
        for op in self.operators:
            if op.trainable:
                out.extend(t for t in op.inputs if self.tensors[t].kind == "weight" and t not in out)
        return out

    def content_hash(self) -> str:
        return hashlib.sha256(dumps_graph(self).encode()).hexdigest()


def validate_pcg(g: ParallelComputationGraph) -> list[str]:
    """Violations of acyclicity, layout consistency, and pre-reduce discipline."""
    violations: list[str] = []
    try:
        g.topo_order()
    except PcgError as e:
        violations.append(str(e))
    for op in g.operators:
        in_states = [g.tensors[t].states for t in op.inputs]
        prered_inputs = [t for t in op.inputs if _has_prered(g.tensors[t].states)]
        if prered_inputs and op.kind is not OpKind.REDUCE:
            linear_sum = op.kind is OpKind.ADD and len({g.tensors[t].states for t in op.inputs}) == 1
            if not linear_sum:
                violations.append(
                    f"{op.id}: pre-reduce tensor {prered_inputs[0]} consumed by "
                    f"{op.kind.value} before a Reduce")
                continue
        try:
            inferred = infer_states(op, in_states)
        except StateInferenceError as e:
            violations.append(f"{op.id}: {e}")
            continue
        for t, s in zip(op.outputs, inferred):
            if g.tensors[t].states != tuple(s):
                violations.append(
                    f"{op.id}: output {t} declared {[str(x) for x in g.tensors[t].states]} "
                    f"but inferred {[str(x) for x in s]}")
    return violations


# ---------------------------------------------------------------------------
# PEFT bypass networks

BYPASS_KINDS = ("LoRA", "Adapter", "PrefixEmbedding", "IA3")


@dataclass(frozen=True)
class BypassNetwork:
    kind: str
    attach_in: str
    attach_out: str
    operators: tuple[OperatorNode, ...]
    tensors: dict[str, ParallelTensor]
    output: str
    rank: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        if self.kind not in BYPASS_KINDS:
            raise PcgError(f"unknown bypass kind {self.kind!r}")
        for op in self.operators:
            for t in op.inputs:
                if t not in self.tensors and t != self.attach_in:
                    raise PcgError(f"bypass op {op.id} reads {t!r}, not the attach-in tensor")
            for t in op.inputs:
                if t in self.tensors and self.tensors[t].kind == "weight" and not op.trainable:
                    raise PcgError(f"bypass op {op.id} has a frozen weight")
        if self.output not in self.tensors:
            raise PcgError("bypass output tensor missing")

    @property
    def trainable_params(self) -> int:
        return sum(t.numel for t in self.tensors.values() if t.kind == "weight")


def build_lora_block(hidden: int, rank: int, target: str, *, source: str | None = None,
                     out_features: int | None = None, tokens: int = 1,
                     name: str | None = None) -> BypassNetwork:
    """LoRA bypass ``Z = (X A) B`` added at ``target``.

    ``hidden`` is the input width of the adapted linear; ``out_features``
    defaults to ``hidden`` (square projection).
    """
    if rank < 1 or hidden < rank:
        raise InvalidConfiguration(f"LoRA needs 1 <= rank <= hidden, got rank={rank}, hidden={hidden}")
    out_features = hidden if out_features is None else out_features
    if out_features < 1:
        raise InvalidConfiguration("out_features must be positive")
    src = target if source is None else source
    p = name or f"lora_{target}"
    tok = Dim(tokens, name="tokens")
    tensors = {
        f"{p}.A": ParallelTensor(f"{p}.A", (Dim(hidden), Dim(rank)), "weight"),
        f"{p}.B": ParallelTensor(f"{p}.B", (Dim(rank), Dim(out_features)), "weight"),
        f"{p}.h": ParallelTensor(f"{p}.h", (tok, Dim(rank))),
        f"{p}.z": ParallelTensor(f"{p}.z", (tok, Dim(out_features))),
    }
    ops = (
        OperatorNode(f"{p}.down", OpKind.MATMUL, (src, f"{p}.A"), (f"{p}.h",), trainable=True),
        OperatorNode(f"{p}.up", OpKind.MATMUL, (f"{p}.h", f"{p}.B"), (f"{p}.z",), trainable=True),
    )
    return BypassNetwork("LoRA", src, target, ops, tensors, f"{p}.z", rank=rank)


def build_adapter_block(hidden: int, bottleneck: int, target: str, *, source: str | None = None,
                        tokens: int = 1, name: str | None = None) -> BypassNetwork:
    if bottleneck < 1 or hidden < bottleneck:
        raise InvalidConfiguration("adapter bottleneck must be in [1, hidden]")
    src = target if source is None else source
    p = name or f"adapter_{target}"
    tok = Dim(tokens, name="tokens")
    tensors = {
        f"{p}.Wd": ParallelTensor(f"{p}.Wd", (Dim(hidden), Dim(bottleneck)), "weight"),
        f"{p}.Wu": ParallelTensor(f"{p}.Wu", (Dim(bottleneck), Dim(hidden)), "weight"),
        f"{p}.h": ParallelTensor(f"{p}.h", (tok, Dim(bottleneck))),
        f"{p}.r": ParallelTensor(f"{p}.r", (tok, Dim(bottleneck))),
        f"{p}.z": ParallelTensor(f"{p}.z", (tok, Dim(hidden))),
    }
    ops = (
        OperatorNode(f"{p}.down", OpKind.MATMUL, (src, f"{p}.Wd"), (f"{p}.h",), trainable=True),
        OperatorNode(f"{p}.act", OpKind.RELU, (f"{p}.h",), (f"{p}.r",)),
        OperatorNode(f"{p}.up", OpKind.MATMUL, (f"{p}.r", f"{p}.Wu"), (f"{p}.z",), trainable=True),
    )
    return BypassNetwork("Adapter", src, target, ops, tensors, f"{p}.z", rank=bottleneck)


def build_prefix_block(hidden: int, n_prefix: int, target: str, *, tokens: int = 1,
                       name: str | None = None) -> BypassNetwork:
    """Prefix embedding as an additive bypass on the embedding output."""
    if n_prefix < 1 or n_prefix > tokens:
        raise InvalidConfiguration("prefix length must be in [1, tokens]")
    p = name or f"prefix_{target}"
    tensors = {
        f"{p}.P": ParallelTensor(f"{p}.P", (Dim(n_prefix), Dim(hidden)), "weight"),
        f"{p}.z": ParallelTensor(f"{p}.z", (Dim(tokens, name="tokens"), Dim(hidden))),
    }
    ops = (OperatorNode(f"{p}.add", OpKind.PREFIX, (target, f"{p}.P"), (f"{p}.z",), trainable=True),)
    return BypassNetwork("PrefixEmbedding", target, target, ops, tensors, f"{p}.z", rank=n_prefix)


def rewrite_ia3(g: ParallelComputationGraph, node_id: str) -> tuple[ParallelComputationGraph, BypassNetwork]:
    """Turn ``Y = X * W`` into an identity backbone path plus the bypass ``X * (W - 1)``.

    Returns the rewritten backbone and the bypass; the bypass weight tensor
    keeps the id of ``W`` but now stores ``W - 1``.
    """
    op = g.op(node_id)
    if op.kind is not OpKind.ELEM_MUL or len(op.inputs) != 2:
        raise NotRewritable(f"{node_id} is not an elementwise multiplication")
    weights = [t for t in op.inputs if g.tensors[t].kind == "weight"]
    if len(weights) != 1:
        raise NotRewritable(f"{node_id} must multiply one activation by one weight")
    w = weights[0]
    x = next(t for t in op.inputs if t != w)
    y = op.outputs[0]
    z = f"ia3_{node_id}.z"
    tensors = {w: g.tensors[w], z: g.tensors[y].with_states(g.tensors[y].states, id=z)}
    bop = OperatorNode(f"ia3_{node_id}.scale", OpKind.ELEM_MUL, (x, w), (z,), trainable=True)
    bypass = BypassNetwork("IA3", x, y, (bop,), tensors, z, rank=None)
    ops = tuple(OperatorNode(o.id, OpKind.IDENTITY, (x,), o.outputs) if o.id == node_id else o
                for o in g.operators)
    still_used = any(w in o.inputs for o in ops)
    new_tensors = dict(g.tensors) if still_used else {k: v for k, v in g.tensors.items() if k != w}
    return ParallelComputationGraph(new_tensors, ops, g.loss, g.grad_sinks), bypass


@dataclass(frozen=True)
class PeftModel:
    backbone: ParallelComputationGraph
    bypasses: tuple[BypassNetwork, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bypasses", tuple(self.bypasses))
        for op in self.backbone.operators:
            if op.trainable:
                raise PcgError(f"backbone operator {op.id} must be frozen")
        for b in self.bypasses:
            for t in (b.attach_in, b.attach_out):
                if t not in self.backbone.tensors:
                    raise PcgError(f"bypass attaches to unknown backbone tensor {t!r}")
            if self.backbone.producer(b.attach_out) is None:
                raise PcgError(f"bypass output target {b.attach_out!r} has no producer")

    def attach(self, bypass: BypassNetwork) -> "PeftModel":
        return PeftModel(self.backbone, self.bypasses + (bypass,))

    def merged(self) -> ParallelComputationGraph:
        """Single graph with every bypass wired in through an Add.

        The backbone producer of each attach-out tensor ``Y`` now writes
        ``Y@base`` and an Add computes ``Y = Y@base + Z``.
        """
        tensors = dict(self.backbone.tensors)
        ops = list(self.backbone.operators)
        for i, b in enumerate(self.bypasses):
            y = b.attach_out
            base = f"{y}@base{i}"
            tensors[base] = tensors[y].with_states(tensors[y].states, id=base)
            ops = [OperatorNode(o.id, o.kind, o.inputs,
                                tuple(base if t == y else t for t in o.outputs), o.trainable, o.attrs)
                   for o in ops]
            src = {b.attach_in: base} if b.attach_in == y else {}
            for t in b.tensors.values():
                tensors[t.id] = t
            for o in b.operators:
                ops.append(OperatorNode(o.id, o.kind, tuple(src.get(t, t) for t in o.inputs),
                                        o.outputs, o.trainable, o.attrs))
            ops.append(OperatorNode(f"{y}@add{i}", OpKind.ADD, (base, b.output), (y,)))
        return ParallelComputationGraph(tensors, ops, self.backbone.loss, self.backbone.grad_sinks)


# ---------------------------------------------------------------------------
# JSON I/O


def _dim_json(d: Dim) -> dict:
    out = {"extent": d.extent, "state": d.state.state.value, "degree": d.state.degree}
    if d.name is not None:
        out["name"] = d.name
    return out


def _tensor_json(t: ParallelTensor) -> dict:
    return {"id": t.id, "kind": t.kind, "dims": [_dim_json(d) for d in t.dims]}


def _op_json(o: OperatorNode) -> dict:
    out = {"id": o.id, "kind": o.kind.value, "inputs": list(o.inputs),
           "outputs": list(o.outputs), "trainable": o.trainable}
    if o.attrs:
        out["attrs"] = dict(sorted(o.attrs.items()))
    return out


def _parse_tensor(d: dict) -> ParallelTensor:
    try:
        dims = tuple(Dim(int(x["extent"]), DimState(State(x.get("state", "-")), int(x.get("degree", 1))),
                         x.get("name")) for x in d["dims"])
        return ParallelTensor(d["id"], dims, d.get("kind", "activation"))
    except (KeyError, TypeError) as e:
        raise PcgError(f"bad tensor entry {d!r}: {e}") from None
    except ValueError as e:
        raise PcgError(f"bad tensor entry {d!r}: {e}") from None


def _parse_op(d: dict) -> OperatorNode:
    try:
        return OperatorNode(d["id"], d["kind"], tuple(d["inputs"]), tuple(d["outputs"]),
                            bool(d.get("trainable", False)), dict(d.get("attrs", {})))
    except KeyError as e:
        raise PcgError(f"operator entry missing {e}") from None


def graph_to_dict(g: ParallelComputationGraph, bypasses: Sequence[BypassNetwork] = ()) -> dict:
    out = {
        "operators": [_op_json(o) for o in g.operators],
        "tensors": [_tensor_json(t) for t in g.tensors.values()],
        "bypasses": [bypass_to_dict(b) for b in bypasses],
    }
    if g.loss is not None:
        out["loss"] = g.loss
    if g.grad_sinks:
        out["grad_sinks"] = list(g.grad_sinks)
    return out


def bypass_to_dict(b: BypassNetwork) -> dict:
    return {"kind": b.kind, "rank": b.rank, "attach_in": b.attach_in, "attach_out": b.attach_out,
            "output": b.output, "operators": [_op_json(o) for o in b.operators],
            "tensors": [_tensor_json(t) for t in b.tensors.values()]}


def bypass_from_dict(d: dict) -> BypassNetwork:
    tensors = {t.id: t for t in map(_parse_tensor, d["tensors"])}
    return BypassNetwork(d["kind"], d["attach_in"], d["attach_out"],
                         tuple(_parse_op(o) for o in d["operators"]), tensors,
                         d["output"], d.get("rank"))


def graph_from_dict(d: dict) -> tuple[ParallelComputationGraph, list[BypassNetwork]]:
    if not isinstance(d, dict) or "operators" not in d or "tensors" not in d:
        raise PcgError("graph description needs 'operators' and 'tensors'")
    tensors = {}
    for t in map(_parse_tensor, d["tensors"]):
        if t.id in tensors:
            raise PcgError(f"duplicate tensor id {t.id!r}")
        tensors[t.id] = t
    g = ParallelComputationGraph(tensors, tuple(_parse_op(o) for o in d["operators"]),
                                 d.get("loss"), tuple(d.get("grad_sinks", ())))
    return g, [bypass_from_dict(b) for b in d.get("bypasses", [])]


def dumps_graph(g: ParallelComputationGraph, bypasses: Sequence[BypassNetwork] = ()) -> str:
    return json.dumps(graph_to_dict(g, bypasses), indent=2, sort_keys=False)


def loads_graph(text: str) -> tuple[ParallelComputationGraph, list[BypassNetwork]]:
    try:
        return graph_from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise PcgError(f"invalid JSON: {e}") from None


def load_model(text: str) -> PeftModel:
    g, bypasses = loads_graph(text)
    return PeftModel(g, tuple(bypasses))
