"""Static graph pruning for PEFT finetuning.

Reverse-mode autodiff produces one backward node per differentiable
forward operator. Gradients of frozen backbone weights are then dropped,
followed by every gradient nobody consumes, until nothing changes. The
forward tensors still read by the surviving backward nodes form the set of
activations to keep. Cheap producers whose inputs are all kept are
recomputed instead, and ReLU inputs that are only needed for their sign are
stored as bitmasks.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numeric import graph_eval
from .pcg import OpKind, OperatorNode, ParallelComputationGraph, PcgError

FULL = "full"
SIGN = "sign"


class AutodiffUnsupported(PcgError):
    pass


def grad_id(t: str) -> str:
    return f"grad:{t}"


def is_grad(t: str) -> bool:
    return t.startswith("grad:")


def _differentiable_inputs(op: OperatorNode) -> list[int]:
    if op.kind in (OpKind.EMBEDDING, OpKind.PREFIX):
        return [1]
    return list(range(len(op.inputs)))


def grad_needs(op: OperatorNode, idx: int) -> dict[str, str]:
    """Forward tensors required to produce the gradient of input ``idx``.

    Values are FULL or SIGN (only the sign pattern is read).
    """
    k = op.kind
    if k is OpKind.MATMUL:
        return {op.inputs[1 - idx]: FULL}
    if k is OpKind.ELEM_MUL:
        return {op.inputs[1 - idx]: FULL}
    if k is OpKind.RELU:
        return {op.inputs[0]: SIGN}
    if k is OpKind.SOFTMAX:
        return {op.outputs[0]: FULL}
    if k is OpKind.EMBEDDING:
        return {op.inputs[0]: FULL}
    if k in (OpKind.ADD, OpKind.IDENTITY, OpKind.PREFIX, OpKind.PARTITION, OpKind.COMBINE,
             OpKind.REPLICATE, OpKind.REDUCE):
        return {}
    raise AutodiffUnsupported(f"no autodiff rule for {k.value}")


@dataclass
class BackwardNode:
    id: str
    forward: str
    outputs: set[str]
    inputs: set[str]
    # forward tensor id -> FULL/SIGN for the current outputs
    uses: dict[str, str] = field(default_factory=dict)


@dataclass
class BackwardGraph:
    forward: ParallelComputationGraph
    nodes: list[BackwardNode]

    def node(self, node_id: str) -> BackwardNode:
        return next(n for n in self.nodes if n.id == node_id)

    def producers(self, t: str) -> list[BackwardNode]:
        return [n for n in self.nodes if t in n.outputs]

    def consumed(self) -> set[str]:
        out: set[str] = set()
        for n in self.nodes:
            out |= n.inputs
        return out

    def copy(self) -> "BackwardGraph":
        return BackwardGraph(self.forward, [BackwardNode(n.id, n.forward, set(n.outputs),
                                                         set(n.inputs), dict(n.uses))
                                            for n in self.nodes])


def _update_input(g: ParallelComputationGraph, n: BackwardNode) -> None:
    """Inputs needed to compute only the node's remaining outputs."""
    op = g.op(n.forward)
    uses: dict[str, str] = {}
    for i in _differentiable_inputs(op):
        if grad_id(op.inputs[i]) in n.outputs:
            for t, how in grad_needs(op, i).items():
                if uses.get(t) != FULL:
                    uses[t] = how
    n.uses = uses
    n.inputs = set(uses) | ({grad_id(t) for t in op.outputs} if n.outputs else set())


def _reaches_loss(g: ParallelComputationGraph) -> set[str]:
    """Tensors with a data path to the loss (their gradient can be non-zero)."""
    live = {g.loss}
    for op in reversed(g.topo_order()):
        if any(t in live for t in op.outputs):
            for i in _differentiable_inputs(op):
                live.add(op.inputs[i])
    return live


def reverse_autodiff(g: ParallelComputationGraph) -> BackwardGraph:
    if g.loss is None or g.loss not in g.tensors:
        raise PcgError("reverse autodiff needs a designated loss tensor")
    live = _reaches_loss(g)
    nodes = []
    for op in reversed(g.topo_order()):
        for i in _differentiable_inputs(op):
            grad_needs(op, i)
        if not any(t in live for t in op.outputs):
            continue
        outs = {grad_id(op.inputs[i]) for i in _differentiable_inputs(op)}
        if not outs:
            continue
        n = BackwardNode(f"{op.id}'", op.id, outs, set())
        _update_input(g, n)
        nodes.append(n)
    return BackwardGraph(g, nodes)


def frozen_weight_grads(g: ParallelComputationGraph) -> set[str]:
    trainable = set(g.trainable_weights())
    return {grad_id(t) for t in g.weights() if t not in trainable}


def _sinks(g: ParallelComputationGraph) -> set[str]:
    return {grad_id(t) for t in g.trainable_weights()} | {grad_id(t) for t in g.grad_sinks}


def flop_cost(g: ParallelComputationGraph, op: OperatorNode) -> float:
    """Analytic cost of recomputing ``op``'s outputs."""
    out = g.tensors[op.outputs[0]]
    if op.kind is OpKind.MATMUL:
        a = g.tensors[op.inputs[0]]
        b = g.tensors[op.inputs[1]]
        heads = int(op.attrs.get("heads", 0))
        kdim = b.shape[-1] if op.attrs.get("transpose_b") else b.shape[-2]
        if heads and len(b.shape) == 2:
            kdim = kdim // heads if op.attrs.get("transpose_b") else kdim
        if heads and len(a.shape) == 3:
            kdim = a.shape[-1]
        return 2.0 * out.numel * kdim
    if op.kind is OpKind.SOFTMAX:
        return 5.0 * out.numel
    return float(out.numel)


def default_threshold(g: ParallelComputationGraph) -> float:
    """Flops of one [tokens, hidden] x [hidden, hidden] MatMul, read off the loss tensor."""
    shape = g.tensors[g.loss].shape
    tokens, hidden = shape[0], shape[-1]
    return 2.0 * tokens * hidden * hidden


@dataclass
class PruningPlan:
    memorized: set[str]
    rematerialized: set[str]
    compressed: set[str]
    pruned_only: set[str]  # memorized set after step 1, before rematerialization
    retain_all: set[str]
    weights_needed: set[str]
    backward: BackwardGraph
    threshold: float

    def to_dict(self) -> dict:
        g = self.backward.forward
        return {
            "memorized": sorted(self.memorized),
            "rematerialized": sorted(self.rematerialized),
            "compressed": sorted(self.compressed),
            "pruned_only": sorted(self.pruned_only),
            "weights_needed": sorted(self.weights_needed),
            "threshold_flops": self.threshold,
            "tensor_elements": {t: g.tensors[t].numel for t in sorted(self.retain_all)},
            "backward_nodes": [{"id": n.id, "outputs": sorted(n.outputs), "inputs": sorted(n.inputs)}
                               for n in self.backward.nodes],
        }


def prune_backward(g: ParallelComputationGraph, g_bar: BackwardGraph) -> BackwardGraph:
    """Step 1: drop frozen-weight gradients, then unconsumed gradients to a fixpoint."""
    g_bar = g_bar.copy()
    frozen = frozen_weight_grads(g)
    sinks = _sinks(g)
    queue: deque[BackwardNode] = deque()
    for n in g_bar.nodes:
        dead = n.outputs & frozen
        if dead:
            n.outputs -= dead
            _update_input(g, n)
            queue.append(n)
    # gradients of plain graph inputs also have no consumer; seed everyone once
    queue.extend(n for n in g_bar.nodes if n not in queue)
    while queue:
        n = queue.popleft()
        consumed = g_bar.consumed()
        dropped = {t for t in n.outputs if t not in consumed and t not in sinks}
        if not dropped:
            continue
        before = set(n.inputs)
        n.outputs -= dropped
        _update_input(g, n)
        lost = before - n.inputs
        queue.append(n)
        # producers of inputs this node stopped reading may now be dead too
        for t in lost:
            for p in g_bar.producers(t):
                if p not in queue:
                    queue.append(p)
    g_bar.nodes = [n for n in g_bar.nodes if n.outputs]
    return g_bar


def prune(g: ParallelComputationGraph, g_bar: BackwardGraph | None = None,
          threshold: float | None = None) -> PruningPlan:
    if g_bar is None:
        g_bar = reverse_autodiff(g)
    survived = prune_backward(g, g_bar)
    weights = set(g.weights())
    uses: dict[str, set[str]] = {}
    for n in survived.nodes:
        for t, how in n.uses.items():
            uses.setdefault(t, set()).add(how)
    needed = {t for t in uses if t not in weights}
    compressed = {t for t in needed if uses[t] == {SIGN}}
    memorized = needed - compressed
    pruned_only = set(memorized)

    threshold = default_threshold(g) if threshold is None else threshold
    remat: set[str] = set()
    order = [t for op in g.topo_order() for t in op.outputs]
    for t in order:
        if t not in memorized:
            continue
        p = g.producer(t)
        if p is None:
            continue
        if all(i in memorized or i in weights for i in p.inputs) and flop_cost(g, p) < threshold:
            memorized.discard(t)
            remat.add(t)
    retain_all = {t for t, v in g.tensors.items() if v.kind == "activation"}
    return PruningPlan(memorized, remat, compressed, pruned_only, retain_all,
                       {t for t in uses if t in weights}, survived, threshold)


# ---------------------------------------------------------------------------
# oracles shared by tests and the CLI


def available_closure(g: ParallelComputationGraph, stored: set[str], remat: set[str]) -> set[str]:
    """Tensors obtainable from stored ones, weights, and recomputation of ``remat``."""
    have = set(stored) | set(g.weights())
    changed = True
    while changed:
        changed = False
        for t in remat - have:
            p = g.producer(t)
            if p is not None and all(i in have for i in p.inputs):
                have.add(t)
                changed = True
    return have


def unsatisfied(plan: PruningPlan, memorized: set[str] | None = None) -> list[tuple[str, str]]:
    """(backward node, tensor) pairs whose full-value input cannot be produced."""
    g = plan.backward.forward
    mem = plan.memorized if memorized is None else memorized
    have = available_closure(g, mem, plan.rematerialized)
    out = []
    for n in plan.backward.nodes:
        for t, how in n.uses.items():
            if how == SIGN and t in plan.compressed:
                continue
            if t not in have:
                out.append((n.id, t))
    return out


def execute_pruned(plan: PruningPlan, values: dict[str, np.ndarray],
                   seed: np.ndarray) -> dict[str, np.ndarray]:
    """Run the surviving backward graph reading only what the plan keeps.

    ``values`` is a full forward evaluation; the executor copies out the
    memorized tensors and weights, recomputes rematerialized ones, and
    decodes bitmasks. Reading anything else raises KeyError.
    """
    g = plan.backward.forward
    store = {t: values[t] for t in plan.memorized | set(g.weights()) if t in values}
    masks = {t: np.packbits(values[t] > 0) for t in plan.compressed}
    shapes = graph_eval.shapes_of(g)
    for t in [t for op in g.topo_order() for t in op.outputs]:
        if t in plan.rematerialized:
            p = g.producer(t)
            store[t] = graph_eval.eval_op(p, [store[i] for i in p.inputs])[0]

    def get_mask(t):
        n = int(np.prod(shapes[t]))
        return np.unpackbits(masks[t], count=n).reshape(shapes[t]).astype(bool)

    def get(t):
        return store[t]

    grads: dict[str, np.ndarray] = {grad_id(g.loss): seed}
    order = {op.id: i for i, op in enumerate(g.topo_order())}
    for n in sorted(plan.backward.nodes, key=lambda n: -order[n.forward]):
        op = g.op(n.forward)
        dy = grads.get(grad_id(op.outputs[0]))
        if dy is None:
            continue
        for i in _differentiable_inputs(op):
            gt = grad_id(op.inputs[i])
            if gt not in n.outputs:
                continue
            c = graph_eval.vjp(op, i, dy, get, shapes,
                               get_mask if op.inputs[i] in plan.compressed else None)
            grads[gt] = grads[gt] + c if gt in grads else c
    return grads


# ---------------------------------------------------------------------------
# memory accounting


@dataclass
class MemoryReport:
    rows: list[tuple[str, int]]
    stages: dict[str, int]
    seqlen: int
    batch: int
    dtype_bytes: int

    def reduction(self, stage: str) -> float:
        return 1.0 - self.stages[stage] / self.stages["retain_all"]

    def to_csv(self) -> str:
        total = sum(b for _, b in self.rows) or 1
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "bytes", "percent"])
        for cat, b in self.rows:
            w.writerow([cat, b, f"{100.0 * b / total:.4f}"])
        return buf.getvalue()


def _tensor_elements(g: ParallelComputationGraph, t: str, seqlen: int | None) -> int:
    n = 1
    for d in g.tensors[t].dims:
        n *= seqlen if (seqlen is not None and d.name == "tokens") else d.extent
    return n


def _token_axes(g: ParallelComputationGraph, t: str) -> int:
    return sum(d.name == "tokens" for d in g.tensors[t].dims)


def account_memory(plan: PruningPlan, seqlen: int | None = None, batch: int = 1,
                   dtype_bytes: int = 2, *, window: int = 128, optimizer_bytes: int = 4,
                   layers: int = 1) -> MemoryReport:
    """Byte breakdown of a finetuning step plus the activation ablation stages.

    Token-named axes are rescaled to ``seqlen``. Stages: ``retain_all`` keeps
    every forward activation; ``pruning`` keeps the step-1 set with ReLU
    bitmasks; ``remat`` additionally recomputes cheap tensors; ``token_level``
    drops tensors quadratic in sequence length, which windowed execution
    recomputes per window from the cached Q/K/V.
    """
    g = plan.backward.forward
    ax = seqlen

    def nbytes(ts) -> int:
        return sum(_tensor_elements(g, t, ax) for t in ts) * dtype_bytes * batch * layers

    def mask_bytes(ts) -> int:
        return sum(math.ceil(_tensor_elements(g, t, ax) * batch / 8) for t in ts) * layers

    trainable = set(g.trainable_weights())
    frozen = set(g.weights()) - trainable
    n_train = sum(g.tensors[t].numel for t in trainable) * layers
    n_frozen = sum(g.tensors[t].numel for t in frozen
                   if not any(d.name == "tokens" for d in g.tensors[t].dims)) * layers

    quadratic = {t for t in plan.memorized if _token_axes(g, t) >= 2}
    s = seqlen if seqlen is not None else max(
        (d.extent for t in g.tensors.values() for d in t.dims if d.name == "tokens"), default=1)
    window_ws = max((_tensor_elements(g, t, ax) * min(window, s) // s for t in quadratic), default=0)
    remat_ws = max((_tensor_elements(g, t, ax) for t in plan.rematerialized), default=0)

    stages = {
        "retain_all": nbytes(plan.retain_all),
        "pruning": nbytes(plan.pruned_only) + mask_bytes(plan.compressed),
        "remat": nbytes(plan.memorized) + mask_bytes(plan.compressed),
        "token_level": nbytes(plan.memorized - quadratic) + mask_bytes(plan.compressed),
    }
    rows = [
        ("backbone_weights", n_frozen * dtype_bytes),
        ("peft_weights", n_train * dtype_bytes),
        ("peft_gradients", n_train * dtype_bytes),
        ("optimizer_states", 2 * n_train * optimizer_bytes),
        ("activations_memorized", nbytes(plan.memorized - quadratic)),
        ("activation_bitmasks", mask_bytes(plan.compressed)),
        ("remat_workspace", max(remat_ws, window_ws) * dtype_bytes * batch),
    ]
    return MemoryReport(rows, stages, s, batch, dtype_bytes)
