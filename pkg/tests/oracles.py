"""Independent oracles shared by the unit and acceptance tests."""
import numpy as np

from coserve.blocks import random_peft_graph, random_values
from coserve.numeric import graph_eval
from coserve.pcg import OpKind
from coserve.pruning import execute_pruned, grad_id, prune, unsatisfied


def dependency_oracle(g):
    """Forward activations the trainable gradients depend on, found by demand.

    Walks from the trainable weights (and declared gradient sinks) towards
    the loss; each consumer on the way contributes what its local derivative
    reads. Returns (full-value set, sign-only set).
    """
    live = {g.loss}
    for op in reversed(g.topo_order()):
        if any(o in live for o in op.outputs):
            live.update(op.inputs)
    weights = set(g.weights())
    want = set(g.trainable_weights()) | set(g.grad_sinks)
    full, sign = set(), set()
    seen = set()
    todo = [t for t in want if t in live]
    while todo:
        t = todo.pop()
        if t in seen:
            continue
        seen.add(t)
        for op in g.consumers(t):
            if op.outputs[0] not in live:
                continue
            for i, x in enumerate(op.inputs):
                if x != t:
                    continue
                if op.kind in (OpKind.MATMUL, OpKind.ELEM_MUL):
                    full.add(op.inputs[1 - i])
                elif op.kind is OpKind.RELU:
                    sign.add(x)
                elif op.kind is OpKind.SOFTMAX:
                    full.add(op.outputs[0])
            todo.append(op.outputs[0])
    full -= weights
    return full, sign - full


def check_pruned_graph(seed):
    """Oracle agreement, satisfiability, minimality and sufficiency for one random graph."""
    g = random_peft_graph(seed)
    plan = prune(g)
    assert plan.memorized.isdisjoint(plan.rematerialized)
    # oracle agreement on what step 1 keeps
    full, sign = dependency_oracle(g)
    assert plan.pruned_only == full and plan.compressed == sign
    # satisfiable and minimal
    assert unsatisfied(plan) == []
    for t in plan.memorized:
        assert unsatisfied(plan, plan.memorized - {t}), f"{t} is removable"
    # sufficient: gradients from the kept tensors match the retain-all pass
    vals = graph_eval.forward(g, random_values(g, seed))
    seed_grad = np.random.default_rng(seed + 7).standard_normal(vals[g.loss].shape)
    ref = graph_eval.backward_all(g, vals, seed_grad)
    got = execute_pruned(plan, vals, seed_grad)
    for t in list(g.trainable_weights()) + list(g.grad_sinks):
        if t not in ref:
            continue
        r = ref[t]
        np.testing.assert_allclose(got[grad_id(t)], r, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(r).max()))
        # pruning never drops a backward node feeding a trainable gradient
        assert any(grad_id(t) in n.outputs for n in plan.backward.nodes)
