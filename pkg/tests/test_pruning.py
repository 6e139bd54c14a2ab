import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coserve.blocks import mlp_lora, random_peft_graph, random_values, transformer_block
from coserve.numeric import graph_eval
from coserve.pcg import Dim, OperatorNode, OpKind, ParallelComputationGraph, ParallelTensor, PcgError
from coserve.pruning import account_memory, default_threshold, execute_pruned, prune, reverse_autodiff
from oracles import check_pruned_graph, dependency_oracle


def _g(tensors, ops, loss, sinks=()):
    return ParallelComputationGraph(tensors, ops, loss=loss, grad_sinks=sinks)


def _a(tid, *ext):
    return ParallelTensor(tid, tuple(Dim(e) for e in ext))


def _w(tid, *ext):
    return ParallelTensor(tid, tuple(Dim(e) for e in ext), "weight")


class TestAutodiffRules:
    def test_single_matmul(self):
        g = _g({"x": _a("x", 2, 3), "W": _w("W", 3, 3), "y": _a("y", 2, 3)},
               [OperatorNode("mm", OpKind.MATMUL, ("x", "W"), ("y",))], "y")
        n = reverse_autodiff(g).node("mm'")
        assert n.outputs == {"grad:x", "grad:W"}
        assert n.inputs == {"grad:y", "x", "W"}
        # per-output needs: dX reads W, dW reads X
        from coserve.pruning import grad_needs
        op = g.op("mm")
        assert set(grad_needs(op, 0)) == {"W"} and set(grad_needs(op, 1)) == {"x"}

    def test_relu_needs_sign_only(self):
        from coserve.pruning import SIGN, grad_needs
        op = OperatorNode("r", OpKind.RELU, ("x",), ("y",))
        assert grad_needs(op, 0) == {"x": SIGN}

    def test_add_saves_nothing(self):
        g = _g({"a": _a("a", 2), "b": _a("b", 2), "y": _a("y", 2)},
               [OperatorNode("add", OpKind.ADD, ("a", "b"), ("y",))], "y")
        n = reverse_autodiff(g).node("add'")
        assert n.outputs == {"grad:a", "grad:b"} and n.uses == {}

    def test_needs_loss(self):
        g = _g({"a": _a("a", 2), "y": _a("y", 2)}, [OperatorNode("r", OpKind.RELU, ("a",), ("y",))], None)
        with pytest.raises(PcgError):
            reverse_autodiff(g)


class TestPrune:
    def test_frozen_mlp_keeps_nothing(self):
        g = mlp_lora().backbone
        plan = prune(g)
        assert plan.memorized == set() and plan.compressed == set() and plan.backward.nodes == []

    def test_mlp_lora_golden(self):
        g = mlp_lora().merged()
        full, sign = dependency_oracle(g)
        assert (full, sign) == ({"x", "lora.h"}, {"y1"})
        plan = prune(g)
        assert plan.pruned_only == full and plan.compressed == sign
        # W1's gradient path is gone entirely and linear2's input r is not kept
        assert all("grad:W1" not in n.outputs and "grad:W2" not in n.outputs for n in plan.backward.nodes)
        assert "r" not in plan.memorized | plan.rematerialized
        assert plan.memorized == {"x"} and plan.rematerialized == {"lora.h"}

    def test_block_sets(self):
        plan = prune(transformer_block().merged())
        assert plan.memorized == {"q", "k", "v", "p", "g"}
        assert plan.rematerialized == {"lora_d.h"} and plan.compressed == {"u"}

    def test_idempotent(self):
        g = transformer_block(64, 32, 4, 64, 4).merged()
        a = prune(g)
        b = prune(g, a.backward)
        assert (a.memorized, a.rematerialized, a.compressed) == (b.memorized, b.rematerialized, b.compressed)

    def test_threshold_knob(self):
        g = mlp_lora().merged()
        assert prune(g, threshold=0.0).rematerialized == set()
        assert default_threshold(g) == 2 * 4 * 8 * 8


@given(st.integers(0, 100_000))
@settings(max_examples=60, deadline=None)
def test_random_graph_oracles(seed):
    check_pruned_graph(seed)


def test_random_graphs_size_bound():
    for seed in range(50):
        assert len(random_peft_graph(seed).operators) <= 12


class TestMemory:
    def test_retain_all_is_sum_of_activations(self):
        g = transformer_block(64, 32, 4, 64, 4).merged()
        plan = prune(g)
        rep = account_memory(plan, 64, dtype_bytes=2)
        total = sum(t.numel for t in g.tensors.values() if t.kind == "activation") * 2
        assert rep.stages["retain_all"] == total

    def test_bitmask_arithmetic(self):
        g = mlp_lora(tokens=1024, hidden=4096, rank=16).merged()
        rep = account_memory(prune(g), 1024, dtype_bytes=2)
        rows = dict(rep.rows)
        assert 1024 * 4096 * 2 == 8 * 2 ** 20
        assert rows["activation_bitmasks"] == 2 ** 19

    def test_block_band_and_ordering(self):
        rep = account_memory(prune(transformer_block().merged()), 1024)
        assert 0.61 <= rep.reduction("pruning") <= 0.84
        assert rep.reduction("pruning") < rep.reduction("remat") < rep.reduction("token_level")

    def test_csv_columns(self):
        rep = account_memory(prune(mlp_lora().merged()))
        lines = rep.to_csv().splitlines()
        assert lines[0] == "category,bytes,percent"
        assert {ln.split(",")[0] for ln in lines[1:]} >= {"backbone_weights", "peft_weights",
                                                          "peft_gradients", "optimizer_states",
                                                          "activations_memorized", "activation_bitmasks"}


# --- cross-check the numpy evaluator against torch autograd -----------------

def _torch_forward(g, inputs):
    env = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in inputs.items()}
    leaves = dict(env)
    for op in g.topo_order():
        a = [env[t] for t in op.inputs]
        k = op.kind
        if k is OpKind.MATMUL:
            r = a[0] @ a[1]
        elif k is OpKind.ADD:
            r = a[0]
            for x in a[1:]:
                r = r + x
        elif k is OpKind.ELEM_MUL:
            r = a[0] * a[1]
        elif k is OpKind.RELU:
            r = torch.relu(a[0])
        elif k is OpKind.SOFTMAX:
            r = torch.softmax(a[0], dim=-1)
        else:
            r = a[0]
        env[op.outputs[0]] = r
    return env, leaves


@given(st.integers(0, 100_000))
@settings(max_examples=40, deadline=None)
def test_graph_eval_matches_torch(seed):
    g = random_peft_graph(seed)
    inputs = random_values(g, seed)
    vals = graph_eval.forward(g, inputs)
    seed_grad = np.random.default_rng(seed).standard_normal(vals[g.loss].shape)
    ref = graph_eval.backward_all(g, vals, seed_grad)
    env, leaves = _torch_forward(g, inputs)
    np.testing.assert_allclose(env[g.loss].detach().numpy(), vals[g.loss], rtol=1e-12)
    (env[g.loss] * torch.tensor(seed_grad)).sum().backward()
    for t, leaf in leaves.items():
        tg = leaf.grad.numpy() if leaf.grad is not None else np.zeros_like(inputs[t])
        mine = ref.get(t, np.zeros_like(inputs[t]))
        np.testing.assert_allclose(mine, tg, rtol=1e-10, atol=1e-12)


def test_block_graph_eval_matches_torch_attention():
    """Multi-head attention pieces of the block graph against torch."""
    g = transformer_block(6, 8, 2, 12, 2).merged()
    inputs = random_values(g, 3)
    inputs["scale"] = np.array([0.5])
    inputs["mask"] = np.triu(np.full((6, 6), -1e9), 1)
    vals = graph_eval.forward(g, inputs)
    x = torch.tensor(inputs["x"], requires_grad=True)
    W = {k: torch.tensor(inputs[k]) for k in ("Wq", "Wk", "Wv", "Wo", "Wup", "Wdown")}
    A = torch.tensor(inputs["lora_d.A"], requires_grad=True)
    B = torch.tensor(inputs["lora_d.B"], requires_grad=True)

    def heads(t):
        return t.reshape(6, 2, 4).transpose(0, 1)

    q, k, v = heads(x @ W["Wq"]), heads(x @ W["Wk"]), heads(x @ W["Wv"])
    p = torch.softmax(q @ k.transpose(-1, -2) * 0.5 + torch.tensor(inputs["mask"]), dim=-1)
    a = (p @ v).transpose(0, 1).reshape(6, 8)
    x1 = x + a @ W["Wo"]
    gl = torch.relu(x1 @ W["Wup"])
    y = x1 + gl @ W["Wdown"] + (gl @ A) @ B
    np.testing.assert_allclose(y.detach().numpy(), vals["y"], rtol=1e-12)
    seed = np.random.default_rng(0).standard_normal((6, 8))
    (y * torch.tensor(seed)).sum().backward()
    ref = graph_eval.backward_all(g, vals, seed)
    np.testing.assert_allclose(ref["x"], x.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ref["lora_d.A"], A.grad.numpy(), rtol=1e-10, atol=1e-12)
    got = execute_pruned(prune(g), vals, seed)
    np.testing.assert_allclose(got["grad:lora_d.B"], B.grad.numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(got["grad:x"], x.grad.numpy(), rtol=1e-10, atol=1e-12)
