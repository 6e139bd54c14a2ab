"""Ready-made PEFT graphs: a LoRA transformer block, a small MLP, random graphs."""
from __future__ import annotations

import numpy as np

from .pcg import (Dim, OpKind, OperatorNode, ParallelComputationGraph, ParallelTensor, PeftModel,
                  build_adapter_block, build_lora_block)


def _act(tid, *dims):
    return ParallelTensor(tid, tuple(dims))


def _w(tid, *extents):
    return ParallelTensor(tid, tuple(Dim(e) for e in extents), "weight")


def transformer_block(seqlen: int = 1024, hidden: int = 4096, heads: int = 32, ffn: int = 14336,
                      rank: int = 16, lora_target: str = "down") -> PeftModel:
    """One decoder block with a ReLU MLP and LoRA on the MLP down projection.

    The block input ``x`` is a gradient sink (earlier layers need ``dx``)
    and the block output ``y`` plays the role of the loss.
    """
    T = lambda: Dim(seqlen, name="tokens")  # noqa: E731
    H = lambda: Dim(hidden)  # noqa: E731
    t = {
        "x": _act("x", T(), H()),
        "q": _act("q", T(), H()),
        "k": _act("k", T(), H()),
        "v": _act("v", T(), H()),
        "s": _act("s", Dim(heads), T(), T()),
        "s_scaled": _act("s_scaled", Dim(heads), T(), T()),
        "s_masked": _act("s_masked", Dim(heads), T(), T()),
        "p": _act("p", Dim(heads), T(), T()),
        "a": _act("a", T(), H()),
        "o": _act("o", T(), H()),
        "x1": _act("x1", T(), H()),
        "u": _act("u", T(), Dim(ffn)),
        "g": _act("g", T(), Dim(ffn)),
        "d": _act("d", T(), H()),
        "y": _act("y", T(), H()),
        "Wq": _w("Wq", hidden, hidden),
        "Wk": _w("Wk", hidden, hidden),
        "Wv": _w("Wv", hidden, hidden),
        "Wo": _w("Wo", hidden, hidden),
        "Wup": _w("Wup", hidden, ffn),
        "Wdown": _w("Wdown", ffn, hidden),
        "scale": _w("scale", 1),
        "mask": ParallelTensor("mask", (T(), T()), "weight"),
    }
    M = OpKind.MATMUL
    ops = [
        OperatorNode("q_proj", M, ("x", "Wq"), ("q",)),
        OperatorNode("k_proj", M, ("x", "Wk"), ("k",)),
        OperatorNode("v_proj", M, ("x", "Wv"), ("v",)),
        OperatorNode("scores", M, ("q", "k"), ("s",), attrs={"heads": heads, "transpose_b": True}),
        OperatorNode("scale_scores", OpKind.ELEM_MUL, ("s", "scale"), ("s_scaled",)),
        OperatorNode("causal_mask", OpKind.ADD, ("s_scaled", "mask"), ("s_masked",)),
        OperatorNode("softmax", OpKind.SOFTMAX, ("s_masked",), ("p",)),
        OperatorNode("attend", M, ("p", "v"), ("a",), attrs={"heads": heads, "merge_heads": True}),
        OperatorNode("o_proj", M, ("a", "Wo"), ("o",)),
        OperatorNode("residual1", OpKind.ADD, ("x", "o"), ("x1",)),
        OperatorNode("up_proj", M, ("x1", "Wup"), ("u",)),
        OperatorNode("act", OpKind.RELU, ("u",), ("g",)),
        OperatorNode("down_proj", M, ("g", "Wdown"), ("d",)),
        OperatorNode("residual2", OpKind.ADD, ("x1", "d"), ("y",)),
    ]
    backbone = ParallelComputationGraph(t, ops, loss="y", grad_sinks=("x",))
    targets = {"down": ("g", "d", ffn, hidden), "up": ("x1", "u", hidden, ffn),
               "q": ("x", "q", hidden, hidden), "v": ("x", "v", hidden, hidden)}
    src, dst, fin, fout = targets[lora_target]
    lora = build_lora_block(fin, rank, dst, source=src, out_features=fout, tokens=seqlen)
    return PeftModel(backbone, (lora,))


def mlp_lora(tokens: int = 4, hidden: int = 8, rank: int = 2) -> PeftModel:
    """x -> linear1 (+ LoRA) -> ReLU -> linear2, everything frozen except LoRA."""
    T = lambda: Dim(tokens, name="tokens")  # noqa: E731
    t = {
        "x": _act("x", T(), Dim(hidden)),
        "y1": _act("y1", T(), Dim(hidden)),
        "r": _act("r", T(), Dim(hidden)),
        "out": _act("out", T(), Dim(hidden)),
        "W1": _w("W1", hidden, hidden),
        "W2": _w("W2", hidden, hidden),
    }
    ops = [
        OperatorNode("linear1", OpKind.MATMUL, ("x", "W1"), ("y1",)),
        OperatorNode("relu", OpKind.RELU, ("y1",), ("r",)),
        OperatorNode("linear2", OpKind.MATMUL, ("r", "W2"), ("out",)),
    ]
    backbone = ParallelComputationGraph(t, ops, loss="out")
    lora = build_lora_block(hidden, rank, "y1", source="x", tokens=tokens, name="lora")
    return PeftModel(backbone, (lora,))


def random_peft_graph(seed: int, max_nodes: int = 12, tokens: int = 3,
                      hidden: int = 4) -> ParallelComputationGraph:
    """Random frozen backbone with one or two bypasses, at most ``max_nodes`` operators."""
    rng = np.random.default_rng(seed)
    n_bypass = int(rng.integers(1, 3))
    budget = max_nodes - 4 * n_bypass  # LoRA adds 3 ops, an adapter 4 (with the merge Add)
    n_backbone = int(rng.integers(2, max(3, budget + 1)))
    tensors = {"x0": _act("x0", Dim(tokens, name="tokens"), Dim(hidden))}
    acts = ["x0"]
    ops: list[OperatorNode] = []
    for i in range(n_backbone):
        out = f"t{i}"
        choice = rng.choice(["matmul", "matmul", "relu", "add", "mul", "softmax", "scale"])
        a = acts[int(rng.integers(len(acts)))]
        if choice == "matmul":
            w = f"W{i}"
            tensors[w] = _w(w, hidden, hidden)
            ops.append(OperatorNode(f"op{i}", OpKind.MATMUL, (a, w), (out,)))
        elif choice == "relu":
            ops.append(OperatorNode(f"op{i}", OpKind.RELU, (a,), (out,)))
        elif choice == "softmax":
            ops.append(OperatorNode(f"op{i}", OpKind.SOFTMAX, (a,), (out,)))
        elif choice == "scale":
            w = f"w{i}"
            tensors[w] = _w(w, hidden)
            ops.append(OperatorNode(f"op{i}", OpKind.ELEM_MUL, (a, w), (out,)))
        else:
            b = acts[int(rng.integers(len(acts)))]
            kind = OpKind.ADD if choice == "add" else OpKind.ELEM_MUL
            ops.append(OperatorNode(f"op{i}", kind, (a, b), (out,)))
        tensors[out] = _act(out, Dim(tokens, name="tokens"), Dim(hidden))
        acts.append(out)
    loss = acts[-1]
    backbone = ParallelComputationGraph(tensors, ops, loss=loss,
                                        grad_sinks=("x0",) if rng.random() < 0.3 else ())
    produced = [t for t in acts if t != "x0"]
    bypasses = []
    for j in range(n_bypass):
        src = acts[int(rng.integers(len(acts)))]
        dst = produced[int(rng.integers(len(produced)))]
        if rng.random() < 0.6:
            b = build_lora_block(hidden, 2, dst, source=src, tokens=tokens, name=f"lora{j}")
        else:
            b = build_adapter_block(hidden, 2, dst, source=src, tokens=tokens, name=f"adapter{j}")
        bypasses.append(b)
    g = PeftModel(backbone, tuple(bypasses)).merged()
    return _acyclic_or_drop(g, backbone, bypasses)


def _acyclic_or_drop(g, backbone, bypasses):
    # a bypass reading a tensor downstream of its target closes a cycle; drop those
    try:
        g.topo_order()
        return g
    except Exception:
        kept = []
        for b in bypasses:
            trial = PeftModel(backbone, tuple(kept + [b])).merged()
            try:
                trial.topo_order()
                kept.append(b)
            except Exception:
                continue
        if not kept:
            b = build_lora_block(backbone.tensors["x0"].shape[1], 2, backbone.loss, source="x0",
                                 tokens=backbone.tensors["x0"].shape[0], name="lora_fallback")
            kept = [b]
        return PeftModel(backbone, tuple(kept)).merged()


def random_values(g: ParallelComputationGraph, seed: int = 0) -> dict[str, np.ndarray]:
    """Random graph inputs and weights (every tensor without a producer)."""
    rng = np.random.default_rng(seed)
    vals = {}
    for tid, t in g.tensors.items():
        if g.producer(tid) is None:
            vals[tid] = rng.standard_normal(t.shape)
    return vals
