import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coserve.blocks import mlp_lora, random_peft_graph, transformer_block
from coserve.numeric.graph_eval import eval_op
from coserve.pcg import (NP, Dim, DimState, InvalidConfiguration, NotRewritable, OperatorNode, OpKind,
                         ParallelComputationGraph, ParallelTensor, PcgError, PeftModel, State,
                         StateInferenceError, build_adapter_block, build_lora_block, build_prefix_block,
                         dumps_graph, infer_states, load_model, loads_graph, part, prered, repl,
                         rewrite_ia3, validate_pcg)


def _t(tid, *dims, kind="activation"):
    return ParallelTensor(tid, tuple(d if isinstance(d, Dim) else Dim(d) for d in dims), kind)


def chain():
    t = {"x": _t("x", 4, 8), "W": _t("W", 8, 8, kind="weight"), "h": _t("h", 4, 8), "y": _t("y", 4, 8)}
    ops = [OperatorNode("mm", OpKind.MATMUL, ("x", "W"), ("h",)),
           OperatorNode("act", OpKind.RELU, ("h",), ("y",))]
    return ParallelComputationGraph(t, ops, loss="y")


class TestDimState:
    def test_symbols(self):
        assert [s.value for s in State] == ["-", "|", "=", "+"]
        assert str(part(2)) == "|2" and str(NP) == "-"

    def test_degree_rules(self):
        with pytest.raises(PcgError):
            DimState(State.PARTITIONED, 1)
        with pytest.raises(PcgError):
            DimState(State.NON_PARALLEL, 2)
        with pytest.raises(PcgError):
            DimState(State.REPLICATED, 0)

    def test_one_prereduce_dim(self):
        with pytest.raises(PcgError):
            _t("z", Dim(4, prered(2)), Dim(4, prered(2)))

    def test_extent_independent_of_state(self):
        a, b = _t("a", Dim(8, part(2)), 4), _t("b", 8, 4)
        assert a.shape == b.shape == (8, 4)


class TestInferStates:
    def test_reduce(self):
        op = OperatorNode("r", OpKind.REDUCE, ("a",), ("b",))
        assert infer_states(op, [(NP, prered(2))]) == [(NP, NP)]

    def test_split_k_matmul(self):
        op = OperatorNode("m", OpKind.MATMUL, ("x", "w"), ("y",))
        assert infer_states(op, [(NP, part(2)), (part(2), NP)]) == [(NP, prered(2))]

    def test_replicate_on_partitioned_fails(self):
        op = OperatorNode("r", OpKind.REPLICATE, ("a",), ("b",))
        with pytest.raises(StateInferenceError):
            infer_states(op, [(NP, part(2))])

    def test_transitions(self):
        p = OperatorNode("p", OpKind.PARTITION, ("a",), ("b",), attrs={"dim": 1, "degree": 2})
        c = OperatorNode("c", OpKind.COMBINE, ("a",), ("b",), attrs={"dim": 1})
        r = OperatorNode("r", OpKind.REPLICATE, ("a",), ("b",), attrs={"degree": 2})
        assert infer_states(p, [(NP, NP)]) == [(NP, part(2))]
        assert infer_states(c, [(NP, part(2))]) == [(NP, NP)]
        assert infer_states(r, [(NP, NP)]) == [(repl(2), NP)]

    def test_elementwise_needs_agreement(self):
        op = OperatorNode("a", OpKind.ADD, ("x", "y"), ("z",))
        assert infer_states(op, [(NP, part(2)), (NP, part(2))]) == [(NP, part(2))]
        with pytest.raises(StateInferenceError):
            infer_states(op, [(NP, part(2)), (NP, NP)])


class TestValidate:
    def test_chain_ok(self):
        assert validate_pcg(chain()) == []

    def test_matmul_on_prereduce(self):
        t = {"x": _t("x", 4, Dim(8, part(2))), "W": _t("W", Dim(8, part(2)), 8, kind="weight"),
             "p": _t("p", 4, Dim(8, prered(2))), "W2": _t("W2", 8, 8, kind="weight"), "y": _t("y", 4, 8)}
        ops = [OperatorNode("mm", OpKind.MATMUL, ("x", "W"), ("p",)),
               OperatorNode("mm2", OpKind.MATMUL, ("p", "W2"), ("y",))]
        v = validate_pcg(ParallelComputationGraph(t, ops))
        assert len(v) == 1 and "pre-reduce" in v[0]

    def test_cycle(self):
        t = {"a": _t("a", 2), "b": _t("b", 2)}
        ops = [OperatorNode("f", OpKind.RELU, ("a",), ("b",)), OperatorNode("g", OpKind.RELU, ("b",), ("a",))]
        v = validate_pcg(ParallelComputationGraph(t, ops))
        assert len(v) == 1 and "cycle" in v[0]

    def test_declared_state_mismatch(self):
        t = {"x": _t("x", 4, 8), "y": _t("y", 4, Dim(8, part(2)))}
        g = ParallelComputationGraph(t, [OperatorNode("r", OpKind.RELU, ("x",), ("y",))])
        assert len(validate_pcg(g)) == 1

    def test_unknown_op_kind_rejected(self):
        with pytest.raises(PcgError):
            OperatorNode("c", "Conv2d", ("x",), ("y",))

    def test_edges_follow_tensor_sharing(self):
        assert chain().edges() == {("mm", "act")}

    def test_transformer_block_validates(self):
        assert validate_pcg(transformer_block(64, 32, 4, 64, 4).merged()) == []


class TestBypass:
    def test_lora_small(self):
        b = build_lora_block(16, 2, "y")
        assert b.trainable_params == 64
        assert sum(o.kind is OpKind.MATMUL for o in b.operators) == 2
        assert all(o.trainable for o in b.operators)

    def test_lora_llama_down_projection(self):
        # 14336 -> 4096 down projection, rank 16, 32 layers
        b = build_lora_block(14336, 16, "d", out_features=4096)
        assert b.trainable_params == 16 * (14336 + 4096)
        assert abs(b.trainable_params * 32 / 9.4e6 - 1) < 0.01

    def test_bad_rank(self):
        with pytest.raises(InvalidConfiguration):
            build_lora_block(16, 0, "y")
        with pytest.raises(InvalidConfiguration):
            build_lora_block(4, 8, "y")

    def test_adapter_and_prefix(self):
        a = build_adapter_block(8, 2, "y", tokens=4)
        assert a.trainable_params == 32
        p = build_prefix_block(8, 2, "y", tokens=4)
        assert p.kind == "PrefixEmbedding" and p.trainable_params == 16

    def test_attach_preserves_backbone(self):
        m = mlp_lora()
        edges_before = m.backbone.edges()
        n_ops = len(m.backbone.operators)
        m2 = m.attach(build_adapter_block(8, 2, "out", tokens=4))
        assert len(m2.backbone.operators) == n_ops and m2.backbone.edges() == edges_before

    def test_backbone_must_be_frozen(self):
        g = chain()
        ops = [OperatorNode("mm", OpKind.MATMUL, ("x", "W"), ("h",), trainable=True), g.operators[1]]
        with pytest.raises(PcgError):
            PeftModel(ParallelComputationGraph(g.tensors, ops))


def ia3_graph(h=2):
    t = {"x": _t("x", 1, h), "W": _t("W", h, kind="weight"), "y": _t("y", 1, h)}
    return ParallelComputationGraph(t, [OperatorNode("scale", OpKind.ELEM_MUL, ("x", "W"), ("y",))])


def _eval_ia3(g, b, x, w):
    base = eval_op(g.op("scale"), [x])[0]
    z = eval_op(b.operators[0], [x, w - 1.0])[0]
    return base + z


class TestIA3:
    def test_ones_gives_zero_bypass(self):
        g, b = rewrite_ia3(ia3_graph(), "scale")
        z = eval_op(b.operators[0], [np.array([[1.0, 2.0]]), np.ones(2) - 1.0])[0]
        assert np.all(z == 0)

    def test_worked_example(self):
        g, b = rewrite_ia3(ia3_graph(), "scale")
        out = _eval_ia3(g, b, np.array([[1.0, 2.0]]), np.array([3.0, 0.5]))
        assert np.array_equal(out, [[3.0, 1.0]])
        assert g.op("scale").kind is OpKind.IDENTITY

    def test_param_count(self):
        _, b = rewrite_ia3(ia3_graph(8), "scale")
        assert b.trainable_params == 8

    def test_not_rewritable(self):
        with pytest.raises(NotRewritable):
            rewrite_ia3(chain(), "mm")

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_equals_elementwise_product(self, seed):
        rng = np.random.default_rng(seed)
        x, w = rng.standard_normal((3, 5)), rng.standard_normal(5)
        g, b = rewrite_ia3(ia3_graph(5), "scale")
        np.testing.assert_allclose(_eval_ia3(g, b, x, w), x * w, rtol=1e-15, atol=1e-15)


class TestJson:
    def test_round_trip_block(self):
        m = transformer_block(16, 8, 2, 16, 2)
        text = dumps_graph(m.backbone, m.bypasses)
        m2 = load_model(text)
        assert dumps_graph(m2.backbone, m2.bypasses) == text
        assert m2.backbone.content_hash() == m.backbone.content_hash()

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_random(self, seed):
        g = random_peft_graph(seed)
        text = dumps_graph(g)
        g2, _ = loads_graph(text)
        assert dumps_graph(g2) == text

    def test_state_symbols_in_json(self):
        t = {"x": _t("x", 4, Dim(8, part(2)))}
        text = dumps_graph(ParallelComputationGraph(t, []))
        assert '"|"' in text

    def test_bad_json(self):
        with pytest.raises(PcgError):
            loads_graph("{not json")
