import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coserve.numeric import (CacheDesync, EmptySequence, KvGradAccumulator, OrderingViolation, TinyModel,
                             backward_full, backward_window, finetune_token_level, forward_full,
                             forward_window, generative_loss, new_state, rel_err)
from coserve.numeric.transformer import (PROJECTIONS, compare_to_oracle, output_grad_window,
                                         random_partition, uniform_partition)

GOLDEN_LOSS_L8 = 5.401241944988777  # seed-0 model (N=2, h=16, V=64), tokens from default_rng(1)


@pytest.fixture(scope="module")
def model():
    return TinyModel.random(2, 16, 64, rank=2, max_len=32, seed=0)


def toks(L, seed=1, vocab=64):
    return np.random.default_rng(seed).integers(0, vocab, L)


class TestForwardFull:
    def test_empty(self, model):
        with pytest.raises(EmptySequence):
            forward_full(model, [])

    def test_single_token(self, model):
        loss, acts = forward_full(model, [5], targets=[7])
        z = acts.logits[0]
        ce = math.log(np.exp(z - z.max()).sum()) + z.max() - z[7]
        assert loss == pytest.approx(ce, rel=1e-14)

    def test_golden_and_deterministic(self, model):
        t = toks(8)
        a, _ = forward_full(model, t)
        b, _ = forward_full(model, t)
        assert a == b
        assert a == pytest.approx(GOLDEN_LOSS_L8, rel=1e-12)

    @given(st.integers(1, 15), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_causality(self, p, seed):
        m = TinyModel.random(2, 16, 64, rank=2, max_len=16, seed=3)
        t = toks(16, seed)
        t2 = t.copy()
        t2[p:] = 0
        _, a = forward_full(m, t)
        _, b = forward_full(m, t2)
        np.testing.assert_array_equal(a.logits[:p], b.logits[:p])


class TestBackwardFull:
    def test_zero_signal(self):
        m = TinyModel.random(2, 16, 64, rank=2, max_len=16, seed=0)
        a, b = m.lora[1]["down"]
        b[:] = 0.0  # with B = 0 the loss does not depend on A locally
        _, acts = forward_full(m, toks(12))
        g = backward_full(m, acts)
        assert np.all(g.lora["1.down.A"] == 0)
        assert np.any(g.lora["1.down.B"] != 0)

    def test_finite_differences(self, model):
        t = toks(10)
        _, acts = forward_full(model, t)
        g = backward_full(model, acts).lora
        rng = np.random.default_rng(5)
        keys = sorted(g)
        for _ in range(10):
            key = keys[rng.integers(len(keys))]
            n, p, which = key.split(".")
            arr = model.lora[int(n)][p][0 if which == "A" else 1]
            idx = tuple(rng.integers(s) for s in arr.shape)
            old = arr[idx]
            h = 1e-6
            arr[idx] = old + h
            up, _ = forward_full(model, t)
            arr[idx] = old - h
            dn, _ = forward_full(model, t)
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[key][idx]) <= 1e-6 * max(abs(fd), 1e-3)

    def test_shifting_logits_is_invariant(self, model):
        # adding a constant to every logit leaves softmax, and so gradients, unchanged
        t = toks(8)
        _, acts = forward_full(model, t)
        base = backward_full(model, acts).lora
        acts.logits = acts.logits + 3.0
        shifted = backward_full(model, acts).lora
        for k in base:
            np.testing.assert_allclose(shifted[k], base[k], rtol=1e-10, atol=1e-14)

    def test_against_torch(self):
        m = TinyModel.random(2, 16, 64, heads=2, rank=2, max_len=16, seed=4)
        t = toks(12, 2)
        loss, acts = forward_full(m, t)
        mine = backward_full(m, acts).lora
        T = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
        lora = {(n, p): (T(a).requires_grad_(), T(b).requires_grad_())
                for n in range(m.depth) for p, (a, b) in m.lora[n].items()}

        def lin(n, p, x):
            a, b = lora[(n, p)]
            return x @ T(m.layers[n][p]) + (x @ a) @ b

        L, H, dh = len(t), m.heads, m.hidden // m.heads
        x = T(m.embed[t] + m.pos[:L])
        mask = torch.triu(torch.ones(L, L, dtype=torch.bool), 1)
        for n in range(m.depth):
            q, k, v = (lin(n, p, x).reshape(L, H, dh).transpose(0, 1) for p in "qkv")
            s = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
            o = (torch.softmax(s.masked_fill(mask, -math.inf), -1) @ v).transpose(0, 1).reshape(L, -1)
            x1 = x + lin(n, "o", o)
            x = x1 + lin(n, "down", torch.relu(lin(n, "up", x1)))
        logits = x @ T(m.unembed)
        tl = torch.nn.functional.cross_entropy(logits[:-1], torch.tensor(t[1:]))
        assert tl.item() == pytest.approx(loss, rel=1e-12)
        tl.backward()
        for (n, p), (a, b) in lora.items():
            assert rel_err(mine[f"{n}.{p}.A"], a.grad.numpy()) < 1e-10
            assert rel_err(mine[f"{n}.{p}.B"], b.grad.numpy()) < 1e-10


class TestWindows:
    def test_single_window_equals_full(self, model):
        t = toks(8)
        _, acts = forward_full(model, t)
        st_ = new_state(model, t)
        logits = forward_window(model, t, 0, st_)
        np.testing.assert_array_equal(logits, acts.logits)

    def test_two_windows(self, model):
        t = toks(4)
        _, acts = forward_full(model, t)
        st_ = new_state(model, t)
        a = forward_window(model, t[:2], 0, st_)
        b = forward_window(model, t[2:], 2, st_)
        assert rel_err(np.vstack([a, b]), acts.logits) <= 1e-12
        assert st_.cache.lengths == [4, 4]

    def test_cache_desync(self, model):
        t = toks(4)
        with pytest.raises(CacheDesync):
            forward_window(model, t[2:], 2, new_state(model, t))

    def test_window_shapes(self):
        m = TinyModel.random(1, 16, 64, rank=2, max_len=8, seed=0)
        t = toks(8)
        st_ = new_state(m, t)
        forward_window(m, t, 0, st_)
        acc = KvGradAccumulator(1, 8, 16)
        dy = output_grad_window(m, st_, 8, 2)
        backward_window(m, 0, dy, 8, 2, st_, acc)
        wg = backward_window(m, 0, output_grad_window(m, st_, 6, 2), 6, 2, st_, acc)
        assert wg.dq.shape == (2, 16) and wg.dk.shape == (6, 16) and wg.dv.shape == (6, 16)

    def test_out_of_order(self):
        m = TinyModel.random(1, 16, 64, rank=2, max_len=8, seed=0)
        t = toks(8)
        st_ = new_state(m, t)
        forward_window(m, t, 0, st_)
        acc = KvGradAccumulator(1, 8, 16)
        with pytest.raises(OrderingViolation):
            backward_window(m, 0, output_grad_window(m, st_, 4, 2), 4, 2, st_, acc)

    def test_single_backward_window_exact(self, model):
        t = toks(16)
        loss, acts = forward_full(model, t)
        g = backward_full(model, acts)
        rep = compare_to_oracle(model, t, [16], [16], oracle=(loss, g))
        assert rep.max_err <= 1e-12 and rep.shapes_ok

    def test_sweep_L16(self, model):
        t = toks(16)
        loss, acts = forward_full(model, t)
        oracle = (loss, backward_full(model, acts))
        rng = np.random.default_rng(0)
        for s in (1, 2, 4, 8, 16):
            p = uniform_partition(16, s)
            assert compare_to_oracle(model, t, p, p, oracle=oracle).max_err <= 1e-10
        for _ in range(50):
            fwd = random_partition(16, rng)
            bwd = [random_partition(16, rng) for _ in range(model.depth)]
            rep = compare_to_oracle(model, t, fwd, bwd, oracle=oracle)
            assert rep.max_err <= 1e-10 and rep.shapes_ok

    def test_no_frozen_grad_buffers(self, model):
        model.audit.allocated.clear()
        finetune_token_level(model, toks(8), [3, 5], [4, 4])
        names = set(model.audit.allocated)
        assert names and not names & model.frozen_names()
        assert all(n.endswith((".A", ".B")) for n in names)


class TestGenerativeLoss:
    def test_window_sum(self, model):
        t = toks(4)
        _, acts = forward_full(model, t)
        full = generative_loss(acts.logits, acts.targets)
        parts = generative_loss(acts.logits[:2], acts.targets[:2]) + \
            generative_loss(acts.logits[2:], acts.targets[2:])
        assert parts == pytest.approx(full, rel=1e-15)

    def test_last_position_contributes_nothing(self):
        assert generative_loss(np.zeros((1, 8)), np.array([-1])) == 0.0

    def test_uniform_logits(self):
        assert generative_loss(np.zeros((1, 64)), np.array([3])) == pytest.approx(math.log(64), rel=1e-15)


@given(st.integers(4, 24), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_equivalence_property(L, seed):
    m = TinyModel.random(2, 8, 32, heads=2, rank=2, max_len=24, seed=seed % 7)
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 32, L)
    fwd = random_partition(L, rng)
    bwd = [random_partition(L, rng) for _ in range(2)]
    rep = compare_to_oracle(m, t, fwd, bwd)
    assert rep.max_err <= 1e-10 and rep.shapes_ok


def test_lora_on_every_projection():
    m = TinyModel.random(1, 8, 16, rank=2, seed=0)
    assert set(m.lora[0]) == set(PROJECTIONS)
