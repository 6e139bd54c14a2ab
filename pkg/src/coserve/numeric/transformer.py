"""Tiny f64 transformer with LoRA bypasses.

Two execution paths over the same weights:

* ``forward_full`` / ``backward_full``: whole-sequence reference.
* ``forward_window`` / ``backward_window``: token-level finetuning. The
  forward pass consumes the sequence in windows and appends Q/K/V (and the
  attention probabilities) to a cache. The backward pass walks layers in
  reverse and, inside a layer, walks windows from the end of the sequence
  to the start. Each window contributes key/value gradients for every
  earlier position, so they are summed into a per-layer accumulator; the
  slice covering the current window is complete once it is reached.

Only LoRA parameters get gradient buffers. Frozen weights are read, never
differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROJECTIONS = ("q", "k", "v", "o", "up", "down")


class NumericError(ValueError):
    pass


class EmptySequence(NumericError):
    pass


class CacheDesync(NumericError):
    pass


class OrderingViolation(NumericError):
    pass


class GradAudit:
    """Records every gradient buffer that gets allocated."""

    def __init__(self):
        self.allocated: list[str] = []

    def zeros(self, name: str, shape) -> np.ndarray:
        self.allocated.append(name)
        return np.zeros(shape)


@dataclass
class TinyModel:
    depth: int
    hidden: int
    vocab: int
    heads: int
    ffn: int
    rank: int
    max_len: int
    lora_targets: tuple[str, ...]
    embed: np.ndarray
    pos: np.ndarray
    unembed: np.ndarray
    layers: list[dict[str, np.ndarray]]
    lora: list[dict[str, tuple[np.ndarray, np.ndarray]]]
    audit: GradAudit = field(default_factory=GradAudit)

    @classmethod
    def random(cls, depth: int = 2, hidden: int = 16, vocab: int = 64, *, heads: int = 1,
               ffn: int | None = None, rank: int = 2, max_len: int = 256,
               lora_targets: Sequence[str] = PROJECTIONS, seed: int = 0) -> "TinyModel":
        if hidden % heads:
            raise NumericError("hidden must be divisible by heads")
        bad = set(lora_targets) - set(PROJECTIONS)
        if bad:
            raise NumericError(f"unknown LoRA targets {sorted(bad)}")
        ffn = 2 * hidden if ffn is None else ffn
        rng = np.random.default_rng(seed)
        shapes = _proj_shapes(hidden, ffn)
        layers, lora = [], []
        for _ in range(depth):
            layers.append({p: rng.normal(0, 1 / np.sqrt(shapes[p][0]), shapes[p]) for p in PROJECTIONS})
            # B is non-zero so every LoRA parameter receives signal
            lora.append({p: (rng.normal(0, 1 / np.sqrt(shapes[p][0]), (shapes[p][0], rank)),
                             rng.normal(0, 0.5 / np.sqrt(rank), (rank, shapes[p][1])))
                         for p in lora_targets})
        return cls(depth, hidden, vocab, heads, ffn, rank, max_len, tuple(lora_targets),
                   rng.normal(0, 1, (vocab, hidden)), rng.normal(0, 0.5, (max_len, hidden)),
                   rng.normal(0, 1 / np.sqrt(hidden), (hidden, vocab)), layers, lora)

    def lora_params(self) -> dict[str, np.ndarray]:
        out = {}
        for n, layer in enumerate(self.lora):
            for p, (a, b) in layer.items():
                out[f"{n}.{p}.A"] = a
                out[f"{n}.{p}.B"] = b
        return out

    def frozen_names(self) -> set[str]:
        names = {"embed", "pos", "unembed"}
        names.update(f"{n}.{p}.W" for n in range(self.depth) for p in PROJECTIONS)
        return names

    def new_grads(self) -> dict[str, np.ndarray]:
        return {k: self.audit.zeros(k, v.shape) for k, v in self.lora_params().items()}


def _proj_shapes(h: int, f: int) -> dict[str, tuple[int, int]]:
    return {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h), "up": (h, f), "down": (f, h)}


# ---------------------------------------------------------------------------
# shared pieces


def _lin(m: TinyModel, n: int, p: str, x: np.ndarray, acts: dict):
    y = x @ m.layers[n][p]
    if p in m.lora[n]:
        a, b = m.lora[n][p]
        h = x @ a
        acts[f"{p}.h"] = h
        y = y + h @ b
    return y


def _lin_back(m: TinyModel, n: int, p: str, dy: np.ndarray, x: np.ndarray, h: np.ndarray | None,
              grads: dict):
    dx = dy @ m.layers[n][p].T
    if p in m.lora[n]:
        a, b = m.lora[n][p]
        dh = dy @ b.T
        grads[f"{n}.{p}.B"] += h.T @ dy
        grads[f"{n}.{p}.A"] += x.T @ dh
        dx = dx + dh @ a.T
    return dx


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, h = x.shape
    return x.reshape(s, heads, h // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, s, dh = x.shape
    return x.transpose(1, 0, 2).reshape(s, heads * dh)


def _causal_softmax(scores: np.ndarray, q_start: int) -> np.ndarray:
    """Row softmax over keys; query row i sits at absolute position q_start + i."""
    s, l = scores.shape[-2:]
    qpos = q_start + np.arange(s)[:, None]
    allowed = np.arange(l)[None, :] <= qpos
    z = np.where(allowed, scores, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def generative_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed next-token cross entropy; rows whose target is negative are skipped."""
    targets = np.asarray(targets)
    valid = targets >= 0
    if not valid.any():
        return 0.0
    z = logits[valid]
    mx = z.max(axis=-1, keepdims=True)
    lse = (mx + np.log(np.exp(z - mx).sum(axis=-1, keepdims=True)))[:, 0]
    return float(np.sum(lse - z[np.arange(len(z)), targets[valid]]))


def _dlogits(logits: np.ndarray, targets: np.ndarray, denom: int) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    valid = targets >= 0
    p[valid, targets[valid]] -= 1.0
    p[~valid] = 0.0
    return p / denom


def _targets(tokens: np.ndarray, targets) -> np.ndarray:
    if targets is not None:
        t = np.asarray(targets, dtype=np.int64)
        if t.shape != tokens.shape:
            raise NumericError("targets must align with tokens")
        return t
    t = np.full(len(tokens), -1, dtype=np.int64)
    t[:-1] = tokens[1:]
    return t


def _embed(m: TinyModel, tokens: np.ndarray, start: int) -> np.ndarray:
    if start + len(tokens) > m.max_len:
        raise NumericError(f"sequence longer than max_len={m.max_len}")
    return m.embed[tokens] + m.pos[start:start + len(tokens)]


# ---------------------------------------------------------------------------
# whole-sequence reference


@dataclass
class FullActivations:
    tokens: np.ndarray
    targets: np.ndarray
    layers: list[dict[str, np.ndarray]]
    logits: np.ndarray
    n_pred: int


def forward_full(m: TinyModel, tokens, targets=None) -> tuple[float, FullActivations]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise EmptySequence("cannot run an empty sequence")
    tgt = _targets(tokens, targets)
    L = len(tokens)
    scale = 1.0 / np.sqrt(m.hidden // m.heads)
    x = _embed(m, tokens, 0)
    acts_all = []
    for n in range(m.depth):
        acts = {"x": x}
        q = _lin(m, n, "q", x, acts)
        k = _lin(m, n, "k", x, acts)
        v = _lin(m, n, "v", x, acts)
        qh, kh, vh = (_split_heads(t, m.heads) for t in (q, k, v))
        probs = _causal_softmax(qh @ kh.transpose(0, 2, 1) * scale, 0)
        o = _merge_heads(probs @ vh)
        acts.update(q=q, k=k, v=v, P=probs, o=o)
        x1 = x + _lin(m, n, "o", o, acts)
        u = _lin(m, n, "up", x1, acts)
        g = np.maximum(u, 0.0)
        y = x1 + _lin(m, n, "down", g, acts)
        acts.update(x1=x1, u=u, g=g)
        acts_all.append(acts)
        x = y
    logits = x @ m.unembed
    n_pred = max(int((tgt >= 0).sum()), 1)
    loss = generative_loss(logits, tgt) / n_pred
    assert L == len(logits)
    return loss, FullActivations(tokens, tgt, acts_all, logits, n_pred)


@dataclass
class FullGrads:
    lora: dict[str, np.ndarray]
    dx: list[np.ndarray]  # gradient w.r.t. each layer's input
    dk: list[np.ndarray]
    dv: list[np.ndarray]
    dlogits: np.ndarray


def backward_full(m: TinyModel, acts: FullActivations) -> FullGrads:
    grads = m.new_grads()
    scale = 1.0 / np.sqrt(m.hidden // m.heads)
    dlog = _dlogits(acts.logits, acts.targets, acts.n_pred)
    dy = dlog @ m.unembed.T
    dxs, dks, dvs = [None] * m.depth, [None] * m.depth, [None] * m.depth
    for n in reversed(range(m.depth)):
        a = acts.layers[n]
        dx1 = dy.copy()
        dg = _lin_back(m, n, "down", dy, a["g"], a.get("down.h"), grads)
        du = dg * (a["u"] > 0)
        dx1 += _lin_back(m, n, "up", du, a["x1"], a.get("up.h"), grads)
        do = _lin_back(m, n, "o", dx1, a["o"], a.get("o.h"), grads)
        doh = _split_heads(do, m.heads)
        qh, kh, vh = (_split_heads(a[t], m.heads) for t in ("q", "k", "v"))
        P = a["P"]
        dP = doh @ vh.transpose(0, 2, 1)
        dvh = P.transpose(0, 2, 1) @ doh
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dq = _merge_heads(dS @ kh)
        dk = _merge_heads(dS.transpose(0, 2, 1) @ qh)
        dv = _merge_heads(dvh)
        dx = dx1.copy()
        dx += _lin_back(m, n, "q", dq, a["x"], a.get("q.h"), grads)
        dx += _lin_back(m, n, "k", dk, a["x"], a.get("k.h"), grads)
        dx += _lin_back(m, n, "v", dv, a["x"], a.get("v.h"), grads)
        dxs[n], dks[n], dvs[n] = dx, dk, dv
        dy = dx
    return FullGrads(grads, dxs, dks, dvs, dlog)


# ---------------------------------------------------------------------------
# token-level path


class QkvCache:
    """Per-layer Q/K/V rows for every processed position."""

    def __init__(self, depth: int, capacity: int, hidden: int):
        self.q = [np.zeros((capacity, hidden)) for _ in range(depth)]
        self.k = [np.zeros((capacity, hidden)) for _ in range(depth)]
        self.v = [np.zeros((capacity, hidden)) for _ in range(depth)]
        self.lengths = [0] * depth

    def append(self, n: int, q, k, v):
        l = self.lengths[n]
        s = len(q)
        self.q[n][l:l + s], self.k[n][l:l + s], self.v[n][l:l + s] = q, k, v
        self.lengths[n] = l + s


class KvGradAccumulator:
    def __init__(self, depth: int, length: int, hidden: int):
        self.dk = [np.zeros((length, hidden)) for _ in range(depth)]
        self.dv = [np.zeros((length, hidden)) for _ in range(depth)]
        self.next_end = [length] * depth

    def add(self, n: int, dk: np.ndarray, dv: np.ndarray):
        l = len(dk)
        self.dk[n][:l] += dk
        self.dv[n][:l] += dv


@dataclass
class TokenLevelState:
    """Everything a finetuning sequence keeps between windows."""
    tokens: np.ndarray
    targets: np.ndarray
    cache: QkvCache
    probs: list[np.ndarray]  # [heads, L, L] attention probabilities, filled row-block by row-block
    acts: list[dict[str, np.ndarray]]  # per-position activations needed for backward
    logits: np.ndarray
    loss_sum: float = 0.0

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def n_pred(self) -> int:
        return max(int((self.targets >= 0).sum()), 1)


_ROW_ACTS = ("x", "o", "x1", "u", "g")


def new_state(m: TinyModel, tokens, targets=None) -> TokenLevelState:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise EmptySequence("cannot finetune an empty sequence")
    L = len(tokens)
    if L > m.max_len:
        raise NumericError(f"sequence longer than max_len={m.max_len}")
    h, f = m.hidden, m.ffn
    widths = {"x": h, "o": h, "x1": h, "u": f, "g": f}
    acts = []
    for n in range(m.depth):
        d = {k: np.zeros((L, w)) for k, w in widths.items()}
        for p in m.lora[n]:
            d[f"{p}.h"] = np.zeros((L, m.rank))
        acts.append(d)
    return TokenLevelState(tokens, _targets(tokens, targets), QkvCache(m.depth, L, h),
                           [np.zeros((m.heads, L, L)) for _ in range(m.depth)], acts,
                           np.zeros((L, m.vocab)))


def forward_window(m: TinyModel, window_tokens, l_i: int, state: TokenLevelState) -> np.ndarray:
    """Run positions ``[l_i, l_i + s)`` through every layer; returns their logits."""
    window_tokens = np.asarray(window_tokens, dtype=np.int64)
    s = len(window_tokens)
    if any(length != l_i for length in state.cache.lengths):
        raise CacheDesync(f"cache holds {state.cache.lengths} positions, window starts at {l_i}")
    if s == 0 or l_i + s > state.length:
        raise NumericError(f"window [{l_i}, {l_i + s}) outside sequence of {state.length}")
    scale = 1.0 / np.sqrt(m.hidden // m.heads)
    end = l_i + s
    x = _embed(m, window_tokens, l_i)
    for n in range(m.depth):
        store = state.acts[n]
        acts: dict = {}
        q = _lin(m, n, "q", x, acts)
        k = _lin(m, n, "k", x, acts)
        v = _lin(m, n, "v", x, acts)
        state.cache.append(n, q, k, v)
        kh = _split_heads(state.cache.k[n][:end], m.heads)
        vh = _split_heads(state.cache.v[n][:end], m.heads)
        probs = _causal_softmax(_split_heads(q, m.heads) @ kh.transpose(0, 2, 1) * scale, l_i)
        state.probs[n][:, l_i:end, :end] = probs
        o = _merge_heads(probs @ vh)
        x1 = x + _lin(m, n, "o", o, acts)
        u = _lin(m, n, "up", x1, acts)
        g = np.maximum(u, 0.0)
        y = x1 + _lin(m, n, "down", g, acts)
        for key, val in (("x", x), ("o", o), ("x1", x1), ("u", u), ("g", g)):
            store[key][l_i:end] = val
        for key, val in acts.items():
            store[key][l_i:end] = val
        x = y
    logits = x @ m.unembed
    state.logits[l_i:end] = logits
    state.loss_sum += generative_loss(logits, state.targets[l_i:end])
    return logits


@dataclass
class WindowGrads:
    dx: np.ndarray   # [s_j, h]
    dq: np.ndarray   # [s_j, h]
    dk: np.ndarray   # [l_j, h] contribution over positions [0, l_j)
    dv: np.ndarray   # [l_j, h]
    lora: dict[str, np.ndarray]


def output_grad_window(m: TinyModel, state: TokenLevelState, l_j: int, s_j: int) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the last layer's output rows ``[l_j - s_j, l_j)``."""
    a = l_j - s_j
    dlog = _dlogits(state.logits[a:l_j], state.targets[a:l_j], state.n_pred)
    return dlog @ m.unembed.T


def backward_window(m: TinyModel, n: int, dy: np.ndarray, l_j: int, s_j: int,
                    state: TokenLevelState, accum: KvGradAccumulator,
                    grads: dict[str, np.ndarray] | None = None) -> WindowGrads:
    """Backward of layer ``n`` for positions ``[l_j - s_j, l_j)``.

    ``l_j`` is the window's end position: windows of a layer must arrive in
    strictly descending order, starting at the sequence end.
    """
    if accum.next_end[n] != l_j:
        raise OrderingViolation(f"layer {n}: expected window ending at {accum.next_end[n]}, got {l_j}")
    if not 0 < s_j <= l_j:
        raise OrderingViolation(f"layer {n}: window size {s_j} invalid at end {l_j}")
    if n + 1 < m.depth and accum.next_end[n + 1] != 0:
        raise OrderingViolation(f"layer {n} started before layer {n + 1} finished")
    a = l_j - s_j
    scale = 1.0 / np.sqrt(m.hidden // m.heads)
    st = state.acts[n]
    contrib = {k: m.audit.zeros(k, v.shape) for k, v in m.lora_params().items()
               if k.startswith(f"{n}.")}

    # position-wise part: MLP and output projection
    dx1 = dy.copy()
    dg = _lin_back(m, n, "down", dy, st["g"][a:l_j], _rows(st, "down.h", a, l_j), contrib)
    du = dg * (st["u"][a:l_j] > 0)
    dx1 += _lin_back(m, n, "up", du, st["x1"][a:l_j], _rows(st, "up.h", a, l_j), contrib)
    do = _lin_back(m, n, "o", dx1, st["o"][a:l_j], _rows(st, "o.h", a, l_j), contrib)

    # attention: this window's query rows see keys [0, l_j)
    cache = state.cache
    doh = _split_heads(do, m.heads)
    P = state.probs[n][:, a:l_j, :l_j]
    qh = _split_heads(cache.q[n][a:l_j], m.heads)
    kh = _split_heads(cache.k[n][:l_j], m.heads)
    vh = _split_heads(cache.v[n][:l_j], m.heads)
    dP = doh @ vh.transpose(0, 2, 1)
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dq = _merge_heads(dS @ kh)
    dk = _merge_heads(dS.transpose(0, 2, 1) @ qh)
    dv = _merge_heads(P.transpose(0, 2, 1) @ doh)
    accum.add(n, dk, dv)
    accum.next_end[n] = a

    # every query at or after position a has now contributed: slice is final
    gk = accum.dk[n][a:l_j]
    gv = accum.dv[n][a:l_j]
    x = st["x"][a:l_j]
    dx = dx1.copy()
    dx += _lin_back(m, n, "q", dq, x, _rows(st, "q.h", a, l_j), contrib)
    dx += _lin_back(m, n, "k", gk, x, _rows(st, "k.h", a, l_j), contrib)
    dx += _lin_back(m, n, "v", gv, x, _rows(st, "v.h", a, l_j), contrib)
    if grads is not None:
        for k, v in contrib.items():
            grads[k] += v
    return WindowGrads(dx, dq, dk, dv, contrib)


def _rows(store: dict, key: str, a: int, b: int):
    return store[key][a:b] if key in store else None


# ---------------------------------------------------------------------------
# drivers


@dataclass
class TokenLevelResult:
    loss: float
    grads: dict[str, np.ndarray]
    accum: KvGradAccumulator
    window_log: list[tuple]  # (phase, layer, l, s, dq shape, dk shape, dv shape)


WindowSource = Callable[[int, int], int]


def _as_source(windows) -> WindowSource:
    if callable(windows):
        return windows
    it = iter(windows)
    return lambda l, remaining: next(it)


def finetune_token_level(m: TinyModel, tokens, forward_windows, backward_windows,
                         targets=None) -> TokenLevelResult:
    """Token-level forward then layer-wise reverse backward.

    ``forward_windows`` is a sequence of window sizes (or a callable
    ``(l, remaining) -> s``). ``backward_windows`` is either a callable with
    the same signature, a single sequence reused for every layer, or a list
    with one sequence per layer (index 0 = last layer processed first).
    """
    state = new_state(m, tokens, targets)
    L = state.length
    fsrc = _as_source(forward_windows)
    l = 0
    while l < L:
        s = min(int(fsrc(l, L - l)), L - l)
        if s <= 0:
            raise NumericError("window size must be positive")
        forward_window(m, state.tokens[l:l + s], l, state)
        l += s
    loss = state.loss_sum / state.n_pred

    per_layer = None
    if not callable(backward_windows):
        bw = list(backward_windows)
        if bw and isinstance(bw[0], (list, tuple)):
            per_layer = [list(x) for x in bw]
        else:
            per_layer = [bw] * m.depth
    grads = m.new_grads()
    accum = KvGradAccumulator(m.depth, L, m.hidden)
    log = []
    dY = np.zeros((L, m.hidden))
    for idx, n in enumerate(reversed(range(m.depth))):
        src = backward_windows if per_layer is None else _as_source(per_layer[idx])
        dX = np.zeros((L, m.hidden))
        lj = L
        while lj > 0:
            s = min(int(src(lj, lj)), lj)
            if s <= 0:
                raise NumericError("window size must be positive")
            dy = output_grad_window(m, state, lj, s) if n == m.depth - 1 else dY[lj - s:lj]
            wg = backward_window(m, n, dy, lj, s, state, accum, grads)
            log.append(("backward", n, lj, s, wg.dq.shape, wg.dk.shape, wg.dv.shape))
            dX[lj - s:lj] = wg.dx
            lj -= s
        dY = dX
    return TokenLevelResult(loss, grads, accum, log)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: dict,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update; ``opt`` carries the moments and step count."""
    t = opt["t"] = opt.get("t", 0) + 1
    for k, g in grads.items():
        m1 = opt.setdefault(("m", k), np.zeros_like(g))
        m2 = opt.setdefault(("v", k), np.zeros_like(g))
        m1 *= betas[0]
        m1 += (1 - betas[0]) * g
        m2 *= betas[1]
        m2 += (1 - betas[1]) * g * g
        mhat = m1 / (1 - betas[0] ** t)
        vhat = m2 / (1 - betas[1] ** t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# verification


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by max |b|."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    return float(diff / denom) if denom > 0 else float(diff)


def random_partition(L: int, rng: np.random.Generator) -> list[int]:
    cuts = np.flatnonzero(rng.random(L - 1) < rng.uniform(0.1, 0.9)) + 1
    bounds = [0, *cuts.tolist(), L]
    return [b - a for a, b in zip(bounds, bounds[1:])]


def uniform_partition(L: int, s: int) -> list[int]:
    out = [s] * (L // s)
    if L % s:
        out.append(L % s)
    return out


@dataclass
class EquivalenceReport:
    label: str
    loss_err: float
    grad_err: float
    kv_err: float
    shapes_ok: bool

    @property
    def max_err(self) -> float:
        return max(self.loss_err, self.grad_err, self.kv_err)


def compare_to_oracle(m: TinyModel, tokens, fwd, bwd, label: str = "",
                      oracle: tuple | None = None) -> EquivalenceReport:
    if oracle is None:
        loss, acts = forward_full(m, tokens)
        oracle = (loss, backward_full(m, acts))
    o_loss, o_grads = oracle
    res = finetune_token_level(m, tokens, fwd, bwd)
    gerr = max(rel_err(res.grads[k], o_grads.lora[k]) for k in o_grads.lora)
    kverr = max(max(rel_err(res.accum.dk[n], o_grads.dk[n]), rel_err(res.accum.dv[n], o_grads.dv[n]))
                for n in range(m.depth))
    h = m.hidden
    shapes_ok = all(dq == (s, h) and dk == (l, h) and dv == (l, h)
                    for _, _, l, s, dq, dk, dv in res.window_log)
    return EquivalenceReport(label, rel_err(res.loss, o_loss), gerr, kverr, shapes_ok)


def verify_equivalence(depth: int = 2, hidden: int = 16, seqlen: int = 32, rank: int = 2,
                       vocab: int = 64, trials: int = 50, seed: int = 0,
                       heads: int = 1) -> list[EquivalenceReport]:
    """Uniform window sizes (powers of two up to seqlen) plus random partitions."""
    m = TinyModel.random(depth, hidden, vocab, heads=heads, rank=rank,
                         max_len=max(seqlen, 1), seed=seed)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, vocab, seqlen)
    loss, acts = forward_full(m, tokens)
    oracle = (loss, backward_full(m, acts))
    reports = []
    sizes = sorted({1 << i for i in range(seqlen.bit_length()) if (1 << i) <= seqlen} | {seqlen})
    for s in sizes:
        part_ = uniform_partition(seqlen, s)
        reports.append(compare_to_oracle(m, tokens, part_, part_, f"uniform-{s}", oracle))
    for t in range(trials):
        fwd = random_partition(seqlen, rng)
        bwd = [random_partition(seqlen, rng) for _ in range(depth)]
        reports.append(compare_to_oracle(m, tokens, fwd, bwd, f"random-{t}", oracle))
    return reports


def iter_lora_keys(m: TinyModel) -> Iterable[str]:
    return m.lora_params().keys()
