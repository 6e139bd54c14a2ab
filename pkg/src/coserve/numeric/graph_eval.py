"""Numeric forward and vector-Jacobian products for PCG operators (f64).

Parallelization operators are identities at this level; sharded execution
lives in ``coserve.parallelize``.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..pcg import OpKind, OperatorNode, ParallelComputationGraph


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    if x.ndim != 2:
        return x
    t, h = x.shape
    return x.reshape(t, heads, h // heads).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    hd, t, d = x.shape
    return x.transpose(1, 0, 2).reshape(t, hd * d)


def _mm_operands(op: OperatorNode, a: np.ndarray, b: np.ndarray):
    heads = int(op.attrs.get("heads", 0))
    if heads:
        a, b = _split(a, heads), _split(b, heads)
    if op.attrs.get("transpose_b"):
        b = np.swapaxes(b, -1, -2)
    return a, b


def eval_op(op: OperatorNode, vals: list[np.ndarray]) -> list[np.ndarray]:
    k = op.kind
    if k is OpKind.MATMUL:
        a, b = _mm_operands(op, vals[0], vals[1])
        r = a @ b
        if op.attrs.get("merge_heads"):
            r = _merge(r)
        return [r]
    if k is OpKind.ADD:
        out = vals[0]
        for v in vals[1:]:
            out = out + v
        return [out]
    if k is OpKind.ELEM_MUL:
        return [vals[0] * vals[1]]
    if k is OpKind.RELU:
        return [np.maximum(vals[0], 0.0)]
    if k is OpKind.SOFTMAX:
        z = vals[0] - vals[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return [e / e.sum(axis=-1, keepdims=True)]
    if k is OpKind.EMBEDDING:
        return [vals[1][vals[0].astype(np.int64)]]
    if k is OpKind.PREFIX:
        z = np.zeros_like(vals[0])
        z[:len(vals[1])] = vals[1]
        return [z]
    # Identity and the parallelization operators are value-preserving
    return [vals[0]]


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


Getter = Callable[[str], np.ndarray]


def vjp(op: OperatorNode, idx: int, dy: np.ndarray, get: Getter,
        shapes: Mapping[str, tuple[int, ...]], get_mask: Getter | None = None) -> np.ndarray:
    """Gradient contribution to input ``idx`` of ``op``.

    ``get`` fetches forward tensors by id and is only called for the values
    the autodiff rule needs, so a restricted store exposes missing
    dependencies as errors.
    """
    k = op.kind
    x_id = op.inputs[idx]
    if k is OpKind.MATMUL:
        heads = int(op.attrs.get("heads", 0))
        tb = bool(op.attrs.get("transpose_b"))
        d = _split(dy, heads) if (heads and op.attrs.get("merge_heads")) else dy
        other = op.inputs[1 - idx]
        ov = get(other)
        if heads:
            ov = _split(ov, heads)
        if idx == 0:
            b = np.swapaxes(ov, -1, -2) if tb else ov
            g = d @ np.swapaxes(b, -1, -2)
        else:
            g = np.swapaxes(ov, -1, -2) @ d
            if tb:
                g = np.swapaxes(g, -1, -2)
        if heads and len(shapes[x_id]) == 2 and g.ndim == 3:
            g = _merge(g)
        return unbroadcast(g, shapes[x_id])
    if k is OpKind.ADD:
        return unbroadcast(dy, shapes[x_id])
    if k is OpKind.ELEM_MUL:
        return unbroadcast(dy * get(op.inputs[1 - idx]), shapes[x_id])
    if k is OpKind.RELU:
        mask = get_mask(x_id) if get_mask is not None else get(x_id) > 0
        return dy * mask
    if k is OpKind.SOFTMAX:
        y = get(op.outputs[0])
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    if k is OpKind.EMBEDDING:
        if idx != 1:
            raise ValueError("token ids are not differentiable")
        ids = get(op.inputs[0]).astype(np.int64)
        g = np.zeros(shapes[x_id])
        np.add.at(g, ids, dy)
        return g
    if k is OpKind.PREFIX:
        if idx != 1:
            raise ValueError("prefix output does not depend on its input values")
        return dy[:shapes[x_id][0]].copy()
    return dy


def forward(g: ParallelComputationGraph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every operator; ``inputs`` supplies graph inputs and weights."""
    vals = dict(inputs)
    for op in g.topo_order():
        outs = eval_op(op, [vals[t] for t in op.inputs])
        for t, v in zip(op.outputs, outs):
            vals[t] = v
    return vals


def shapes_of(g: ParallelComputationGraph) -> dict[str, tuple[int, ...]]:
    return {t: v.shape for t, v in g.tensors.items()}


def backward_all(g: ParallelComputationGraph, vals: Mapping[str, np.ndarray],
                 seed: np.ndarray) -> dict[str, np.ndarray]:
    """Unpruned reverse-mode gradients of every differentiable tensor."""
    shapes = shapes_of(g)
    grads: dict[str, np.ndarray] = {g.loss: seed}
    for op in reversed(g.topo_order()):
        if op.outputs[0] not in grads:
            continue
        dy = grads[op.outputs[0]]
        for i, t in enumerate(op.inputs):
            if (op.kind is OpKind.EMBEDDING and i == 0) or (op.kind is OpKind.PREFIX and i == 0):
                continue
            contrib = vjp(op, i, dy, vals.__getitem__, shapes)
            grads[t] = grads[t] + contrib if t in grads else contrib
    return grads
