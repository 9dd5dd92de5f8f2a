#!/usr/bin/env python3
"""
numkit - dense float64 numerics with reverse-mode differentiation.

A ComputeGraph records operator nodes over a small fixed operator set
(matrix product, bias add, activations, layer norm with affine scale/shift,
softmax, clamped log, reductions, elementwise arithmetic). Nodes are appended
in creation order, which is always a valid topological order.

    graph = ComputeGraph()
    x = graph.input("x")
    w = graph.input("w")
    graph.set_output(graph.sum(graph.mul(x, w)))
    graph.evaluate({"x": ..., "w": ...})
    grads = graph.gradient(ParamSet({"w": ...}, adaptable=["w"]))
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
NORM_EPS = 1e-5

ACTIVATIONS = ("relu", "tanh")


class NumkitError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(NumkitError):
    """Operand shapes are inconsistent for the operator of a node."""

    def __init__(self, node_id: int, op: str, message: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"node {node_id} ({op}): {message}")


class GraphError(NumkitError):
    """Graph misuse: unbound input, missing output, stale forward pass."""


class NonDifferentiableError(NumkitError):
    """A non-differentiable node lies on a gradient path to an adaptable parameter."""


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    value: Optional[np.ndarray] = None


class ParamSet:
    """Named parameter tensors partitioned into frozen and adaptable."""

    def __init__(self, tensors: Dict[str, np.ndarray], adaptable: Iterable[str] = ()):
        self.tensors = tensors
        adaptable = frozenset(adaptable)
        unknown = adaptable - set(tensors)
        if unknown:
            raise KeyError(f"adaptable names not in parameter set: {sorted(unknown)}")
        self._adaptable = adaptable

    def is_adaptable(self, name: str) -> bool:
        return name in self._adaptable

    @property
    def adaptable_names(self) -> List[str]:
        return [name for name in self.tensors if name in self._adaptable]

    @property
    def frozen_names(self) -> List[str]:
        return [name for name in self.tensors if name not in self._adaptable]

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


# -----------------------------------------------------------------------------
# Operator kernels: forward(node_id, values, attrs) and
# backward(grad, values, out, attrs) -> one gradient per input (None = no flow)
# -----------------------------------------------------------------------------


def _require(cond: bool, node_id: int, op: str, message: str):
    if not cond:
        raise ShapeError(node_id, op, message)


def _matmul_fwd(nid, vals, attrs):
    x, w = vals
    _require(w.ndim == 2, nid, "matmul", f"weight must be 2-D, got shape {w.shape}")
    _require(x.ndim in (1, 2), nid, "matmul", f"input must be 1-D or 2-D, got shape {x.shape}")
    _require(x.shape[-1] == w.shape[1], nid, "matmul",
             f"input width {x.shape[-1]} does not match weight columns {w.shape[1]}")
    return x @ w.T


def _matmul_bwd(g, vals, out, attrs):
    x, w = vals
    grad_x = g @ w
    grad_w = np.outer(g, x) if x.ndim == 1 else g.T @ x
    return [grad_x, grad_w]


def _bias_add_fwd(nid, vals, attrs):
    x, b = vals
    _require(b.ndim == 1 and b.shape[0] == x.shape[-1], nid, "bias_add",
             f"bias shape {b.shape} does not match input width {x.shape[-1]}")
    return x + b


def _bias_add_bwd(g, vals, out, attrs):
    return [g, g.sum(axis=0) if g.ndim == 2 else g]


def _relu_fwd(nid, vals, attrs):
    return np.maximum(vals[0], 0.0)


def _relu_bwd(g, vals, out, attrs):
    return [g * (vals[0] > 0.0)]


def _tanh_fwd(nid, vals, attrs):
    return np.tanh(vals[0])


def _tanh_bwd(g, vals, out, attrs):
    return [g * (1.0 - out * out)]


def _layer_norm_stats(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    return (x - mu) * inv_std, inv_std


def _layer_norm_fwd(nid, vals, attrs):
    x, scale, shift = vals
    width = x.shape[-1]
    _require(scale.shape == (width,) and shift.shape == (width,), nid, "layer_norm",
             f"scale {scale.shape} / shift {shift.shape} do not match width {width}")
    xhat, _ = _layer_norm_stats(x)
    return xhat * scale + shift


def _layer_norm_bwd(g, vals, out, attrs):
    x, scale, _ = vals
    xhat, inv_std = _layer_norm_stats(x)
    g_xhat = g * scale
    grad_x = inv_std * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    if g.ndim == 2:
        return [grad_x, (g * xhat).sum(axis=0), g.sum(axis=0)]
    return [grad_x, g * xhat, g]


def _softmax_fwd(nid, vals, attrs):
    z = vals[0]
    exps = np.exp(z - z.max(axis=-1, keepdims=True))
    return exps / exps.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, vals, out, attrs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_fwd(nid, vals, attrs):
    return np.log(np.maximum(vals[0], LOG_EPS))


def _log_bwd(g, vals, out, attrs):
    x = vals[0]
    live = x > LOG_EPS
    return [np.where(live, g / np.where(live, x, 1.0), 0.0)]


def _same_shape(nid, op, a, b):
    _require(a.shape == b.shape, nid, op, f"operand shapes differ: {a.shape} vs {b.shape}")


def _add_fwd(nid, vals, attrs):
    _same_shape(nid, "add", *vals)
    return vals[0] + vals[1]


def _add_bwd(g, vals, out, attrs):
    return [g, g]


def _sub_fwd(nid, vals, attrs):
    _same_shape(nid, "sub", *vals)
    return vals[0] - vals[1]


def _sub_bwd(g, vals, out, attrs):
    return [g, -g]


def _mul_fwd(nid, vals, attrs):
    _same_shape(nid, "mul", *vals)
    return vals[0] * vals[1]


def _mul_bwd(g, vals, out, attrs):
    return [g * vals[1], g * vals[0]]


def _scale_fwd(nid, vals, attrs):
    return attrs["factor"] * vals[0]


def _scale_bwd(g, vals, out, attrs):
    return [attrs["factor"] * g]


def _reduce_axis(nid, op, x, axis):
    _require(axis is None or x.ndim >= 1, nid, op, "cannot reduce a scalar along an axis")
    if axis == 0:
        _require(x.ndim == 2, nid, op, f"axis 0 reduction needs a 2-D input, got {x.shape}")


def _sum_fwd(nid, vals, attrs):
    axis = attrs["axis"]
    _reduce_axis(nid, "sum", vals[0], axis)
    return np.asarray(vals[0].sum(axis=axis), dtype=np.float64)


def _sum_bwd(g, vals, out, attrs):
    x = vals[0]
    axis = attrs["axis"]
    if axis is None:
        return [np.full(x.shape, float(g))]
    return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]


def _mean_fwd(nid, vals, attrs):
    axis = attrs["axis"]
    _reduce_axis(nid, "mean", vals[0], axis)
    return np.asarray(vals[0].mean(axis=axis), dtype=np.float64)


def _mean_bwd(g, vals, out, attrs):
    x = vals[0]
    axis = attrs["axis"]
    count = x.size if axis is None else x.shape[axis]
    grad = _sum_bwd(g, vals, out, attrs)[0]
    return [grad / count]


def _concat_fwd(nid, vals, attrs):
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        _require(v.shape[:-1] == lead, nid, "concat",
                 f"leading shapes differ: {lead} vs {v.shape[:-1]}")
    return np.concatenate(vals, axis=-1)


def _concat_bwd(g, vals, out, attrs):
    grads = []
    start = 0
    for v in vals:
        width = v.shape[-1]
        grads.append(g[..., start:start + width])
        start += width
    return grads


def _zeros_like_fwd(nid, vals, attrs):
    return np.zeros_like(vals[0])


def _no_flow_bwd(g, vals, out, attrs):
    return [None] * len(vals)


def _stop_gradient_fwd(nid, vals, attrs):
    return vals[0].copy()


def _argmax_onehot_fwd(nid, vals, attrs):
    z = vals[0]
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, np.expand_dims(z.argmax(axis=-1), -1), 1.0, axis=-1)
    return onehot


@dataclass(frozen=True)
class OpSpec:
    forward: Callable
    backward: Optional[Callable]
    differentiable: bool = True


OPS: Dict[str, OpSpec] = {
    "matmul": OpSpec(_matmul_fwd, _matmul_bwd),
    "bias_add": OpSpec(_bias_add_fwd, _bias_add_bwd),
    "relu": OpSpec(_relu_fwd, _relu_bwd),
    "tanh": OpSpec(_tanh_fwd, _tanh_bwd),
    "layer_norm": OpSpec(_layer_norm_fwd, _layer_norm_bwd),
    "softmax": OpSpec(_softmax_fwd, _softmax_bwd),
    "log": OpSpec(_log_fwd, _log_bwd),
    "add": OpSpec(_add_fwd, _add_bwd),
    "sub": OpSpec(_sub_fwd, _sub_bwd),
    "mul": OpSpec(_mul_fwd, _mul_bwd),
    "scale": OpSpec(_scale_fwd, _scale_bwd),
    "sum": OpSpec(_sum_fwd, _sum_bwd),
    "mean": OpSpec(_mean_fwd, _mean_bwd),
    "concat": OpSpec(_concat_fwd, _concat_bwd),
    # constant-valued with respect to their inputs
    "zeros_like": OpSpec(_zeros_like_fwd, _no_flow_bwd),
    "stop_gradient": OpSpec(_stop_gradient_fwd, _no_flow_bwd),
    "argmax_onehot": OpSpec(_argmax_onehot_fwd, None, differentiable=False),
}


class ComputeGraph:
    """Define-then-run trace over the operator set in OPS."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.output: Optional[int] = None
        self._inputs: Dict[str, int] = {}

    # -- construction -------------------------------------------------------

    def _add(self, op: str, inputs: Tuple[int, ...] = (), **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input node {i} does not exist yet")
        self.nodes.append(Node(op, tuple(inputs), attrs))
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        """Free input bound at evaluation time; one node per name."""
        if name not in self._inputs:
            self._inputs[name] = self._add("input", name=name)
        return self._inputs[name]

    def constant(self, value) -> int:
        return self._add("constant", value=np.array(value, dtype=np.float64))

    def matmul(self, x: int, w: int) -> int:
        return self._add("matmul", (x, w))

    def bias_add(self, x: int, b: int) -> int:
        return self._add("bias_add", (x, b))

    def activation(self, x: int, kind: str) -> int:
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
        return self._add(kind, (x,))

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def tanh(self, x: int) -> int:
        return self._add("tanh", (x,))

    def layer_norm(self, x: int, scale: int, shift: int) -> int:
        return self._add("layer_norm", (x, scale, shift))

    def softmax(self, x: int) -> int:
        return self._add("softmax", (x,))

    def log(self, x: int) -> int:
        return self._add("log", (x,))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._add("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def scale(self, x: int, factor: float) -> int:
        return self._add("scale", (x,), factor=float(factor))

    def sum(self, x: int, axis: Optional[int] = None) -> int:
        if axis not in (None, 0, -1):
            raise ValueError(f"sum supports axis None, 0 or -1, got {axis}")
        return self._add("sum", (x,), axis=axis)

    def mean(self, x: int, axis: Optional[int] = None) -> int:
        if axis not in (None, 0, -1):
            raise ValueError(f"mean supports axis None, 0 or -1, got {axis}")
        return self._add("mean", (x,), axis=axis)

    def concat(self, *parts: int) -> int:
        if len(parts) < 2:
            raise GraphError("concat needs at least two inputs")
        return self._add("concat", tuple(parts))

    def zeros_like(self, x: int) -> int:
        return self._add("zeros_like", (x,))

    def stop_gradient(self, x: int) -> int:
        return self._add("stop_gradient", (x,))

    def argmax_onehot(self, x: int) -> int:
        return self._add("argmax_onehot", (x,))

    def set_output(self, node_id: int) -> int:
        if not 0 <= node_id < len(self.nodes):
            raise GraphError(f"output node {node_id} does not exist")
        self.output = node_id
        return node_id

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, bindings: Dict[str, Any]) -> np.ndarray:
        """Forward pass over every node; returns a copy of the output value."""
        if self.output is None:
            raise GraphError("graph has no designated output")
        for node_id, node in enumerate(self.nodes):
            if node.op == "input":
                name = node.attrs["name"]
                if name not in bindings:
                    raise GraphError(f"node {node_id}: input {name!r} is not bound")
                node.value = np.array(bindings[name], dtype=np.float64)
            elif node.op == "constant":
                node.value = node.attrs["value"]
            else:
                vals = [self.nodes[i].value for i in node.inputs]
                node.value = OPS[node.op].forward(node_id, vals, node.attrs)
        return self.nodes[self.output].value.copy()

    def value(self, node_id: int) -> np.ndarray:
        value = self.nodes[node_id].value
        if value is None:
            raise GraphError(f"node {node_id} has not been evaluated")
        return value

    def _depends_on(self, names: Iterable[str]) -> List[bool]:
        names = set(names)
        depends = []
        for node in self.nodes:
            if node.op == "input":
                depends.append(node.attrs["name"] in names)
            else:
                depends.append(any(depends[i] for i in node.inputs))
        return depends

    def gradient(self, wrt: ParamSet) -> Dict[str, np.ndarray]:
        """Reverse pass: d(output)/d(p) for every adaptable p in wrt."""
        if self.output is None:
            raise GraphError("graph has no designated output")
        if any(node.value is None for node in self.nodes):
            raise GraphError("forward pass has not been evaluated")
        out = self.nodes[self.output].value
        if out.ndim != 0:
            raise GraphError(f"gradient needs a scalar output, got shape {out.shape}")

        targets = wrt.adaptable_names
        depends = self._depends_on(targets)
        grads: Dict[int, np.ndarray] = {self.output: np.ones((), dtype=np.float64)}

        for node_id in range(self.output, -1, -1):
            g = grads.pop(node_id, None)
            node = self.nodes[node_id]
            if g is None or not depends[node_id]:
                if node.op == "input" and g is not None:
                    grads[node_id] = g
                continue
            if node.op == "input":
                grads[node_id] = g
                continue
            spec = OPS[node.op]
            if not spec.differentiable:
                raise NonDifferentiableError(
                    f"node {node_id} ({node.op}) is not differentiable but feeds an adaptable parameter")
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, spec.backward(g, vals, node.value, node.attrs)):
                if gi is None or not depends[i]:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi

        result = {}
        for name in targets:
            node_id = self._inputs.get(name)
            if node_id is not None and node_id in grads:
                result[name] = np.array(grads[node_id], dtype=np.float64).reshape(wrt.tensors[name].shape)
            else:
                result[name] = np.zeros_like(wrt.tensors[name], dtype=np.float64)
        return result


def evaluate(graph: ComputeGraph, bindings: Dict[str, Any]) -> np.ndarray:
    return graph.evaluate(bindings)


def gradient(graph: ComputeGraph, wrt: ParamSet) -> Dict[str, np.ndarray]:
    return graph.gradient(wrt)


def finite_diff_gradient(function: Callable[[np.ndarray], float], at, step: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient, one coordinate at a time."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    point = np.array(at, dtype=np.float64)
    grad = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        original = point[index]
        point[index] = original + step
        upper = float(function(point.copy()))
        point[index] = original - step
        lower = float(function(point.copy()))
        point[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
