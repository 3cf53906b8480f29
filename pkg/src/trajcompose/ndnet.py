"""Small static-graph neural network core on NumPy.

Graphs are built once (denoiser and encoder architectures do not change
between batches) and evaluated many times. ``Graph.forward`` caches every
node value so that ``Graph.backward`` can run reverse accumulation from a
scalar loss node. Parameters live outside the graph in a ``ParamSet`` so
that one set of weights can feed several graphs (training graph, encoder
graph, denoiser graph).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

BATCH = None  # symbolic leading dimension in static shapes

ACTIVATIONS = ("silu", "relu", "tanh")
REDUCTIONS = ("mean", "max")


class ShapeError(ValueError):
    """Raised when an array does not match the static shape of a graph node."""

    def __init__(self, node: str, expected, got):
        super().__init__(f"node {node!r}: expected shape {expected}, got {got}")
        self.node = node


class NonFiniteError(FloatingPointError):
    """Raised when NaN or inf shows up in a loss or gradient."""


class FrozenError(RuntimeError):
    pass


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class ParamSet:
    """Named parameter tensors.

    Each tensor is initialized from its own stream keyed on ``(seed, name)``,
    so two ParamSets built from the same seed and specs are identical
    regardless of registration order.
    """

    def __init__(self, specs: Mapping[str, tuple[tuple[int, ...], str]], seed: int = 0,
                 dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, np.ndarray] = {}
        self.frozen = False
        for name, (shape, init) in specs.items():
            self.tensors[name] = _init_tensor(shape, init, _tensor_rng(self.seed, name)).astype(self.dtype)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], seed: int = 0, dtype=np.float32) -> "ParamSet":
        ps = cls({}, seed=seed, dtype=dtype)
        for name, arr in arrays.items():
            ps.tensors[name] = np.array(arr, dtype=ps.dtype)
        return ps

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def freeze(self) -> None:
        for v in self.tensors.values():
            v.setflags(write=False)
        self.frozen = True

    def copy(self, dtype=None) -> "ParamSet":
        return ParamSet.from_arrays({k: v.copy() for k, v in self.tensors.items()},
                                    seed=self.seed, dtype=dtype or self.dtype)

    def assert_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"parameter {k!r} has non-finite entries")


def _init_tensor(shape, init: str, rng: np.random.Generator) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "fan_in":
        bound = 1.0 / math.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)
    if init == "normal":
        return rng.normal(0.0, 1.0, size=shape)
    raise ValueError(f"unknown initializer {init!r}")


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple
    attrs: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.attrs.get("name", f"{self.op}#{self.id}")


class Graph:
    """Static computation graph.

    Nodes are appended in construction order, which is also a valid
    topological order: every op only accepts already-existing node ids.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}
        self.param_specs: dict[str, tuple[tuple[int, ...], str]] = {}
        self.outputs: dict[str, int] = {}
        self.values: dict[int, np.ndarray] = {}
        self.grads: dict[int, np.ndarray] = {}

    # -- construction -------------------------------------------------------------------

    def _add(self, op: str, inputs: Iterable[int], shape, **attrs) -> int:
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input id {i} does not precede this node")
        node = Node(len(self.nodes), op, inputs, tuple(shape), attrs)
        self.nodes.append(node)
        return node.id

    def shape(self, node_id: int) -> tuple:
        return self.nodes[node_id].shape

    def input(self, name: str, shape: tuple) -> int:
        """Declare an input; leading ``None`` marks the batch axis."""
        if name in self.input_ids:
            raise ValueError(f"duplicate input {name!r}")
        nid = self._add("input", (), shape, name=name)
        self.input_ids[name] = nid
        return nid

    def param(self, name: str, shape: tuple[int, ...], init: str = "fan_in") -> int:
        shape = tuple(int(s) for s in shape)
        prev = self.param_specs.get(name)
        if prev is not None and prev[0] != shape:
            raise ValueError(f"param {name!r} re-declared with shape {shape}, was {prev[0]}")
        self.param_specs[name] = (shape, init)
        return self._add("param", (), shape, name=name)

    def linear(self, x: int, out_dim: int, name: str, bias: bool = True) -> int:
        xs = self.shape(x)
        w = self.param(f"{name}.w", (xs[-1], out_dim), "fan_in")
        ins = [x, w]
        if bias:
            ins.append(self.param(f"{name}.b", (out_dim,), "zeros"))
        return self._add("linear", ins, xs[:-1] + (out_dim,), name=name)

    def act(self, x: int, kind: str) -> int:
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        return self._add("act", (x,), self.shape(x), kind=kind)

    def concat(self, xs: list[int]) -> int:
        """Concatenate along the last axis."""
        shapes = [self.shape(i) for i in xs]
        lead = shapes[0][:-1]
        for s in shapes[1:]:
            if s[:-1] != lead:
                raise ValueError(f"concat: leading shapes differ {shapes}")
        return self._add("concat", xs, lead + (sum(s[-1] for s in shapes),))

    def reduce(self, x: int, kind: str, axis: int = 1, mask: int | None = None) -> int:
        """Mean or max over a set axis; ``mask`` (same shape minus features) marks valid members."""
        if kind not in REDUCTIONS:
            raise ValueError(f"unknown reduction {kind!r}")
        xs = self.shape(x)
        if axis < 0:
            axis += len(xs)
        if not 0 < axis < len(xs) - 1:
            raise ValueError("reduce axis must be an inner set axis")
        ins = [x] if mask is None else [x, mask]
        if mask is not None and self.shape(mask) != xs[:-1]:
            raise ValueError(f"reduce mask shape {self.shape(mask)} != {xs[:-1]}")
        return self._add("reduce", ins, xs[:axis] + xs[axis + 1:], kind=kind, axis=axis)

    def sinusoidal(self, t: int, dim: int) -> int:
        if dim % 2 or dim < 4:
            raise ValueError("sinusoidal dim must be even and >= 4")
        ts = self.shape(t)
        return self._add("sinusoidal", (t,), ts + (dim,), dim=dim)

    def mse(self, pred: int, target: int) -> int:
        if self.shape(pred) != self.shape(target):
            raise ValueError(f"mse: {self.shape(pred)} vs {self.shape(target)}")
        return self._add("mse", (pred, target), ())

    def output(self, name: str, node_id: int) -> int:
        self.outputs[name] = node_id
        return node_id

    def output_shapes(self) -> dict[str, tuple]:
        return {k: self.shape(v) for k, v in self.outputs.items()}

    # -- evaluation ---------------------------------------------------------------------

    def _check_input(self, node: Node, arr: np.ndarray) -> None:
        exp = node.shape
        if arr.ndim != len(exp) or any(e is not None and e != g for e, g in zip(exp, arr.shape)):
            raise ShapeError(node.label, exp, arr.shape)

    def forward(self, params: ParamSet, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        dtype = params.dtype
        vals: dict[int, np.ndarray] = {}
        batch = None
        for node in self.nodes:
            op = node.op
            if op == "input":
                name = node.attrs["name"]
                if name not in inputs:
                    raise ShapeError(name, node.shape, "missing")
                arr = np.asarray(inputs[name])
                self._check_input(node, arr)
                if node.shape and node.shape[0] is None:
                    if batch is None:
                        batch = arr.shape[0]
                    elif arr.shape[0] != batch:
                        raise ShapeError(name, (batch,) + node.shape[1:], arr.shape)
                vals[node.id] = arr.astype(dtype, copy=False)
            elif op == "param":
                name = node.attrs["name"]
                arr = params.tensors.get(name)
                if arr is None:
                    raise KeyError(f"parameter {name!r} missing from ParamSet")
                if arr.shape != node.shape:
                    raise ShapeError(name, node.shape, arr.shape)
                vals[node.id] = arr
            else:
                vals[node.id] = _FORWARD[op](node, [vals[i] for i in node.inputs])
        self.values = vals
        self.grads = {}
        return {k: vals[v] for k, v in self.outputs.items()}

    def backward(self, loss: int, wrt_inputs: bool = False) -> dict[str, np.ndarray]:
        """Reverse accumulation from a scalar node; returns gradients per parameter name.

        Input gradients (see ``input_grad``) are only formed when ``wrt_inputs`` is set.
        """
        if not self.values:
            raise RuntimeError("backward called before forward")
        if self.nodes[loss].shape != ():
            raise ValueError(f"loss node {self.nodes[loss].label} is not scalar")
        needs = [False] * len(self.nodes)
        for node in self.nodes:
            if node.op == "param" or (node.op == "input" and wrt_inputs):
                needs[node.id] = True
            elif node.inputs:
                needs[node.id] = any(needs[i] for i in node.inputs)
        grads: dict[int, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: loss + 1]):
            g = grads.get(node.id)
            if g is None or node.op in ("input", "param"):
                continue
            ins = [self.values[i] for i in node.inputs]
            need = [needs[i] for i in node.inputs]
            for i, gi, ni in zip(node.inputs, _BACKWARD[node.op](node, ins, self.values[node.id], g, need), need):
                if gi is None or not ni:
                    continue
                grads[i] = gi if i not in grads else grads[i] + gi
        self.grads = grads
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node.op != "param":
                continue
            name = node.attrs["name"]
            dtype = self.values[node.id].dtype
            g = grads.get(node.id)
            g = np.zeros(node.shape, dtype=dtype) if g is None else np.asarray(g, dtype=dtype)
            out[name] = out[name] + g if name in out else g
        for name, g in out.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradient of {name!r} is not finite")
        return out

    def input_grad(self, name: str) -> np.ndarray:
        nid = self.input_ids[name]
        g = self.grads.get(nid)
        return np.zeros_like(self.values[nid]) if g is None else g


def forward(params: ParamSet, graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return graph.forward(params, inputs)


def backward(graph: Graph, loss_node: int, wrt_inputs: bool = False) -> dict[str, np.ndarray]:
    return graph.backward(loss_node, wrt_inputs)


# -- op kernels ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_linear(node, ins):
    y = ins[0] @ ins[1]
    if len(ins) == 3:
        y = y + ins[2]
    return y


def _bwd_linear(node, ins, out, g, need):
    x, w = ins[0], ins[1]
    g = g.astype(w.dtype, copy=False)
    g2 = g.reshape(-1, g.shape[-1])
    gx = g @ w.T if need[0] else None
    res = [gx, x.reshape(-1, x.shape[-1]).T @ g2]
    if len(ins) == 3:
        res.append(g2.sum(axis=0, dtype=np.float64).astype(w.dtype))
    return res


def _fwd_act(node, ins):
    x = ins[0]
    kind = node.attrs["kind"]
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    return x * _sigmoid(x)


def _bwd_act(node, ins, out, g, need=None):
    x = ins[0]
    kind = node.attrs["kind"]
    if kind == "relu":
        return [g * (x > 0)]
    if kind == "tanh":
        return [g * (1 - out * out)]
    s = _sigmoid(x)
    return [g * (s + x * s * (1 - s))]


def _fwd_concat(node, ins):
    return np.concatenate(ins, axis=-1)


def _bwd_concat(node, ins, out, g, need=None):
    splits = np.cumsum([a.shape[-1] for a in ins])[:-1]
    return np.split(g, splits, axis=-1)


def _fwd_reduce(node, ins):
    x = ins[0]
    axis = node.attrs["axis"]
    mask = ins[1] > 0.5 if len(ins) == 2 else None
    if node.attrs["kind"] == "max":
        if mask is None:
            return x.max(axis=axis)
        m = np.expand_dims(mask, -1)
        xm = np.where(m, x, -np.inf)
        y = xm.max(axis=axis)
        return np.where(np.isfinite(y), y, 0).astype(x.dtype)
    # sorted float64 accumulation makes the mean exactly permutation invariant
    x64 = x.astype(np.float64)
    if mask is None:
        return (np.sort(x64, axis=axis).sum(axis=axis) / x.shape[axis]).astype(x.dtype)
    m = np.expand_dims(mask, -1)
    total = np.sort(np.where(m, x64, 0.0), axis=axis).sum(axis=axis)
    count = np.maximum(m.sum(axis=axis), 1)
    return (total / count).astype(x.dtype)


def _bwd_reduce(node, ins, out, g, need=None):
    x = ins[0]
    axis = node.attrs["axis"]
    mask = ins[1] > 0.5 if len(ins) == 2 else None
    ge = np.expand_dims(g, axis)
    if node.attrs["kind"] == "max":
        xm = x if mask is None else np.where(np.expand_dims(mask, -1), x, -np.inf)
        idx = np.expand_dims(np.argmax(xm, axis=axis), axis)
        sel = np.zeros(x.shape, dtype=bool)
        np.put_along_axis(sel, idx, True, axis=axis)
        if mask is not None:
            sel &= np.expand_dims(mask, -1)
        gx = np.where(sel, ge, 0).astype(x.dtype)
    else:
        if mask is None:
            gx = np.broadcast_to(ge / x.shape[axis], x.shape).astype(x.dtype)
        else:
            m = np.expand_dims(mask, -1)
            count = np.maximum(m.sum(axis=axis, keepdims=True), 1)
            gx = np.where(m, ge / count, 0).astype(x.dtype)
    return [gx] if mask is None else [gx, None]


def _sin_freqs(dim: int) -> np.ndarray:
    half = dim // 2
    return np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))


def _fwd_sinusoidal(node, ins):
    t = ins[0]
    f = _sin_freqs(node.attrs["dim"]).astype(t.dtype)
    arg = t[..., None] * f
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _bwd_sinusoidal(node, ins, out, g, need=None):
    t = ins[0]
    f = _sin_freqs(node.attrs["dim"]).astype(t.dtype)
    half = f.shape[0]
    arg = t[..., None] * f
    gt = (g[..., :half] * f * np.cos(arg) - g[..., half:] * f * np.sin(arg)).sum(axis=-1)
    return [gt.astype(t.dtype)]


def _fwd_mse(node, ins):
    d = ins[0].astype(np.float64) - ins[1].astype(np.float64)
    return np.asarray(np.mean(d * d))


def _bwd_mse(node, ins, out, g, need=None):
    a, b = ins
    d = a.astype(np.float64) - b.astype(np.float64)
    ga = (2.0 * float(g) / d.size) * d
    return [ga.astype(a.dtype), (-ga).astype(b.dtype)]


_FORWARD = {
    "linear": _fwd_linear,
    "act": _fwd_act,
    "concat": _fwd_concat,
    "reduce": _fwd_reduce,
    "sinusoidal": _fwd_sinusoidal,
    "mse": _fwd_mse,
}
_BACKWARD = {
    "linear": _bwd_linear,
    "act": _bwd_act,
    "concat": _bwd_concat,
    "reduce": _bwd_reduce,
    "sinusoidal": _bwd_sinusoidal,
    "mse": _bwd_mse,
}


# -- optimizer ----------------------------------------------------------------------------


@dataclass
class OptState:
    """Adam moment estimates."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3, **kw) -> "OptState":
        m = {k: np.zeros_like(a) for k, a in params.tensors.items()}
        v = {k: np.zeros_like(a) for k, a in params.tensors.items()}
        return cls(m=m, v=v, lr=lr, **kw)


def opt_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptState,
             clip_norm: float | None = None) -> tuple[ParamSet, OptState]:
    """One Adam update, in place. Raises NonFiniteError on NaN/inf gradients."""
    if params.frozen:
        raise FrozenError("cannot update a frozen ParamSet")
    for k, g in grads.items():
        if k not in state.m or state.m[k].shape != np.shape(g):
            raise ShapeError(k, state.m[k].shape if k in state.m else None, np.shape(g))
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {k!r} is not finite at step {state.step}")
    scale = 1.0
    if clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / (total + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        g = g * scale if scale != 1.0 else g
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p = params.tensors[k]
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state
