"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is a static list of primitive-op nodes built once and then
evaluated many times. Node shapes are per-sample; every feed carries one
extra leading batch axis, so a graph declared for ``(3, 32, 32)`` images is
fed arrays of shape ``(N, 3, 32, 32)``. Scalar-shaped nodes (shape ``()``)
are batch reductions such as losses and are fed/returned without a batch
axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT_VERSION = 1

DTYPE = np.float64


class GraphError(ValueError):
    """Raised for malformed graphs, missing feeds and shape mismatches."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    id: int
    kind: str
    inputs: Tuple[int, ...]
    shape: Tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None


# ---------------------------------------------------------------------------
# primitive kernels
# ---------------------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _same_pad(k: int) -> int:
    if k % 2 == 0:
        raise GraphError("'same' padding needs an odd kernel size")
    return k // 2


# Spatial activations are stored channel-major, (C, N, H, W), so that the
# im2col matmul output reshapes into the next layer's input without copies.
# Feeds and returned activations use the public (N, C, H, W) layout.


def conv2d_forward(x, w, b, stride, pad):
    """``x`` is (C, N, H, W); returns ((O, N, Ho, Wo), im2col matrix)."""
    c, n, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = _conv_out(h, kh, stride, pad)
    wo = _conv_out(wd, kw, stride, pad)
    if kh == kw == 1 and pad == 0:
        cols = x[:, :, ::stride, ::stride].reshape(c, n * ho * wo)
    else:
        if pad:
            xp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
            xp[:, :, pad : pad + h, pad : pad + wd] = x
        else:
            xp = x
        # rows ordered (c, kh, kw) to match w.reshape(o, -1)
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = w.reshape(o, -1) @ cols
    out += b[:, None]
    return out.reshape(o, n, ho, wo), cols


def conv2d_backward(gout, x_shape, w, cols, stride, pad, need_x=True, need_w=True):
    c, n, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    g2 = gout.reshape(o, n * ho * wo)
    gw = gb = gx = None
    if need_w:
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
    if need_x:
        gcols = w.reshape(o, -1).T @ g2
        if kh == kw == 1 and pad == 0 and stride == 1:
            return gcols.reshape(c, n, h, wd), gw, gb
        gcols = gcols.reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return gx, gw, gb


def avgpool_forward(x, k, stride):
    h, w = x.shape[-2:]
    if k == h == w:
        return x.mean(axis=(-2, -1), keepdims=True)
    win = sliding_window_view(x, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return win.mean(axis=(-2, -1))


def avgpool_backward(gout, x_shape, k, stride):
    h, w = x_shape[-2:]
    share = gout / (k * k)
    if k == h == w:
        return np.broadcast_to(share, x_shape).copy()
    gx = np.zeros(x_shape, dtype=gout.dtype)
    ho, wo = gout.shape[-2:]
    for i in range(k):
        for j in range(k):
            gx[..., i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return gx


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Graph:
    """Static computation graph.

    Nodes are appended through the builder methods (``input``, ``param``,
    ``linear``, ``conv2d`` ...), which return integer node ids. Appending
    only after existing nodes keeps the node list in topological order.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.params: Dict[str, Parameter] = {}
        self.param_nodes: Dict[str, int] = {}
        self.input_nodes: Dict[str, int] = {}
        self.names: Dict[str, int] = {}

    # -- builders ----------------------------------------------------------

    def _add(self, kind, inputs, shape, name=None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"input {i} does not precede node", len(self.nodes))
        node = Node(len(self.nodes), kind, tuple(inputs), tuple(shape), attrs, name)
        self.nodes.append(node)
        if name is not None:
            if name in self.names:
                raise GraphError(f"duplicate node name {name!r}", node.id)
            self.names[name] = node.id
        return node.id

    def shape(self, nid: int) -> Tuple[int, ...]:
        return self.nodes[nid].shape

    def input(self, name: str, shape: Sequence[int]) -> int:
        nid = self._add("input", (), shape, name=name)
        self.input_nodes[name] = nid
        return nid

    def param(self, name: str, value: np.ndarray) -> int:
        p = Parameter(name, value)
        nid = self._add("param", (), p.value.shape, name=name)
        self.params[name] = p
        self.param_nodes[name] = nid
        return nid

    def identity(self, x: int, name=None) -> int:
        return self._add("identity", (x,), self.shape(x), name)

    def linear(self, x: int, w: int, b: int, name=None) -> int:
        (d,) = self.shape(x)
        o, d2 = self.shape(w)
        if d != d2 or self.shape(b) != (o,):
            raise GraphError(f"linear shapes {self.shape(x)} {self.shape(w)} {self.shape(b)}", len(self.nodes))
        return self._add("linear", (x, w, b), (o,), name)

    def conv2d(self, x: int, w: int, b: int, stride: int = 1, padding: str = "same", name=None) -> int:
        c, h, wd = self.shape(x)
        o, c2, kh, kw = self.shape(w)
        if c != c2 or self.shape(b) != (o,):
            raise GraphError(f"conv2d shapes {self.shape(x)} {self.shape(w)} {self.shape(b)}", len(self.nodes))
        if padding == "same":
            pad = _same_pad(kh)
        elif padding == "valid":
            pad = 0
        else:
            raise GraphError(f"unknown padding {padding!r}", len(self.nodes))
        shape = (o, _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad))
        return self._add("conv2d", (x, w, b), shape, name, stride=stride, pad=pad)

    def relu(self, x: int, name=None) -> int:
        return self._add("relu", (x,), self.shape(x), name)

    def sigmoid(self, x: int, name=None) -> int:
        return self._add("sigmoid", (x,), self.shape(x), name)

    def avgpool2d(self, x: int, kernel: int, stride: Optional[int] = None, name=None) -> int:
        stride = kernel if stride is None else stride
        c, h, w = self.shape(x)
        shape = (c, (h - kernel) // stride + 1, (w - kernel) // stride + 1)
        return self._add("avgpool2d", (x,), shape, name, kernel=kernel, stride=stride)

    def flatten(self, x: int, name=None) -> int:
        return self._add("flatten", (x,), (int(np.prod(self.shape(x))),), name)

    def add(self, a: int, b: int, name=None) -> int:
        if self.shape(a) != self.shape(b):
            raise GraphError(f"add shapes {self.shape(a)} vs {self.shape(b)}", len(self.nodes))
        return self._add("add", (a, b), self.shape(a), name)

    def scale(self, x: int, factor: float, name=None) -> int:
        return self._add("scale", (x,), self.shape(x), name, factor=float(factor))

    def bce_with_logits(self, logit: int, label: int, name=None) -> int:
        """Mean binary cross-entropy of a single-logit head against 0/1 labels."""
        if self.shape(logit) not in ((), (1,)) or self.shape(label) not in ((), (1,)):
            raise GraphError("bce expects per-sample scalar logit and label", len(self.nodes))
        return self._add("bce", (logit, label), (), name)

    def sqdist(self, a: int, b: int, name=None) -> int:
        """Batch mean of the squared Euclidean distance ``||a - b||^2``."""
        if self.shape(a) != self.shape(b):
            raise GraphError(f"sqdist shapes {self.shape(a)} vs {self.shape(b)}", len(self.nodes))
        return self._add("sqdist", (a, b), (), name)

    def sum(self, x: int, name=None) -> int:
        """Sum over the batch and every element; yields a scalar node."""
        return self._add("sum", (x,), (), name)

    def sum_losses(self, a: int, b: int, name=None) -> int:
        if self.shape(a) != () or self.shape(b) != ():
            raise GraphError("sum_losses expects scalar nodes", len(self.nodes))
        return self._add("add", (a, b), (), name)

    # -- helpers -----------------------------------------------------------

    def node_id(self, key) -> int:
        return self.names[key] if isinstance(key, str) else int(key)

    def ancestors(self, targets: Iterable[int]) -> List[int]:
        need = set()
        stack = list(targets)
        while stack:
            nid = stack.pop()
            if nid in need:
                continue
            need.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return sorted(need)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            p = self.params[k]
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != p.value.shape:
                raise GraphError(f"parameter {k!r} shape {v.shape} != {p.value.shape}", self.param_nodes[k])
            p.value = v.copy()
            p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _check_feed(graph: Graph, nid: int, value) -> np.ndarray:
    node = graph.nodes[nid]
    arr = np.asarray(value, dtype=DTYPE)
    if node.shape == ():
        if arr.ndim != 1:
            arr = arr.reshape(-1)
        return arr
    if arr.shape[1:] != node.shape:
        raise GraphError(f"feed for {node.name!r} has shape {arr.shape}, expected (N, {node.shape})", nid)
    return arr.transpose(1, 0, 2, 3) if len(node.shape) == 3 else arr


def _public(graph: Graph, nid: int, v: np.ndarray) -> np.ndarray:
    """Internal (C, N, H, W) -> public (N, C, H, W) for spatial nodes."""
    return v.transpose(1, 0, 2, 3) if len(graph.nodes[nid].shape) == 3 else v


def _batch_size(v: np.ndarray, spatial: bool) -> int:
    return v.shape[1] if spatial else v.shape[0]


def _resolve_feeds(graph: Graph, feeds: Mapping) -> Dict[int, np.ndarray]:
    out = {}
    for key, value in feeds.items():
        nid = graph.node_id(key)
        if graph.nodes[nid].kind != "input":
            raise GraphError("feed given for a non-input node", nid)
        out[nid] = _check_feed(graph, nid, value)
    return out


def _forward(graph: Graph, feeds: Dict[int, np.ndarray], order: Sequence[int]):
    vals: Dict[int, np.ndarray] = {}
    cache: Dict[int, object] = {}
    for nid in order:
        node = graph.nodes[nid]
        k = node.kind
        ins = [vals[i] for i in node.inputs]
        if k == "input":
            if nid not in feeds:
                raise GraphError(f"missing feed for input {node.name!r}", nid)
            v = feeds[nid]
        elif k == "param":
            v = graph.params[node.name].value
        elif k == "identity":
            v = ins[0]
        elif k == "linear":
            v = ins[0] @ ins[1].T + ins[2]
        elif k == "conv2d":
            v, cache[nid] = conv2d_forward(ins[0], ins[1], ins[2], node.attrs["stride"], node.attrs["pad"])
        elif k == "relu":
            v = np.maximum(ins[0], 0.0)
        elif k == "sigmoid":
            v = _sigmoid(ins[0])
        elif k == "avgpool2d":
            v = avgpool_forward(ins[0], node.attrs["kernel"], node.attrs["stride"])
        elif k == "flatten":
            x = ins[0]
            if x.ndim == 4:
                x = x.transpose(1, 0, 2, 3)
            v = x.reshape(x.shape[0], -1)
        elif k == "add":
            v = ins[0] + ins[1]
        elif k == "scale":
            v = ins[0] * node.attrs["factor"]
        elif k == "bce":
            z = ins[0].reshape(-1)
            y = ins[1].reshape(-1)
            if z.shape != y.shape:
                raise GraphError(f"logit batch {z.shape} vs label batch {y.shape}", nid)
            # log(1 + e^z) - y z, stable for large |z|
            v = np.mean(np.logaddexp(0.0, z) - y * z)
        elif k == "sqdist":
            d = ins[0] - ins[1]
            v = np.sum(d * d) / _batch_size(d, len(graph.shape(node.inputs[0])) == 3)
        elif k == "sum":
            v = np.sum(ins[0])
        else:
            raise GraphError(f"unknown op kind {k!r}", nid)
        if k not in ("input", "param", "bce", "sqdist", "sum") and node.shape != ():
            per_sample = (v.shape[0],) + v.shape[2:] if len(node.shape) == 3 else v.shape[1:]
            if per_sample != node.shape:
                raise GraphError(f"produced shape {per_sample} != declared {node.shape}", nid)
        vals[nid] = v
    return vals, cache


def forward_eval(graph: Graph, feeds: Mapping, outputs: Optional[Iterable] = None) -> Dict[int, np.ndarray]:
    """Evaluate the graph.

    With ``outputs`` given only their ancestors are evaluated and only the
    inputs they depend on need feeds; otherwise every node is evaluated and
    every input must be fed.
    """
    fd = _resolve_feeds(graph, feeds)
    if outputs is None:
        order = range(len(graph.nodes))
    else:
        order = graph.ancestors(graph.node_id(o) for o in outputs)
    vals, _ = _forward(graph, fd, order)
    return {nid: _public(graph, nid, v) for nid, v in vals.items()}


BackwardRule = Callable[..., None]


def _backward(graph, order, vals, cache, loss_id, wanted):
    """Accumulate gradients of ``loss_id`` for every node in ``wanted``."""
    # nodes whose gradient actually matters
    live = set()
    for nid in order:
        node = graph.nodes[nid]
        if nid in wanted or any(i in live for i in node.inputs):
            live.add(nid)
    grads: Dict[int, np.ndarray] = {loss_id: np.asarray(1.0)}

    def acc(i, g):
        if i not in live:
            return
        if i in grads:
            grads[i] = grads[i] + g
        else:
            grads[i] = g

    for nid in reversed(order):
        if nid not in grads:
            continue
        node = graph.nodes[nid]
        g = grads[nid]
        ins = node.inputs
        k = node.kind
        if k in ("input", "param"):
            continue
        if k == "identity":
            acc(ins[0], g)
        elif k == "linear":
            x, w = vals[ins[0]], vals[ins[1]]
            if ins[0] in live:
                acc(ins[0], g @ w)
            if ins[1] in live:
                acc(ins[1], g.T @ x)
            if ins[2] in live:
                acc(ins[2], g.sum(axis=0))
        elif k == "conv2d":
            gx, gw, gb = conv2d_backward(
                g, vals[ins[0]].shape, vals[ins[1]], cache[nid], node.attrs["stride"], node.attrs["pad"],
                need_x=ins[0] in live, need_w=ins[1] in live or ins[2] in live,
            )
            if gx is not None:
                acc(ins[0], gx)
            if gw is not None:
                acc(ins[1], gw)
                acc(ins[2], gb)
        elif k == "relu":
            acc(ins[0], g * (vals[ins[0]] > 0))
        elif k == "sigmoid":
            s = vals[nid]
            acc(ins[0], g * s * (1.0 - s))
        elif k == "avgpool2d":
            acc(ins[0], avgpool_backward(g, vals[ins[0]].shape, node.attrs["kernel"], node.attrs["stride"]))
        elif k == "flatten":
            xs = vals[ins[0]].shape
            if len(xs) == 4:
                acc(ins[0], g.reshape(xs[1], xs[0], xs[2], xs[3]).transpose(1, 0, 2, 3))
            else:
                acc(ins[0], g.reshape(xs))
        elif k == "add":
            acc(ins[0], g)
            acc(ins[1], g)
        elif k == "scale":
            acc(ins[0], g * node.attrs["factor"])
        elif k == "bce":
            z, y = vals[ins[0]], vals[ins[1]]
            n = z.shape[0]
            dz = (_sigmoid(z.reshape(-1)) - y.reshape(-1)) / n
            acc(ins[0], g * dz.reshape(z.shape))
            acc(ins[1], g * (-z.reshape(-1) / n).reshape(y.shape))
        elif k == "sqdist":
            a, b = vals[ins[0]], vals[ins[1]]
            d = 2.0 * (a - b) / _batch_size(a, a.ndim == 4)
            acc(ins[0], g * d)
            acc(ins[1], -g * d)
        elif k == "sum":
            acc(ins[0], np.broadcast_to(g, vals[ins[0]].shape).copy())
        else:
            raise GraphError(f"no backward rule for {k!r}", nid)
    return grads


def backward_grad(graph: Graph, loss_node, feeds: Mapping, wrt_inputs: Optional[Iterable[str]] = None):
    """Gradients of a scalar loss node.

    Returns ``(param_grads, input_grads)`` keyed by parameter/input name.
    Parameters the loss does not depend on get zero arrays. ``wrt_inputs``
    restricts which input gradients are computed (default: every fed input).
    """
    loss_id = graph.node_id(loss_node)
    if graph.nodes[loss_id].shape != ():
        raise GraphError("loss node must be scalar-shaped", loss_id)
    fd = _resolve_feeds(graph, feeds)
    order = graph.ancestors([loss_id])
    vals, cache = _forward(graph, fd, order)
    in_names = [graph.nodes[i].name for i in fd] if wrt_inputs is None else list(wrt_inputs)
    wanted = {graph.param_nodes[n] for n in graph.params} | {graph.input_nodes[n] for n in in_names}
    grads = _backward(graph, order, vals, cache, loss_id, wanted)
    pgrads = {}
    for name, p in graph.params.items():
        g = grads.get(graph.param_nodes[name])
        pgrads[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.value.shape)
    igrads = {}
    for name in in_names:
        nid = graph.input_nodes[name]
        g = grads.get(nid)
        g = np.zeros_like(fd[nid]) if g is None else np.asarray(g, dtype=DTYPE).reshape(fd[nid].shape)
        igrads[name] = _public(graph, nid, g)
    return pgrads, igrads


def loss_and_grads(graph: Graph, loss_node, feeds: Mapping, params: Sequence[str] = (), inputs: Sequence[str] = (),
                   outputs: Sequence = ()):
    """Loss value plus gradients for just the named parameters/inputs.

    Cheaper than :func:`backward_grad` when only a few leaves are needed
    (e.g. input gradients for an attack on a model with frozen weights).
    Activations of ``outputs`` (ancestors of the loss) are returned as a
    fourth element when requested.
    """
    loss_id = graph.node_id(loss_node)
    fd = _resolve_feeds(graph, feeds)
    order = graph.ancestors([loss_id])
    vals, cache = _forward(graph, fd, order)
    wanted = {graph.param_nodes[n] for n in params} | {graph.input_nodes[n] for n in inputs}
    grads = _backward(graph, order, vals, cache, loss_id, wanted)
    pg = {}
    for n in params:
        g = grads.get(graph.param_nodes[n])
        pg[n] = np.zeros_like(graph.params[n].value) if g is None else g
    ig = {}
    for n in inputs:
        nid = graph.input_nodes[n]
        g = grads.get(nid)
        ig[n] = _public(graph, nid, np.zeros_like(fd[nid]) if g is None else g)
    if outputs:
        outs = {o: _public(graph, graph.node_id(o), vals[graph.node_id(o)]) for o in outputs}
        return float(vals[loss_id]), pg, ig, outs
    return float(vals[loss_id]), pg, ig


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: Dict[str, float]
    n_coordinates: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    @property
    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v >= self.tolerance}


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(graph: Graph, loss_node, feeds: Mapping, tolerance: float = 1e-4, step: float = 1e-5,
               inputs: Optional[Sequence[str]] = None, max_coordinates: int = 100_000) -> GradCheckReport:
    """Compare :func:`backward_grad` against central finite differences.

    Checks every parameter coordinate and every coordinate of the fed
    inputs listed in ``inputs`` (default: all fed inputs). Integer-valued
    label inputs should be excluded by passing ``inputs`` explicitly.
    """
    loss_id = graph.node_id(loss_node)
    feeds = {k: np.array(v, dtype=DTYPE) for k, v in feeds.items()}
    inputs = list(feeds) if inputs is None else list(inputs)
    pg, ig = backward_grad(graph, loss_id, feeds, wrt_inputs=inputs)
    n_coords = sum(p.size for p in graph.params.values()) + sum(feeds[k].size for k in inputs)
    if n_coords > max_coordinates:
        raise GraphError(f"{n_coords} coordinates is too many for finite differences")

    def loss():
        return float(forward_eval(graph, feeds, outputs=[loss_id])[loss_id])

    def numeric(arr):
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = loss()
            flat[i] = old - step
            down = loss()
            flat[i] = old
            nflat[i] = (up - down) / (2 * step)
        return num

    errs = {}
    for name, p in graph.params.items():
        errs[f"param:{name}"] = float(rel_error(pg[name], numeric(p.value)).max(initial=0.0))
    for name in inputs:
        errs[f"input:{name}"] = float(rel_error(ig[name], numeric(feeds[name])).max(initial=0.0))
    return GradCheckReport(tolerance, errs, n_coords)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def params_to_records(params: Mapping[str, np.ndarray]) -> List[dict]:
    return [
        {"name": k, "shape": list(v.shape), "values": np.asarray(v, dtype=DTYPE).reshape(-1).tolist()}
        for k, v in params.items()
    ]


def records_to_params(records: Sequence[dict]) -> Dict[str, np.ndarray]:
    out = {}
    for r in records:
        shape = tuple(r["shape"])
        arr = np.asarray(r["values"], dtype=DTYPE)
        if arr.size != math.prod(shape):
            raise ValueError(f"checkpoint record {r['name']!r}: {arr.size} values for shape {shape}")
        out[r["name"]] = arr.reshape(shape)
    return out


def save_checkpoint(path, params: Mapping[str, np.ndarray], header: Optional[dict] = None) -> None:
    """Write ordered (name, shape, values) records as JSON.

    Python's float repr round-trips float64 exactly, so a reload is
    bit-identical.
    """
    doc = {"format_version": CHECKPOINT_FORMAT_VERSION, "header": header or {}, "params": params_to_records(params)}
    from .persist import atomic_write_text

    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    return doc.get("header", {}), records_to_params(doc["params"])
