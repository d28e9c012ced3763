"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Graph`` records operations as an append-only tape of ``Node`` entries.
Parameters and free inputs are declared by name and bound to concrete arrays
at evaluation time, so the same parameter set can be swapped in and out
(needed by the meta-training inner/outer loops). ``backward`` walks the tape
in reverse and returns exact gradients for every declared parameter.

Everything is 64-bit. Arrays handed to callers are never mutated.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray
GradientMap = dict[str, Array]


class GraphError(Exception):
    """Malformed graph usage: bad shapes, unbound inputs, non-scalar loss."""


def as_f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("op", "args", "shape", "meta")

    def __init__(self, op, args, shape, meta=None):
        self.op = op
        self.args = args
        self.shape = shape
        self.meta = meta


class Ref:
    """Handle to one node of a graph; supports arithmetic sugar."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.nodes[self.nid].shape

    def __add__(self, other):
        return add(self, self.graph.lift(other))

    def __radd__(self, other):
        return add(self.graph.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.graph.lift(other))

    def __rsub__(self, other):
        return sub(self.graph.lift(other), self)

    def __mul__(self, other):
        return mul(self, self.graph.lift(other))

    def __rmul__(self, other):
        return mul(self.graph.lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self.graph.lift(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        node = self.graph.nodes[self.nid]
        return f"Ref({self.nid}: {node.op} {node.shape})"


class Graph:
    """Append-only operation tape plus name -> node bindings for leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}

    def _emit(self, op, args, shape, meta=None) -> Ref:
        self.nodes.append(Node(op, args, tuple(int(n) for n in shape), meta))
        return Ref(self, len(self.nodes) - 1)

    def param(self, name: str, shape) -> Ref:
        """Declare a named trainable leaf; bound via the ParamSet at eval time."""
        if name in self.params:
            raise GraphError(f"parameter {name!r} declared twice")
        ref = self._emit("param", (), shape, meta=name)
        self.params[name] = ref.nid
        return ref

    def input(self, name: str, shape) -> Ref:
        """Declare a named non-trainable leaf (no gradient is produced for it)."""
        if name in self.inputs:
            raise GraphError(f"input {name!r} declared twice")
        ref = self._emit("input", (), shape, meta=name)
        self.inputs[name] = ref.nid
        return ref

    def const(self, value) -> Ref:
        arr = as_f64(value)
        return self._emit("const", (), arr.shape, meta=arr)

    def lift(self, value) -> Ref:
        return value if isinstance(value, Ref) else self.const(value)


def _same_graph(*refs: Ref) -> Graph:
    g = refs[0].graph
    for r in refs[1:]:
        if r.graph is not g:
            raise GraphError("refs belong to different graphs")
    return g


# ---------------------------------------------------------------------------
# op construction (shape inference happens here, at build time)

def add(a: Ref, b: Ref) -> Ref:
    g = _same_graph(a, b)
    return g._emit("add", (a.nid, b.nid), np.broadcast_shapes(a.shape, b.shape))


def sub(a: Ref, b: Ref) -> Ref:
    g = _same_graph(a, b)
    return g._emit("sub", (a.nid, b.nid), np.broadcast_shapes(a.shape, b.shape))


def mul(a: Ref, b: Ref) -> Ref:
    g = _same_graph(a, b)
    return g._emit("mul", (a.nid, b.nid), np.broadcast_shapes(a.shape, b.shape))


def neg(a: Ref) -> Ref:
    return a.graph._emit("neg", (a.nid,), a.shape)


def _matmul_shape(sa, sb):
    if len(sa) == 1 and len(sb) == 1:
        if sa[0] != sb[0]:
            raise GraphError(f"matmul: {sa} @ {sb}")
        return ()
    if len(sa) == 1:
        sa = (1,) + tuple(sa)
        out = _matmul_shape(sa, sb)
        return out[:-2] + out[-1:]
    if len(sb) == 1:
        sb = tuple(sb) + (1,)
        out = _matmul_shape(sa, sb)
        return out[:-1]
    if sa[-1] != sb[-2]:
        raise GraphError(f"matmul: inner dims differ, {sa} @ {sb}")
    return tuple(sa[:-2]) + (sa[-2], sb[-1])


def matmul(a: Ref, b: Ref) -> Ref:
    g = _same_graph(a, b)
    if len(a.shape) > 2 or len(b.shape) > 2:
        raise GraphError("matmul supports 1-D and 2-D operands only")
    return g._emit("matmul", (a.nid, b.nid), _matmul_shape(a.shape, b.shape))


def matvec(x: Ref, v: Ref) -> Ref:
    """Contract the last axis of x with vector v: x[..., H] @ v[H] -> x[...]."""
    g = _same_graph(x, v)
    if len(v.shape) != 1 or x.shape[-1] != v.shape[0]:
        raise GraphError(f"matvec: {x.shape} with {v.shape}")
    return g._emit("matvec", (x.nid, v.nid), x.shape[:-1])


def sigmoid(x: Ref) -> Ref:
    return x.graph._emit("sigmoid", (x.nid,), x.shape)


def tanh(x: Ref) -> Ref:
    return x.graph._emit("tanh", (x.nid,), x.shape)


def exp(x: Ref) -> Ref:
    return x.graph._emit("exp", (x.nid,), x.shape)


def log(x: Ref) -> Ref:
    return x.graph._emit("log", (x.nid,), x.shape)


def clip_min(x: Ref, floor: float) -> Ref:
    """max(x, floor) elementwise; gradient is zero where clamped."""
    return x.graph._emit("clip_min", (x.nid,), x.shape, meta=float(floor))


def softmax(x: Ref, axis: int = -1) -> Ref:
    return x.graph._emit("softmax", (x.nid,), x.shape, meta=axis)


def concat(refs, axis: int = -1) -> Ref:
    refs = list(refs)
    g = _same_graph(*refs)
    shapes = [r.shape for r in refs]
    axis_ = axis % len(shapes[0])
    base = list(shapes[0])
    total = 0
    for s in shapes:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis_):
            raise GraphError(f"concat: incompatible shapes {shapes}")
        total += s[axis_]
    base[axis_] = total
    sizes = tuple(s[axis_] for s in shapes)
    return g._emit("concat", tuple(r.nid for r in refs), base, meta=(axis_, sizes))


def stack(refs, axis: int = 1) -> Ref:
    refs = list(refs)
    g = _same_graph(*refs)
    s0 = refs[0].shape
    if any(r.shape != s0 for r in refs):
        raise GraphError("stack: shapes differ")
    axis_ = axis % (len(s0) + 1)
    out = list(s0)
    out.insert(axis_, len(refs))
    return g._emit("stack", tuple(r.nid for r in refs), out, meta=axis_)


def slice_axis(x: Ref, start: int, stop: int, axis: int = -1) -> Ref:
    axis_ = axis % len(x.shape)
    n = x.shape[axis_]
    if not (0 <= start < stop <= n):
        raise GraphError(f"slice [{start}:{stop}] out of range for axis size {n}")
    out = list(x.shape)
    out[axis_] = stop - start
    return x.graph._emit("slice", (x.nid,), out, meta=(axis_, start, stop))


def reshape(x: Ref, shape) -> Ref:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
        raise GraphError(f"reshape {x.shape} -> {shape}")
    return x.graph._emit("reshape", (x.nid,), shape, meta=x.shape)


def reduce_sum(x: Ref, axis=None) -> Ref:
    if axis is None:
        out = ()
    else:
        axis = axis % len(x.shape)
        out = tuple(n for i, n in enumerate(x.shape) if i != axis)
    return x.graph._emit("sum", (x.nid,), out, meta=axis)


def mean(x: Ref, axis=None) -> Ref:
    if axis is None:
        out, count = (), int(np.prod(x.shape, dtype=np.int64))
    else:
        axis = axis % len(x.shape)
        out = tuple(n for i, n in enumerate(x.shape) if i != axis)
        count = x.shape[axis]
    if count == 0:
        raise GraphError("mean over empty axis")
    return x.graph._emit("mean", (x.nid,), out, meta=(axis, count))


def rows(table: Ref, indices) -> Ref:
    """Embedding-style lookup: table[V, E] gathered at integer indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(table.shape) != 2:
        raise GraphError("rows: table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise GraphError("rows: index out of range")
    return table.graph._emit("rows", (table.nid,), idx.shape + (table.shape[1],), meta=idx)


def pick(x: Ref, indices) -> Ref:
    """Per-row gather: x[B, V] at idx[B] -> [B]."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(x.shape) != 2 or idx.shape != (x.shape[0],):
        raise GraphError(f"pick: {x.shape} with indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise GraphError("pick: index out of range")
    return x.graph._emit("pick", (x.nid,), (x.shape[0],), meta=idx)


def scatter_sum(weights: Ref, indices, size: int) -> Ref:
    """Route weights[B, S] onto vocabulary bins: out[b, indices[b, s]] += w[b, s]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != weights.shape or len(idx.shape) != 2:
        raise GraphError(f"scatter_sum: weights {weights.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise GraphError("scatter_sum: index out of range")
    return weights.graph._emit(
        "scatter_sum", (weights.nid,), (weights.shape[0], int(size)), meta=idx
    )


def weighted_sum(weights: Ref, states: Ref) -> Ref:
    """Convex-combination reduce: (w[B, S], h[B, S, D]) -> sum_s w*h = [B, D]."""
    g = _same_graph(weights, states)
    if len(weights.shape) != 2 or len(states.shape) != 3 or weights.shape != states.shape[:2]:
        raise GraphError(f"weighted_sum: {weights.shape} with {states.shape}")
    return g._emit("weighted_sum", (weights.nid, states.nid), (weights.shape[0], states.shape[2]))


# ---------------------------------------------------------------------------
# forward evaluation

def _fw_leaf(node, vals, bindings):
    name = node.meta
    if name not in bindings:
        raise GraphError(f"unbound {node.op} {name!r}")
    arr = as_f64(bindings[name])
    if arr.shape != node.shape:
        raise GraphError(
            f"shape mismatch for {node.op} {name!r}: bound {arr.shape}, declared {node.shape}"
        )
    return arr


def _fw_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _fw_slice(x, meta):
    axis, start, stop = meta
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    return x[tuple(sl)]


def _fw_scatter_sum(node, vals, b):
    w = vals[node.args[0]]
    out = np.zeros(node.shape)
    rows_ = np.repeat(np.arange(w.shape[0]), w.shape[1])
    np.add.at(out, (rows_, node.meta.ravel()), w.ravel())
    return out


_FORWARD = {
    "param": _fw_leaf,
    "input": _fw_leaf,
    "const": lambda node, vals, b: node.meta,
    "add": lambda node, vals, b: vals[node.args[0]] + vals[node.args[1]],
    "sub": lambda node, vals, b: vals[node.args[0]] - vals[node.args[1]],
    "mul": lambda node, vals, b: vals[node.args[0]] * vals[node.args[1]],
    "neg": lambda node, vals, b: -vals[node.args[0]],
    "matmul": lambda node, vals, b: vals[node.args[0]] @ vals[node.args[1]],
    "matvec": lambda node, vals, b: vals[node.args[0]] @ vals[node.args[1]],
    "sigmoid": lambda node, vals, b: 1.0 / (1.0 + np.exp(-vals[node.args[0]])),
    "tanh": lambda node, vals, b: np.tanh(vals[node.args[0]]),
    "exp": lambda node, vals, b: np.exp(vals[node.args[0]]),
    "log": lambda node, vals, b: np.log(vals[node.args[0]]),
    "clip_min": lambda node, vals, b: np.maximum(vals[node.args[0]], node.meta),
    "softmax": lambda node, vals, b: _fw_softmax(vals[node.args[0]], node.meta),
    "concat": lambda node, vals, b: np.concatenate([vals[a] for a in node.args], axis=node.meta[0]),
    "stack": lambda node, vals, b: np.stack([vals[a] for a in node.args], axis=node.meta),
    "slice": lambda node, vals, b: _fw_slice(vals[node.args[0]], node.meta),
    "reshape": lambda node, vals, b: vals[node.args[0]].reshape(node.shape),
    "sum": lambda node, vals, b: vals[node.args[0]].sum(axis=node.meta),
    "mean": lambda node, vals, b: vals[node.args[0]].mean(axis=node.meta[0]),
    "rows": lambda node, vals, b: vals[node.args[0]][node.meta],
    "pick": lambda node, vals, b: vals[node.args[0]][np.arange(node.meta.shape[0]), node.meta],
    "scatter_sum": _fw_scatter_sum,
    "weighted_sum": lambda node, vals, b: np.einsum(
        "bs,bsd->bd", vals[node.args[0]], vals[node.args[1]]
    ),
}


class Session:
    """Lazy forward evaluation over a graph; extendable as new nodes are added.

    Incremental decoding appends nodes to the tape after the session exists,
    so values are materialized on demand in tape order.
    """

    def __init__(self, graph: Graph, bindings):
        self.graph = graph
        self.bindings = bindings
        self.values: list[Array] = []

    def value(self, ref: Ref) -> Array:
        nodes = self.graph.nodes
        vals = self.values
        bindings = self.bindings
        for nid in range(len(vals), ref.nid + 1):
            node = nodes[nid]
            try:
                vals.append(_FORWARD[node.op](node, vals, bindings))
            except GraphError:
                raise
            except Exception as err:  # surface the offending node
                raise GraphError(f"node {nid} ({node.op}): {err}") from err
        return vals[ref.nid]

    def run_all(self) -> list[Array]:
        if self.graph.nodes:
            self.value(Ref(self.graph, len(self.graph.nodes) - 1))
        return self.values


def evaluate(graph: Graph, bindings) -> list[Array]:
    """Forward values for every node, in tape order (index = node id)."""
    return Session(graph, bindings).run_all()


# ---------------------------------------------------------------------------
# reverse pass

def _bw_matmul(g, a, b):
    # promote 1-D operands to 2-D, push the gradient through, reshape back
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def backward(graph: Graph, loss: Ref, values: list[Array]) -> GradientMap:
    """Gradients of a scalar loss node w.r.t. every declared parameter.

    ``values`` must hold forward values at least up to the loss node
    (as produced by ``evaluate`` or a ``Session``).
    """
    if loss.graph is not graph:
        raise GraphError("loss ref does not belong to this graph")
    if len(values) <= loss.nid:
        raise GraphError("forward values missing; evaluate the graph first")
    if graph.nodes[loss.nid].shape != ():
        raise GraphError(f"loss must be scalar, got shape {graph.nodes[loss.nid].shape}")

    nodes = graph.nodes
    adj: list = [None] * (loss.nid + 1)
    adj[loss.nid] = np.ones(())

    def acc(nid, g):
        if adj[nid] is None:
            adj[nid] = g
        else:
            adj[nid] = adj[nid] + g

    for nid in range(loss.nid, -1, -1):
        g = adj[nid]
        if g is None:
            continue
        node = nodes[nid]
        op, args = node.op, node.args
        if op in ("param", "input", "const"):
            continue
        if op == "add":
            a, b = args
            acc(a, _unbroadcast(g, nodes[a].shape))
            acc(b, _unbroadcast(g, nodes[b].shape))
        elif op == "sub":
            a, b = args
            acc(a, _unbroadcast(g, nodes[a].shape))
            acc(b, _unbroadcast(-g, nodes[b].shape))
        elif op == "mul":
            a, b = args
            acc(a, _unbroadcast(g * values[b], nodes[a].shape))
            acc(b, _unbroadcast(g * values[a], nodes[b].shape))
        elif op == "neg":
            acc(args[0], -g)
        elif op == "matmul":
            ga, gb = _bw_matmul(np.asarray(g), values[args[0]], values[args[1]])
            acc(args[0], ga)
            acc(args[1], gb)
        elif op == "matvec":
            x, v = values[args[0]], values[args[1]]
            acc(args[0], g[..., None] * v)
            acc(args[1], (x * g[..., None]).reshape(-1, v.shape[0]).sum(axis=0))
        elif op == "sigmoid":
            y = values[nid]
            acc(args[0], g * y * (1.0 - y))
        elif op == "tanh":
            y = values[nid]
            acc(args[0], g * (1.0 - y * y))
        elif op == "exp":
            acc(args[0], g * values[nid])
        elif op == "log":
            acc(args[0], g / values[args[0]])
        elif op == "clip_min":
            acc(args[0], g * (values[args[0]] > node.meta))
        elif op == "softmax":
            y = values[nid]
            axis = node.meta
            acc(args[0], (g - (g * y).sum(axis=axis, keepdims=True)) * y)
        elif op == "concat":
            axis, sizes = node.meta
            offset = 0
            for a, size in zip(args, sizes):
                sl = [slice(None)] * len(node.shape)
                sl[axis] = slice(offset, offset + size)
                acc(a, g[tuple(sl)])
                offset += size
        elif op == "stack":
            axis = node.meta
            for i, a in enumerate(args):
                acc(a, np.take(g, i, axis=axis))
        elif op == "slice":
            axis, start, stop = node.meta
            gx = np.zeros(nodes[args[0]].shape)
            sl = [slice(None)] * gx.ndim
            sl[axis] = slice(start, stop)
            gx[tuple(sl)] = g
            acc(args[0], gx)
        elif op == "reshape":
            acc(args[0], np.asarray(g).reshape(node.meta))
        elif op == "sum":
            src = nodes[args[0]].shape
            axis = node.meta
            if axis is None:
                acc(args[0], np.broadcast_to(g, src).copy())
            else:
                acc(args[0], np.broadcast_to(np.expand_dims(g, axis), src).copy())
        elif op == "mean":
            src = nodes[args[0]].shape
            axis, count = node.meta
            gg = g / count
            if axis is None:
                acc(args[0], np.broadcast_to(gg, src).copy())
            else:
                acc(args[0], np.broadcast_to(np.expand_dims(gg, axis), src).copy())
        elif op == "rows":
            table_shape = nodes[args[0]].shape
            gt = np.zeros(table_shape)
            np.add.at(gt, node.meta.ravel(), np.asarray(g).reshape(-1, table_shape[1]))
            acc(args[0], gt)
        elif op == "pick":
            gx = np.zeros(nodes[args[0]].shape)
            gx[np.arange(node.meta.shape[0]), node.meta] = g
            acc(args[0], gx)
        elif op == "scatter_sum":
            acc(args[0], np.take_along_axis(np.asarray(g), node.meta, axis=1))
        elif op == "weighted_sum":
            w, h = values[args[0]], values[args[1]]
            acc(args[0], np.einsum("bd,bsd->bs", g, h))
            acc(args[1], w[:, :, None] * np.asarray(g)[:, None, :])
        else:
            raise GraphError(f"no backward rule for op {op!r}")

    grads: GradientMap = {}
    for name, nid in graph.params.items():
        g = adj[nid] if nid <= loss.nid else None
        grads[name] = np.zeros(nodes[nid].shape) if g is None else np.asarray(g)
    return grads


# ---------------------------------------------------------------------------
# verification harness

def finite_difference_check(loss_fn, params, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a parameter mapping to ``(loss, GradientMap)`` and must be
    deterministic; this is checked by evaluating it twice at the base point.
    The error for one scalar parameter is
    |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    base = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    loss0, grads = loss_fn(base)
    loss1, _ = loss_fn(base)
    if loss0 != loss1:
        raise GraphError(f"loss_fn is not deterministic: {loss0!r} != {loss1!r}")

    worst = 0.0
    for name, arr in base.items():
        flat = arr.ravel()
        analytic = np.asarray(grads[name]).ravel()
        for i in range(flat.size):
            orig = flat[i]
            perturbed = {k: (v if k != name else v.copy()) for k, v in base.items()}
            pflat = perturbed[name].ravel()
            pflat[i] = orig + epsilon
            plus, _ = loss_fn(perturbed)
            pflat[i] = orig - epsilon
            minus, _ = loss_fn(perturbed)
            cd = (plus - minus) / (2.0 * epsilon)
            err = abs(analytic[i] - cd) / max(abs(analytic[i]), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst
