"""Dense float64 arrays with reverse-mode automatic differentiation.

The engine is a small static tape: a graph of operation nodes is built once,
then evaluated against leaf bindings as many times as needed. Forward values
are cached on the graph so a backward sweep can reuse them. Everything is
float64; any non-finite intermediate aborts the evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Graph misuse: unbound leaf, non-scalar loss seed, unknown node."""


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteValue(FloatingPointError):
    """An exposed operation produced NaN or infinity."""


def as_array(value) -> np.ndarray:
    out = np.asarray(value, dtype=np.float64)
    return out


@dataclass
class Node:
    nid: int
    op: str
    inputs: tuple[int, ...] = ()
    name: str | None = None          # leaf binding key
    const: np.ndarray | None = None  # fixed value for "const" nodes


@dataclass
class Graph:
    """Operation tape. Build once, evaluate per binding set.

    ``values`` holds the forward cache of the most recent :func:`evaluate`
    call; a graph (and its cache) belongs to a single run at a time.
    """

    nodes: list[Node] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)
    values: list[np.ndarray] | None = None

    def _new(self, op: str, inputs: tuple[int, ...] = (), **kw) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"unknown input node {i} for op {op}")
        node = Node(nid=len(self.nodes), op=op, inputs=inputs, **kw)
        self.nodes.append(node)
        return node.nid

    # -- construction -----------------------------------------------------

    def leaf(self, name: str) -> int:
        return self._new("leaf", name=name)

    def const(self, value) -> int:
        return self._new("const", const=as_array(value))

    def matmul(self, a: int, b: int) -> int:
        return self._new("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._new("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._new("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._new("mul", (a, b))

    def scale(self, a: int, factor: float) -> int:
        return self._new("scale", (a,), const=as_array(factor))

    def bias_add(self, x: int, b: int) -> int:
        """Add a rank-1 bias to every row of a matrix."""
        return self._new("bias_add", (x, b))

    def relu(self, a: int) -> int:
        return self._new("relu", (a,))

    def tanh(self, a: int) -> int:
        return self._new("tanh", (a,))

    def reduce_sum(self, a: int) -> int:
        return self._new("reduce_sum", (a,))

    def reduce_mean(self, a: int) -> int:
        return self._new("reduce_mean", (a,))

    def squared_error(self, pred: int, target: int) -> int:
        """Mean over all entries of (pred - target)^2."""
        return self._new("squared_error", (pred, target))

    def softmax_cross_entropy(self, logits: int, target: int) -> int:
        """Row-wise softmax cross-entropy against target probabilities, then mean."""
        return self._new("softmax_xent", (logits, target))

    def mark_output(self, nid: int) -> int:
        if nid not in self.outputs:
            self.outputs.append(nid)
        return nid


def _require(cond: bool, op: str, detail: str):
    if not cond:
        raise ShapeMismatch(f"{op}: {detail}")


def _forward(node: Node, vals: list[np.ndarray], bindings) -> np.ndarray:
    op = node.op
    if op == "leaf":
        if node.name not in bindings:
            raise GraphError(f"leaf '{node.name}' is unbound")
        return as_array(bindings[node.name])
    if op == "const":
        return node.const
    a = vals[node.inputs[0]]
    if op == "scale":
        return a * node.const
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "tanh":
        return np.tanh(a)
    if op == "reduce_sum":
        return np.asarray(np.sum(a))
    if op == "reduce_mean":
        return np.asarray(np.mean(a))
    b = vals[node.inputs[1]]
    if op == "matmul":
        _require(a.ndim == 2 and b.ndim == 2, op, f"need 2-d operands, got {a.shape} and {b.shape}")
        _require(a.shape[1] == b.shape[0], op, f"inner extents differ: {a.shape} @ {b.shape}")
        return a @ b
    if op in ("add", "sub", "mul"):
        _require(a.shape == b.shape, op, f"shapes differ: {a.shape} vs {b.shape}")
        return a + b if op == "add" else (a - b if op == "sub" else a * b)
    if op == "bias_add":
        _require(a.ndim == 2 and b.ndim == 1, op, f"need matrix+vector, got {a.shape} and {b.shape}")
        _require(a.shape[1] == b.shape[0], op, f"bias length {b.shape[0]} != row width {a.shape[1]}")
        return a + b[None, :]
    if op == "squared_error":
        _require(a.shape == b.shape, op, f"shapes differ: {a.shape} vs {b.shape}")
        d = a - b
        return np.asarray(np.mean(d * d))
    if op == "softmax_xent":
        _require(a.ndim == 2 and a.shape == b.shape, op, f"need matching 2-d operands, got {a.shape} and {b.shape}")
        shifted = a - np.max(a, axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        logp = shifted - logz
        return np.asarray(-np.mean(np.sum(b * logp, axis=1)))
    raise GraphError(f"unknown op kind '{op}'")


def evaluate(graph: Graph, bindings: dict[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Run the tape forward, cache every node value, return the outputs."""
    vals: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in graph.nodes:
            out = _forward(node, vals, bindings)
            if not np.all(np.isfinite(out)):
                raise NonFiniteValue(f"op '{node.op}' (node {node.nid}) produced a non-finite value")
            vals[node.nid] = out
    graph.values = vals
    return {nid: vals[nid] for nid in graph.outputs}


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def backward(graph: Graph, loss, wanted: set[str]) -> dict[str, np.ndarray]:
    """Reverse sweep from scalar loss node(s) to the wanted leaves.

    ``loss`` is a node id, or a mapping node id -> seed weight for a weighted
    sum of scalar nodes (one sweep, mathematically the gradient of the sum).
    Only leaves named in ``wanted`` appear in the result.
    """
    vals = graph.values
    if vals is None:
        raise GraphError("backward called before evaluate")
    seeds = {loss: 1.0} if isinstance(loss, int) else dict(loss)
    leaf_names = {n.name for n in graph.nodes if n.op == "leaf"}
    missing = set(wanted) - leaf_names
    if missing:
        raise GraphError(f"wanted blocks are not leaves: {sorted(missing)}")

    adj: list[np.ndarray | None] = [None] * len(graph.nodes)
    for nid, w in seeds.items():
        if not 0 <= nid < len(graph.nodes):
            raise GraphError(f"unknown loss node {nid}")
        if vals[nid].shape != ():
            raise GraphError(f"loss node {nid} is not scalar (shape {vals[nid].shape})")
        prev = adj[nid]
        adj[nid] = as_array(w) if prev is None else prev + w

    def acc(nid: int, g: np.ndarray):
        adj[nid] = g if adj[nid] is None else adj[nid] + g

    for node in reversed(graph.nodes):
        g = adj[node.nid]
        if g is None or node.op in ("leaf", "const"):
            continue
        ins = node.inputs
        op = node.op
        if op == "matmul":
            a, b = vals[ins[0]], vals[ins[1]]
            acc(ins[0], g @ b.T)
            acc(ins[1], a.T @ g)
        elif op == "add":
            acc(ins[0], g)
            acc(ins[1], g)
        elif op == "sub":
            acc(ins[0], g)
            acc(ins[1], -g)
        elif op == "mul":
            acc(ins[0], g * vals[ins[1]])
            acc(ins[1], g * vals[ins[0]])
        elif op == "scale":
            acc(ins[0], g * node.const)
        elif op == "bias_add":
            acc(ins[0], g)
            acc(ins[1], np.sum(g, axis=0))
        elif op == "relu":
            # subgradient at 0 taken as 0
            acc(ins[0], g * (vals[ins[0]] > 0.0))
        elif op == "tanh":
            y = vals[node.nid]
            acc(ins[0], g * (1.0 - y * y))
        elif op == "reduce_sum":
            acc(ins[0], np.broadcast_to(g, vals[ins[0]].shape).copy())
        elif op == "reduce_mean":
            x = vals[ins[0]]
            acc(ins[0], np.broadcast_to(g / x.size, x.shape).copy())
        elif op == "squared_error":
            a, b = vals[ins[0]], vals[ins[1]]
            d = (2.0 / a.size) * (a - b)
            acc(ins[0], g * d)
            acc(ins[1], -g * d)
        elif op == "softmax_xent":
            logits, target = vals[ins[0]], vals[ins[1]]
            n = logits.shape[0]
            p = _softmax(logits)
            rowmass = np.sum(target, axis=1, keepdims=True)
            acc(ins[0], g * (p * rowmass - target) / n)
            shifted = logits - np.max(logits, axis=1, keepdims=True)
            logp = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
            acc(ins[1], -g * logp / n)
        else:
            raise GraphError(f"no gradient rule for op '{op}'")

    out: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.op == "leaf" and node.name in wanted:
            g = adj[node.nid]
            if g is None:
                g = np.zeros_like(vals[node.nid])
            out[node.name] = np.asarray(g, dtype=np.float64)
    return out


def finite_difference_grad(f, bindings: dict[str, np.ndarray], h: float) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of the bindings.

    Independent of the tape: ``f`` is called 2 * n_coordinates times with
    perturbed copies. Used as the oracle the reverse sweep is checked against.
    """
    if h <= 0:
        raise ValueError("finite_difference_grad: h must be positive")
    work = {k: as_array(v).copy() for k, v in bindings.items()}
    grads: dict[str, np.ndarray] = {}
    for key, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(f(work))
            flat[idx] = orig - h
            down = float(f(work))
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteValue(f"non-finite evaluation while differencing '{key}'")
            gf[idx] = (up - down) / (2.0 * h)
        grads[key] = g
    return grads
