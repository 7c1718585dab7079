"""Shared-trunk multi-task models with an explicit shared/per-task parameter split.

Two model families share one interface:

* ``MLPModel`` — tape-backed trunk (tanh or relu) with one affine head per
  task, for synthetic regression experiments.
* ``QuadraticModel`` — convex losses 0.5*||A_i s + C_i t_i - b_i||^2 with
  closed-form gradients, the workhorse for every analytic property check.

Both expose ``forward_all`` / ``backward_group`` and support exact
snapshot/restore of selected parameter blocks (plus optimizer state), which
the slow affinity oracles rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, NonFiniteValue, backward, evaluate


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDef:
    tid: int
    loss_kind: str = "squared_error"  # squared_error | softmax_xent | quadratic
    weight: float = 1.0
    lower_is_better: bool = True


@dataclass(frozen=True)
class TaskSuite:
    tasks: tuple[TaskDef, ...]

    def __post_init__(self):
        ids = [t.tid for t in self.tasks]
        if len(ids) < 2:
            raise ModelError("a task suite needs at least 2 tasks")
        if ids != list(range(1, len(ids) + 1)):
            raise ModelError(f"task ids must be contiguous from 1, got {ids}")
        for t in self.tasks:
            if not t.weight > 0:
                raise ModelError(f"task {t.tid}: weight must be positive, got {t.weight}")

    @property
    def k(self) -> int:
        return len(self.tasks)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(t.tid for t in self.tasks)

    def weights(self) -> dict[int, float]:
        return {t.tid: t.weight for t in self.tasks}

    def task(self, tid: int) -> TaskDef:
        return self.tasks[tid - 1]


def make_suite(k: int, loss_kind: str = "squared_error", weights=None) -> TaskSuite:
    w = weights or {}
    return TaskSuite(tuple(TaskDef(i, loss_kind, float(w.get(i, 1.0))) for i in range(1, k + 1)))


@dataclass
class Batch:
    inputs: np.ndarray | None
    targets: dict[int, np.ndarray]
    sample_id: int = 0

    def __post_init__(self):
        if self.inputs is not None:
            n = self.inputs.shape[0]
            for tid, t in self.targets.items():
                if t.shape[0] != n:
                    raise ModelError(
                        f"batch {self.sample_id}: target of task {tid} has {t.shape[0]} rows, inputs have {n}"
                    )


@dataclass
class ParamPartition:
    """Named parameter blocks, split into the shared trunk and per-task sets."""

    shared: dict[str, np.ndarray]
    per_task: dict[int, dict[str, np.ndarray]]
    version: int = 0  # bumped on every in-place mutation; guards stale tapes

    def __post_init__(self):
        seen: set[str] = set()
        for name in self.shared:
            seen.add(name)
        for tid, blocks in self.per_task.items():
            for name in blocks:
                if name in seen:
                    raise ModelError(f"block '{name}' appears in more than one parameter set")
                seen.add(name)

    def all_blocks(self) -> dict[str, np.ndarray]:
        out = dict(self.shared)
        for blocks in self.per_task.values():
            out.update(blocks)
        return out

    def block(self, name: str) -> np.ndarray:
        if name in self.shared:
            return self.shared[name]
        for blocks in self.per_task.values():
            if name in blocks:
                return blocks[name]
        raise ModelError(f"unknown parameter block '{name}'")

    def block_ids(self, group=None) -> list[str]:
        """Shared block names plus, when given, the task blocks of ``group``."""
        names = sorted(self.shared)
        if group is not None:
            for tid in sorted(group):
                names.extend(sorted(self.per_task[tid]))
        return names

    def set_block(self, name: str, value: np.ndarray):
        target = self.block(name)
        if target.shape != value.shape:
            raise ModelError(f"block '{name}': shape {value.shape} != {target.shape}")
        target[...] = value
        self.version += 1


@dataclass
class ParamSnapshot:
    blocks: dict[str, np.ndarray]
    opt_state: dict[str, object] | None = None


def snapshot(model, block_ids, optimizer=None) -> ParamSnapshot:
    blocks = {name: model.partition.block(name).copy() for name in block_ids}
    opt_state = optimizer.state_copy(block_ids) if optimizer is not None else None
    return ParamSnapshot(blocks=blocks, opt_state=opt_state)


def restore(model, snap: ParamSnapshot, optimizer=None):
    for name, value in snap.blocks.items():
        model.partition.set_block(name, value)
    if optimizer is not None and snap.opt_state is not None:
        optimizer.state_restore(snap.opt_state)


class MLPModel:
    """Shared MLP trunk + one affine head per task, evaluated on the tape."""

    def __init__(self, suite: TaskSuite, partition: ParamPartition, graph: Graph,
                 loss_nodes: dict[int, int], in_dim: int, out_dims: dict[int, int]):
        self.suite = suite
        self.partition = partition
        self.graph = graph
        self.loss_nodes = loss_nodes
        self.in_dim = in_dim
        self.out_dims = out_dims
        self._forward_version: int | None = None
        self._forward_sample: int | None = None

    def _bindings(self, batch: Batch) -> dict[str, np.ndarray]:
        b = dict(self.partition.all_blocks())
        if batch.inputs is None:
            raise ModelError("MLP model needs batch inputs")
        b["input"] = batch.inputs
        for tid in self.suite.ids:
            if tid not in batch.targets:
                raise ModelError(f"batch {batch.sample_id}: no target for task {tid}")
            b[f"target.{tid}"] = batch.targets[tid]
        return b

    def forward_all(self, batch: Batch) -> dict[int, float]:
        try:
            outs = evaluate(self.graph, self._bindings(batch))
        except NonFiniteValue as e:
            raise NonFiniteValue(f"forward on batch {batch.sample_id}: {e}") from e
        self._forward_version = self.partition.version
        self._forward_sample = batch.sample_id
        losses = {}
        for tid, nid in self.loss_nodes.items():
            val = float(outs[nid])
            if not np.isfinite(val):
                raise NonFiniteValue(f"task {tid} loss is non-finite on batch {batch.sample_id}")
            losses[tid] = val
        return losses

    def backward_group(self, group, weights: dict[int, float]) -> dict[str, np.ndarray]:
        """Gradients of sum_i w_i * L_i over shared + the group's task blocks.

        Uses the cached forward; parameters must not have changed since.
        """
        if self._forward_version != self.partition.version:
            raise ModelError("backward_group without a fresh forward")
        seeds = {self.loss_nodes[tid]: weights[tid] for tid in sorted(group)}
        wanted = set(self.partition.block_ids(group))
        return backward(self.graph, seeds, wanted)


def build_shared_trunk(width: int, depth: int, suite: TaskSuite, seed: int,
                       in_dim: int | None = None, out_dims: dict[int, int] | None = None,
                       activation: str = "tanh") -> MLPModel:
    """Deterministically initialized trunk of `depth` affine+activation layers.

    Heads are single affine layers; initialization is uniform in
    [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a generator seeded with ``seed``.
    """
    if width < 1 or depth < 1:
        raise ModelError("width and depth must be >= 1")
    if activation not in ("tanh", "relu"):
        raise ModelError(f"unknown activation '{activation}'")
    in_dim = width if in_dim is None else in_dim
    out_dims = out_dims or {tid: 1 for tid in suite.ids}
    rng = np.random.default_rng(seed)

    def init(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    shared: dict[str, np.ndarray] = {}
    dims = [in_dim] + [width] * depth
    for layer in range(depth):
        shared[f"trunk.{layer}.w"] = init(dims[layer], (dims[layer], dims[layer + 1]))
        shared[f"trunk.{layer}.b"] = init(dims[layer], (dims[layer + 1],))
    per_task: dict[int, dict[str, np.ndarray]] = {}
    for tid in suite.ids:
        per_task[tid] = {
            f"head.{tid}.w": init(width, (width, out_dims[tid])),
            f"head.{tid}.b": init(width, (out_dims[tid],)),
        }
    partition = ParamPartition(shared=shared, per_task=per_task)

    g = Graph()
    h = g.leaf("input")
    for layer in range(depth):
        h = g.bias_add(g.matmul(h, g.leaf(f"trunk.{layer}.w")), g.leaf(f"trunk.{layer}.b"))
        h = g.tanh(h) if activation == "tanh" else g.relu(h)
    loss_nodes: dict[int, int] = {}
    for tid in suite.ids:
        pred = g.bias_add(g.matmul(h, g.leaf(f"head.{tid}.w")), g.leaf(f"head.{tid}.b"))
        kind = suite.task(tid).loss_kind
        if kind == "squared_error":
            loss = g.squared_error(pred, g.leaf(f"target.{tid}"))
        elif kind == "softmax_xent":
            loss = g.softmax_cross_entropy(pred, g.leaf(f"target.{tid}"))
        else:
            raise ModelError(f"task {tid}: loss kind '{kind}' not supported by the MLP model")
        loss_nodes[tid] = g.mark_output(loss)
    return MLPModel(suite, partition, g, loss_nodes, in_dim, out_dims)


class QuadraticModel:
    """Tasks L_i = 0.5*||A_i s + C_i t_i - b_i||^2 with closed-form gradients.

    Data-free: the batch argument is accepted for interface compatibility and
    ignored. ``analytic`` is True; the tape route is available through
    :meth:`tape_graph` for cross-checking gradients.
    """

    analytic = True

    def __init__(self, suite: TaskSuite, a: dict[int, np.ndarray], c: dict[int, np.ndarray],
                 b: dict[int, np.ndarray], shared_init: np.ndarray | None = None,
                 task_init: dict[int, np.ndarray] | None = None):
        self.suite = suite
        d = None
        for tid in suite.ids:
            ai, ci, bi = a[tid], c[tid], b[tid]
            if ai.ndim != 2 or ci.ndim != 2 or bi.ndim != 1:
                raise ModelError(f"task {tid}: A must be 2-d, C 2-d, b 1-d")
            if ai.shape[0] != bi.shape[0] or ci.shape[0] != bi.shape[0]:
                raise ModelError(
                    f"task {tid}: row counts differ (A {ai.shape}, C {ci.shape}, b {bi.shape})")
            if d is None:
                d = ai.shape[1]
            elif ai.shape[1] != d:
                raise ModelError(f"task {tid}: shared dim {ai.shape[1]} != {d}")
        self.a, self.c, self.b = a, c, b
        shared = {"shared.theta": (np.zeros(d) if shared_init is None else shared_init.astype(np.float64).copy())}
        per_task = {}
        for tid in suite.ids:
            p = c[tid].shape[1]
            init = np.zeros(p) if task_init is None else task_init[tid].astype(np.float64).copy()
            per_task[tid] = {f"task.{tid}.theta": init}
        self.partition = ParamPartition(shared=shared, per_task=per_task)
        self._residuals: dict[int, np.ndarray] | None = None
        self._forward_version: int | None = None

    def residual(self, tid: int) -> np.ndarray:
        s = self.partition.shared["shared.theta"]
        t = self.partition.per_task[tid][f"task.{tid}.theta"]
        return self.a[tid] @ s + self.c[tid] @ t - self.b[tid]

    def forward_all(self, batch: Batch | None = None) -> dict[int, float]:
        res = {tid: self.residual(tid) for tid in self.suite.ids}
        losses = {tid: 0.5 * float(r @ r) for tid, r in res.items()}
        for tid, val in losses.items():
            if not np.isfinite(val):
                raise NonFiniteValue(f"task {tid} quadratic loss is non-finite")
        self._residuals = res
        self._forward_version = self.partition.version
        return losses

    def backward_group(self, group, weights: dict[int, float]) -> dict[str, np.ndarray]:
        if self._forward_version != self.partition.version or self._residuals is None:
            raise ModelError("backward_group without a fresh forward")
        d = self.partition.shared["shared.theta"].shape[0]
        gs = np.zeros(d)
        out: dict[str, np.ndarray] = {}
        for tid in sorted(group):
            r = self._residuals[tid]
            gs = gs + weights[tid] * (self.a[tid].T @ r)
            out[f"task.{tid}.theta"] = weights[tid] * (self.c[tid].T @ r)
        out["shared.theta"] = gs
        return out

    def hessian_bound(self) -> float:
        """Largest eigenvalue of any task's full Hessian [A C]^T [A C]."""
        top = 0.0
        for tid in self.suite.ids:
            m = np.hstack([self.a[tid], self.c[tid]])
            top = max(top, float(np.linalg.eigvalsh(m.T @ m)[-1]))
        return top

    def tape_graph(self) -> tuple[Graph, dict[int, int], dict[str, np.ndarray]]:
        """Equivalent tape objective for gradient cross-checks."""
        g = Graph()
        loss_nodes = {}
        consts: dict[str, np.ndarray] = {}
        s = g.leaf("shared.theta2d")
        for tid in self.suite.ids:
            a = g.const(self.a[tid])
            c = g.const(self.c[tid])
            b = g.const(self.b[tid].reshape(-1, 1))
            t = g.leaf(f"task.{tid}.theta2d")
            r = g.sub(g.add(g.matmul(a, s), g.matmul(c, t)), b)
            loss = g.scale(g.reduce_sum(g.mul(r, r)), 0.5)
            loss_nodes[tid] = g.mark_output(loss)
        consts["shared.theta2d"] = self.partition.shared["shared.theta"].reshape(-1, 1)
        for tid in self.suite.ids:
            consts[f"task.{tid}.theta2d"] = self.partition.per_task[tid][f"task.{tid}.theta"].reshape(-1, 1)
        return g, loss_nodes, consts
