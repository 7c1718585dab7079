"""Training steps: selective group updates, joint and separate baselines.

One batch is processed as a sequence of per-group sub-steps. Each sub-step
backpropagates the weighted loss sum of one group, steps exactly the shared
blocks plus that group's task blocks, re-forwards, and feeds the loss ratios
into the affinity tracker. The partition is re-derived from the tracked
affinity after the batch. Joint descent is the degenerate single-group case
without the trailing forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .affinity import (AffinityTracker, decay_update, instant_inter_group,
                       instant_intra_group)
from .grouping import (GroupPartition, ORDER_FORWARD, ORDER_RANDOM, everything,
                       make_partition, partition_tasks, serialize_partition,
                       shuffle_order, singletons)
from .models import Batch, ParamPartition
from .tensor import NonFiniteValue

METHOD_SELECTIVE = "SELECTIVE"
METHOD_JOINT = "JOINT"
METHOD_SEPARATE = "SEPARATE"
METHOD_FIXED = "FIXED"
METHOD_RANDOM = "RANDOM"

GROUPED_METHODS = (METHOD_SELECTIVE, METHOD_SEPARATE, METHOD_FIXED, METHOD_RANDOM)


class TrainError(ValueError):
    pass


class NumericAbort(ArithmeticError):
    """A loss or gradient went non-finite; training stops loudly."""

    def __init__(self, iteration: int, substep: int, detail: str, log=None):
        super().__init__(f"iteration {iteration}, substep {substep}: {detail}")
        self.iteration = iteration
        self.substep = substep
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    method: str = METHOD_SELECTIVE
    eta: float = 1e-2
    beta: float = 1e-3
    iters: int = 1
    optimizer: str = "sgd"            # sgd | adam
    seed: int = 0
    order_mode: str = ORDER_RANDOM
    weights: dict[int, float] | None = None
    fixed_partition: GroupPartition | None = None
    random_groups: int | None = None
    repartition_stride: int = 1
    grouping_rule: str = "components"
    track_affinity: bool | None = None  # None: on for SELECTIVE only

    def __post_init__(self):
        if self.eta <= 0:
            raise TrainError(f"eta must be positive, got {self.eta}")
        if not 0.0 < self.beta < 1.0:
            raise TrainError(f"beta must be in (0,1), got {self.beta}")
        if self.iters < 1:
            raise TrainError(f"iters must be >= 1, got {self.iters}")
        if self.method not in (METHOD_JOINT,) + GROUPED_METHODS:
            raise TrainError(f"unknown method '{self.method}'")
        if self.method == METHOD_FIXED and self.fixed_partition is None:
            raise TrainError("FIXED method needs a partition")
        if self.method == METHOD_RANDOM and not self.random_groups:
            raise TrainError("RANDOM method needs a group count")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainError(f"unknown optimizer '{self.optimizer}'")


class PlainSGD:
    kind = "sgd"

    def apply(self, partition: ParamPartition, grads: dict[str, np.ndarray], eta: float):
        for name in sorted(grads):
            partition.set_block(name, partition.block(name) - eta * grads[name])

    def state_copy(self, block_ids):
        return {}

    def state_restore(self, state):
        pass


class Adam:
    """Adaptive moments with one (m, v, t) triple per parameter block.

    Shared-block moments advance once per sub-step, so a batch with M groups
    moves them M times; that is the only state-consistent reading of
    per-group optimizer sub-steps.
    """

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def apply(self, partition: ParamPartition, grads: dict[str, np.ndarray], eta: float):
        for name in sorted(grads):
            g = grads[name]
            m, v, t = self.moments.get(name, (np.zeros_like(g), np.zeros_like(g), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.moments[name] = (m, v, t)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            partition.set_block(name, partition.block(name) - eta * mhat / (np.sqrt(vhat) + self.eps))

    def state_copy(self, block_ids):
        out = {}
        for name in block_ids:
            entry = self.moments.get(name)
            out[name] = None if entry is None else (entry[0].copy(), entry[1].copy(), entry[2])
        return out

    def state_restore(self, state):
        for name, entry in state.items():
            if entry is None:
                self.moments.pop(name, None)
            else:
                self.moments[name] = (entry[0].copy(), entry[1].copy(), entry[2])


def make_optimizer(kind: str):
    if kind == "sgd":
        return PlainSGD()
    if kind == "adam":
        return Adam()
    raise TrainError(f"unknown optimizer '{kind}'")


@dataclass
class SubstepRecord:
    group: tuple[int, ...]
    losses_after: dict[int, float] | None
    grad_norm_shared: float
    grad_norm_task: dict[int, float]


@dataclass
class StepReport:
    iteration: int
    method: str
    partition: GroupPartition
    initial_losses: dict[int, float]
    substeps: list[SubstepRecord]
    forwards: int
    backwards: int
    opt_steps: int

    def check_counts(self):
        m = self.partition.m
        if self.method == METHOD_JOINT:
            want = (1, 1, 1)
        else:
            want = (m + 1, m, m)
        got = (self.forwards, self.backwards, self.opt_steps)
        if got != want:
            raise TrainError(f"count contract broken at iteration {self.iteration}: "
                             f"got forwards/backwards/steps {got}, want {want}")


@dataclass
class RunLog:
    method: str
    seed: int
    k: int
    steps: list[StepReport] = field(default_factory=list)
    affinity_rows: list[tuple] = field(default_factory=list)  # (iter, substep, src, tgt, inst, decayed, verdict, skipped)
    partition_rows: list[tuple] = field(default_factory=list)  # (iter, serialized, m)
    final_losses: dict[int, float] = field(default_factory=dict)
    eval_losses: dict[int, float] | None = None
    config_echo: dict | None = None


def _grad_norms(model, group, grads) -> tuple[float, dict[int, float]]:
    shared_sq = 0.0
    for name in model.partition.shared:
        g = grads.get(name)
        if g is not None:
            shared_sq += float(np.sum(g * g))
    per_task = {}
    for tid in group:
        sq = 0.0
        for name in model.partition.per_task[tid]:
            g = grads.get(name)
            if g is not None:
                sq += float(np.sum(g * g))
        per_task[tid] = float(np.sqrt(sq))
    return float(np.sqrt(shared_sq)), per_task


def selective_group_step(model, batch: Batch, partition: GroupPartition, config: TrainConfig,
                         optimizer, tracker: AffinityTracker | None, iteration: int,
                         order_rng: np.random.Generator,
                         log: RunLog | None = None) -> tuple[StepReport, GroupPartition]:
    """One batch of per-group sequential sub-steps; returns the report and
    the partition to use next (re-derived from the tracker when due)."""
    weights = config.weights or model.suite.weights()
    part = shuffle_order(partition, order_rng, config.order_mode)
    losses0 = model.forward_all(batch)
    forwards, backwards, opt_steps = 1, 0, 0
    current = losses0
    substeps: list[SubstepRecord] = []
    all_ids = model.suite.ids
    for idx, group in enumerate(part.ordered_groups(), start=1):
        grads = model.backward_group(group, weights)
        backwards += 1
        optimizer.apply(model.partition, grads, config.eta)
        opt_steps += 1
        after = model.forward_all(batch)
        forwards += 1
        norm_shared, norm_task = _grad_norms(model, group, grads)
        if tracker is not None:
            outside = [j for j in all_ids if j not in group]
            inter = instant_inter_group(current, after, group, outside)
            intra, verdicts = instant_intra_group(current, after, group)
            label = f"{iteration}:{idx}/{part.m}"
            rows = decay_update(tracker, inter + intra, verdicts, label)
            if log is not None:
                log.affinity_rows.extend((iteration, idx) + row for row in rows)
        substeps.append(SubstepRecord(group, after, norm_shared, norm_task))
        current = after
    report = StepReport(iteration, config.method, part, losses0, substeps,
                        forwards, backwards, opt_steps)
    report.check_counts()
    next_partition = part
    if (config.method == METHOD_SELECTIVE and tracker is not None
            and iteration % config.repartition_stride == 0):
        next_partition = partition_tasks(tracker, config.grouping_rule)
    return report, next_partition


def joint_step(model, batch: Batch, config: TrainConfig, optimizer,
               iteration: int) -> StepReport:
    """All tasks in one backward and one optimizer step; no trailing forward."""
    weights = config.weights or model.suite.weights()
    part = everything(model.suite.k)
    losses0 = model.forward_all(batch)
    group = part.groups[0]
    grads = model.backward_group(group, weights)
    optimizer.apply(model.partition, grads, config.eta)
    norm_shared, norm_task = _grad_norms(model, group, grads)
    report = StepReport(iteration, METHOD_JOINT, part, losses0,
                        [SubstepRecord(group, None, norm_shared, norm_task)], 1, 1, 1)
    report.check_counts()
    return report


def separate_step(model, batch: Batch, config: TrainConfig, optimizer,
                  iteration: int, order_rng: np.random.Generator,
                  tracker=None, log=None) -> StepReport:
    part = singletons(model.suite.k)
    report, _ = selective_group_step(model, batch, part, config, optimizer,
                                     tracker, iteration, order_rng, log)
    return report


def _random_partition(k: int, m: int, rng: np.random.Generator) -> GroupPartition:
    if not 1 <= m <= k:
        raise TrainError(f"random group count must be in 1..{k}, got {m}")
    ids = list(rng.permutation(np.arange(1, k + 1)))
    sizes = [len(chunk) for chunk in np.array_split(np.arange(k), m)]
    groups, at = [], 0
    for size in sizes:
        groups.append(tuple(int(t) for t in ids[at:at + size]))
        at += size
    return make_partition(groups)


def train(model, batches, config: TrainConfig) -> RunLog:
    """Run ``config.iters`` batches from the stream and log everything.

    The stream must yield batches deterministically; the update-order rng is
    derived from the seed on a separate stream, so runs are reproducible
    end to end.
    """
    k = model.suite.k
    log = RunLog(method=config.method, seed=config.seed, k=k)
    optimizer = make_optimizer(config.optimizer)
    order_rng = np.random.default_rng([config.seed, 1])
    track = config.track_affinity
    if track is None:
        track = config.method == METHOD_SELECTIVE
    tracker = AffinityTracker(k, config.beta) if track else None

    if config.method == METHOD_SELECTIVE:
        partition = singletons(k)
    elif config.method == METHOD_SEPARATE:
        partition = singletons(k)
    elif config.method == METHOD_FIXED:
        partition = config.fixed_partition
        if partition.k != k:
            raise TrainError(f"fixed partition covers {partition.k} tasks, model has {k}")
    elif config.method == METHOD_RANDOM:
        partition = None  # resampled per iteration
    else:
        partition = everything(k)

    iteration = 0
    last_batch = None
    stream = iter(batches)
    try:
        for iteration in range(1, config.iters + 1):
            try:
                batch = next(stream)
            except StopIteration:
                raise TrainError(f"batch stream ended at iteration {iteration} of {config.iters}")
            last_batch = batch
            if config.method == METHOD_JOINT:
                report = joint_step(model, batch, config, optimizer, iteration)
            else:
                if config.method == METHOD_RANDOM:
                    partition = _random_partition(k, config.random_groups, order_rng)
                report, nxt = selective_group_step(model, batch, partition, config, optimizer,
                                                   tracker, iteration, order_rng, log)
                if config.method == METHOD_SELECTIVE:
                    partition = nxt
            log.steps.append(report)
            log.partition_rows.append((iteration, serialize_partition(report.partition),
                                       report.partition.m))
    except NonFiniteValue as e:
        raise NumericAbort(iteration, -1, str(e), log=log) from e
    log.final_losses = model.forward_all(last_batch)
    return log


# -- descent inequality checker ---------------------------------------------


@dataclass
class SubstepCheck:
    iteration: int
    substep: int
    group: tuple[int, ...]
    lhs: float
    rhs: float
    holds: bool
    cross_term: float
    ts_term: float
    dominant: str


@dataclass
class DescentReport:
    eta: float
    hessian_bound: float
    eta_bound: float
    regime: str                      # IN_REGIME | OUT_OF_REGIME
    checks: list[SubstepCheck]
    violations: int


def check_descent(model, partition: GroupPartition, eta: float, steps: int,
                  batch: Batch | None = None) -> DescentReport:
    """Evaluate both sides of the per-sub-step descent inequality along a run.

    Plain SGD, fixed partition, forward order. The step-size regime is
    eta <= min(2/(H*K), 1/(H*max|G|)) with H the largest per-task Hessian
    eigenvalue; outside it the report is tagged rather than failed.
    """
    weights = model.suite.weights()
    h = model.hessian_bound()
    gmax = max(len(g) for g in partition.groups)
    bound = min(2.0 / (h * partition.k), 1.0 / (h * gmax)) if h > 0 else float("inf")
    regime = "IN_REGIME" if eta <= bound else "OUT_OF_REGIME"
    checks: list[SubstepCheck] = []
    violations = 0
    optimizer = PlainSGD()
    for iteration in range(1, steps + 1):
        for idx, group in enumerate(partition.ordered_groups(), start=1):
            losses = model.forward_all(batch)
            total_before = sum(weights[t] * losses[t] for t in model.suite.ids)
            shared_grads = {}
            for g in partition.groups:
                gr = model.backward_group(g, weights)
                shared_grads[g] = np.concatenate([gr[n].ravel() for n in sorted(model.partition.shared)])
            grads = model.backward_group(group, weights)
            gs = shared_grads[group]
            gsum = np.sum(list(shared_grads.values()), axis=0)
            ts = [grads[n].ravel() for tid in sorted(group) for n in sorted(model.partition.per_task[tid])]
            gts_sq = float(sum(np.sum(v * v) for v in ts))
            optimizer.apply(model.partition, grads, eta)
            losses_after = model.forward_all(batch)
            lhs = sum(weights[t] * losses_after[t] for t in model.suite.ids)
            cross = -eta * float(gs @ (gsum - gs))
            ts_term = -0.5 * eta * gts_sq
            rhs = total_before + cross + ts_term
            slack = 1e-12 * max(1.0, abs(total_before))
            holds = lhs <= rhs + slack
            if not holds:
                violations += 1
            dominant = "cross" if abs(cross) >= abs(ts_term) else "task_specific"
            checks.append(SubstepCheck(iteration, idx, group, lhs, rhs, holds,
                                       cross, ts_term, dominant))
    return DescentReport(eta, h, bound, regime, checks, violations)
