"""First-order MAML over randomly sampled points of one cluster.

Each meta-iteration draws a fresh random subset of the cluster's points (all
timesteps of each), splits it into support and query halves, adapts a copy
of the current initialization with a few plain gradient steps on the support
half, and moves the initialization with Adam along the query-loss gradient
taken at the adapted weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import NetworkParams, mse_and_grad
from .numeric_core import AdamState, NonFiniteError, adam_step

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    sample_count: int | None = None  # None: min(10_000, 10% of the cluster's points)
    inner_steps: int = 4
    inner_lr: float = 1e-4
    outer_lr: float = 5e-5
    meta_iterations: int = 500
    tasks_per_iteration: int = 1
    first_order: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.first_order:
            raise NotImplementedError("only first-order meta-gradients are implemented")
        if self.inner_lr <= 0 or self.outer_lr < 0:
            raise ValueError("inner_lr must be > 0 and outer_lr >= 0")
        if self.inner_steps < 0 or self.meta_iterations < 0 or self.tasks_per_iteration < 1:
            raise ValueError("inner_steps and meta_iterations must be >= 0, tasks_per_iteration >= 1")
        if self.sample_count is not None and self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def resolved_sample_count(self, n_points: int) -> int:
        if self.sample_count is None:
            count = min(10_000, int(0.1 * n_points))
        else:
            count = self.sample_count
        return int(min(max(count, 2), n_points))


@dataclass
class ClusterData:
    """One cluster's training data in normalized space."""

    coords: np.ndarray  # (n, 3) float64
    times: np.ndarray  # (T,) float64
    values: np.ndarray  # (T, n, M) float32

    @property
    def point_count(self) -> int:
        return self.coords.shape[0]

    @property
    def record_count(self) -> int:
        return self.coords.shape[0] * self.times.shape[0]

    def subset(self, rows: np.ndarray) -> "ClusterData":
        return ClusterData(self.coords[rows], self.times, self.values[:, rows])

    def records(self, point_rows: np.ndarray | None = None):
        """(inputs (R, 4) float32, targets (R, M) float32) for every timestep of the given points."""
        rows = np.arange(self.point_count) if point_rows is None else point_rows
        T = self.times.shape[0]
        xyz = np.broadcast_to(self.coords[rows], (T, len(rows), 3))
        t = np.broadcast_to(self.times[:, None, None], (T, len(rows), 1))
        inputs = np.concatenate([xyz, t], axis=-1).reshape(-1, 4).astype(np.float32)
        targets = self.values[:, rows].reshape(-1, self.values.shape[2])
        return inputs, targets

    def record_batch(self, record_ids: np.ndarray):
        """Inputs/targets for flat record ids ``t * n + point``."""
        n = self.point_count
        t_idx, p_idx = np.divmod(record_ids, n)
        inputs = np.empty((len(record_ids), 4), dtype=np.float32)
        inputs[:, :3] = self.coords[p_idx]
        inputs[:, 3] = self.times[t_idx]
        return inputs, self.values[t_idx, p_idx]


def task_rng(seed: int, leaf, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, len(leaf), *leaf, iteration)))


def sample_task(data: ClusterData, config: MetaConfig, leaf=(0,), iteration: int = 0):
    """Draw ``sample_count`` distinct points and halve them into (support, query) row sets."""
    n = data.point_count
    if n < 2:
        raise ValueError("a meta-learning task needs a cluster with at least 2 points")
    count = config.resolved_sample_count(n)
    rng = task_rng(config.seed, leaf, iteration)
    rows = rng.choice(n, size=count, replace=False)
    half = count // 2
    return rows[:half], rows[half:]


@dataclass
class MetaInit:
    params: NetworkParams
    source_leaf: tuple
    meta_loss_trace: list[float] = field(default_factory=list)


def adapt(params: NetworkParams, inputs, targets, steps: int, lr: float) -> NetworkParams:
    """Plain gradient descent on a copy of ``params``."""
    fast = params.copy()
    for step in range(steps):
        try:
            loss, grads = mse_and_grad(fast, inputs, targets)
        except NonFiniteError as e:
            raise NonFiniteError(f"inner step {step}: {e}") from e
        if not np.isfinite(loss):
            raise NonFiniteError(f"inner step {step}: support loss {loss}")
        for k, g in grads.items():
            fast.tensors[k] -= lr * g
    return fast


def meta_train(data: ClusterData, init: NetworkParams, config: MetaConfig, leaf=(0,)) -> MetaInit:
    """Meta-learn an initialization for one cluster, starting from ``init``."""
    params = init.copy()
    trace: list[float] = []
    if config.meta_iterations == 0 or data.point_count < 2:
        return MetaInit(params, leaf, trace)
    state = AdamState.zeros_like(params.tensors)
    for it in range(config.meta_iterations):
        outer = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        losses = []
        for task in range(config.tasks_per_iteration):
            support, query = sample_task(data, config, leaf, it * config.tasks_per_iteration + task)
            s_in, s_tg = data.records(support)
            q_in, q_tg = data.records(query)
            try:
                fast = adapt(params, s_in, s_tg, config.inner_steps, config.inner_lr)
                loss, grads = mse_and_grad(fast, q_in, q_tg)
            except NonFiniteError as e:
                raise NonFiniteError(f"meta-learning diverged on leaf {leaf} at iteration {it}: {e}") from e
            if not np.isfinite(loss):
                raise NonFiniteError(f"meta-learning diverged on leaf {leaf} at iteration {it}: query loss {loss}")
            losses.append(loss)
            for k, g in grads.items():
                outer[k] += g
        if config.tasks_per_iteration > 1:
            for g in outer.values():
                g /= config.tasks_per_iteration
        if config.outer_lr > 0:
            adam_step(params.tensors, outer, state, config.outer_lr)
        trace.append(float(np.mean(losses)))
        if it % 100 == 0 or it == config.meta_iterations - 1:
            log.info("meta leaf=%s iter=%d query_loss=%.3e", ".".join(map(str, leaf)), it, trace[-1])
    return MetaInit(params, leaf, trace)
