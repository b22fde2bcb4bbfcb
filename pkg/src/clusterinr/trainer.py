"""Per-cluster fine-tuning, residual-driven re-clustering and the pipeline
that runs one independent job per top-level cluster.

Every random stream is keyed on (global seed, purpose, leaf id), so results
do not depend on how jobs are scheduled across workers.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    ClusterPartition,
    ClusterStats,
    Node,
    SplitRefused,
    build_partition,
    leaf_name,
    split_cluster,
)
from .data_io import Dataset, normalize
from .meta_learner import ClusterData, MetaConfig, meta_train
from .model import NetworkParams, PositionalEncodingConfig, backward, forward, init_params, predict
from .model_store import EncodedModel, fingerprint
from .numeric_core import AdamState, NonFiniteError, adam_step

log = logging.getLogger(__name__)

# purposes mixed into the per-leaf seed sequences
_INIT, _EPOCH, _SPLIT, _KMEANS = 0, 2, 3, 4


def leaf_rng(seed: int, purpose: int, leaf=()) -> np.random.Generator:
    return np.random.default_rng(leaf_seed(seed, purpose, leaf))


def leaf_seed(seed: int, purpose: int, leaf=()) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(purpose, len(leaf), *leaf))


@dataclass
class TrainConfig:
    initial_lr: float = 5e-5
    lr_decay_factor: float = 0.92
    lr_decay_interval_epochs: int = 30
    convergence_patience_epochs: int = 30
    sample_fraction_per_epoch: float = 0.30
    residual_threshold: float = 5e-4
    max_split_depth: int = 3
    batch_size: int = 16_384
    k: int = 20
    seed: int = 0
    worker_count: int = 1
    max_epochs: int = 5000  # safety cap on top of the patience rule

    def __post_init__(self):
        if not 0 < self.sample_fraction_per_epoch <= 1:
            raise ValueError("sample_fraction_per_epoch must be in (0, 1]")
        if self.residual_threshold <= 0:
            raise ValueError("residual_threshold must be > 0")
        if self.convergence_patience_epochs < 1:
            raise ValueError("convergence_patience_epochs must be >= 1")
        if min(self.initial_lr, self.lr_decay_factor, self.lr_decay_interval_epochs,
               self.batch_size, self.k, self.worker_count, self.max_epochs) <= 0:
            raise ValueError("schedule, batch, K, worker and epoch settings must be positive")
        if self.max_split_depth < 0:
            raise ValueError("max_split_depth must be >= 0")


@dataclass(frozen=True)
class NetworkConfig:
    width: int = 128
    num_frequencies: int = 6
    include_raw_input: bool = True
    gfe_blocks: int = 5
    lfe_blocks: int = 6
    shared_head: bool = False
    omega_first: float = 30.0

    @property
    def pe(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.num_frequencies, self.include_raw_input)

    def init(self, n_vars: int, seed) -> NetworkParams:
        return init_params(self.width, n_vars, self.pe, seed, gfe_blocks=self.gfe_blocks,
                           lfe_blocks=self.lfe_blocks, shared_head=self.shared_head,
                           omega_first=self.omega_first)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.initial_lr * config.lr_decay_factor ** (epoch // config.lr_decay_interval_epochs)


class ConvergenceTracker:
    """Stop once the loss has not beaten its best for ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, loss: float) -> bool:
        """Record one epoch; True if it is a new best."""
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, self.epoch
            return True
        return False

    @property
    def converged(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class ClusterJobResult:
    leaf_id: tuple
    params: NetworkParams
    epochs_run: int
    best_loss: float
    residual: float
    per_variable_residual: np.ndarray
    point_count: int
    split_performed: bool = False
    loss_trace: list[float] = field(default_factory=list, repr=False)
    terminal_reason: str = ""

    @property
    def stats(self) -> ClusterStats:
        return ClusterStats(self.leaf_id, self.point_count, self.per_variable_residual.copy(), self.residual)


class TrainingError(RuntimeError):
    def __init__(self, message, leaf_id=None, checkpoint: NetworkParams | None = None):
        super().__init__(message)
        self.leaf_id = leaf_id
        self.checkpoint = checkpoint


def cluster_residual(params: NetworkParams, data: ClusterData) -> tuple[float, np.ndarray]:
    """MSE over every point, timestep and variable (normalized space), and per variable."""
    inputs, targets = data.records()
    pred = predict(params, inputs)
    err = np.square(pred.astype(np.float64) - targets, dtype=np.float64)
    per_var = err.mean(axis=0)
    return float(per_var.mean()), per_var


def fine_tune_cluster(data: ClusterData, init: NetworkParams, config: TrainConfig, leaf_id=(0,)) -> ClusterJobResult:
    """Adam on a fresh random fraction of the cluster's records every epoch,
    until the epoch loss stops improving. Returns the best epoch's weights."""
    if data.point_count < 1:
        raise ValueError("cannot train on an empty cluster")
    if init.n_vars != data.values.shape[2]:
        raise ValueError(f"network has {init.n_vars} outputs, data has {data.values.shape[2]} variables")
    rng = leaf_rng(config.seed, _EPOCH, leaf_id)
    params = init.copy()
    best = params.copy()
    state = AdamState.zeros_like(params.tensors)
    tracker = ConvergenceTracker(config.convergence_patience_epochs)
    n_records = data.record_count
    per_epoch = min(n_records, math.ceil(config.sample_fraction_per_epoch * n_records))
    trace: list[float] = []
    name = leaf_name(leaf_id)
    for epoch in range(config.max_epochs):
        lr = lr_at_epoch(config, epoch)
        ids = rng.choice(n_records, size=per_epoch, replace=False)
        total = 0.0
        try:
            for s in range(0, per_epoch, config.batch_size):
                inputs, targets = data.record_batch(ids[s:s + config.batch_size])
                pred, cache = forward(params, inputs)
                diff = pred - targets
                total += float(np.sum(np.square(diff, dtype=np.float64)))
                grads = backward(params, cache, diff * (2.0 / diff.size))
                adam_step(params.tensors, grads, state, lr)
        except NonFiniteError as e:
            raise TrainingError(f"leaf {name} diverged at epoch {epoch}: {e}", leaf_id, best) from e
        loss = total / (per_epoch * init.n_vars)
        if not math.isfinite(loss):
            raise TrainingError(f"leaf {name}: non-finite loss at epoch {epoch}", leaf_id, best)
        trace.append(loss)
        if tracker.update(loss):
            best = params.copy()
        if epoch % 25 == 0:
            log.info("leaf=%s epoch=%d loss=%.4e lr=%.3e", name, epoch, loss, lr)
        if tracker.converged:
            break
    residual, per_var = cluster_residual(best, data)
    log.info("leaf=%s done epochs=%d best_loss=%.4e residual=%.4e", name, len(trace), tracker.best, residual)
    return ClusterJobResult(leaf_id, best, len(trace), tracker.best, residual, per_var,
                            data.point_count, loss_trace=trace)


def should_split(residual: float, depth: int, splittable: bool, config: TrainConfig) -> bool:
    return residual > config.residual_threshold and depth < config.max_split_depth and splittable


def train_with_reclustering(data: ClusterData, init: NetworkParams, root: Node, leaf_id, config: TrainConfig,
                            split_events: list | None = None) -> list[ClusterJobResult]:
    """Fine-tune a leaf; while its residual exceeds the threshold, split it
    in two and continue each half from a copy of the parent's weights.

    Mutates the tree under ``root``. Returns one result per terminal leaf;
    parent results (``split_performed=True``) are appended to ``split_events``.
    """
    result = fine_tune_cluster(data, init, config, leaf_id)
    node = root.find(leaf_id)
    if result.residual <= config.residual_threshold:
        result.terminal_reason = "residual below threshold"
        return [result]
    if node.depth >= config.max_split_depth:
        result.terminal_reason = f"depth cap {config.max_split_depth}"
        if config.max_split_depth > 0:
            log.warning("leaf=%s residual %.3e above threshold at depth cap", leaf_name(leaf_id), result.residual)
        return [result]
    try:
        halves = split_cluster(root, leaf_id, data.coords, config.max_split_depth,
                               seed=leaf_seed(config.seed, _SPLIT, leaf_id))
    except SplitRefused as e:
        log.warning("%s", e)
        result.terminal_reason = str(e)
        return [result]
    result.split_performed = True
    if split_events is not None:
        split_events.append(result)
    log.info("leaf=%s residual %.3e > %.1e: split into %d + %d points", leaf_name(leaf_id),
             result.residual, config.residual_threshold, len(halves[0]), len(halves[1]))
    out = []
    for side, rows in enumerate(halves):
        out += train_with_reclustering(data.subset(rows), result.params.copy(), root, leaf_id + (side,),
                                       config, split_events)
    return out


@dataclass
class JobOutput:
    root: Node
    leaves: list[ClusterJobResult]
    splits: list[ClusterJobResult]
    meta_trace: list[float]


def run_cluster_job(root: Node, data: ClusterData, n_vars: int, config: TrainConfig, net: NetworkConfig,
                    meta: MetaConfig | None) -> JobOutput:
    leaf = root.leaf_id
    init = net.init(n_vars, leaf_seed(config.seed, _INIT, leaf))
    trace: list[float] = []
    if meta is not None:
        mi = meta_train(data, init, meta, leaf)
        init, trace = mi.params, mi.meta_loss_trace
    splits: list[ClusterJobResult] = []
    leaves = train_with_reclustering(data, init, root, leaf, config, splits)
    return JobOutput(root, leaves, splits, trace)


class PipelineError(RuntimeError):
    def __init__(self, statuses: dict[str, str]):
        lines = "; ".join(f"cluster {k}: {v}" for k, v in statuses.items())
        super().__init__(f"pipeline aborted ({lines})")
        self.statuses = statuses


@dataclass
class PipelineReport:
    leaves: list[ClusterJobResult]
    splits: list[ClusterJobResult]
    meta_traces: dict[tuple, list[float]]


def _job(args):
    return run_cluster_job(*args)


def run_pipeline(dataset: Dataset, config: TrainConfig, net: NetworkConfig = NetworkConfig(),
                 meta: MetaConfig | None = MetaConfig(), report: PipelineReport | None = None) -> EncodedModel:
    """Normalize, partition, train every cluster (meta-init, fine-tune,
    re-cluster) on ``config.worker_count`` workers, and assemble the model.

    ``meta=None`` skips meta-learning and fine-tunes from random init.
    """
    normed, normalizer = normalize(dataset)
    n_vars = dataset.variable_count
    partition = build_partition(normed.coords, config.k, seed=leaf_seed(config.seed, _KMEANS))
    members = partition.members(normed.coords)
    jobs = []
    for root in partition.roots:
        rows = members[root.leaf_id]
        data = ClusterData(normed.coords[rows], normed.times, normed.values[:, rows])
        jobs.append((root, data, n_vars, config, net, meta))

    outputs: list[JobOutput | None] = [None] * len(jobs)
    statuses: dict[str, str] = {}
    if config.worker_count == 1:
        for i, job in enumerate(jobs):
            try:
                outputs[i] = _job(job)
                statuses[str(i)] = "ok"
            except Exception as e:  # collected into the per-cluster report
                statuses[str(i)] = f"failed: {e}"
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=config.worker_count, mp_context=ctx) as pool:
            futures = [pool.submit(_job, job) for job in jobs]
            for i, fut in enumerate(futures):
                try:
                    outputs[i] = fut.result()
                    statuses[str(i)] = "ok"
                except Exception as e:
                    statuses[str(i)] = f"failed: {e}"
    if any(s != "ok" for s in statuses.values()):
        raise PipelineError(statuses)

    networks, stats = {}, {}
    leaves, splits, traces = [], [], {}
    for out in outputs:
        partition.replace_root(out.root)
        for res in out.leaves:
            networks[res.leaf_id] = res.params
            stats[res.leaf_id] = res.stats
        leaves += out.leaves
        splits += out.splits
        traces[out.root.leaf_id] = out.meta_trace
    if report is not None:
        report.leaves, report.splits, report.meta_traces = leaves, splits, traces
    return EncodedModel(fingerprint(dataset), normalizer, partition, networks, stats)
