import math

import numpy as np
import pytest

from clusterinr import trainer
from clusterinr.clustering import ClusterPartition
from clusterinr.data_io import SynthSpec, synthesize
from clusterinr.meta_learner import ClusterData, MetaConfig
from clusterinr.model import init_params
from clusterinr.trainer import (
    ConvergenceTracker,
    NetworkConfig,
    PipelineError,
    PipelineReport,
    TrainConfig,
    cluster_residual,
    fine_tune_cluster,
    lr_at_epoch,
    run_pipeline,
    should_split,
    train_with_reclustering,
)

FAST = dict(batch_size=256, max_epochs=60, convergence_patience_epochs=5)


def _cluster(n=150, T=2, M=1, seed=0, fn=None):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1, 1, (n, 3))
    times = np.linspace(-1, 1, T)
    if fn is None:
        values = rng.uniform(-0.5, 0.5, (T, n, M))
    else:
        values = np.stack([fn(coords, t) for t in times])
    return ClusterData(coords, times, values.astype(np.float32))


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("epoch, expected", [
    (0, 5e-5), (29, 5e-5), (30, 4.6e-5), (59, 4.6e-5), (60, 5e-5 * 0.92 ** 2), (90, 3.8934e-5),
])
def test_lr_staircase(epoch, expected):
    assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(expected, rel=1e-4 if epoch == 90 else 1e-12)
    assert lr_at_epoch(TrainConfig(), epoch) == 5e-5 * 0.92 ** (epoch // 30)


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), -1)


def test_patience_trace_stops_30_after_last_improvement():
    trace = [5, 4, 3] + [3] * 100
    tr = ConvergenceTracker(30)
    stopped = None
    for epoch, loss in enumerate(trace):
        tr.update(loss)
        if tr.converged:
            stopped = epoch
            break
    assert tr.best_epoch == 2
    assert stopped - tr.best_epoch == 30


def test_patience_resets_on_strict_improvement():
    tr = ConvergenceTracker(3)
    for loss in [1.0, 1.0, 1.0, 0.9, 0.9, 0.9]:
        tr.update(loss)
        assert not tr.converged
    tr.update(0.95)
    assert tr.converged and tr.best_epoch == 3


def test_fine_tune_patience_and_best_params():
    data = _cluster()
    cfg = TrainConfig(batch_size=64, max_epochs=500, convergence_patience_epochs=4, initial_lr=1e-3)
    res = fine_tune_cluster(data, init_params(8, 1, seed=0), cfg)
    best_epoch = int(np.argmin(res.loss_trace))
    assert res.epochs_run == len(res.loss_trace) < 500
    assert res.epochs_run - 1 - best_epoch == 4
    assert res.best_loss == min(res.loss_trace)
    agg, per_var = cluster_residual(res.params, data)
    assert res.residual == agg and res.per_variable_residual.tolist() == per_var.tolist()


def test_epoch_sample_size_is_thirty_percent_of_records(monkeypatch):
    seen = []
    orig = ClusterData.record_batch

    def spy(self, ids):
        seen.append(len(ids))
        return orig(self, ids)

    monkeypatch.setattr(ClusterData, "record_batch", spy)
    data = _cluster(n=101, T=3)
    fine_tune_cluster(data, init_params(4, 1, seed=0), TrainConfig(max_epochs=2, batch_size=10_000))
    assert seen == [math.ceil(0.3 * 303)] * 2


@pytest.mark.slow
def test_constant_field_is_learned_near_exactly():
    # needs many small Adam steps per epoch; one 16k batch per epoch stalls near 1e-3
    data = _cluster(n=2000, fn=lambda c, t: np.full((len(c), 1), 0.5))
    res = fine_tune_cluster(data, init_params(32, 1, seed=0), TrainConfig(batch_size=8))
    assert res.residual < 1e-8


def test_fine_tune_deterministic_and_rejects_wrong_width():
    data = _cluster()
    cfg = TrainConfig(**FAST)
    a = fine_tune_cluster(data, init_params(8, 1, seed=0), cfg, (3, 1))
    b = fine_tune_cluster(data, init_params(8, 1, seed=0), cfg, (3, 1))
    assert a.params.equal(b.params)
    with pytest.raises(ValueError, match="outputs"):
        fine_tune_cluster(data, init_params(8, 2, seed=0), cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_checkpoint():
    data = _cluster(fn=lambda c, t: np.full((len(c), 1), 1e38))
    with pytest.raises(trainer.TrainingError) as info:
        fine_tune_cluster(data, init_params(4, 1, seed=0), TrainConfig(**FAST, initial_lr=1e30))
    assert info.value.checkpoint is not None and info.value.leaf_id == (0,)


# ---------------------------------------------------------------- split gate


@pytest.mark.parametrize("residual, depth, splittable, expected", [
    (6e-4, 0, True, True),
    (4e-4, 0, True, False),
    (5e-4, 0, True, False),  # strictly greater
    (6e-4, 3, True, False),
    (6e-4, 2, True, True),
    (6e-4, 0, False, False),
])
def test_split_gate(residual, depth, splittable, expected):
    assert should_split(residual, depth, splittable, TrainConfig()) is expected


def _root(data):
    return ClusterPartition.from_centroids(data.coords.mean(axis=0, keepdims=True)).roots[0]


def test_below_threshold_no_split(monkeypatch):
    data = _cluster()
    monkeypatch.setattr(trainer, "cluster_residual", lambda p, d: (4e-4, np.array([4e-4])))
    root = _root(data)
    out = train_with_reclustering(data, init_params(4, 1, seed=0), root, (0,), TrainConfig(**FAST))
    assert len(out) == 1 and not out[0].split_performed and root.is_leaf


def test_children_inherit_parent_weights(monkeypatch):
    data = _cluster()
    inits = []
    real = trainer.fine_tune_cluster

    def spy(d, init, cfg, leaf_id=(0,)):
        inits.append((leaf_id, init.copy()))
        res = real(d, init, cfg, leaf_id)
        if leaf_id == (0,):
            res.residual = 1.0  # force one split at the root only
        else:
            res.residual = 0.0
        return res

    monkeypatch.setattr(trainer, "fine_tune_cluster", spy)
    splits = []
    root = _root(data)
    out = train_with_reclustering(data, init_params(4, 1, seed=0), root, (0,), TrainConfig(**FAST), splits)
    assert [lid for lid, _ in inits] == [(0,), (0, 0), (0, 1)]
    parent = splits[0].params
    assert inits[1][1].equal(parent) and inits[2][1].equal(parent)
    assert sorted(r.leaf_id for r in out) == [(0, 0), (0, 1)]
    assert sum(r.point_count for r in out) == data.point_count


def test_depth_zero_is_plain_fine_tune():
    data = _cluster()
    cfg = TrainConfig(**FAST, max_split_depth=0, residual_threshold=1e-12)
    init = init_params(4, 1, seed=0)
    out = train_with_reclustering(data, init, _root(data), (0,), cfg)
    plain = fine_tune_cluster(data, init, cfg)
    assert len(out) == 1
    assert out[0].params.equal(plain.params) and out[0].residual == plain.residual


def test_identical_points_split_refused_is_terminal():
    n = 30
    data = ClusterData(np.zeros((n, 3)), np.array([0.0]), np.random.default_rng(0).uniform(-1, 1, (1, n, 1)).astype(np.float32))
    out = train_with_reclustering(data, init_params(4, 1, seed=0), _root(data), (0,),
                                  TrainConfig(**FAST, residual_threshold=1e-12))
    assert len(out) == 1 and "distinct" in out[0].terminal_reason


def test_discontinuity_children_improve_on_parent():
    # a jump across x = 0 inside one cluster
    data = _cluster(n=300, fn=lambda c, t: np.where(c[:, :1] < 0, 0.8, -0.8) + 0.05 * t)
    cfg = TrainConfig(batch_size=64, max_epochs=40, convergence_patience_epochs=5, max_split_depth=1,
                      residual_threshold=1e-6)
    splits = []
    out = train_with_reclustering(data, init_params(8, 1, seed=0), _root(data), (0,), cfg, splits)
    assert len(splits) == 1 and len(out) == 2
    assert all(r.residual < splits[0].residual for r in out)


# ---------------------------------------------------------------- pipeline


def _small_dataset(seed=0, fields=("trig",), points=300):
    return synthesize(SynthSpec(point_count=points, timesteps=2, fields=fields, seed=seed))


def test_pipeline_k1_one_network():
    ds = _small_dataset()
    model = run_pipeline(ds, TrainConfig(**FAST, k=1, max_split_depth=0), NetworkConfig(width=8), None)
    assert list(model.networks) == [(0,)]


def test_pipeline_workers_bit_identical():
    ds = _small_dataset(points=400)
    cfg = dict(FAST, k=3, residual_threshold=1e-6, max_split_depth=1, max_epochs=8)
    meta = MetaConfig(meta_iterations=3)
    a = run_pipeline(ds, TrainConfig(**cfg, worker_count=1), NetworkConfig(width=8), meta)
    b = run_pipeline(ds, TrainConfig(**cfg, worker_count=3), NetworkConfig(width=8), meta)
    assert a.partition.equal(b.partition)
    assert a.networks.keys() == b.networks.keys()
    assert all(a.networks[k].equal(b.networks[k]) for k in a.networks)


def test_pipeline_report_and_routing_consistency():
    ds = _small_dataset(points=400, fields=("discontinuity",))
    report = PipelineReport([], [], {})
    model = run_pipeline(ds, TrainConfig(**dict(FAST, k=2, residual_threshold=1e-9, max_split_depth=2, max_epochs=5)),
                         NetworkConfig(width=8), MetaConfig(meta_iterations=2), report)
    assert report.splits
    assert sorted(r.leaf_id for r in report.leaves) == model.partition.leaf_ids()
    assert sum(r.point_count for r in report.leaves) == ds.point_count
    assert all(len(tr) == 2 for tr in report.meta_traces.values())


def test_pipeline_failure_reports_each_cluster(monkeypatch):
    def boom(*args):
        raise trainer.TrainingError("synthetic failure")

    monkeypatch.setattr(trainer, "run_cluster_job", boom)
    with pytest.raises(PipelineError) as info:
        run_pipeline(_small_dataset(), TrainConfig(**FAST, k=2), NetworkConfig(width=4), None)
    assert set(info.value.statuses) == {"0", "1"}
    assert "synthetic failure" in str(info.value)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(sample_fraction_per_epoch=0)
    with pytest.raises(ValueError):
        TrainConfig(residual_threshold=0)
    with pytest.raises(ValueError):
        TrainConfig(convergence_patience_epochs=0)
