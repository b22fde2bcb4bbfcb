"""Decoding, quality metrics and error maps.

Metrics are computed in original units. PSNR and NRMSE use each variable's
ground-truth range (max - min over all timesteps) as the peak, and the
aggregate report is the plain mean over (variable, timestep) pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, write_dataset
from .model import predict
from .model_store import EncodedModel, fingerprint

PSNR_SENTINEL = 99.99


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Decoded:
    values: np.ndarray  # (Q, M) original units
    leaf_index: np.ndarray  # (Q,) position in partition.leaf_ids()
    out_of_bounds: np.ndarray  # (Q,) bool


def decode_detailed(model: EncodedModel, queries: np.ndarray) -> Decoded:
    """Route each (x, y, z, t) query to its leaf network and denormalize.

    Queries outside the training bounds are clamped onto the boundary of the
    normalized domain and flagged.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 4)
    n_vars = model.fingerprint.variable_count
    if not np.isfinite(q).all():
        raise ValueError("queries must be finite")
    norm = model.normalizer
    xyz = norm.coords(q[:, :3].astype(np.float32))
    t = norm.time(q[:, 3].astype(np.float32))
    inputs = np.concatenate([xyz, t[:, None]], axis=1)
    oob = (np.abs(inputs) > 1.0).any(axis=1)
    inputs = np.clip(inputs, -1.0, 1.0)
    leaf_idx = model.partition.assign_indices(inputs[:, :3])
    out = np.empty((len(q), n_vars), dtype=np.float32)
    for i, leaf in enumerate(model.partition.leaf_ids()):
        rows = np.flatnonzero(leaf_idx == i)
        if rows.size:
            out[rows] = predict(model.networks[leaf], inputs[rows].astype(np.float32))
    return Decoded(norm.denormalize_values(out), leaf_idx, oob)


def decode(model: EncodedModel, queries: np.ndarray) -> np.ndarray:
    return decode_detailed(model, queries).values


def dataset_queries(ds: Dataset) -> np.ndarray:
    """(T*N, 4) query array covering every record, timestep-major."""
    T, N = ds.timestep_count, ds.point_count
    xyz = np.broadcast_to(ds.coords, (T, N, 3))
    t = np.broadcast_to(ds.times[:, None, None], (T, N, 1))
    return np.concatenate([xyz, t], axis=-1).reshape(-1, 4)


def reconstruct(model: EncodedModel, ds: Dataset) -> np.ndarray:
    """Decoded values for every record of ``ds`` as a (T, N, M) array."""
    check_fingerprint(model, ds)
    vals = decode(model, dataset_queries(ds))
    return vals.reshape(ds.timestep_count, ds.point_count, ds.variable_count)


def check_fingerprint(model: EncodedModel, ds: Dataset) -> None:
    fp = fingerprint(ds)
    if fp != model.fingerprint:
        raise FingerprintMismatch(f"model fingerprint [{model.fingerprint.describe()}] does not match "
                                  f"dataset fingerprint [{fp.describe()}]")


# ---------------------------------------------------------------- metrics


def _mse(gt, pred) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: ground truth {gt.shape} vs prediction {pred.shape}")
    return float(np.mean((gt - pred) ** 2))


def psnr(gt, pred, data_range: float) -> float:
    """10 log10(range^2 / MSE); PSNR_SENTINEL when MSE is 0 or the range is empty."""
    mse = _mse(gt, pred)
    if mse == 0 or data_range <= 0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(data_range ** 2 / mse))


def nrmse(gt, pred, data_range: float) -> float:
    mse = _mse(gt, pred)
    if data_range <= 0:
        return 0.0 if mse == 0 else float("nan")
    return float(np.sqrt(mse) / data_range)


def r_squared(gt, pred) -> float:
    """1 - SS_res / SS_tot; NaN when the ground truth is constant."""
    _mse(gt, pred)
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    ss_tot = float(np.sum((gt - gt.mean()) ** 2))
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(np.sum((gt - pred) ** 2)) / ss_tot


@dataclass
class MetricReport:
    variable_names: list[str]
    psnr: np.ndarray  # (M, T)
    nrmse: np.ndarray
    r2: np.ndarray
    normalized_mse: float
    point_count: int
    flags: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.nanmean(self.psnr))

    @property
    def mean_nrmse(self) -> float:
        return float(np.nanmean(self.nrmse))

    @property
    def mean_r2(self) -> float:
        return float(np.nanmean(self.r2)) if np.isfinite(self.r2).any() else float("nan")

    def as_dict(self) -> dict[str, float]:
        out = {"psnr": self.mean_psnr, "nrmse": self.mean_nrmse, "r2": self.mean_r2,
               "normalized_mse": self.normalized_mse, "points": self.point_count}
        for j, name in enumerate(self.variable_names):
            out[f"psnr.{name}"] = float(np.nanmean(self.psnr[j]))
            out[f"nrmse.{name}"] = float(np.nanmean(self.nrmse[j]))
            out[f"r2.{name}"] = float(np.nanmean(self.r2[j])) if np.isfinite(self.r2[j]).any() else float("nan")
        return out

    def table(self) -> str:
        lines = [f"{'variable':<20} {'PSNR(dB)':>10} {'NRMSE':>12} {'R2':>10}"]
        for j, name in enumerate(self.variable_names):
            d = self.as_dict()
            lines.append(f"{name:<20} {d['psnr.' + name]:>10.3f} {d['nrmse.' + name]:>12.4e} {d['r2.' + name]:>10.5f}")
        lines.append(f"{'mean':<20} {self.mean_psnr:>10.3f} {self.mean_nrmse:>12.4e} {self.mean_r2:>10.5f}")
        lines.append(f"normalized MSE {self.normalized_mse:.4e} over {self.point_count} points")
        lines += [f"flag: {f}" for f in self.flags]
        return "\n".join(lines)


def metric_report(ds: Dataset, pred: np.ndarray, normalizer=None) -> MetricReport:
    """Per (variable, timestep) PSNR/NRMSE/R^2 of ``pred`` (T, N, M) against ``ds``."""
    gt = ds.values.astype(np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    T, M = ds.timestep_count, ds.variable_count
    ranges = ds.value_bounds[:, 1] - ds.value_bounds[:, 0]
    p = np.empty((M, T))
    e = np.empty((M, T))
    r = np.empty((M, T))
    flags = []
    for j in range(M):
        for t in range(T):
            g, q = gt[t, :, j], pred[t, :, j]
            p[j, t] = psnr(g, q, ranges[j])
            e[j, t] = nrmse(g, q, ranges[j])
            r[j, t] = r_squared(g, q)
            if p[j, t] == PSNR_SENTINEL:
                flags.append(f"{ds.variable_names[j]} t={t}: PSNR capped at {PSNR_SENTINEL} "
                             f"({'empty range' if ranges[j] <= 0 else 'exact reconstruction'})")
            if np.isnan(r[j, t]):
                flags.append(f"{ds.variable_names[j]} t={t}: R2 undefined (constant ground truth)")
    if normalizer is not None:
        nmse = float(np.mean((normalizer.values(pred) - normalizer.values(gt)) ** 2))
    else:
        safe = np.where(ranges > 0, ranges, 1.0)
        nmse = float(np.mean(((pred - gt) * (2.0 / safe)) ** 2))
    return MetricReport(list(ds.variable_names), p, e, r, nmse, ds.point_count, flags)


def evaluate_model(model: EncodedModel, ds: Dataset) -> MetricReport:
    return metric_report(ds, reconstruct(model, ds), model.normalizer)


# ---------------------------------------------------------------- error maps

ERROR_MAP_HEADER = ["x", "y", "z", "t", "variable", "abs_error"]


def error_map(model: EncodedModel, ds: Dataset) -> np.ndarray:
    """|ground truth - decoded| in original units, shaped like ``ds.values``."""
    return np.abs(ds.values.astype(np.float64) - reconstruct(model, ds))


def export_error_map(ds: Dataset, model: EncodedModel, path, format: str = "csv") -> np.ndarray:
    """Write the error map as CSV rows or as an MCDS file of absolute errors."""
    err = error_map(model, ds)
    if format == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ERROR_MAP_HEADER)
            for ti, tv in enumerate(ds.times.tolist()):
                for n in range(ds.point_count):
                    x, y, z = (repr(float(c)) for c in ds.coords[n])
                    for j, name in enumerate(ds.variable_names):
                        w.writerow([x, y, z, repr(tv), name, repr(float(err[ti, n, j]))])
    elif format == "mcds-delta":
        write_dataset(Dataset(ds.coords, ds.times, err.astype(np.float32), list(ds.variable_names)), Path(path))
    else:
        raise ValueError(f"unknown error-map format {format!r}")
    return err
