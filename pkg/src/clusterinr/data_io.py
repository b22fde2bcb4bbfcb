"""Datasets: the MCDS binary format, CSV ingestion, normalization into
[-1, 1], the synthetic field generator and raw-size accounting.

MCDS layout (all little-endian)::

    b"MCINRDS1"                         8-byte magic
    u32 N, u32 T, u32 M
    M x (u32 byte length, UTF-8 name)
    3 x (f64 lo, f64 hi)                coordinate bounds for x, y, z
    T x f32                             times
    N x 3 x f32                         coordinates
    T x N x M x f32                     values, indexed [t][n][m]
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MCDS_MAGIC = b"MCINRDS1"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    coords: np.ndarray  # (N, 3) float32
    times: np.ndarray  # (T,) float32
    values: np.ndarray  # (T, N, M) float32
    variable_names: list[str]
    cells: np.ndarray | None = field(default=None, repr=False)  # opaque, never interpreted

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        self.times = np.ascontiguousarray(self.times, dtype=np.float32).reshape(-1)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        n, t, m = self.point_count, self.timestep_count, self.variable_count
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DatasetFormatError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.values.shape != (t, n, m):
            raise DatasetFormatError(f"values must be (T={t}, N={n}, M={m}), got {self.values.shape}")
        if min(n, t, m) < 1:
            raise DatasetFormatError(f"empty dataset: N={n}, T={t}, M={m}")
        if len(self.variable_names) != m:
            raise DatasetFormatError(f"{len(self.variable_names)} names for {m} variables")
        for name, arr in (("coords", self.coords), ("times", self.times), ("values", self.values)):
            if not np.isfinite(arr).all():
                raise DatasetFormatError(f"non-finite entries in {name}")

    @property
    def point_count(self) -> int:
        return self.coords.shape[0]

    @property
    def timestep_count(self) -> int:
        return self.times.shape[0]

    @property
    def variable_count(self) -> int:
        return self.values.shape[2] if self.values.ndim == 3 else 0

    @property
    def coord_bounds(self) -> np.ndarray:
        """(3, 2) float64 array of per-axis (lo, hi)."""
        c = self.coords.astype(np.float64)
        return np.stack([c.min(axis=0), c.max(axis=0)], axis=1)

    @property
    def value_bounds(self) -> np.ndarray:
        """(M, 2) float64 array of per-variable (lo, hi) over all timesteps."""
        v = self.values.astype(np.float64)
        return np.stack([v.min(axis=(0, 1)), v.max(axis=(0, 1))], axis=1)

    def equals(self, other: "Dataset") -> bool:
        return (self.variable_names == other.variable_names
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values))


def raw_size_bytes(ds: Dataset) -> int:
    """Bytes of the value payload stored as float32: the numerator of the compression ratio."""
    return ds.point_count * ds.timestep_count * ds.variable_count * 4


# ---------------------------------------------------------------- MCDS


def dataset_to_bytes(ds: Dataset) -> bytes:
    out = bytearray(MCDS_MAGIC)
    out += struct.pack("<3I", ds.point_count, ds.timestep_count, ds.variable_count)
    for name in ds.variable_names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    out += ds.coord_bounds.astype("<f8").tobytes()
    out += ds.times.astype("<f4").tobytes()
    out += ds.coords.astype("<f4").tobytes()
    out += ds.values.astype("<f4").tobytes()
    return bytes(out)


def dataset_from_bytes(buf: bytes) -> Dataset:
    if buf[:8] != MCDS_MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:8]!r}, expected {MCDS_MAGIC!r}")
    pos = 8

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise DatasetFormatError(f"truncated payload while reading {what}: "
                                     f"need {nbytes} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    n, t, m = struct.unpack("<3I", take(12, "header"))
    names = []
    for j in range(m):
        (length,) = struct.unpack("<I", take(4, f"name length {j}"))
        names.append(take(length, f"name {j}").decode("utf-8"))
    take(48, "coordinate bounds")  # derived data, recomputed on load
    times = np.frombuffer(take(4 * t, "times"), dtype="<f4")
    coords = np.frombuffer(take(12 * n, "coordinates"), dtype="<f4").reshape(n, 3)
    values = np.frombuffer(take(4 * t * n * m, "values"), dtype="<f4").reshape(t, n, m)
    if pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - pos} trailing bytes after values")
    return Dataset(coords.copy(), times.copy(), values.copy(), names)


def write_dataset(ds: Dataset, path) -> int:
    data = dataset_to_bytes(ds)
    Path(path).write_bytes(data)
    return len(data)


def read_dataset(path, format: str | None = None) -> Dataset:
    """Read a dataset; ``format`` is ``"native"`` or ``"csv"`` (guessed from the suffix if omitted)."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "native"
    if format == "csv":
        return read_csv_dataset(path)
    if format != "native":
        raise ValueError(f"unknown dataset format {format!r}")
    return dataset_from_bytes(path.read_bytes())


# ---------------------------------------------------------------- CSV


def read_csv_dataset(path) -> Dataset:
    """Read ``x,y,z,t,<var1>,...`` rows. Every point must appear at every timestep.

    Points are identified by exact coordinate match and kept in order of first
    appearance; timesteps are sorted ascending.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty CSV") from None
        if header[:4] != ["x", "y", "z", "t"] or len(header) < 5:
            raise DatasetFormatError(f"{path}: header must start with x,y,z,t and name >= 1 variable, got {header}")
        names = header[4:]
        m = len(names)
        point_index: dict[tuple, int] = {}
        time_index: dict[float, int] = {}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4 + m:
                raise DatasetFormatError(f"{path}:{lineno}: expected {4 + m} columns, got {len(row)}")
            try:
                nums = [float(c) for c in row]
            except ValueError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from None
            if not all(np.isfinite(nums)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite entry")
            key = tuple(np.float32(nums[:3]).tolist())
            p = point_index.setdefault(key, len(point_index))
            tval = float(np.float32(nums[3]))
            time_index.setdefault(tval, len(time_index))
            rows.append((p, tval, nums[4:], lineno))
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")

    times = np.array(sorted(time_index), dtype=np.float32)
    t_of = {float(tv): i for i, tv in enumerate(times.tolist())}
    n, t = len(point_index), len(times)
    values = np.zeros((t, n, m), dtype=np.float32)
    seen = np.zeros((t, n), dtype=bool)
    for p, tval, vals, lineno in rows:
        ti = t_of[tval]
        if seen[ti, p]:
            raise DatasetFormatError(f"{path}:{lineno}: duplicate row for point {p} at t={tval}")
        seen[ti, p] = True
        values[ti, p] = vals
    if not seen.all():
        ti, p = map(int, np.argwhere(~seen)[0])
        coord = list(point_index)[p]
        raise DatasetFormatError(
            f"{path}: missing row for point {coord} at t={times[ti]} "
            f"({int((~seen).sum())} (point, timestep) combinations absent)")
    coords = np.array(list(point_index), dtype=np.float32)
    return Dataset(coords, times, values, names)


def write_csv_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z", "t", *ds.variable_names])
        for ti, tv in enumerate(ds.times.tolist()):
            for n in range(ds.point_count):
                w.writerow([repr(float(c)) for c in ds.coords[n]] + [repr(tv)]
                           + [repr(float(v)) for v in ds.values[ti, n]])


# ---------------------------------------------------------------- normalization


def _affine(lo: np.ndarray, hi: np.ndarray):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    degenerate = span <= 0
    scale = np.where(degenerate, 0.0, 2.0 / np.where(degenerate, 1.0, span))
    return lo, hi, scale, degenerate


@dataclass
class Normalizer:
    """Affine maps of coordinates, time and each variable onto [-1, 1].

    A channel whose range is empty maps to 0 and maps back to its constant.
    """

    coord_lo: np.ndarray
    coord_hi: np.ndarray
    time_lo: float
    time_hi: float
    value_lo: np.ndarray
    value_hi: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        cb, vb = ds.coord_bounds, ds.value_bounds
        t = ds.times.astype(np.float64)
        return cls(cb[:, 0].copy(), cb[:, 1].copy(), float(t.min()), float(t.max()),
                   vb[:, 0].copy(), vb[:, 1].copy())

    @staticmethod
    def _fwd(v, lo, hi):
        lo, hi, scale, deg = _affine(lo, hi)
        return np.where(deg, 0.0, (np.asarray(v, dtype=np.float64) - lo) * scale - 1.0)

    @staticmethod
    def _inv(u, lo, hi):
        lo, hi, scale, deg = _affine(lo, hi)
        half_span = (hi - lo) * 0.5
        return np.where(deg, lo, (np.asarray(u, dtype=np.float64) + 1.0) * half_span + lo)

    def coords(self, xyz):
        return self._fwd(xyz, self.coord_lo, self.coord_hi)

    def time(self, t):
        return self._fwd(t, self.time_lo, self.time_hi)

    def values(self, v):
        return self._fwd(v, self.value_lo, self.value_hi)

    def denormalize_coords(self, u):
        return self._inv(u, self.coord_lo, self.coord_hi)

    def denormalize_time(self, u):
        return self._inv(u, self.time_lo, self.time_hi)

    def denormalize_values(self, u):
        return self._inv(u, self.value_lo, self.value_hi)

    def to_array(self) -> np.ndarray:
        """Flat float64 layout: 3 coord (lo, hi) pairs, the time pair, M value pairs."""
        return np.concatenate([np.stack([self.coord_lo, self.coord_hi], 1).ravel(),
                               [self.time_lo, self.time_hi],
                               np.stack([self.value_lo, self.value_hi], 1).ravel()])

    @classmethod
    def from_array(cls, arr: np.ndarray, n_vars: int) -> "Normalizer":
        arr = np.asarray(arr, dtype=np.float64)
        c = arr[:6].reshape(3, 2)
        v = arr[8:8 + 2 * n_vars].reshape(n_vars, 2)
        return cls(c[:, 0].copy(), c[:, 1].copy(), float(arr[6]), float(arr[7]), v[:, 0].copy(), v[:, 1].copy())


@dataclass
class NormalizedData:
    coords: np.ndarray  # (N, 3) float64
    times: np.ndarray  # (T,) float64
    values: np.ndarray  # (T, N, M) float32


def normalize(ds: Dataset) -> tuple[NormalizedData, Normalizer]:
    norm = Normalizer.fit(ds)
    return NormalizedData(norm.coords(ds.coords), norm.time(ds.times),
                          norm.values(ds.values).astype(np.float32)), norm


# ---------------------------------------------------------------- synthetic fields

FIELD_KINDS = ("trig", "bump", "discontinuity", "contrast")
INTERFACE_X = 0.5


def trig_field(xyz, t):
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    return np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y) * np.sin(np.pi * z) * np.cos(np.pi * t / 3)


def bump_field(xyz, t):
    center = np.stack(np.broadcast_arrays(0.25 + 0.5 * t, 0.5 + 0 * t, 0.5 + 0 * t), axis=-1)
    d2 = np.sum((xyz - center) ** 2, axis=-1)
    return np.exp(-d2 / (2 * 0.15 ** 2))


def discontinuity_material_a(xyz, t):
    return 1.0 + 0.2 * np.sin(2 * np.pi * xyz[..., 1]) * np.cos(np.pi * t)


def discontinuity_material_b(xyz, t):
    return -1.0 + 0.2 * np.cos(2 * np.pi * xyz[..., 2]) * np.cos(np.pi * t)


def discontinuity_field(xyz, t):
    """Two materials separated by the plane x = 0.5 (material A on the low side)."""
    return np.where(xyz[..., 0] < INTERFACE_X, discontinuity_material_a(xyz, t), discontinuity_material_b(xyz, t))


def contrast_low(xyz, t):
    return 100.0 * np.sin(np.pi * xyz[..., 0]) * np.cos(0.5 * np.pi * xyz[..., 1]) * (1 + 0.1 * t)


def contrast_high(xyz, t):
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    return 0.01 * np.sin(6 * np.pi * x + np.pi * t) * np.sin(6 * np.pi * y) * np.cos(4 * np.pi * z)


_FIELDS = {
    "trig": [("trig", trig_field)],
    "bump": [("bump", bump_field)],
    "discontinuity": [("discontinuity", discontinuity_field)],
    "contrast": [("contrast_low", contrast_low), ("contrast_high", contrast_high)],
}


@dataclass
class SynthSpec:
    point_count: int = 1000
    timesteps: int = 2
    fields: tuple[str, ...] = ("trig",)
    noise: float = 0.0  # Gaussian std as a fraction of each variable's range
    seed: int = 0
    density: str = "uniform"  # or "clustered"


def synthesize(spec: SynthSpec) -> Dataset:
    """Deterministic analytic dataset on random points in the unit box.

    ``trig`` and ``bump`` give one variable each, ``discontinuity`` one
    variable with a jump across x = 0.5, ``contrast`` a pair of variables
    with very different frequency and amplitude.
    """
    if not spec.fields:
        raise ValueError("at least one field kind is required")
    unknown = [f for f in spec.fields if f not in _FIELDS]
    if unknown:
        raise ValueError(f"unknown field kind(s) {unknown}; choose from {', '.join(FIELD_KINDS)}")
    if spec.point_count < 1 or spec.timesteps < 1:
        raise ValueError("point_count and timesteps must be >= 1")
    rng = np.random.default_rng(spec.seed)
    if spec.density == "uniform":
        xyz = rng.uniform(0.0, 1.0, size=(spec.point_count, 3))
    elif spec.density == "clustered":
        centers = rng.uniform(0.2, 0.8, size=(4, 3))
        pick = rng.integers(0, 4, size=spec.point_count)
        xyz = np.clip(centers[pick] + rng.normal(0, 0.12, size=(spec.point_count, 3)), 0.0, 1.0)
    else:
        raise ValueError(f"unknown density {spec.density!r}")
    xyz = xyz.astype(np.float32)
    times = (np.linspace(0.0, 1.0, spec.timesteps) if spec.timesteps > 1 else np.zeros(1)).astype(np.float32)

    names, cols = [], []
    pts = xyz.astype(np.float64)[None, :, :]
    tt = times.astype(np.float64)[:, None]
    for kind in spec.fields:
        for name, fn in _FIELDS[kind]:
            v = fn(pts, tt)
            if spec.noise > 0:
                span = float(v.max() - v.min()) or 1.0
                v = v + rng.normal(0.0, spec.noise * span, size=v.shape)
            names.append(name if name not in names else f"{name}_{len(names)}")
            cols.append(v)
    values = np.stack(cols, axis=-1).astype(np.float32)
    return Dataset(xyz, times, values, names)
