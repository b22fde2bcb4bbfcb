"""The encoded model and its MCINRM1 file format.

Layout (little-endian)::

    b"MCINRM1"                                  7-byte magic
    u32 version
    u32 N, u32 T, u32 M                         dataset fingerprint
    M x (u32 byte length, UTF-8 name)
    u32 CRC-32 of the f64 coordinate bounds
    (8 + 2M) x f64                              normalizer: x,y,z (lo, hi), t (lo, hi), M x (lo, hi)
    u32 width, u32 num_frequencies, u8 include_raw_input,
    u32 gfe_blocks, u32 lfe_blocks, u8 shared_head, f64 omega_first
    u32 K
    K trees in pre-order, each node: 3 x f32 centroid, u8 child count (0 or 2)
    for each leaf in pre-order:
        u32 point_count, f32 aggregate residual, M x f32 per-variable residual,
        every tensor as f32 in the network's fixed key order
    u32 CRC-32 of all preceding bytes

The file size is the denominator of the compression ratio.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import ClusterPartition, ClusterStats, Node, leaf_name
from .data_io import Dataset, Normalizer, raw_size_bytes
from .model import NetworkParams, PositionalEncodingConfig, tensor_shapes

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MCINRM1"
FORMAT_VERSION = 1
_ARCH = struct.Struct("<IIBIIBd")


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    point_count: int
    timestep_count: int
    variable_count: int
    variable_names: tuple[str, ...]
    bounds_crc: int

    def describe(self) -> str:
        return (f"N={self.point_count} T={self.timestep_count} M={self.variable_count} "
                f"vars={','.join(self.variable_names)} bounds={self.bounds_crc:08x}")


def fingerprint(ds: Dataset) -> Fingerprint:
    crc = zlib.crc32(ds.coord_bounds.astype("<f8").tobytes())
    return Fingerprint(ds.point_count, ds.timestep_count, ds.variable_count, tuple(ds.variable_names), crc)


@dataclass
class EncodedModel:
    fingerprint: Fingerprint
    normalizer: Normalizer
    partition: ClusterPartition
    networks: dict[tuple, NetworkParams]
    stats: dict[tuple, ClusterStats] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def validate(self) -> None:
        leaves = set(self.partition.leaf_ids())
        nets = set(self.networks)
        if leaves != nets:
            raise ModelFormatError(f"leaves without networks: {sorted(map(leaf_name, leaves - nets))}; "
                                   f"networks without leaves: {sorted(map(leaf_name, nets - leaves))}")
        archs = list(self.networks.values())
        if any(not a.same_architecture(archs[0]) for a in archs[1:]):
            raise ModelFormatError("all leaf networks must share one architecture")
        if archs[0].n_vars != self.fingerprint.variable_count:
            raise ModelFormatError("network output count differs from the dataset variable count")

    @property
    def architecture(self) -> NetworkParams:
        return next(iter(self.networks.values()))

    @property
    def parameter_count(self) -> int:
        return sum(p.parameter_count for p in self.networks.values())


def _u32(v):
    return struct.pack("<I", v)


def model_to_bytes(model: EncodedModel) -> bytes:
    model.validate()
    fp = model.fingerprint
    arch = model.architecture
    out = bytearray(MODEL_MAGIC)
    out += _u32(model.version)
    out += struct.pack("<3I", fp.point_count, fp.timestep_count, fp.variable_count)
    for name in fp.variable_names:
        raw = name.encode("utf-8")
        out += _u32(len(raw)) + raw
    out += _u32(fp.bounds_crc)
    out += model.normalizer.to_array().astype("<f8").tobytes()
    out += _ARCH.pack(arch.width, arch.pe.num_frequencies, arch.pe.include_raw_input,
                      arch.gfe_blocks, arch.lfe_blocks, arch.shared_head, arch.omega_first)
    out += _u32(len(model.partition.roots))
    for root in model.partition.roots:
        for node in root.preorder():
            out += node.centroid.astype("<f4").tobytes()
            out += struct.pack("<B", len(node.children))
    for leaf in model.partition.leaf_ids():
        st = model.stats.get(leaf)
        if st is None:
            st = ClusterStats(leaf, 0, np.zeros(fp.variable_count), 0.0)
        out += _u32(st.point_count)
        out += np.float32(st.aggregate_mse).astype("<f4").tobytes()
        out += np.asarray(st.per_variable_mse, dtype="<f4").tobytes()
        for t in model.networks[leaf].tensors.values():
            out += t.astype("<f4").tobytes()
    out += _u32(zlib.crc32(out))
    return bytes(out)


def model_from_bytes(buf: bytes) -> EncodedModel:
    if len(buf) < len(MODEL_MAGIC) + 8 or buf[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"not an MCINRM1 model (magic {buf[:len(MODEL_MAGIC)]!r})")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise ChecksumError("CRC-32 mismatch: model file is corrupted")
    pos = len(MODEL_MAGIC)

    def take(n, what=""):
        nonlocal pos
        if pos + n > len(buf) - 4:
            raise ModelFormatError(f"truncated model while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4, "u32"))[0]

    version = u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    n, t, m = struct.unpack("<3I", take(12, "fingerprint"))
    names = tuple(take(u32(), "name").decode("utf-8") for _ in range(m))
    fp = Fingerprint(n, t, m, names, u32())
    normalizer = Normalizer.from_array(np.frombuffer(take(8 * (8 + 2 * m), "normalizer"), "<f8"), m)
    width, n_freq, raw, gfe, lfe, shared, omega = _ARCH.unpack(take(_ARCH.size, "architecture"))
    pe = PositionalEncodingConfig(n_freq, bool(raw))
    shapes = tensor_shapes(pe, width, m, gfe, lfe, bool(shared))

    k = u32()

    def read_node(leaf_id):
        centroid = np.frombuffer(take(12, "centroid"), "<f4").astype(np.float64)
        (n_children,) = struct.unpack("<B", take(1, "node"))
        if n_children not in (0, 2):
            raise ModelFormatError(f"node {leaf_name(leaf_id)} has {n_children} children")
        node = Node(leaf_id, centroid)
        node.children = [read_node(leaf_id + (i,)) for i in range(n_children)]
        return node

    partition = ClusterPartition([read_node((i,)) for i in range(k)])
    networks, stats = {}, {}
    for leaf in partition.leaf_ids():
        count = u32()
        agg = float(np.frombuffer(take(4), "<f4")[0])
        per_var = np.frombuffer(take(4 * m), "<f4").astype(np.float64)
        stats[leaf] = ClusterStats(leaf, count, per_var, agg)
        tensors = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            tensors[name] = np.frombuffer(take(4 * size, name), "<f4").astype(np.float32).reshape(shape)
        networks[leaf] = NetworkParams(pe, width, m, gfe, lfe, bool(shared), float(omega), tensors)
    if pos != len(buf) - 4:
        raise ModelFormatError(f"{len(buf) - 4 - pos} unexpected bytes before the checksum")
    return EncodedModel(fp, normalizer, partition, networks, stats, version)


def save(model: EncodedModel, path) -> int:
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> EncodedModel:
    return model_from_bytes(Path(path).read_bytes())


def compression_ratio(dataset: Dataset, model_path) -> float:
    """Raw value bytes over model file bytes, rounded to 2 decimals."""
    size = Path(model_path).stat().st_size
    cr = raw_size_bytes(dataset) / size
    if cr < 1:
        log.warning("model file (%d bytes) is larger than the raw data (%d bytes): CR %.2f",
                    size, raw_size_bytes(dataset), cr)
    return round(cr, 2)
