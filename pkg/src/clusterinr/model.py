"""Branched sine network: Fourier positional encoding, a shared trunk of
residual sine blocks, and one residual branch plus linear head per variable.

Parameters live in a flat, ordered ``dict[str, ndarray]`` so the optimizer,
serializer and gradient checks can all walk them the same way. Key layout::

    proj.W  proj.b                      input projection (encoded dim -> width)
    gfe.{i}.W1 .b1 .W2 .b2              shared trunk blocks
    lfe.{j}.{i}.W1 .b1 .W2 .b2          branch j, block i
    head.{j}.W  head.{j}.b              linear head for variable j (width -> 1)

In shared-head mode there is a single branch ``lfe.0`` feeding every head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numeric_core import (
    LayerTape,
    ShapeError,
    check_finite,
    layer_backward,
    linear_forward,
    sine_layer_forward,
)

AXES = ("x", "y", "z", "t")
PE_TOLERANCE = 1e-6
INFERENCE_CHUNK = 4096


@dataclass(frozen=True)
class PositionalEncodingConfig:
    num_frequencies: int = 6
    include_raw_input: bool = True
    input_dim: int = 4

    @property
    def encoded_dim(self) -> int:
        return self.input_dim * (2 * self.num_frequencies + int(self.include_raw_input))


def positional_encode(coords: np.ndarray, cfg: PositionalEncodingConfig = PositionalEncodingConfig()):
    """Encode each scalar p as ``[p, sin(2^0 pi p), cos(2^0 pi p), ...]``.

    Groups are laid out one input axis after another.
    """
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected (batch, {cfg.input_dim}) coordinates, got {coords.shape}")
    lim = 1.0 + PE_TOLERANCE
    for a in range(cfg.input_dim):
        col = coords[:, a]
        if col.size and (col.min() < -lim or col.max() > lim):
            name = AXES[a] if a < len(AXES) else str(a)
            bad = col[np.argmax(np.abs(col))]
            raise ValueError(f"coordinate axis {name!r} out of [-1, 1]: {bad}")
    freqs = (np.pi * 2.0 ** np.arange(cfg.num_frequencies)).astype(coords.dtype)
    ang = coords[:, :, None] * freqs  # (B, D, L)
    parts = []
    if cfg.include_raw_input:
        parts.append(coords[:, :, None])
    trig = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*ang.shape[:2], -1)
    parts.append(trig)
    return np.concatenate(parts, axis=-1).reshape(coords.shape[0], -1)


@dataclass
class ResidualBlockParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def width(self) -> int:
        return self.W1.shape[0]


def residual_block_forward(h, block: ResidualBlockParams, keep_tape=True):
    """``0.5 * (h + sin(W2 sin(W1 h + b1) + b2))``; returns (out, tapes or None)."""
    if h.shape[1] != block.width or block.W1.shape != (block.width, block.width) \
            or block.W2.shape != (block.width, block.width):
        raise ShapeError(f"block of width {block.width} got features {h.shape}")
    a1, t1 = sine_layer_forward(h, block.W1, block.b1, 1.0)
    a2, t2 = sine_layer_forward(a1, block.W2, block.b2, 1.0)
    out = a2
    out += h
    out *= 0.5
    return out, ((t1, t2) if keep_tape else None)


def _block_backward(d_out, tapes, block: ResidualBlockParams):
    t1, t2 = tapes
    d_a2 = 0.5 * d_out
    d_a1, gW2, gb2 = layer_backward(d_a2, t2, block.W2)
    d_h, gW1, gb1 = layer_backward(d_a1, t1, block.W1)
    d_h += d_a2
    return d_h, (gW1, gb1, gW2, gb2)


@dataclass
class NetworkParams:
    pe: PositionalEncodingConfig
    width: int
    n_vars: int
    gfe_blocks: int = 5
    lfe_blocks: int = 6
    shared_head: bool = False
    omega_first: float = 30.0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_branches(self) -> int:
        return 1 if self.shared_head else self.n_vars

    @property
    def dtype(self):
        return self.tensors["proj.W"].dtype

    def block(self, prefix: str) -> ResidualBlockParams:
        t = self.tensors
        return ResidualBlockParams(t[prefix + ".W1"], t[prefix + ".b1"], t[prefix + ".W2"], t[prefix + ".b2"])

    def copy(self) -> "NetworkParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParams":
        return replace(self, tensors={k: v.astype(dtype) for k, v in self.tensors.items()})

    def same_architecture(self, other: "NetworkParams") -> bool:
        return (self.pe, self.width, self.n_vars, self.gfe_blocks, self.lfe_blocks,
                self.shared_head, self.omega_first) == (
                other.pe, other.width, other.n_vars, other.gfe_blocks, other.lfe_blocks,
                other.shared_head, other.omega_first)

    @property
    def parameter_count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "NetworkParams") -> bool:
        """Bit-for-bit equality of architecture and every tensor."""
        return self.same_architecture(other) and list(self.tensors) == list(other.tensors) and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def tensor_shapes(pe: PositionalEncodingConfig, width: int, n_vars: int, gfe_blocks: int = 5,
                  lfe_blocks: int = 6, shared_head: bool = False) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this order is the serialization order."""
    shapes: dict[str, tuple[int, ...]] = {"proj.W": (pe.encoded_dim, width), "proj.b": (width,)}

    def add_block(prefix):
        shapes[prefix + ".W1"] = (width, width)
        shapes[prefix + ".b1"] = (width,)
        shapes[prefix + ".W2"] = (width, width)
        shapes[prefix + ".b2"] = (width,)

    for i in range(gfe_blocks):
        add_block(f"gfe.{i}")
    for j in range(1 if shared_head else n_vars):
        for i in range(lfe_blocks):
            add_block(f"lfe.{j}.{i}")
    for j in range(n_vars):
        shapes[f"head.{j}.W"] = (width, 1)
        shapes[f"head.{j}.b"] = (1,)
    return shapes


def init_params(width: int, n_vars: int, pe: PositionalEncodingConfig = PositionalEncodingConfig(),
                seed: int | np.random.SeedSequence = 0, *, gfe_blocks: int = 5, lfe_blocks: int = 6,
                shared_head: bool = False, omega_first: float = 30.0, dtype=np.float32) -> NetworkParams:
    """SIREN-style uniform init, fully determined by ``seed``.

    The input projection draws from U(-1/fan_in, 1/fan_in) and is followed by
    sin(omega_first * .); every later weight draws from
    U(-sqrt(6/fan_in), sqrt(6/fan_in)) with unit frequency. Biases start at zero.
    """
    if width < 1 or n_vars < 1:
        raise ValueError(f"width and n_vars must be >= 1, got {width}, {n_vars}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(pe, width, n_vars, gfe_blocks, lfe_blocks, shared_head).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0]
        bound = 1.0 / fan_in if name == "proj.W" else np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return NetworkParams(pe, width, n_vars, gfe_blocks, lfe_blocks, shared_head, omega_first, tensors)


def matched_shared_width(width: int, n_vars: int, pe: PositionalEncodingConfig = PositionalEncodingConfig(),
                         gfe_blocks: int = 5, lfe_blocks: int = 6) -> int:
    """Width of a shared-head network whose parameter count best matches the
    branched network of the given width."""
    target = sum(int(np.prod(s)) for s in tensor_shapes(pe, width, n_vars, gfe_blocks, lfe_blocks).values())

    def count(w):
        return sum(int(np.prod(s)) for s in
                   tensor_shapes(pe, w, n_vars, gfe_blocks, lfe_blocks, shared_head=True).values())

    return min(range(1, 4 * width + 1), key=lambda w: (abs(count(w) - target), w))


@dataclass
class ForwardCache:
    """Tapes from one training forward pass, consumed by :func:`backward`."""

    proj: LayerTape
    gfe: list
    branches: list
    heads: list
    batch: int


def forward(params: NetworkParams, coords: np.ndarray, keep_tape: bool = True):
    """Predict all variables for a batch of normalized (x, y, z, t) rows.

    Returns ``(predictions (batch, n_vars), cache)``; ``cache`` is None when
    ``keep_tape`` is False. The trunk runs once and fans out to every branch.
    """
    if coords.shape[0] < 1:
        raise ShapeError("empty batch")
    t = params.tensors
    h0 = positional_encode(coords.astype(params.dtype, copy=False), params.pe)
    h, proj_tape = sine_layer_forward(h0, t["proj.W"], t["proj.b"], params.omega_first)
    gfe_tapes = []
    for i in range(params.gfe_blocks):
        h, tp = residual_block_forward(h, params.block(f"gfe.{i}"), keep_tape)
        gfe_tapes.append(tp)
    trunk = h

    branch_tapes, branch_out = [], []
    for j in range(params.n_branches):
        h = trunk
        tapes = []
        for i in range(params.lfe_blocks):
            h, tp = residual_block_forward(h, params.block(f"lfe.{j}.{i}"), keep_tape)
            tapes.append(tp)
        branch_tapes.append(tapes)
        branch_out.append(h)

    out = np.empty((coords.shape[0], params.n_vars), dtype=params.dtype)
    head_tapes = []
    for j in range(params.n_vars):
        feats = branch_out[0 if params.shared_head else j]
        y, tp = linear_forward(feats, t[f"head.{j}.W"], t[f"head.{j}.b"])
        out[:, j] = y[:, 0]
        head_tapes.append(tp)
    if not keep_tape:
        return out, None
    return out, ForwardCache(proj_tape, gfe_tapes, branch_tapes, head_tapes, coords.shape[0])


def backward(params: NetworkParams, cache: ForwardCache, residual_error: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss whose derivative w.r.t. the predictions is
    ``residual_error`` (for mean MSE that is ``2 (pred - target) / (batch * M)``)."""
    if residual_error.shape != (cache.batch, params.n_vars):
        raise ShapeError(f"residual error {residual_error.shape} vs predictions ({cache.batch}, {params.n_vars})")
    check_finite(residual_error, "residual error")
    t = params.tensors
    grads: dict[str, np.ndarray] = {}

    d_branch = [None] * params.n_branches
    for j in range(params.n_vars):
        d_y = residual_error[:, j:j + 1]
        d_feat, gW, gb = layer_backward(d_y, cache.heads[j], t[f"head.{j}.W"])
        grads[f"head.{j}.W"], grads[f"head.{j}.b"] = gW, gb
        b = 0 if params.shared_head else j
        d_branch[b] = d_feat if d_branch[b] is None else d_branch[b] + d_feat

    d_trunk = None
    for j in range(params.n_branches):
        d = d_branch[j]
        for i in reversed(range(params.lfe_blocks)):
            prefix = f"lfe.{j}.{i}"
            d, g = _block_backward(d, cache.branches[j][i], params.block(prefix))
            _store_block_grads(grads, prefix, g)
        d_trunk = d if d_trunk is None else d_trunk + d

    d = d_trunk
    for i in reversed(range(params.gfe_blocks)):
        prefix = f"gfe.{i}"
        d, g = _block_backward(d, cache.gfe[i], params.block(prefix))
        _store_block_grads(grads, prefix, g)
    _, grads["proj.W"], grads["proj.b"] = layer_backward(d, cache.proj, t["proj.W"])
    return {k: grads[k] for k in t}


def _store_block_grads(grads, prefix, g):
    grads[prefix + ".W1"], grads[prefix + ".b1"], grads[prefix + ".W2"], grads[prefix + ".b2"] = g


def mse_and_grad(params: NetworkParams, coords: np.ndarray, targets: np.ndarray):
    """Mean squared error over every entry and its parameter gradients."""
    pred, cache = forward(params, coords)
    diff = pred - targets
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grads = backward(params, cache, diff * (2.0 / diff.size))
    return loss, grads


def predict(params: NetworkParams, coords: np.ndarray, chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Inference in fixed-size, zero-padded chunks.

    BLAS kernels pick different accumulation orders for different batch
    shapes; padding every call to the same shape makes a row's output
    independent of whatever else is in the batch.
    """
    n = coords.shape[0]
    out = np.empty((n, params.n_vars), dtype=params.dtype)
    if n == 0:
        return out
    buf = np.zeros((chunk, coords.shape[1]), dtype=params.dtype)
    for s in range(0, n, chunk):
        blk = coords[s:s + chunk]
        buf[:len(blk)] = blk
        buf[len(blk):] = 0
        y, _ = forward(params, buf, keep_tape=False)
        out[s:s + len(blk)] = y[:len(blk)]
    return out
