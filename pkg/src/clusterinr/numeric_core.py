"""Dense layer math, sine activations, hand-written backprop and Adam.

Everything here works on plain numpy arrays. Training runs in float32; the
same functions accept float64 arrays, which is how gradient checks are done.
Weights are stored ``(in_features, out_features)`` so a layer computes
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


def check_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    # a float64 sum is NaN/Inf iff some entry is, and is much cheaper than isfinite().all()
    if not np.isfinite(np.sum(arr, dtype=np.float64)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite entries")
    return arr


@dataclass
class LayerTape:
    """What backward needs from one forward call of a linear(+sine) layer."""

    input: np.ndarray
    pre_activation: np.ndarray
    omega: float | None = None  # None means identity activation

    def __post_init__(self):
        if self.input.shape[0] != self.pre_activation.shape[0]:
            raise ShapeError(
                f"tape batch mismatch: input {self.input.shape} vs "
                f"pre-activation {self.pre_activation.shape}"
            )


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Return ``(x @ weight + bias, tape)``; the tape has identity activation."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot multiply input {x.shape} by weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not fit weight {weight.shape}")
    z = x @ weight
    z += bias
    check_finite(z, "linear_forward output")
    return z, LayerTape(x, z)


def sine_forward(z: np.ndarray, omega: float) -> np.ndarray:
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    out = np.sin(z * omega) if omega != 1.0 else np.sin(z)
    check_finite(out, "sine_forward output")
    return out


def sine_layer_forward(x, weight, bias, omega):
    """``sin(omega * (x @ W + b))`` plus a tape that remembers omega."""
    z, tape = linear_forward(x, weight, bias)
    tape.omega = omega
    return sine_forward(z, omega), tape


def layer_backward(upstream: np.ndarray, tape: LayerTape, weight: np.ndarray):
    """Chain rule through one linear layer and its activation.

    Returns ``(grad_input, grad_weight, grad_bias)``. For a sine layer the
    upstream gradient is first multiplied by ``omega * cos(omega * z)``.
    """
    z = tape.pre_activation
    if upstream.shape != z.shape:
        raise ShapeError(f"upstream grad {upstream.shape} vs layer output {z.shape}")
    if weight.shape != (tape.input.shape[1], z.shape[1]):
        raise ShapeError(f"weight {weight.shape} does not match tape {tape.input.shape}->{z.shape}")
    if tape.omega is None:
        dz = upstream
    elif tape.omega == 1.0:
        dz = upstream * np.cos(z)
    else:
        dz = upstream * (tape.omega * np.cos(tape.omega * z))
    grad_w = tape.input.T @ dz
    grad_b = dz.sum(axis=0)
    grad_in = dz @ weight.T
    return grad_in, grad_w, grad_b


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise ShapeError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    if not state.first_moment:
        fresh = AdamState.zeros_like(params)
        state.first_moment, state.second_moment = fresh.first_moment, fresh.second_moment
    for k, g in grads.items():
        if g.shape != params[k].shape or state.first_moment[k].shape != g.shape:
            raise ShapeError(f"{k}: param {params[k].shape}, grad {g.shape}, "
                             f"moment {state.first_moment[k].shape}")
        check_finite(g, f"gradient of {k}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1**t)
    inv_bc2 = 1.0 / (1.0 - b2**t)
    for k, g in grads.items():
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v * inv_bc2)
        denom += state.eps
        params[k] -= (step * m / denom).astype(params[k].dtype, copy=False)
