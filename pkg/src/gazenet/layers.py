"""Capsule layers: squash, primary capsules and routing-by-agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    capsule_predictions,
    conv2d,
    einsum,
    mul,
    reshape,
    softmax,
    sqrt,
    sum_,
)

SQUASH_EPS = 1e-12
ROUTING_ITERATIONS = 3


@dataclass(frozen=True)
class PrimaryCapsConfig:
    kernel: int = 9
    stride: int = 2
    capsule_channels: int = 32
    capsule_dim: int = 8

    @property
    def conv_channels(self) -> int:
        return self.capsule_channels * self.capsule_dim


@dataclass
class RoutingState:
    """Bookkeeping from one routing pass (arrays are detached copies)."""

    logits: np.ndarray
    couplings: list[np.ndarray] = field(default_factory=list)
    preactivations: np.ndarray | None = None
    activities: np.ndarray | None = None
    iterations: int = ROUTING_ITERATIONS


def squash(s: Tensor) -> Tensor:
    """Shrink vectors along the last axis to length ``|s|^2 / (1 + |s|^2)``."""
    s = as_tensor(s)
    sq = sum_(mul(s, s), axis=-1, keepdims=True)
    norm = sqrt(add(sq, SQUASH_EPS))
    scale = sq / ((1.0 + sq) * norm)
    return mul(s, scale)


def primary_caps(features: Tensor, kernels: Tensor, bias: Tensor,
                 config: PrimaryCapsConfig = PrimaryCapsConfig()) -> Tensor:
    """Convolve, regroup channels into capsules and squash.

    ``features`` is ``[B, H, W, C]`` (or unbatched). Output channel
    ``cap * capsule_dim + d`` becomes dimension ``d`` of capsule ``cap``; the
    result is ``[B, H' * W' * capsule_channels, capsule_dim]``.
    """
    features = as_tensor(features)
    if kernels.shape[:2] != (config.kernel, config.kernel):
        raise DimensionError(f"primary caps kernel {kernels.shape} vs config {config}")
    if kernels.shape[3] != config.conv_channels:
        raise DimensionError(
            f"primary caps: {kernels.shape[3]} conv channels, config needs "
            f"{config.capsule_channels}x{config.capsule_dim}"
        )
    batched = features.ndim == 4
    x = conv2d(features, kernels, config.stride) + bias
    if not batched:
        x = reshape(x, (1,) + x.shape)
    b, ho, wo, _ = x.shape
    caps = reshape(x, (b, ho * wo * config.capsule_channels, config.capsule_dim))
    out = squash(caps)
    return out if batched else reshape(out, out.shape[1:])


def dynamic_routing(u: Tensor, weights: Tensor, iterations: int = ROUTING_ITERATIONS,
                    return_state: bool = False):
    """Route ``u`` ([B, N_in, d_in] or [N_in, d_in]) to ``N_out`` output capsules.

    ``weights`` is ``[N_in, N_out, d_out, d_in]``. Logits start at zero and
    the loop is differentiated exactly as unrolled.
    """
    u = as_tensor(u)
    batched = u.ndim == 3
    if not batched:
        u = reshape(u, (1,) + u.shape)
    u_hat = capsule_predictions(u, weights)
    b = Tensor(np.zeros(u_hat.shape[:3]))
    state = RoutingState(logits=b.data) if return_state else None
    for it in range(iterations):
        c = softmax(b, axis=-1)
        s = einsum("bij,bijd->bjd", c, u_hat)
        v = squash(s)
        if state is not None:
            state.couplings.append(c.data.copy())
        if it < iterations - 1:
            b = b + einsum("bijd,bjd->bij", u_hat, v)
    if not batched:
        v = reshape(v, v.shape[1:])
    if state is None:
        return v
    state.logits = b.data.copy()
    state.preactivations = s.data.copy()
    state.activities = v.data.copy()
    state.iterations = iterations
    if not batched:
        state.logits = state.logits[0]
        state.couplings = [c[0] for c in state.couplings]
        state.preactivations = state.preactivations[0]
        state.activities = state.activities[0]
    return v, state


def capsule_lengths(activities) -> np.ndarray:
    a = activities.data if isinstance(activities, Tensor) else np.asarray(activities)
    return np.sqrt((a * a).sum(axis=-1))


def predict_region(activities) -> np.ndarray | int:
    """Index of the longest activity vector; ties go to the lowest index."""
    lengths = capsule_lengths(activities)
    idx = np.argmax(lengths, axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx
