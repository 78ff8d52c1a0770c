"""Training objective: margin, reconstruction and gaze losses.

All losses take an optional leading batch axis and return the batch mean of
the per-sample value, so a single sample gives exactly the per-sample loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    clip,
    mean,
    mul,
    relu,
    reshape,
    sqrt,
    square,
    sum_,
)

NUM_REGIONS = 6


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m_minus < m_plus < 1")
        if self.lambda_down <= 0:
            raise ValueError("lambda_down must be positive")


@dataclass(frozen=True)
class DirectionalEncoding:
    """One unit vector per gaze region, in capsule-activity space."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        norms = np.linalg.norm(c, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("directional centroids must have unit norm")
        object.__setattr__(self, "centroids", c)

    @classmethod
    def one_hot(cls, num_regions: int = NUM_REGIONS, dim: int = 16) -> "DirectionalEncoding":
        return cls(np.eye(num_regions, dim))

    @classmethod
    def from_region_centroids(cls, thresholds=None, extent: float = 0.45,
                              dim: int = 16, grid: int = 181) -> "DirectionalEncoding":
        """Centroids of each region in gaze-angle space, as 3-D gaze vectors.

        The gaze-angle square ``[-extent, extent]^2`` is sampled on a grid,
        each region's mean (yaw, pitch) becomes a 3-D unit gaze vector, and
        that vector occupies the first three of ``dim`` coordinates.
        """
        from .data import RegionThresholds, region_label
        from .train import gaze_vector

        thresholds = thresholds or RegionThresholds()
        axis = np.linspace(-extent, extent, grid)
        yaw, pitch = np.meshgrid(axis, axis)
        labels = region_label(yaw, pitch, thresholds)
        out = np.zeros((NUM_REGIONS, dim))
        for r in range(NUM_REGIONS):
            sel = labels == r
            g = gaze_vector(yaw[sel].mean(), pitch[sel].mean())
            out[r, :3] = g / np.linalg.norm(g)
        return cls(out)


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    margin: MarginLossConfig = field(default_factory=MarginLossConfig)
    t_mode: Literal["crisp", "directional"] = "crisp"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")
        if self.t_mode not in ("crisp", "directional"):
            raise ValueError(f"unknown t_mode {self.t_mode!r}")


def _batched(x: Tensor, per_sample_ndim: int) -> Tensor:
    x = as_tensor(x)
    return x if x.ndim == per_sample_ndim + 1 else reshape(x, (1,) + x.shape)


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or np.any((labels < 0) | (labels >= NUM_REGIONS)):
        raise ValueError(f"region labels must be integers in 0..{NUM_REGIONS - 1}")
    return labels


def _margin_terms(lengths: Tensor, targets, cfg: MarginLossConfig) -> Tensor:
    present = square(relu(add(mul(lengths, -1.0), cfg.m_plus)))
    absent = square(relu(add(lengths, -cfg.m_minus)))
    per_cap = add(mul(present, targets), mul(absent, mul(add(mul(targets, -1.0), 1.0), cfg.lambda_down)))
    return mean(sum_(per_cap, axis=-1))


def _lengths(activities: Tensor) -> Tensor:
    # |v| written as |v|^2 / sqrt(|v|^2 + eps): exactly 0 at v = 0 and differentiable there
    sq = sum_(mul(activities, activities), axis=-1)
    return sq / sqrt(add(sq, 1e-12))


def margin_loss(activities, labels, cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    """Sum over capsules of the present/absent hinge terms, batch-averaged."""
    v = _batched(activities, 2)
    labels = _check_labels(labels, v.shape[0])
    targets = np.zeros(v.shape[:2])
    targets[np.arange(len(labels)), labels] = 1.0
    return _margin_terms(_lengths(v), targets, cfg)


def directional_targets(activities, labels, enc: DirectionalEncoding) -> Tensor:
    """``T_k = clip(unit(v_k) . centroid[label], 0, 1)``; zero activity gives 0."""
    v = _batched(activities, 2)
    labels = _check_labels(labels, v.shape[0])
    safe_norm = sqrt(add(sum_(mul(v, v), axis=-1), 1e-12))
    unit = v / reshape(safe_norm, v.shape[:2] + (1,))
    target_dirs = enc.centroids[labels][:, None, :]  # [B, 1, D]
    return clip(sum_(mul(unit, target_dirs), axis=-1), 0.0, 1.0)


def directional_margin_loss(activities, labels, enc: DirectionalEncoding | None = None,
                            cfg: MarginLossConfig = MarginLossConfig()) -> Tensor:
    v = _batched(activities, 2)
    enc = enc or DirectionalEncoding.one_hot(v.shape[1], v.shape[2])
    targets = directional_targets(v, labels, enc)
    return _margin_terms(_lengths(v), targets, cfg)


def reconstruction_loss(reconstructed, original) -> Tensor:
    """Sum of squared pixel errors per image, batch-averaged."""
    r, o = as_tensor(reconstructed), as_tensor(original)
    if r.shape != o.shape:
        raise DimensionError(f"reconstruction {r.shape} vs original {o.shape}")
    r = _batched(r, 1) if r.ndim == 1 else r
    o = _batched(o, 1) if o.ndim == 1 else o
    d = r - o
    return mean(sum_(mul(d, d), axis=-1))


def gaze_loss(predicted, truth) -> Tensor:
    """Mean over (x, y) of the squared angle error, batch-averaged."""
    p, t = as_tensor(predicted), as_tensor(truth)
    if p.shape != t.shape or p.shape[-1] != 2:
        raise DimensionError(f"gaze prediction {p.shape} vs truth {t.shape}")
    d = p - t
    return mean(mul(d, d))


def combined_objective(margin, rl, gl, cfg: ObjectiveConfig):
    """``margin + lambda1 * rl + lambda2 * gl``; zero-weighted terms are dropped."""
    total = margin
    if cfg.lambda1 != 0:
        total = total + cfg.lambda1 * rl
    if cfg.lambda2 != 0:
        total = total + cfg.lambda2 * gl
    return total
