"""The Gaze-Net graph: conv -> primary capsules -> gaze capsules -> two heads.

The decoder head reconstructs the eye patch from the masked capsule
activities; the gaze head regresses (yaw, pitch) from the unmasked ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .layers import PrimaryCapsConfig, dynamic_routing, predict_region, primary_caps
from .tensor import (
    Tensor,
    conv2d,
    conv_output_size,
    dense,
    elementwise,
    mul,
    relu,
    reshape,
)

PERTURB_DELTAS = (-0.25, -0.125, 0.0, 0.125, 0.25)

# layers in graph order; freezing "through" a layer freezes it and all before it
LAYER_ORDER = ("conv1", "pcaps", "routing", "dec1", "dec2", "dec3", "gaze1", "gaze2", "gaze3")
TRUNK_LAYERS = ("conv1", "pcaps", "routing")
DECODER_LAYERS = ("dec1", "dec2", "dec3")
GAZE_LAYERS = ("gaze1", "gaze2", "gaze3")


class ValidationError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GazeNetConfig:
    input_shape: tuple[int, int] = (36, 60)
    conv1_kernel: int = 9
    conv1_channels: int = 256
    primary: PrimaryCapsConfig = field(default_factory=PrimaryCapsConfig)
    num_regions: int = 6
    capsule_dim: int = 16
    decoder_hidden: tuple[int, ...] = (512, 1024)
    gaze_hidden: tuple[int, ...] = (16, 16)
    routing_iterations: int = 3

    @property
    def conv1_shape(self) -> tuple[int, int]:
        h, w = self.input_shape
        return conv_output_size(h, self.conv1_kernel, 1), conv_output_size(w, self.conv1_kernel, 1)

    @property
    def primary_grid(self) -> tuple[int, int]:
        h, w = self.conv1_shape
        p = self.primary
        return conv_output_size(h, p.kernel, p.stride), conv_output_size(w, p.kernel, p.stride)

    @property
    def num_primary_caps(self) -> int:
        gh, gw = self.primary_grid
        return gh * gw * self.primary.capsule_channels

    @property
    def num_pixels(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    @property
    def head_input(self) -> int:
        return self.num_regions * self.capsule_dim

    def manifest(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape of every learnable array, in graph order."""
        k, p = self.conv1_kernel, self.primary
        shapes = {
            "conv1.kernels": (k, k, 1, self.conv1_channels),
            "conv1.bias": (self.conv1_channels,),
            "pcaps.kernels": (p.kernel, p.kernel, self.conv1_channels, p.conv_channels),
            "pcaps.bias": (p.conv_channels,),
            "routing.W": (self.num_primary_caps, self.num_regions, self.capsule_dim, p.capsule_dim),
        }
        dec = (self.head_input,) + tuple(self.decoder_hidden) + (self.num_pixels,)
        for i in range(len(dec) - 1):
            shapes[f"dec{i + 1}.W"] = (dec[i], dec[i + 1])
            shapes[f"dec{i + 1}.b"] = (dec[i + 1],)
        gz = (self.head_input,) + tuple(self.gaze_hidden) + (2,)
        for i in range(len(gz) - 1):
            shapes[f"gaze{i + 1}.W"] = (gz[i], gz[i + 1])
            shapes[f"gaze{i + 1}.b"] = (gz[i + 1],)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.manifest().values()))


GAZENET = GazeNetConfig()

# Same topology at 12x20 for exhaustive gradient checks.
REDUCED = GazeNetConfig(
    input_shape=(12, 20),
    conv1_kernel=5,
    conv1_channels=6,
    primary=PrimaryCapsConfig(kernel=3, stride=2, capsule_channels=2, capsule_dim=3),
    num_regions=6,
    capsule_dim=4,
    decoder_hidden=(8, 10),
    gaze_hidden=(5, 5),
)

# 36x60 input with narrow layers, for quick end-to-end runs of the tooling.
SMALL = GazeNetConfig(
    conv1_channels=16,
    primary=PrimaryCapsConfig(kernel=9, stride=2, capsule_channels=4, capsule_dim=4),
    decoder_hidden=(64, 128),
)

ARCHITECTURES = {"gazenet": GAZENET, "small": SMALL, "reduced": REDUCED}


def layer_of(name: str) -> str:
    return name.split(".", 1)[0]


class GazeNetParams:
    """Named learnable arrays with per-array freeze flags."""

    def __init__(self, arrays: dict[str, np.ndarray], config: GazeNetConfig = GAZENET,
                 frozen: Iterable[str] = ()):
        manifest = config.manifest()
        missing = [n for n in manifest if n not in arrays]
        if missing:
            raise ManifestError(f"missing array {missing[0]!r}")
        extra = [n for n in arrays if n not in manifest]
        if extra:
            raise ManifestError(f"unknown array {extra[0]!r}")
        for name, shape in manifest.items():
            if tuple(arrays[name].shape) != shape:
                raise ManifestError(f"array {name!r} has shape {tuple(arrays[name].shape)}, expected {shape}")
        self.config = config
        self.tensors = {n: Tensor(np.array(arrays[n], dtype=np.float64), requires_grad=True) for n in manifest}
        self.frozen: set[str] = set()
        self.freeze(frozen)

    @classmethod
    def init(cls, config: GazeNetConfig = GAZENET, seed: int = 0) -> "GazeNetParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in config.manifest().items():
            if name.endswith(".bias") or name.endswith(".b"):
                arrays[name] = np.zeros(shape)
                continue
            if name == "routing.W":
                fan_in, fan_out = shape[3], shape[2]
            elif len(shape) == 4:
                rf = shape[0] * shape[1]
                fan_in, fan_out = rf * shape[2], rf * shape[3]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        return cls(arrays, config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def manifest(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self.tensors.items()}

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "GazeNetParams":
        return GazeNetParams({n: t.data.copy() for n, t in self.tensors.items()}, self.config, self.frozen)

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self.tensors:
                raise KeyError(n)
            self.frozen.add(n)

    def unfreeze_all(self) -> None:
        self.frozen.clear()

    def freeze_layers(self, layers: Iterable[str]) -> None:
        layers = set(layers)
        unknown = layers - set(LAYER_ORDER)
        if unknown:
            raise KeyError(f"unknown layer(s) {sorted(unknown)}")
        self.freeze(n for n in self.tensors if layer_of(n) in layers)

    def freeze_through(self, boundary: str) -> None:
        """Freeze every array in ``boundary`` and all layers before it."""
        if boundary not in LAYER_ORDER:
            raise KeyError(f"unknown layer {boundary!r}")
        self.freeze_layers(LAYER_ORDER[: LAYER_ORDER.index(boundary) + 1])

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n not in self.frozen}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class ForwardResult:
    activities: Tensor  # [..., 6, 16]
    region: np.ndarray | int
    gaze: Tensor  # [..., 2], (yaw, pitch)
    reconstruction: Tensor  # [..., 36, 60]


def _check_patches(patches, config: GazeNetConfig) -> tuple[Tensor, bool]:
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    h, w = config.input_shape
    if x.shape[-3:] != (h, w, 1) or x.ndim not in (3, 4):
        raise ValidationError(f"expected patches of shape [B,] {h}x{w}x1, got {x.shape}")
    if x.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ValidationError("pixel values must lie in [0, 1]")
    batched = x.ndim == 4
    return (x if batched else reshape(x, (1,) + x.shape)), batched


def encode(params: GazeNetParams, patches) -> Tensor:
    """Gaze-capsule activities ``[B, num_regions, capsule_dim]``."""
    cfg = params.config
    x, batched = _check_patches(patches, cfg)
    features = relu(conv2d(x, params["conv1.kernels"], 1) + params["conv1.bias"])
    u = primary_caps(features, params["pcaps.kernels"], params["pcaps.bias"], cfg.primary)
    v = dynamic_routing(u, params["routing.W"], cfg.routing_iterations)
    return v if batched else reshape(v, v.shape[1:])


def _mlp(params: GazeNetParams, x: Tensor, prefix: str, depth: int, final: str) -> Tensor:
    for i in range(1, depth + 1):
        x = dense(x, params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        x = elementwise(x, final if i == depth else "relu")
    return x


def mask_activities(activities: Tensor, regions) -> Tensor:
    """Zero every capsule except ``regions`` (one per sample) and flatten capsule-major."""
    batched = activities.ndim == 3
    act = activities if batched else reshape(activities, (1,) + activities.shape)
    b, n, d = act.shape
    mask = np.zeros((b, n, 1))
    mask[np.arange(b), np.atleast_1d(regions)] = 1.0
    flat = reshape(mul(act, mask), (b, n * d))
    return flat if batched else reshape(flat, (n * d,))


def decode_input(params: GazeNetParams, decoder_input: Tensor) -> Tensor:
    """Decoder MLP on flattened masked activities; returns sigmoid pixels."""
    return _mlp(params, decoder_input, "dec", len(params.config.decoder_hidden) + 1, "sigmoid")


def gaze_head(params: GazeNetParams, activities: Tensor) -> Tensor:
    """(yaw, pitch) from the unmasked, flattened activities."""
    batched = activities.ndim == 3
    n = params.config.head_input
    flat = reshape(activities, (activities.shape[0], n) if batched else (n,))
    return _mlp(params, flat, "gaze", len(params.config.gaze_hidden) + 1, "identity")


def heads(params: GazeNetParams, activities: Tensor, mask_label=None,
          with_decoder: bool = True, with_gaze: bool = True) -> ForwardResult:
    region = predict_region(activities)
    recon = gaze = None
    if with_decoder:
        mask_row = region if mask_label is None else mask_label
        flat = decode_input(params, mask_activities(activities, mask_row))
        h, w = params.config.input_shape
        recon = reshape(flat, flat.shape[:-1] + (h, w))
    if with_gaze:
        gaze = gaze_head(params, activities)
    return ForwardResult(activities, region, gaze, recon)


def forward(patch, params: GazeNetParams, mask_label=None) -> ForwardResult:
    """Run the full network on ``[36, 60, 1]`` or ``[B, 36, 60, 1]`` pixels in [0, 1].

    The decoder sees only the ``mask_label`` capsule (predicted region when
    omitted); the gaze head sees all capsules.
    """
    return heads(params, encode(params, patch), mask_label)


def reconstruct(patch, params: GazeNetParams) -> np.ndarray:
    """Decoder output image for a single patch, masked by the predicted region."""
    return _perturbed_images(patch, params, None, (0.0,))[0]


def _perturbed_images(patch, params, dim, deltas) -> list[np.ndarray]:
    from .tensor import no_grad

    cfg = params.config
    with no_grad():
        act = encode(params, patch)
        if act.ndim != 2:
            raise ValidationError("expects a single patch")
        region = predict_region(act)
        base = mask_activities(act, region).data[None]
        images = []
        for delta in deltas:
            x = base.copy()
            if dim is not None:
                x[0, region * cfg.capsule_dim + dim] += delta
            images.append(decode_input(params, Tensor(x)).data.reshape(cfg.input_shape))
    return images


def perturb_and_reconstruct(patch, params: GazeNetParams, dim: int,
                            deltas: Sequence[float] = PERTURB_DELTAS) -> list[np.ndarray]:
    """Reconstructions after adding each delta to one dimension of the winning capsule."""
    if not 0 <= dim < params.config.capsule_dim:
        raise ValueError(f"dimension must be in 0..{params.config.capsule_dim - 1}, got {dim}")
    return _perturbed_images(patch, params, dim, deltas)


def perturbation_sweep(patch, params: GazeNetParams,
                       deltas: Sequence[float] = PERTURB_DELTAS) -> np.ndarray:
    """All capsule dimensions x deltas: ``[capsule_dim, len(deltas), H, W]``."""
    return np.stack([np.stack(perturb_and_reconstruct(patch, params, d, deltas))
                     for d in range(params.config.capsule_dim)])
