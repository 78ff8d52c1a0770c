"""Optimization, evaluation, transfer learning and GZNT checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional

import numpy as np

from .data import ConfigurationError, Dataset, FormatError, atomic_write, train_test_split
from .layers import predict_region
from .losses import (
    DirectionalEncoding,
    ObjectiveConfig,
    combined_objective,
    directional_margin_loss,
    gaze_loss,
    margin_loss,
    reconstruction_loss,
)
from .model import (
    DECODER_LAYERS,
    GAZENET,
    TRUNK_LAYERS,
    GazeNetConfig,
    GazeNetParams,
    ManifestError,
    encode,
    heads,
    layer_of,
)
from .tensor import NumericalError, Tensor, backward, conv_precision, no_grad, reshape

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def gaze_vector(yaw, pitch) -> np.ndarray:
    """Unit 3-D gaze direction(s) for angles in radians; last axis is xyz."""
    yaw, pitch = np.asarray(yaw, dtype=np.float64), np.asarray(pitch, dtype=np.float64)
    return np.stack([-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1)


def angular_error(pred, truth, metric: Literal["angular", "mean_abs"] = "angular"):
    """Error in degrees between (yaw, pitch) pairs.

    ``angular`` is the angle between the 3-D gaze vectors; ``mean_abs`` is
    the mean of the absolute yaw and pitch differences.
    """
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if metric == "mean_abs":
        err = np.degrees(np.abs(pred - truth).mean(axis=-1))
    elif metric == "angular":
        g1 = gaze_vector(pred[..., 0], pred[..., 1])
        g2 = gaze_vector(truth[..., 0], truth[..., 1])
        cos = np.clip((g1 * g2).sum(axis=-1), -1.0, 1.0)
        err = np.degrees(np.arccos(cos))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(err) if np.ndim(err) == 0 else err


@dataclass
class Metrics:
    acc: float
    mae_deg: Optional[float]
    per_sample_errors: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError("acc must be in [0, 1]")
        if self.mae_deg is not None and self.mae_deg < 0:
            raise ValueError("mae_deg must be nonnegative")


def metrics_from_predictions(regions, labels, gaze=None, angles=None, metric="angular") -> Metrics:
    regions, labels = np.asarray(regions), np.asarray(labels)
    acc = float(np.mean(regions == labels)) if len(labels) else 0.0
    if gaze is None:
        return Metrics(acc, None, [])
    errors = np.atleast_1d(angular_error(gaze, angles, metric))
    return Metrics(acc, float(errors.mean()), [float(e) for e in errors])


def _predict(params: GazeNetParams, dataset: Dataset, batch_size: int = 32,
             with_gaze: bool = True) -> tuple[np.ndarray, Optional[np.ndarray]]:
    regions, gazes = [], []
    with no_grad():
        for s in range(0, len(dataset), batch_size):
            act = encode(params, dataset.images[s:s + batch_size])
            regions.append(np.atleast_1d(predict_region(act)))
            if with_gaze:
                out = heads(params, act, with_decoder=False)
                gazes.append(out.gaze.data)
    return np.concatenate(regions), (np.concatenate(gazes) if with_gaze else None)


def evaluate(params: GazeNetParams, dataset: Dataset, report_mae: bool = True,
             batch_size: int = 32, metric: str = "angular") -> Metrics:
    """Region accuracy and (optionally) gaze MAE in degrees over ``dataset``."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    regions, gaze = _predict(params, dataset, batch_size, report_mae)
    return metrics_from_predictions(regions, dataset.labels, gaze, dataset.angles, metric)


def mean_and_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# optimizers


def _layer_lr(lr: float, scales: Mapping[str, float], name: str) -> float:
    return lr * scales.get(name.split(".")[0], 1.0)


class Adam:
    """Adam; ``lr_scale`` maps layer names (``"gaze1"``) to learning-rate multipliers."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scale: Optional[Mapping[str, float]] = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_scale = dict(lr_scale or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = _layer_lr(self.lr, self.lr_scale, name)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, lr: float = 1e-3, lr_scale: Optional[Mapping[str, float]] = None):
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is not None:
                p.data -= _layer_lr(self.lr, self.lr_scale, name) * p.grad


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0
    freeze_through: Optional[str] = None
    max_steps: Optional[int] = None
    metric: Literal["angular", "mean_abs"] = "angular"
    directional: Optional[DirectionalEncoding] = None
    lr_scale: dict[str, float] = field(default_factory=dict)
    lr_decay: float = 1.0  # multiplicative, applied after every epoch
    conv_dtype: Literal["float64", "float32"] = "float64"  # precision of training-time conv matmuls

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.conv_dtype not in ("float64", "float32"):
            raise ValueError(f"unknown conv_dtype {self.conv_dtype!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def reports_mae(self) -> bool:
        return self.objective.lambda2 > 0

    def make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(self.learning_rate, lr_scale=self.lr_scale)
        return SGD(self.learning_rate, lr_scale=self.lr_scale)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: Optional[float]
    val_mae_deg: Optional[float]


@dataclass
class TrainResult:
    params: GazeNetParams  # best-validation parameters (final ones without a validation set)
    history: list[EpochRecord]
    best_epoch: int
    final_params: GazeNetParams
    steps: int


def batch_loss(params: GazeNetParams, images, labels, angles, cfg: TrainConfig,
               activities: Optional[Tensor] = None) -> Tensor:
    """Combined objective averaged over a batch, with true-label decoder masking."""
    obj = cfg.objective
    act = encode(params, images) if activities is None else activities
    out = heads(params, act, mask_label=labels, with_decoder=obj.lambda1 > 0,
                with_gaze=obj.lambda2 > 0)
    if obj.t_mode == "directional":
        margin = directional_margin_loss(act, labels, cfg.directional, obj.margin)
    else:
        margin = margin_loss(act, labels, obj.margin)
    rl = gl = None
    if out.reconstruction is not None:
        b = out.reconstruction.shape[0]
        rl = reconstruction_loss(reshape(out.reconstruction, (b, -1)), np.asarray(images).reshape(b, -1))
    if out.gaze is not None:
        gl = gaze_loss(out.gaze, angles)
    return combined_objective(margin, rl, gl, obj)


def _trunk_frozen(params: GazeNetParams) -> bool:
    return all(n in params.frozen for n in params if layer_of(n) in TRUNK_LAYERS)


def train(params: GazeNetParams, train_set: Dataset, val_set: Optional[Dataset],
          cfg: TrainConfig, progress: Optional[Callable[[EpochRecord], Optional[bool]]] = None) -> TrainResult:
    """Minibatch optimization of the combined objective.

    ``params`` is updated in place; frozen arrays are never written. When a
    validation set is given the returned ``params`` are a copy from the epoch
    with the best validation score (lowest MAE, or highest accuracy when MAE
    is not reported). ``progress`` is called after every epoch; a truthy
    return value ends training early.
    """
    if len(train_set) == 0:
        raise ConfigurationError("empty training set")
    if cfg.freeze_through:
        params.freeze_through(cfg.freeze_through)
    trainable = params.trainable()
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.make_optimizer()

    images, labels, angles = train_set.images, train_set.labels, train_set.angles
    cached = None
    if _trunk_frozen(params):
        # trunk output is constant; encode every sample once
        with no_grad(), conv_precision(cfg.conv_dtype):
            cached = np.concatenate([encode(params, images[s:s + 64]).data
                                     for s in range(0, len(images), 64)])

    saved_flags = {n: t.requires_grad for n, t in params.items()}
    for n, t in params.items():
        t.requires_grad = n in trainable
    history: list[EpochRecord] = []
    best = None
    best_epoch = 0
    steps = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            total, count = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                idx = order[s:s + cfg.batch_size]
                act = Tensor(cached[idx]) if cached is not None else None
                params.zero_grad()
                with conv_precision(cfg.conv_dtype):
                    loss = batch_loss(params, images[idx], labels[idx], angles[idx], cfg, act)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {steps + 1}")
                    backward(loss)
                opt.step(trainable)
                steps += 1
                total += value * len(idx)
                count += len(idx)
            train_loss = total / count if count else math.nan
            val_acc = val_mae = None
            if val_set is not None and len(val_set):
                m = evaluate(params, val_set, cfg.reports_mae, metric=cfg.metric)
                val_acc, val_mae = m.acc, m.mae_deg
            rec = EpochRecord(epoch, train_loss, val_acc, val_mae)
            history.append(rec)
            log.info("epoch %d loss %.5f val_acc %s val_mae %s", epoch, train_loss, val_acc, val_mae)
            opt.lr *= cfg.lr_decay
            stop = bool(progress(rec)) if progress else False
            if val_acc is not None:
                score = (val_mae,) if val_mae is not None else (-val_acc,)
                if best is None or score < best[0]:
                    best = (score, params.copy())
                    best_epoch = epoch
            if stop:
                break
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
    finally:
        for n, t in params.items():
            t.requires_grad = saved_flags[n]
    final = params
    if best is None:
        return TrainResult(final.copy(), history, len(history), final, steps)
    return TrainResult(best[1], history, best_epoch, final, steps)


# ---------------------------------------------------------------------------
# transfer learning


def train_two_stage(params: GazeNetParams, train_set: Dataset, val_set: Optional[Dataset],
                    joint: TrainConfig, refine: TrainConfig,
                    progress: Optional[Callable[[EpochRecord], Optional[bool]]] = None) -> TrainResult:
    """Joint training, then head refinement with everything through routing frozen.

    The refinement stage starts from the final joint parameters, trains on
    cached trunk activities (so its steps are cheap) and shares the step
    budget: ``refine.max_steps`` is reduced by the joint steps when
    ``joint.max_steps`` is set. Epoch numbers continue across stages.
    """
    stopped = False

    def first(rec):
        nonlocal stopped
        stopped = bool(progress(rec)) if progress else False
        return stopped

    frozen = set(params.frozen)
    stage1 = train(params, train_set, val_set, joint, first)
    offset, steps = len(stage1.history), stage1.steps
    budget = None if joint.max_steps is None else joint.max_steps - steps
    if stopped or budget == 0:
        return stage1

    def second(rec):
        rec = EpochRecord(rec.epoch + offset, rec.train_loss, rec.val_acc, rec.val_mae_deg)
        return progress(rec) if progress else False

    max_steps = refine.max_steps
    if budget is not None:
        max_steps = budget if max_steps is None else min(max_steps, budget)
    cfg = dataclasses.replace(refine, freeze_through="routing", max_steps=max_steps)
    try:
        stage2 = train(params, train_set, val_set, cfg, second)
    finally:
        params.unfreeze_all()
        params.freeze(frozen)
    history = stage1.history + [EpochRecord(r.epoch + offset, r.train_loss, r.val_acc, r.val_mae_deg)
                                for r in stage2.history]
    best, best_epoch = stage2.params, stage2.best_epoch + offset
    if val_set is not None and stage1.history and stage2.history:
        def score(r):
            return r.val_mae_deg if r.val_mae_deg is not None else -r.val_acc
        if score(stage1.history[stage1.best_epoch - 1]) < score(stage2.history[stage2.best_epoch - 1]):
            best, best_epoch = stage1.params, stage1.best_epoch
    best.unfreeze_all()
    best.freeze(frozen)
    return TrainResult(best, history, best_epoch, params, steps + stage2.steps)


@dataclass
class TransferResult:
    participant: int
    before: Metrics
    after: Metrics
    params: GazeNetParams


def transfer(pretrained: GazeNetParams, per_participant_sets: Mapping[int, Dataset],
             cfg: TrainConfig, train_fraction: float = 0.75,
             unfreeze_decoder: bool = False) -> list[TransferResult]:
    """Personalize the gaze head for each participant.

    Everything through the routing layer is frozen (and the decoder too,
    unless ``unfreeze_decoder``). Each participant's samples are split
    ``train_fraction`` / rest; MAE on the held-out part is measured before
    and after retraining.
    """
    if cfg.objective.lambda2 <= 0:
        raise ConfigurationError("transfer retrains the gaze head; lambda2 must be positive")
    results = []
    for pid, data in sorted(per_participant_sets.items()):
        if len(data) < 2:
            warnings.warn(f"participant {pid}: {len(data)} sample(s), skipped")
            continue
        tr, te = train_test_split(data, train_fraction, seed=cfg.seed)
        params = pretrained.copy()
        params.unfreeze_all()
        params.freeze_layers(TRUNK_LAYERS)
        if not unfreeze_decoder:
            params.freeze_layers(DECODER_LAYERS)
        before = evaluate(params, te, metric=cfg.metric)
        run = train(params, tr, None, cfg)
        after = evaluate(run.params, te, metric=cfg.metric)
        log.info("participant %d: MAE %.3f -> %.3f", pid, before.mae_deg, after.mae_deg)
        results.append(TransferResult(pid, before, after, run.params))
    return results


def summarize_transfer(results: list[TransferResult]) -> dict[str, tuple[float, float]]:
    """Mean and standard error of the before/after MAE across participants."""
    return {
        "before": mean_and_stderr([r.before.mae_deg for r in results]),
        "after": mean_and_stderr([r.after.mae_deg for r in results]),
    }


# ---------------------------------------------------------------------------
# GZNT checkpoints

GZNT_MAGIC = b"GZNT"
GZNT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBI")


def checkpoint_to_bytes(params: GazeNetParams) -> bytes:
    parts = [_CKPT_HEADER.pack(GZNT_MAGIC, GZNT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def _read_arrays(buf: bytes) -> dict[str, np.ndarray]:
    def need(pos: int, n: int, what: str):
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", len(buf))

    need(0, _CKPT_HEADER.size, "header")
    magic, version, count = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != GZNT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GZNT_MAGIC!r}", 0)
    if version != GZNT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = _CKPT_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for k in range(count):
        need(pos, 2, f"name length of array {k}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen, f"name of array {k}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"array {k}: name is not UTF-8", pos) from None
        pos += nlen
        need(pos, 1, f"rank of {name!r}")
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(pos, nbytes, f"data of {name!r}")
        if name in arrays:
            raise FormatError(f"duplicate array {name!r}", pos)
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return arrays


def checkpoint_from_bytes(buf: bytes, config: GazeNetConfig = GAZENET, strict: bool = True) -> GazeNetParams:
    """Parse a checkpoint and check it against ``config``'s shape manifest.

    Unknown arrays are an error when ``strict``; otherwise they are dropped
    with a warning.
    """
    arrays = _read_arrays(buf)
    manifest = config.manifest()
    extra = [n for n in arrays if n not in manifest]
    if extra:
        if strict:
            raise ManifestError(f"unknown array {extra[0]!r} in checkpoint")
        warnings.warn(f"ignoring unknown checkpoint arrays: {', '.join(extra)}")
        arrays = {n: a for n, a in arrays.items() if n in manifest}
    return GazeNetParams(arrays, config)


def save_checkpoint(params: GazeNetParams, path) -> None:
    atomic_write(path, checkpoint_to_bytes(params))


def load_checkpoint(path, config: GazeNetConfig = GAZENET, strict: bool = True) -> GazeNetParams:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), config, strict)
