"""Eye-patch samples, region labels, splits, the GZDS container and a
synthetic eye renderer used as a ground-truth oracle."""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

HEIGHT, WIDTH = 36, 60
NUM_PIXELS = HEIGHT * WIDTH
REGION_NAMES = ("upper-left", "upper-center", "upper-right",
                "lower-left", "lower-center", "lower-right")

GZDS_MAGIC = b"GZDS"
GZDS_VERSION = 1
_HEADER = struct.Struct("<4sBIB3s")
_RECORD = np.dtype([
    ("participant", "<u2"),
    ("eye_side", "u1"),
    ("yaw", "<f4"),
    ("pitch", "<f4"),
    ("pixels", "u1", (NUM_PIXELS,)),
])
_PROVENANCE = ("real", "synthetic")
_EYE_SIDES = ("left", "right")

# synthetic eye geometry
YAW_PX_PER_RAD = 40.0
PITCH_PX_PER_RAD = 24.0
SCLERA_SEMI_AXES = (26.0, 14.0)  # (horizontal, vertical) in px
PUPIL_RADIUS = 5.0
SKIN, SCLERA, PUPIL = 150, 235, 40
SYNTH_ANGLE_RANGE = 0.45


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigurationError(ValueError):
    pass


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class RegionThresholds:
    yaw_center_halfwidth: float = 0.0873

    def __post_init__(self):
        if not self.yaw_center_halfwidth > 0:
            raise ValueError("yaw_center_halfwidth must be strictly positive")


def region_label(yaw, pitch, thresholds: RegionThresholds = RegionThresholds()):
    """Region index ``row * 3 + col`` (UL, UC, UR, LL, LC, LR).

    Upper means ``pitch > 0``; the center column is
    ``-halfwidth <= yaw <= halfwidth``.
    """
    yaw, pitch = np.asarray(yaw, dtype=np.float64), np.asarray(pitch, dtype=np.float64)
    hw = thresholds.yaw_center_halfwidth
    row = np.where(pitch > 0, 0, 1)
    col = np.where(yaw < -hw, 0, np.where(yaw > hw, 2, 1))
    out = row * 3 + col
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray  # uint8 [36, 60]
    yaw: float
    pitch: float
    eye_side: str = "left"
    participant: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.size != NUM_PIXELS:
            raise ValueError("pixels must be 2160 uint8 values")
        object.__setattr__(self, "pixels", px.reshape(HEIGHT, WIDTH))
        # labels are stored as float32; keep the in-memory value identical
        object.__setattr__(self, "yaw", float(np.float32(self.yaw)))
        object.__setattr__(self, "pitch", float(np.float32(self.pitch)))
        if not (abs(self.yaw) < math.pi / 2 and abs(self.pitch) < math.pi / 2):
            raise ValueError(f"gaze angles out of range: yaw={self.yaw}, pitch={self.pitch}")
        if self.eye_side not in _EYE_SIDES:
            raise ValueError(f"eye_side must be 'left' or 'right', got {self.eye_side!r}")
        if not 0 <= self.participant < 2**16:
            raise ValueError("participant id must fit in 16 bits")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (np.array_equal(self.pixels, other.pixels) and self.yaw == other.yaw
                and self.pitch == other.pitch and self.eye_side == other.eye_side
                and self.participant == other.participant)

    __hash__ = None


@dataclass
class Dataset:
    samples: list[Sample]
    provenance: str = "real"
    thresholds: RegionThresholds = field(default_factory=RegionThresholds)

    def __post_init__(self):
        if self.provenance not in _PROVENANCE:
            raise ValueError(f"provenance must be one of {_PROVENANCE}")
        self.samples = list(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(range(*i.indices(len(self))))
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.provenance, self.thresholds)

    @cached_property
    def images(self) -> np.ndarray:
        """Pixels scaled to [0, 1], shape ``[N, 36, 60, 1]``."""
        if not self.samples:
            return np.zeros((0, HEIGHT, WIDTH, 1))
        return np.stack([s.pixels for s in self.samples])[..., None] / 255.0

    @cached_property
    def angles(self) -> np.ndarray:
        """``[N, 2]`` array of (yaw, pitch) in radians."""
        return np.array([(s.yaw, s.pitch) for s in self.samples], dtype=np.float64).reshape(-1, 2)

    @cached_property
    def labels(self) -> np.ndarray:
        a = self.angles
        return np.asarray(region_label(a[:, 0], a[:, 1], self.thresholds), dtype=np.int64).reshape(-1)

    @property
    def participants(self) -> list[int]:
        return sorted({s.participant for s in self.samples})

    def by_participant(self) -> dict[int, "Dataset"]:
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            groups.setdefault(s.participant, []).append(i)
        return {p: self.subset(idx) for p, idx in sorted(groups.items())}


def from_arrays(images: np.ndarray, yaw: Sequence[float], pitch: Sequence[float],
                eye_side: Sequence[str] | None = None,
                participant: Sequence[int] | None = None,
                thresholds: RegionThresholds = RegionThresholds()) -> Dataset:
    """Build a dataset from pre-cropped 36x60 uint8 patches (e.g. normalized MPIIGaze eyes)."""
    images = np.asarray(images)
    n = len(images)
    eye_side = eye_side if eye_side is not None else ["left"] * n
    participant = participant if participant is not None else [0] * n
    samples = [Sample(images[i].astype(np.uint8), yaw[i], pitch[i], eye_side[i], int(participant[i]))
               for i in range(n)]
    return Dataset(samples, "real", thresholds)


# ---------------------------------------------------------------------------
# splits


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def _partition(indices: np.ndarray, train_fraction: float, val_fraction: float,
               min_test: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(indices)
    n_test = max(min_test, _floor(n * (1.0 - train_fraction)))
    n_val = _floor((n - n_test) * val_fraction)
    return indices[n_test + n_val:], indices[n_test:n_test + n_val], indices[:n_test]


def split(dataset: Dataset, train_fraction: float = 0.75, val_fraction_of_train: float = 0.10,
          seed: int = 0, per_participant: bool = False) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle by ``seed`` and partition into (train, val, test).

    Test gets ``floor(n * (1 - train_fraction))`` samples and validation gets
    ``floor(n_rest * val_fraction_of_train)``. With ``per_participant`` each
    participant is split independently and the parts concatenated.
    """
    if not (0 < train_fraction < 1 and 0 < val_fraction_of_train < 1):
        raise ConfigurationError("split fractions must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if per_participant:
        parts: list[tuple] = []
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            groups.setdefault(s.participant, []).append(i)
        for _, idx in sorted(groups.items()):
            parts.append(_partition(rng.permutation(np.array(idx)), train_fraction,
                                    val_fraction_of_train))
        tr, va, te = (np.concatenate([p[k] for p in parts]).astype(int) for k in range(3))
    else:
        tr, va, te = _partition(rng.permutation(len(dataset)), train_fraction, val_fraction_of_train)
    if min(len(tr), len(va), len(te)) == 0:
        raise ConfigurationError(
            f"empty partition: train={len(tr)} val={len(va)} test={len(te)} from {len(dataset)} samples")
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def train_test_split(dataset: Dataset, train_fraction: float = 0.75,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Two-way split keeping at least one test sample (for tiny per-participant sets)."""
    if len(dataset) < 2:
        raise ConfigurationError("need at least 2 samples for a train/test split")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    tr, _, te = _partition(perm, train_fraction, 0.0, min_test=1)
    return dataset.subset(tr), dataset.subset(te)


# ---------------------------------------------------------------------------
# synthetic eyes

_rows, _cols = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
_CY, _CX = (HEIGHT - 1) / 2.0, (WIDTH - 1) / 2.0
_SCLERA_MASK = ((_cols - _CX) / SCLERA_SEMI_AXES[0]) ** 2 + ((_rows - _CY) / SCLERA_SEMI_AXES[1]) ** 2 <= 1.0


def pupil_offset(yaw: float, pitch: float, yaw_scale: float = YAW_PX_PER_RAD,
                 pitch_scale: float = PITCH_PX_PER_RAD) -> tuple[int, int]:
    """(dx, dy) of the pupil center from the image center, in pixels."""
    return round(yaw_scale * yaw), round(-pitch_scale * pitch)


def render_eye(yaw: float, pitch: float, yaw_scale: float = YAW_PX_PER_RAD,
               pitch_scale: float = PITCH_PX_PER_RAD) -> np.ndarray:
    """Noise-free float image in 0..255."""
    dx, dy = pupil_offset(yaw, pitch, yaw_scale, pitch_scale)
    pupil = (_cols - (_CX + dx)) ** 2 + (_rows - (_CY + dy)) ** 2 <= PUPIL_RADIUS ** 2
    visible = pupil & _SCLERA_MASK
    if not visible.any():
        raise GenerationError(f"pupil at offset ({dx}, {dy}) lies fully outside the sclera")
    img = np.full((HEIGHT, WIDTH), float(SKIN))
    img[_SCLERA_MASK] = SCLERA
    img[visible] = PUPIL
    return img


def synth_eye(yaw: float, pitch: float, noise_sigma: float = 0.0, seed: int = 0, *,
              eye_side: str = "left", participant: int = 0,
              yaw_scale: float = YAW_PX_PER_RAD, pitch_scale: float = PITCH_PX_PER_RAD) -> Sample:
    """Render a labelled synthetic eye patch."""
    if abs(yaw) > 0.5 or abs(pitch) > 0.5:
        raise GenerationError(f"synthetic angles must satisfy |yaw|, |pitch| <= 0.5 (got {yaw}, {pitch})")
    # render from the float32 label that will be stored
    yaw, pitch = float(np.float32(yaw)), float(np.float32(pitch))
    img = render_eye(yaw, pitch, yaw_scale, pitch_scale)
    if noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, noise_sigma, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(pixels, yaw, pitch, eye_side, participant)


def synth_dataset(count: int, noise_sigma: float = 0.0, seed: int = 0,
                  angle_range: float = SYNTH_ANGLE_RANGE, participant: int = 0,
                  yaw_scale: float = YAW_PX_PER_RAD, pitch_scale: float = PITCH_PX_PER_RAD,
                  thresholds: RegionThresholds = RegionThresholds()) -> Dataset:
    """``count`` eyes with (yaw, pitch) uniform in ``[-angle_range, angle_range]``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-angle_range, angle_range, size=(count, 2))
    sides = rng.integers(0, 2, size=count)
    noise_seeds = rng.integers(0, 2**63 - 1, size=count)
    samples = [
        synth_eye(float(a[0]), float(a[1]), noise_sigma, int(ns), eye_side=_EYE_SIDES[sd],
                  participant=participant, yaw_scale=yaw_scale, pitch_scale=pitch_scale)
        for a, sd, ns in zip(angles, sides, noise_seeds)
    ]
    return Dataset(samples, "synthetic", thresholds)


# ---------------------------------------------------------------------------
# GZDS binary container


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_bytes(dataset: Dataset) -> bytes:
    header = _HEADER.pack(GZDS_MAGIC, GZDS_VERSION, len(dataset),
                          _PROVENANCE.index(dataset.provenance), b"\0\0\0")
    rec = np.zeros(len(dataset), dtype=_RECORD)
    for i, s in enumerate(dataset.samples):
        rec[i] = (s.participant, _EYE_SIDES.index(s.eye_side), s.yaw, s.pitch, s.pixels.reshape(-1))
    return header + rec.tobytes()


def dataset_from_bytes(buf: bytes, thresholds: RegionThresholds = RegionThresholds()) -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, count, prov, reserved = _HEADER.unpack_from(buf, 0)
    if magic != GZDS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GZDS_MAGIC!r}", 0)
    if version != GZDS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if prov >= len(_PROVENANCE):
        raise FormatError(f"unknown provenance code {prov}", 9)
    if reserved != b"\0\0\0":
        raise FormatError("reserved header bytes must be zero", 10)
    expected = _HEADER.size + count * _RECORD.itemsize
    if len(buf) < expected:
        k = (len(buf) - _HEADER.size) // _RECORD.itemsize
        raise FormatError(
            f"truncated: sample {k} of {count} is incomplete ({len(buf)} of {expected} bytes)", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after {count} samples", expected)
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=_HEADER.size)
    bad = np.nonzero(rec["eye_side"] > 1)[0]
    if len(bad):
        raise FormatError(f"sample {bad[0]}: invalid eye_side byte",
                          _HEADER.size + int(bad[0]) * _RECORD.itemsize + 2)
    samples = []
    for i, r in enumerate(rec):
        try:
            samples.append(Sample(r["pixels"].copy(), float(r["yaw"]), float(r["pitch"]),
                                  _EYE_SIDES[r["eye_side"]], int(r["participant"])))
        except ValueError as exc:
            raise FormatError(f"sample {i}: {exc}", _HEADER.size + i * _RECORD.itemsize) from None
    return Dataset(samples, _PROVENANCE[prov], thresholds)


def save_dataset(dataset: Dataset, path) -> None:
    atomic_write(path, dataset_to_bytes(dataset))


def load_dataset(path, thresholds: RegionThresholds = RegionThresholds()) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read(), thresholds)


def record_size() -> int:
    return _RECORD.itemsize


def header_size() -> int:
    return _HEADER.size


# ---------------------------------------------------------------------------
# PGM dumps


def to_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255). Float images are taken as [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    img = img.reshape(img.shape[0], -1)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write(path, to_pgm(image))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", 0)
    data = buf[len(buf) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
