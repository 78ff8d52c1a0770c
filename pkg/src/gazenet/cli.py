"""Command-line entry point: ``gazenet {synth,train,eval,transfer,perturb,reconstruct}``.

Exit status: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    ConfigurationError,
    Dataset,
    FormatError,
    GenerationError,
    atomic_write,
    dataset_to_bytes,
    load_dataset,
    split,
    synth_dataset,
    to_pgm,
)
from .losses import ObjectiveConfig
from .model import ARCHITECTURES, GAZE_LAYERS, GazeNetParams, ManifestError, ValidationError, perturbation_sweep, reconstruct
from .tensor import NumericalError
from .train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    summarize_transfer,
    train,
    transfer,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gazenet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    dataset_digest: Optional[str]
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str) + "\n"


def digest(payload: bytes) -> str:
    """64-bit content hash, hex encoded."""
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def _write_manifest(path: str, manifest: RunManifest) -> None:
    atomic_write(path, manifest.to_json().encode())


def _csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _load_data(path: str) -> tuple[Dataset, str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    from .data import dataset_from_bytes

    return dataset_from_bytes(raw), digest(raw)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.participants == 1:
        ds = synth_dataset(args.count, args.noise, args.seed)
    else:
        rng = np.random.default_rng(args.seed)
        samples = []
        for pid in range(args.participants):
            jy, jp = rng.uniform(-args.scale_jitter, args.scale_jitter, 2)
            part = synth_dataset(args.count, args.noise, int(rng.integers(2**31)), participant=pid,
                                 yaw_scale=40.0 * (1 + jy), pitch_scale=24.0 * (1 + jp))
            samples += part.samples
        ds = Dataset(samples, "synthetic")
    payload = dataset_to_bytes(ds)
    atomic_write(args.out, payload)
    _write_manifest(args.out + ".manifest.json", RunManifest(
        "synth", {"count": args.count, "noise": args.noise, "participants": args.participants,
                  "scale_jitter": args.scale_jitter}, args.seed, digest(payload)))
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        objective=ObjectiveConfig(args.lambda1, args.lambda2, t_mode=args.t_mode),
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        optimizer=args.optimizer, seed=args.seed, max_steps=args.max_steps, metric=args.metric,
        lr_scale={name: args.head_lr_scale for name in GAZE_LAYERS}, lr_decay=args.lr_decay,
    )


def cmd_train(args) -> int:
    data, dig = _load_data(args.data)
    tr, va, te = split(data, 0.75, 0.10, seed=args.seed)
    cfg = _train_config(args)
    arch = ARCHITECTURES[args.arch]
    params = GazeNetParams.init(arch, args.seed)
    res = train(params, tr, va, cfg, progress=lambda r: log.info("epoch %d done", r.epoch))
    save_checkpoint(res.params, args.out)
    csv_path = args.metrics or args.out + ".history.csv"
    atomic_write(csv_path, _csv_bytes(
        ["epoch", "train_loss", "val_acc", "val_mae_deg"],
        [[r.epoch, _fmt(r.train_loss), _fmt(r.val_acc), _fmt(r.val_mae_deg)] for r in res.history]))
    test = evaluate(res.params, te, cfg.reports_mae, metric=cfg.metric)
    _write_manifest(args.out + ".manifest.json", RunManifest(
        "train", {"arch": args.arch, **dataclasses.asdict(cfg), "split": [0.75, 0.10]}, args.seed, dig))
    print(f"best_epoch={res.best_epoch} test_acc={test.acc:.4f} test_mae_deg={_fmt(test.mae_deg) or '-'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data, dig = _load_data(args.data)
    params = load_checkpoint(args.ckpt, ARCHITECTURES[args.arch])
    m = evaluate(params, data, report_mae=not args.no_mae, metric=args.metric)
    print(f"acc={m.acc:.6f} mae_deg={_fmt(m.mae_deg) or '-'} n={len(data)}")
    csv_path = args.csv or args.ckpt + ".eval.csv"
    atomic_write(csv_path, _csv_bytes(["acc", "mae_deg", "n"], [[_fmt(m.acc), _fmt(m.mae_deg), len(data)]]))
    _write_manifest(csv_path + ".manifest.json", RunManifest(
        "eval", {"ckpt": args.ckpt, "data": args.data, "arch": args.arch, "metric": args.metric,
                 "report_mae": not args.no_mae}, None, dig))
    return EXIT_OK


def cmd_transfer(args) -> int:
    data, dig = _load_data(args.data)
    pre = load_checkpoint(args.ckpt, ARCHITECTURES[args.arch])
    cfg = TrainConfig(ObjectiveConfig(0.0, 1.0), epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed)
    results = transfer(pre, data.by_participant(), cfg, unfreeze_decoder=args.unfreeze_decoder)
    os.makedirs(args.out, exist_ok=True)
    for r in results:
        save_checkpoint(r.params, os.path.join(args.out, f"participant_{r.participant}.gznt"))
    atomic_write(os.path.join(args.out, "summary.csv"), _csv_bytes(
        ["participant", "mae_before", "mae_after"],
        [[r.participant, _fmt(r.before.mae_deg), _fmt(r.after.mae_deg)] for r in results]))
    _write_manifest(os.path.join(args.out, "manifest.json"), RunManifest(
        "transfer", {"ckpt": args.ckpt, "arch": args.arch, **dataclasses.asdict(cfg),
                     "unfreeze_decoder": args.unfreeze_decoder}, args.seed, dig))
    if results:
        s = summarize_transfer(results)
        print("before: {:.3f} +/- {:.3f}  after: {:.3f} +/- {:.3f}  participants: {}".format(
            *s["before"], *s["after"], len(results)))
    else:
        print("no participant had at least 2 samples")
    return EXIT_OK


def _patch(data: Dataset, index: int):
    if not 0 <= index < len(data):
        raise UsageError(f"--index {index} out of range for {len(data)} samples")
    return data.images[index]


def cmd_perturb(args) -> int:
    data, dig = _load_data(args.data)
    params = load_checkpoint(args.ckpt, ARCHITECTURES[args.arch])
    patch = _patch(data, args.index)
    grid = perturbation_sweep(patch, params)
    os.makedirs(args.out, exist_ok=True)
    ndim, ndelta, h, w = grid.shape
    for d in range(ndim):
        for j in range(ndelta):
            atomic_write(os.path.join(args.out, f"dim{d:02d}_delta{j}.pgm"), to_pgm(grid[d, j]))
    composite = grid.transpose(0, 2, 1, 3).reshape(ndim * h, ndelta * w)
    atomic_write(os.path.join(args.out, "grid.pgm"), to_pgm(composite))
    _write_manifest(os.path.join(args.out, "manifest.json"), RunManifest(
        "perturb", {"ckpt": args.ckpt, "arch": args.arch, "index": args.index,
                    "deltas": [-0.25, -0.125, 0.0, 0.125, 0.25]}, None, dig))
    print(f"wrote {ndim * ndelta} images and grid.pgm to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    data, dig = _load_data(args.data)
    params = load_checkpoint(args.ckpt, ARCHITECTURES[args.arch])
    img = reconstruct(_patch(data, args.index), params)
    atomic_write(args.out, to_pgm(img))
    _write_manifest(args.out + ".manifest.json", RunManifest(
        "reconstruct", {"ckpt": args.ckpt, "arch": args.arch, "index": args.index}, None, dig))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gazenet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic GZDS dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive_int, required=True, help="samples (per participant)")
    s.add_argument("--noise", type=_nonneg_float, default=0.0, help="pixel noise sigma (0..255 scale)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--participants", type=_positive_int, default=1)
    s.add_argument("--scale-jitter", type=_nonneg_float, default=0.15,
                   help="per-participant relative jitter of the pupil px/rad constants")
    s.set_defaults(func=cmd_synth)

    def model_flags(q):
        q.add_argument("--arch", choices=sorted(ARCHITECTURES), default="gazenet")

    def metric_flag(q):
        q.add_argument("--metric", choices=["angular", "mean_abs"], default="angular",
                       help="3-D angle between gaze vectors, or mean of |dyaw| and |dpitch|")

    t = sub.add_parser("train", help="train on a GZDS dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="best-validation checkpoint path")
    t.add_argument("--lambda1", type=_nonneg_float, default=0.0, help="reconstruction loss weight")
    t.add_argument("--lambda2", type=_nonneg_float, default=0.0, help="gaze loss weight")
    t.add_argument("--epochs", type=_positive_int, default=100)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--lr", type=_nonneg_float, default=1e-4)
    t.add_argument("--head-lr-scale", type=_nonneg_float, default=1.0,
                   help="learning-rate multiplier for the gaze head")
    t.add_argument("--lr-decay", type=float, default=1.0, help="per-epoch learning-rate factor in (0, 1]")
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--t-mode", choices=["crisp", "directional"], default="crisp")
    t.add_argument("--max-steps", type=_positive_int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--metrics", help="history CSV path (default: <out>.history.csv)")
    model_flags(t)
    metric_flag(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--csv", help="metrics CSV path (default: <ckpt>.eval.csv)")
    e.add_argument("--no-mae", action="store_true", help="report accuracy only")
    model_flags(e)
    metric_flag(e)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("transfer", help="per-participant gaze-head retraining")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=_positive_int, default=100)
    tr.add_argument("--batch-size", type=_positive_int, default=32)
    tr.add_argument("--lr", type=_nonneg_float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--unfreeze-decoder", action="store_true")
    model_flags(tr)
    tr.set_defaults(func=cmd_transfer)

    for name, func, helptext in (("perturb", cmd_perturb, "capsule dimension perturbation grid"),
                                 ("reconstruct", cmd_reconstruct, "decoder reconstruction of one patch")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--ckpt", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--index", type=int, required=True)
        q.add_argument("--out", required=True)
        model_flags(q)
        q.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gazenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gazenet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ManifestError, ConfigurationError, GenerationError, ValidationError, OSError) as exc:
        print(f"gazenet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining value errors come from option values the parser cannot vet
        print(f"gazenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
