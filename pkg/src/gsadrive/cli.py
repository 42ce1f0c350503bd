"""``gsadrive`` command-line interface.

Subcommands::

    synth            generate a synthetic dataset directory
    train            train one model variant, writing curve.csv and checkpoints
    eval             score a checkpoint on a dataset split
    predict          label a single PPM image
    attention-dump   export per-head attention score matrices
    verify           run the built-in property suites

Every command validates its inputs before touching the filesystem, exits
nonzero on failure, and removes the outputs it had started writing.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

from .attention import ConfigError
from .autodiff import ContractError, ShapeError
from .data import (
    FAMILIES,
    SPLITS,
    DatasetError,
    DatasetManifest,
    read_manifest,
    read_ppm,
    read_regions,
    read_split,
    synthesize,
)
from .labels import ACTIONS, EXPLANATIONS
from .metrics import IntegrityError, check_compatible, evaluate
from .network import ARCHS, Extractor, Model, ModelConfig, extract_features, predict_labels
from .train import CheckpointFormatError, TrainConfig, load_checkpoint, train_loop
from .verify import SUITES, run_suite

EXPECTED_ERRORS = (
    DatasetError,
    CheckpointFormatError,
    IntegrityError,
    ConfigError,
    ShapeError,
    ContractError,
    ValueError,
    OSError,
)


class CliError(Exception):
    """A user-facing failure; the message is printed without a traceback."""


# ---------------------------------------------------------------------------
# output bookkeeping


@contextmanager
def _output_dir(path: Path) -> Iterator[Path]:
    """Yield ``path`` for writing; remove it again on failure if it was created here."""
    created = not path.exists()
    path.mkdir(parents=True, exist_ok=True)
    try:
        yield path
    except BaseException:
        if created:
            shutil.rmtree(path, ignore_errors=True)
        raise


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        manifest = DatasetManifest(
            seed=args.seed,
            family=args.family,
            splits={"train": args.n_train, "val": args.n_val, "test": args.n_test},
            image_size=args.size,
            patch=args.patch,
            feat=args.feat,
            extractor_seed=args.seed if args.extractor_seed is None else args.extractor_seed,
        )
    except DatasetError as exc:
        raise CliError(f"invalid dataset settings: {exc}") from exc

    out = Path(args.out)
    existing = out / "manifest.json"
    if existing.exists() and existing.read_text() != manifest.to_json():
        raise CliError(f"{existing} already exists with different settings; refusing to overwrite")
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")

    if out.exists() and any(out.iterdir()):
        # same manifest: regeneration is deterministic, so rewrite in place
        synthesize(out, manifest)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
        try:
            synthesize(staging, manifest)
            if out.exists():
                out.rmdir()
            os.replace(staging, out)
        finally:
            if staging.exists():
                shutil.rmtree(staging, ignore_errors=True)
    counts = ", ".join(f"{s}={n}" for s, n in manifest.splits.items())
    print(f"wrote {out}: family={manifest.family} seed={manifest.seed} {counts}")
    return 0


# ---------------------------------------------------------------------------
# train / eval


def cmd_train(args: argparse.Namespace) -> int:
    data = Path(args.data)
    manifest = read_manifest(data)
    try:
        mcfg = ModelConfig(
            arch=args.model, heads=args.heads, k=args.k, d_k=args.d_k, d_v=args.d_v,
            d_out=args.d_out, hidden=args.hidden, lam=args.lam, threshold=args.threshold,
            seq_len=manifest.seq_len, feat=manifest.feat,
        )
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr0=args.lr,
                          decay=args.lr_decay, seed=args.seed, model=mcfg)
    except (ConfigError, ValueError) as exc:
        raise CliError(f"invalid training settings: {exc}") from exc

    train = read_split(data, "train", manifest)
    val = read_split(data, "val", manifest) if "val" in manifest.splits else None
    check_compatible(Model.init(mcfg, np.random.default_rng(0)), train)

    data_info = json.loads(manifest.to_json())
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    with _output_dir(Path(args.out)) as out:
        written = [out / n for n in ("curve.csv", "latest.ckpt", "best.ckpt")]
        try:
            result = train_loop(cfg, train, val, out, data_info, log)
        except BaseException:
            for p in written:
                if p.exists():
                    p.unlink()
            raise
    final = result.curve[-1]
    print(f"trained {mcfg.arch}: {len(result.curve)} steps, final loss={final[5]:.5f}; wrote {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(Path(args.ckpt))
    model = ckpt.to_model()
    data = Path(args.data)
    manifest = read_manifest(data)
    if args.split not in manifest.splits:
        raise CliError(f"split {args.split!r} is not present in {data} ({', '.join(manifest.splits)})")
    split = read_split(data, args.split, manifest)
    check_compatible(model, split)
    report = evaluate(model, split, args.threshold)
    if args.out:
        _write_atomic(Path(args.out), report.to_json())
    print(report.summary())
    return 0


# ---------------------------------------------------------------------------
# single-image commands


def _load_for_image(args: argparse.Namespace) -> tuple[Model, np.ndarray]:
    """Load the checkpoint and turn the image into the model's input."""
    ckpt = load_checkpoint(Path(args.ckpt))
    model = ckpt.to_model()
    data = ckpt.config.get("data") or {}
    if not data:
        raise CliError(f"{args.ckpt} carries no dataset settings; cannot prepare an image for it")
    size, patch = data["image_size"], data["patch"]
    image_path = Path(args.image)
    image = read_ppm(image_path)
    if image.shape[:2] != (size, size):
        raise CliError(
            f"{image_path} is {image.shape[1]}x{image.shape[0]}, "
            f"the checkpoint expects {size}x{size} images"
        )
    if model.cfg.arch in ("gsa", "gna"):
        extractor = Extractor.from_seed(data["extractor_seed"], patch, data["feat"])
        return model, extract_features(image, extractor)
    regions_path = Path(args.regions) if args.regions else \
        image_path.parent.parent / "regions" / (image_path.stem + ".rgf")
    if not regions_path.exists():
        raise CliError(f"{model.cfg.arch} models need region features; {regions_path} not found "
                       "(pass --regions)")
    return model, read_regions(regions_path).features


def prediction_record(pred, threshold: float) -> dict:
    acts, expls = predict_labels(pred, threshold)
    return {
        "actions": {name: float(p) for name, p in zip(ACTIONS, pred.action_probs)},
        "explanations": [
            {"index": i, "name": name, "prob": float(p)}
            for i, (name, p) in enumerate(zip(EXPLANATIONS, pred.explanation_probs))
        ],
        "predicted_actions": [ACTIONS[i] for i in np.flatnonzero(acts)],
        "predicted_explanations": [
            {"index": int(i), "name": EXPLANATIONS[i]} for i in np.flatnonzero(expls)
        ],
    }


def cmd_predict(args: argparse.Namespace) -> int:
    model, x = _load_for_image(args)
    threshold = model.cfg.threshold if args.threshold is None else args.threshold
    record = prediction_record(model.predict([x])[0], threshold)
    text = json.dumps(record, indent=2) + "\n"
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.out:
        print("actions: " + (", ".join(record["predicted_actions"]) or "(none)"))
        for e in record["predicted_explanations"]:
            print(f"  because: {e['name']}")
    return 0


def write_pgm(path: Path, matrix: np.ndarray) -> None:
    """8-bit binary PGM; values scaled linearly so the matrix min maps to 0 and max to 255."""
    lo, hi = float(matrix.min()), float(matrix.max())
    scaled = np.zeros(matrix.shape) if hi <= lo else (matrix - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def cmd_attention_dump(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(Path(args.ckpt))
    arch = ckpt.model_config.arch
    if arch not in ("gsa", "rsa"):
        raise CliError(f"attention-dump needs a gsa or rsa checkpoint; {args.ckpt} is {arch}")
    model, x = _load_for_image(args)
    scores = model.predict([x])[0].attention
    with _output_dir(Path(args.out)) as out:
        for i, a in enumerate(scores):
            np.savetxt(out / f"head{i}.csv", a, delimiter=",", fmt="%.17g")
            write_pgm(out / f"head{i}.pgm", a)
    worst = max(float(np.abs(a.sum(axis=1) - 1.0).max()) for a in scores)
    print(f"wrote {len(scores)} heads of {scores[0].shape[0]}x{scores[0].shape[1]} scores to {out}; "
          f"max |row sum - 1| = {worst:.3e}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    checks = run_suite(args.suite, args.seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    summary = {
        "suite": args.suite,
        "passed": not failed,
        "n_checks": len(checks),
        "n_failed": len(failed),
        "checks": [c.to_dict() for c in checks],
    }
    if args.json:
        _write_atomic(Path(args.json), json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("suite", "passed", "n_checks", "n_failed")}))
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsadrive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=FAMILIES, default="basic")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--feat", type=int, default=32)
    p.add_argument("--extractor-seed", type=int, default=None,
                   help="seed of the frozen extractor (default: --seed)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=ARCHS, default="gsa")
    p.add_argument("--heads", type=_positive_int, default=8)
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--d-k", type=_positive_int, default=16)
    p.add_argument("--d-v", type=_positive_int, default=16)
    p.add_argument("--d-out", type=_positive_int, default=64)
    p.add_argument("--hidden", type=_positive_int, default=128)
    p.add_argument("--epochs", type=_positive_int, default=40)
    p.add_argument("--batch-size", type=_positive_int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lr-decay", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict actions and explanations for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default=None, help="prediction JSON path (default: stdout)")
    p.add_argument("--regions", default=None, help="region file for rha/rsa checkpoints")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention-dump", help="export attention score matrices")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regions", default=None, help="region file for rsa checkpoints")
    p.set_defaults(func=cmd_attention_dump)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None, help="write the full report here")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
