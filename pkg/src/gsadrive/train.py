"""Plain SGD training with inverse-time learning-rate decay and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import ContractError, Param, Tape
from .data import Split, batches
from .metrics import IntegrityError, evaluate
from .network import Model, ModelConfig, multitask_loss, param_shapes

CKPT_MAGIC = b"GSACKPT1"
CKPT_VERSION = 1
CURVE_HEADER = ("step", "epoch", "lr", "loss_action", "loss_explanation", "loss_total")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 10
    lr0: float = 0.001
    decay: float = 1e-4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.decay < 0:
            raise ValueError(f"decay must be non-negative, got {self.decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def lr_at(step: int, lr0: float, decay: float) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return lr0 / (1.0 + decay * step)


def sgd_step(params: Iterable[Param], lr: float) -> None:
    """In-place ``value -= lr * grad`` followed by zeroing the gradient."""
    for p in params:
        if p.grad.shape != p.value.shape:
            raise ContractError(f"{p.name}: gradient {p.grad.shape} vs value {p.value.shape}")
        if lr != 0:
            p.value -= lr * p.grad
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    global_step: int = 0
    rng_state: dict | None = None
    format_version: int = CKPT_VERSION

    @classmethod
    def from_model(cls, model: Model, config: dict, global_step: int, rng_state=None) -> Checkpoint:
        return cls(
            config,
            {name: p.value.copy() for name, p in model.params.items()},
            global_step,
            rng_state,
        )

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def to_model(self) -> Model:
        return Model(
            self.model_config,
            {name: Param(name, value.copy()) for name, value in self.params.items()},
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {
            "format_version": ckpt.format_version,
            "config": ckpt.config,
            "global_step": ckpt.global_step,
            "rng_state": ckpt.rng_state,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path) -> None:
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {magic!r}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable config block") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('format_version')}")
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        value = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in params:
            raise CheckpointFormatError(f"{path}: tensor {name!r} appears twice")
        params[name] = value
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    ckpt = Checkpoint(header["config"], params, header["global_step"], header["rng_state"])
    if "model" in ckpt.config:
        expected = param_shapes(ckpt.model_config)
        if list(expected) != list(params):
            raise IntegrityError(f"{path}: tensor names do not match the {ckpt.model_config.arch} layout")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise IntegrityError(
                    f"{path}: {name} has shape {params[name].shape}, config implies {shape}"
                )
    return ckpt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    curve: list[tuple]
    best_score: float | None
    val_scores: list[float]


def format_curve_row(row: tuple) -> list[str]:
    return [str(row[0]), str(row[1])] + [repr(float(v)) for v in row[2:]]


def train_loop(
    cfg: TrainConfig,
    train: Split,
    val: Split | None = None,
    out_dir: Path | None = None,
    data_info: dict | None = None,
    log=None,
) -> TrainResult:
    """Train a fresh model; writes ``curve.csv``, ``latest.ckpt`` and ``best.ckpt`` to ``out_dir``."""
    curve_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        curve_fh = open(out_dir / "curve.csv", "w", newline="")
    try:
        return _train(cfg, train, val, out_dir, data_info or {}, curve_fh, log)
    finally:
        if curve_fh is not None:
            curve_fh.close()


def _train(cfg, train, val, out_dir, data_info, curve_fh, log) -> TrainResult:
    mcfg = cfg.model
    rng = np.random.default_rng(cfg.seed)
    model = Model.init(mcfg, rng)
    config = {"model": mcfg.to_dict(), "train": cfg.to_dict(), "data": data_info}
    rng_state = rng.bit_generator.state
    writer = csv.writer(curve_fh, lineterminator="\n") if curve_fh else None
    if writer:
        writer.writerow(CURVE_HEADER)

    params = model.param_list()
    curve: list[tuple] = []
    val_scores: list[float] = []
    best: float | None = None
    step = 0
    for epoch in range(cfg.epochs):
        for index in batches(len(train), cfg.batch_size, cfg.seed, epoch):
            tape = Tape()
            out = model.forward(tape, train.inputs(mcfg.arch, index))
            loss, loss_a, loss_e = multitask_loss(
                out.action_probs, out.explanation_probs,
                train.actions[index], train.explanations[index], mcfg.lam,
            )
            tape.backward(loss)
            lr = lr_at(step, cfg.lr0, cfg.decay)
            sgd_step(params, lr)
            row = (step, epoch, lr, loss_a.item(), loss_e.item(), loss.item())
            curve.append(row)
            if writer:
                writer.writerow(format_curve_row(row))
            step += 1
        if curve_fh:
            curve_fh.flush()

        ckpt = Checkpoint.from_model(model, config, step, rng_state)
        improved = False
        if val is not None:
            score = evaluate(model, val).decision_mF1
            val_scores.append(score)
            if best is None or score > best:
                best, improved = score, True
        else:
            improved = True
        if out_dir is not None:
            save_checkpoint(out_dir / "latest.ckpt", ckpt)
            if improved:
                save_checkpoint(out_dir / "best.ckpt", ckpt)
        if log is not None:
            epoch_rows = [r for r in curve if r[1] == epoch]
            mean_loss = sum(r[5] for r in epoch_rows) / len(epoch_rows)
            msg = f"epoch {epoch + 1}/{cfg.epochs} loss={mean_loss:.5f}"
            if val is not None:
                msg += f" val_decision_mF1={val_scores[-1]:.4f}"
            log(msg)

    final = Checkpoint.from_model(model, config, step, rng_state)
    return TrainResult(model, final, curve, best, val_scores)
