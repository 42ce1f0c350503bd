"""Frozen feature extraction, the four model variants, and the multitask loss.

Architectures:

``gsa``  global soft attention: MHSA over the flattened feature grid.
``gna``  global no attention: two fully connected layers over the same grid,
         sized to match the MHSA parameter count.
``rha``  regional hard attention: score regions, keep the top-k, pool.
``rsa``  regional soft attention: MHSA over the region feature vectors.

All four share the decision/reason head: a ReLU hidden layer feeding two
linear heads with 4 action and 21 explanation logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionOutput,
    AttentionParams,
    ConfigError,
    glorot,
    mhsa_forward,
    mhsa_param_count,
)
from .autodiff import ContractError, Param, ShapeError, Tape, Var
from .labels import N_ACTIONS, N_EXPLANATIONS

ARCHS = ("gsa", "gna", "rha", "rsa")
BCE_EPS = 1e-12


# ---------------------------------------------------------------------------
# frozen feature extractor


@dataclass(frozen=True)
class Extractor:
    """Frozen random linear projection of flattened image patches."""

    seed: int
    patch: int
    feat: int
    matrix: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_seed(cls, seed: int, patch: int, feat: int) -> Extractor:
        if patch < 1 or feat < 1:
            raise ConfigError(f"patch and feature width must be positive, got {patch}, {feat}")
        rng = np.random.default_rng(seed)
        d = 3 * patch * patch
        matrix = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, feat))
        matrix.setflags(write=False)
        return cls(seed, patch, feat, matrix)


def image_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Split an HxWx3 image into row-major, flattened non-overlapping patches."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {image.shape}")
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiles = image.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, 3 * patch * patch)


def extract_features(image: np.ndarray, extractor: Extractor) -> np.ndarray:
    """Return the s x f feature sequence, ``s = (H/p) * (W/p)``."""
    return image_patches(np.asarray(image, dtype=np.float64), extractor.patch) @ extractor.matrix


def patch_centers(height: int, width: int, patch: int) -> np.ndarray:
    """(x, y) pixel centers of each patch in feature-row order."""
    ys, xs = np.meshgrid(
        np.arange(height // patch) * patch + patch / 2.0,
        np.arange(width // patch) * patch + patch / 2.0,
        indexing="ij",
    )
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass
class ModelConfig:
    arch: str = "gsa"
    heads: int = 8
    k: int = 5
    d_k: int = 16
    d_v: int = 16
    d_out: int = 64
    hidden: int = 128
    lam: float = 1.0
    threshold: float = 0.5
    seq_len: int = 64
    feat: int = 32

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "rha" and self.k < 1:
            raise ConfigError(f"rha needs k >= 1, got {self.k}")
        if self.arch in ("gsa", "rsa") and self.heads < 1:
            raise ConfigError(f"{self.arch} needs at least one head, got {self.heads}")
        if self.d_k < 1 or self.d_v < 1 or self.d_out < 1 or self.hidden < 1:
            raise ConfigError("d_k, d_v, d_out and hidden must all be positive")
        if self.seq_len < 1 or self.feat < 1:
            raise ConfigError("seq_len and feat must be positive")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def attention_param_count(self) -> int:
        return mhsa_param_count(self.heads, self.feat, self.d_k, self.d_v, self.d_out)

    def gna_width(self) -> int:
        """Width of both GNA layers, chosen to match the MHSA parameter count."""
        target = self.attention_param_count()
        n_in = self.seq_len * self.feat
        best, best_gap = 1, None
        for g in range(1, target + 1):
            count = gna_param_count(n_in, g)
            gap = abs(count - target)
            if best_gap is None or gap < best_gap:
                best, best_gap = g, gap
            if count > target:
                break
        return best

    def head_input_width(self) -> int:
        if self.arch == "gsa":
            return self.seq_len * self.d_out
        if self.arch == "gna":
            return self.gna_width()
        if self.arch == "rha":
            return self.feat
        return self.d_out


def gna_param_count(n_in: int, width: int) -> int:
    return n_in * width + width + width * width + width


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Expected shape of every named parameter, in creation order."""
    shapes: dict[str, tuple[int, int]] = {}
    if cfg.arch in ("gsa", "rsa"):
        for i in range(cfg.heads):
            shapes[f"mhsa.wq.{i}"] = (cfg.feat, cfg.d_k)
            shapes[f"mhsa.wk.{i}"] = (cfg.feat, cfg.d_k)
            shapes[f"mhsa.wv.{i}"] = (cfg.feat, cfg.d_v)
        shapes["mhsa.w_out"] = (cfg.heads * cfg.d_v, cfg.d_out)
        shapes["mhsa.b_out"] = (1, cfg.d_out)
    elif cfg.arch == "gna":
        g = cfg.gna_width()
        shapes["gna.fc1.w"] = (cfg.seq_len * cfg.feat, g)
        shapes["gna.fc1.b"] = (1, g)
        shapes["gna.fc2.w"] = (g, g)
        shapes["gna.fc2.b"] = (1, g)
    else:
        shapes["rha.scorer.w"] = (cfg.feat, 1)
        shapes["rha.scorer.b"] = (1, 1)
    n_in = cfg.head_input_width()
    shapes["head.hidden.w"] = (n_in, cfg.hidden)
    shapes["head.hidden.b"] = (1, cfg.hidden)
    shapes["head.action.w"] = (cfg.hidden, N_ACTIONS)
    shapes["head.action.b"] = (1, N_ACTIONS)
    shapes["head.explanation.w"] = (cfg.hidden, N_EXPLANATIONS)
    shapes["head.explanation.b"] = (1, N_EXPLANATIONS)
    return shapes


# ---------------------------------------------------------------------------
# forward paths


@dataclass
class Outputs:
    """Batch outputs of one forward pass on a tape."""

    action_logits: Var
    explanation_logits: Var
    action_probs: Var
    explanation_probs: Var
    attention: list[AttentionOutput | None]
    selected: list[list[int] | None]


@dataclass
class Prediction:
    action_logits: np.ndarray
    explanation_logits: np.ndarray
    action_probs: np.ndarray
    explanation_probs: np.ndarray
    attention: list[np.ndarray] | None = None


def select_topk(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest scores, lowest index first on ties, sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ContractError("select_topk: empty score vector")
    if k < 1:
        raise ContractError(f"select_topk: k must be >= 1, got {k}")
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:k])


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Param]) -> None:
        expected = param_shapes(cfg)
        if list(params) != list(expected):
            raise ConfigError(
                f"parameter names {sorted(params)} do not match {cfg.arch} layout {sorted(expected)}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params
        self.attn: AttentionParams | None = None
        if cfg.arch in ("gsa", "rsa"):
            h = range(cfg.heads)
            self.attn = AttentionParams(
                [params[f"mhsa.wq.{i}"] for i in h],
                [params[f"mhsa.wk.{i}"] for i in h],
                [params[f"mhsa.wv.{i}"] for i in h],
                params["mhsa.w_out"],
                params["mhsa.b_out"],
            )

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> Model:
        params = {}
        for name, shape in param_shapes(cfg).items():
            if name.endswith(".b") or name.endswith("b_out"):
                value = np.zeros(shape)
            else:
                value = glorot(rng, *shape)
            params[name] = Param(name, value)
        return cls(cfg, params)

    def param_list(self) -> list[Param]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def block_param_count(self) -> int:
        """Parameters of the architecture-specific block, excluding the shared heads."""
        return sum(p.value.size for n, p in self.params.items() if not n.startswith("head."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward -----------------------------------------------------------

    def _p(self, tape: Tape, name: str) -> Var:
        return tape.param(self.params[name])

    def _heads(self, tape: Tape, z: Var) -> tuple[Var, Var]:
        hidden = ad.relu(ad.add_row(ad.matmul(z, self._p(tape, "head.hidden.w")),
                                    self._p(tape, "head.hidden.b")))
        a = ad.add_row(ad.matmul(hidden, self._p(tape, "head.action.w")),
                       self._p(tape, "head.action.b"))
        e = ad.add_row(ad.matmul(hidden, self._p(tape, "head.explanation.w")),
                       self._p(tape, "head.explanation.b"))
        return a, e

    def _check_input(self, x: np.ndarray) -> None:
        cfg = self.cfg
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-D input, got shape {x.shape}")
        if x.shape[1] != cfg.feat:
            raise ShapeError(f"input has {x.shape[1]} features, model expects {cfg.feat}")
        if cfg.arch in ("gsa", "gna") and x.shape[0] != cfg.seq_len:
            raise ShapeError(f"input has sequence length {x.shape[0]}, model expects {cfg.seq_len}")
        if x.shape[0] < 1:
            raise ShapeError("need at least one region")

    def _encode(self, tape: Tape, x: np.ndarray):
        """Per-sample encoding to a 1 x head_input_width row."""
        cfg = self.cfg
        xv = tape.const(x)
        if cfg.arch == "gsa":
            att = mhsa_forward(tape, xv, self.attn)
            return ad.flatten(att.output), att, None
        if cfg.arch == "rsa":
            att = mhsa_forward(tape, xv, self.attn)
            return ad.mean_rows(att.output), att, None
        if cfg.arch == "gna":
            h1 = ad.relu(ad.add_row(ad.matmul(ad.flatten(xv), self._p(tape, "gna.fc1.w")),
                                    self._p(tape, "gna.fc1.b")))
            z = ad.add_row(ad.matmul(h1, self._p(tape, "gna.fc2.w")), self._p(tape, "gna.fc2.b"))
            return z, None, None
        scores = ad.add_row(ad.matmul(xv, self._p(tape, "rha.scorer.w")),
                            self._p(tape, "rha.scorer.b"))
        idx = select_topk(scores.value[:, 0], cfg.k)
        gates = ad.sigmoid(ad.take_rows(scores, idx))
        pooled = ad.mean_rows(ad.mul_col(ad.take_rows(xv, idx), gates))
        return pooled, None, idx

    def forward(self, tape: Tape, inputs: Sequence[np.ndarray]) -> Outputs:
        if not inputs:
            raise ContractError("forward needs at least one sample")
        rows, attention, selected = [], [], []
        for x in inputs:
            x = np.asarray(x, dtype=np.float64)
            self._check_input(x)
            z, att, idx = self._encode(tape, x)
            rows.append(z)
            attention.append(att)
            selected.append(idx)
        a, e = self._heads(tape, ad.stack_rows(rows))
        return Outputs(a, e, ad.sigmoid(a), ad.sigmoid(e), attention, selected)

    def predict(self, inputs: Sequence[np.ndarray]) -> list[Prediction]:
        out = self.forward(Tape(), inputs)
        preds = []
        for i, att in enumerate(out.attention):
            preds.append(Prediction(
                out.action_logits.value[i].copy(),
                out.explanation_logits.value[i].copy(),
                out.action_probs.value[i].copy(),
                out.explanation_probs.value[i].copy(),
                att.score_arrays() if att is not None else None,
            ))
        return preds

    def pooled_feature(self, x: np.ndarray) -> np.ndarray:
        """Encoded row fed to the heads, for inspection and tests."""
        tape = Tape()
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        return self._encode(tape, x)[0].value[0].copy()


# ---------------------------------------------------------------------------
# losses and binarization


def multitask_loss(
    action_probs: Var,
    explanation_probs: Var,
    actions,
    explanations,
    lam: float = 1.0,
) -> tuple[Var, Var, Var]:
    """Return ``(L, L_A, L_E)`` with ``L = lam * L_A + L_E``."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    loss_a = ad.bce(action_probs, actions, BCE_EPS)
    loss_e = ad.bce(explanation_probs, explanations, BCE_EPS)
    return ad.add(ad.scale(loss_a, lam), loss_e), loss_a, loss_e


def bce_loss(y, p) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    if y.shape != p.shape:
        raise ContractError(f"bce_loss: {y.shape[1]} labels but {p.shape[1]} probabilities")
    tape = Tape()
    return ad.bce(tape.const(p), y, BCE_EPS).item()


def predict_labels(pred: Prediction, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (
        (pred.action_probs >= threshold).astype(np.int64),
        (pred.explanation_probs >= threshold).astype(np.int64),
    )
