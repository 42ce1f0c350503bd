"""Scaled dot-product self-attention and the multi-head self-attention layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, ShapeError, Tape, Var


class ConfigError(ValueError):
    """Raised for invalid model or layer configuration."""


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def mhsa_param_count(h: int, f: int, d_k: int, d_v: int, d_out: int) -> int:
    return h * f * (2 * d_k + d_v) + h * d_v * d_out + d_out


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output layer.

    ``w_out`` has ``h * d_v`` rows so that it can consume the concatenation
    of all heads.
    """

    wq: list[Param]
    wk: list[Param]
    wv: list[Param]
    w_out: Param
    b_out: Param

    def __post_init__(self) -> None:
        h = len(self.wq)
        if h < 1 or len(self.wk) != h or len(self.wv) != h:
            raise ConfigError(
                f"need h >= 1 matching Q/K/V triples, got {len(self.wq)}/{len(self.wk)}/{len(self.wv)}"
            )
        f, d_k = self.wq[0].shape
        d_v = self.wv[0].shape[1]
        if d_k == 0:
            raise ConfigError("d_k must be positive")
        for i in range(h):
            if self.wq[i].shape != (f, d_k) or self.wk[i].shape != (f, d_k):
                raise ConfigError(f"head {i}: query/key weights must be {(f, d_k)}")
            if self.wv[i].shape != (f, d_v):
                raise ConfigError(f"head {i}: value weights must be {(f, d_v)}")
        if self.w_out.shape[0] != h * d_v:
            raise ConfigError(
                f"w_out needs h*d_v = {h * d_v} rows, has {self.w_out.shape[0]}"
            )
        if self.b_out.shape != (1, self.w_out.shape[1]):
            raise ConfigError(f"b_out must be (1, {self.w_out.shape[1]})")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        h: int,
        f: int,
        d_k: int,
        d_v: int,
        d_out: int,
        prefix: str = "mhsa",
    ) -> AttentionParams:
        if h < 1 or f < 1 or d_k < 1 or d_v < 1 or d_out < 1:
            raise ConfigError(f"invalid MHSA dims h={h} f={f} d_k={d_k} d_v={d_v} d_out={d_out}")
        wq, wk, wv = [], [], []
        for i in range(h):
            wq.append(Param(f"{prefix}.wq.{i}", glorot(rng, f, d_k)))
            wk.append(Param(f"{prefix}.wk.{i}", glorot(rng, f, d_k)))
            wv.append(Param(f"{prefix}.wv.{i}", glorot(rng, f, d_v)))
        w_out = Param(f"{prefix}.w_out", glorot(rng, h * d_v, d_out))
        b_out = Param(f"{prefix}.b_out", np.zeros((1, d_out)))
        return cls(wq, wk, wv, w_out, b_out)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def f(self) -> int:
        return self.wq[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    @property
    def d_v(self) -> int:
        return self.wv[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.w_out.shape[1]

    def params(self) -> list[Param]:
        out: list[Param] = []
        for q, k, v in zip(self.wq, self.wk, self.wv):
            out += [q, k, v]
        return out + [self.w_out, self.b_out]

    def count(self) -> int:
        return sum(p.value.size for p in self.params())


@dataclass
class AttentionOutput:
    output: Var
    scores: list[Var]

    def score_arrays(self) -> list[np.ndarray]:
        return [s.value for s in self.scores]


def self_attention_head(x: Var, wq: Var, wk: Var, wv: Var) -> tuple[Var, Var]:
    """One attention head; returns ``(head, score)`` where ``head = score @ V``."""
    d_k = wq.shape[1]
    if d_k == 0:
        raise ConfigError("d_k must be positive")
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    score = ad.softmax_rows(ad.matmul(q, ad.transpose(k)), math.sqrt(d_k))
    return ad.matmul(score, v), score


def mhsa_forward(tape: Tape, x: Var, params: AttentionParams) -> AttentionOutput:
    if x.shape[1] != params.f:
        raise ShapeError(f"mhsa: input has {x.shape[1]} features, layer expects {params.f}")
    heads, scores = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        head, score = self_attention_head(x, tape.param(wq), tape.param(wk), tape.param(wv))
        heads.append(head)
        scores.append(score)
    out = ad.matmul(ad.concat_cols(heads), tape.param(params.w_out))
    return AttentionOutput(ad.add_row(out, tape.param(params.b_out)), scores)
