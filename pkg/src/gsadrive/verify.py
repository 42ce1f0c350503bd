"""Self-contained property suites runnable from the command line.

Each suite returns a list of :class:`Check` records; nothing here touches
the filesystem.  The suites are also reused by the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, mhsa_forward
from .autodiff import Param, Tape, grad_check
from .metrics import f1_all, mf1
from .network import Model, ModelConfig, multitask_loss, select_topk

SUITES = ("gradcheck", "metrics", "invariants")
GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
EXACT_TOL = 1e-12
ATTN_TOL = 1e-9


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    cases: int
    worst: float
    tol: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}/{self.name} cases={self.cases} "
                f"worst={self.worst:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s)")


def _timed(suite: str, name: str, tol: float, fn: Callable[[], tuple[int, float]]) -> Check:
    start = time.perf_counter()
    cases, worst = fn()
    return Check(suite, name, bool(worst <= tol), cases, float(worst), tol, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# gradient checks


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values off the relu kink so the central difference never straddles it."""
    return x + np.where(x >= 0, margin, -margin)


def _weighted(t: Tape, v: ad.Var, w: np.ndarray) -> ad.Var:
    return ad.matmul(ad.flatten(v), t.const(w.reshape(-1, 1)))


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[list[Param], Callable]]]:
    """Each factory draws a random instance: the params and a scalar-loss builder."""

    def unary(op, shape=(3, 4), transform=None):
        def make(rng):
            value = rng.normal(size=shape)
            x = Param("x", transform(value) if transform else value)
            w = rng.normal(size=op(Tape().const(x.value)).shape)
            return [x], lambda t: _weighted(t, op(t.param(x)), w)
        return make

    def binary(op, sa, sb):
        def make(rng):
            a, b = Param("a", rng.normal(size=sa)), Param("b", rng.normal(size=sb))
            probe = Tape()
            w = rng.normal(size=op(probe.const(a.value), probe.const(b.value)).shape)
            return [a, b], lambda t: _weighted(t, op(t.param(a), t.param(b)), w)
        return make

    def parts(op):
        def make(rng):
            xs = [Param(f"x{i}", rng.normal(size=(2, 3) if op is ad.concat_cols else (3, 2)))
                  for i in range(3)]
            probe = Tape()
            w = rng.normal(size=op([probe.const(x.value) for x in xs]).shape)
            return xs, lambda t: _weighted(t, op([t.param(x) for x in xs]), w)
        return make

    def bce(rng):
        p = Param("p", rng.uniform(0.05, 0.95, size=(2, 5)))
        y = rng.integers(0, 2, size=(2, 5)).astype(float)
        return [p], lambda t: ad.bce(t.param(p), y)

    def sum_all(rng):
        x = Param("x", rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 1))
        return [x], lambda t: ad.sum_all(ad.mul_col(t.param(x), t.const(w)))

    return {
        "matmul": binary(ad.matmul, (3, 4), (4, 2)),
        "transpose": unary(ad.transpose),
        "add": binary(ad.add, (3, 4), (3, 4)),
        "add_row": binary(ad.add_row, (3, 4), (1, 4)),
        "mul_col": binary(ad.mul_col, (3, 4), (3, 1)),
        "scale": unary(lambda v: ad.scale(v, -0.7)),
        "relu": unary(ad.relu, transform=_away_from_zero),
        "sigmoid": unary(ad.sigmoid),
        "softmax_rows": unary(lambda v: ad.softmax_rows(v, 1.7)),
        "concat_cols": parts(ad.concat_cols),
        "stack_rows": parts(ad.stack_rows),
        "flatten": unary(ad.flatten),
        "mean_rows": unary(ad.mean_rows),
        "take_rows": unary(lambda v: ad.take_rows(v, [2, 0, 2])),
        "sum_all": sum_all,
        "bce": bce,
    }


OP_NAMES = tuple(_op_cases())

GRADCHECK_CONFIG = dict(heads=2, k=2, d_k=3, d_v=2, d_out=3, hidden=5, seq_len=4, feat=3)


def model_gradcheck(arch: str, seed: int = 0, batch: int = 2, **overrides) -> ad.GradCheckReport:
    """Finite-difference check of the full forward pass plus multitask loss."""
    cfg = ModelConfig(arch=arch, **{**GRADCHECK_CONFIG, **overrides})
    rng = np.random.default_rng(seed)
    model = Model.init(cfg, rng)
    for p in model.param_list():
        p.value[...] += rng.normal(scale=0.1, size=p.shape)
    n_rows = cfg.seq_len if arch in ("gsa", "gna") else 5
    inputs = [rng.normal(size=(n_rows, cfg.feat)) for _ in range(batch)]
    actions = rng.integers(0, 2, size=(batch, 4))
    expls = rng.integers(0, 2, size=(batch, 21))

    def build(t: Tape) -> ad.Var:
        out = model.forward(t, inputs)
        return multitask_loss(out.action_probs, out.explanation_probs, actions, expls, cfg.lam)[0]

    return grad_check(build, model.param_list(), step=GRAD_STEP, tol=GRAD_TOL)


def gradcheck_suite(instances: int = 100, seed: int = 0, model_instances: int = 5,
                    archs: tuple[str, ...] = ("gsa", "gna", "rsa", "rha")) -> list[Check]:
    checks = []
    for i, (name, make) in enumerate(_op_cases().items()):
        def run(make=make, i=i):
            rng = np.random.default_rng([seed, i])
            worst = 0.0
            for _ in range(instances):
                params, build = make(rng)
                worst = max(worst, grad_check(build, params, GRAD_STEP, GRAD_TOL).worst)
            return instances, worst
        checks.append(_timed("gradcheck", name, GRAD_TOL, run))
    for arch in archs:
        def run_model(arch=arch):
            worst = max(model_gradcheck(arch, seed * 1000 + j).worst for j in range(model_instances))
            return model_instances, worst
        checks.append(_timed("gradcheck", f"model_{arch}", GRAD_TOL, run_model))
    return checks


# ---------------------------------------------------------------------------
# metric oracles


def brute_f1(pairs) -> float:
    """Precision/recall form of F1 from explicit (pred, label) bit pairs."""
    tp = sum(1 for p, y in pairs if p and y)
    fp = sum(1 for p, y in pairs if p and not y)
    fn = sum(1 for p, y in pairs if y and not p)
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def brute_f1_all(preds, labels) -> float:
    return brute_f1([(p, y) for pr, yr in zip(preds, labels) for p, y in zip(pr, yr)])


def brute_mf1(preds, labels) -> float:
    n_cls = len(preds[0])
    return sum(brute_f1([(pr[c], yr[c]) for pr, yr in zip(preds, labels)]) for c in range(n_cls)) / n_cls


def random_bits(rng: np.random.Generator, n_cls: int) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(1, 40))
    density = rng.uniform(0.0, 1.0)
    preds = (rng.uniform(size=(n, n_cls)) < density).astype(np.int64)
    labels = (rng.uniform(size=(n, n_cls)) < rng.uniform(0.0, 1.0)).astype(np.int64)
    return preds, labels


def metrics_suite(cases: int = 1000, seed: int = 0) -> list[Check]:
    checks = []
    for n_cls in (4, 21):
        def run(n_cls=n_cls):
            rng = np.random.default_rng([seed, n_cls])
            worst = 0.0
            for _ in range(cases):
                p, y = random_bits(rng, n_cls)
                pl, yl = p.tolist(), y.tolist()
                worst = max(worst, abs(f1_all(p, y) - brute_f1_all(pl, yl)),
                            abs(mf1(p, y)[0] - brute_mf1(pl, yl)))
            return cases, worst
        checks.append(_timed("metrics", f"brute_force_C{n_cls}", EXACT_TOL, run))
    return checks


# ---------------------------------------------------------------------------
# attention and selection invariants


def _random_attention(rng: np.random.Generator) -> tuple[AttentionParams, int]:
    h, f = int(rng.integers(1, 5)), int(rng.integers(2, 9))
    d_k, d_v, d_out = (int(v) for v in rng.integers(1, 7, size=3))
    return AttentionParams.init(rng, h, f, d_k, d_v, d_out), f


def row_sum_worst(cases: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(cases):
        params, f = _random_attention(rng)
        x = rng.normal(scale=rng.uniform(0.1, 5.0), size=(int(rng.integers(1, 17)), f))
        t = Tape()
        for score in mhsa_forward(t, t.const(x), params).scores:
            worst = max(worst, float(np.abs(score.value.sum(axis=1) - 1.0).max()))
    return worst


def permutation_worst(cases: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(cases):
        params, f = _random_attention(rng)
        s = int(rng.integers(2, 17))
        x = rng.normal(size=(s, f))
        perm = rng.permutation(s)
        t = Tape()
        base = mhsa_forward(t, t.const(x), params).output.value
        moved = mhsa_forward(t, t.const(x[perm]), params).output.value
        worst = max(worst, float(np.abs(moved - base[perm]).max()))
    return worst


def sort_oracle_topk(scores: list[float], k: int) -> list[int]:
    """Reference top-k: sort (value descending, index ascending) pairs, keep k."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


def random_scores(rng: np.random.Generator) -> list[float]:
    n = int(rng.integers(1, 30))
    if rng.uniform() < 0.5:
        # few distinct values so ties are common
        return rng.integers(-3, 4, size=n).astype(float).tolist()
    return rng.normal(size=n).tolist()


def topk_mismatches(cases: int = 10000, seed: int = 0) -> int:
    rng = np.random.default_rng([seed, 3])
    bad = 0
    for _ in range(cases):
        scores = random_scores(rng)
        k = int(rng.integers(1, len(scores) + 1))
        bad += select_topk(scores, k) != sort_oracle_topk(scores, k)
    return bad


def invariants_suite(seed: int = 0) -> list[Check]:
    return [
        _timed("invariants", "row_stochastic", ATTN_TOL, lambda: (1000, row_sum_worst(1000, seed))),
        _timed("invariants", "permutation_equivariance", ATTN_TOL,
               lambda: (100, permutation_worst(100, seed))),
        _timed("invariants", "topk_sort_oracle", 0.0, lambda: (10000, float(topk_mismatches(10000, seed)))),
    ]


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "all":
        return [c for s in SUITES for c in run_suite(s, seed)]
    if name == "gradcheck":
        return gradcheck_suite(seed=seed)
    if name == "metrics":
        return metrics_suite(seed=seed)
    if name == "invariants":
        return invariants_suite(seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
