"""Finite-difference verification of every differentiable operator and loss.

Each case builds float64 micro-instances from a seed.  The analytic gradient
of ``sum(f(inputs) * R)`` (``R`` a fixed random projection) is compared with
central differences; the reported figure is the max elementwise relative
error ``|a - n| / (|a| + |n| + 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import distill as D
from . import tensor as T
from .nets import ForwardRecord
from .tensor import Tensor


@dataclass
class CaseResult:
    name: str
    seed: int
    rel_error: float

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)))


def check(build: Callable, arrays, seed: int) -> float:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(*ts)
    proj = np.random.default_rng(seed + 7777).normal(size=out.shape)
    T.backward(T.tsum(T.mul(out, proj)))
    worst = 0.0
    for t in ts:
        def f():
            with T.no_grad():
                return float((build(*ts).data * proj).sum())

        worst = max(worst, max_rel_error(t.grad, numeric_grad(f, t.data)))
    return worst


def _conv(r, h=5, w=6, k=3):
    return r.normal(size=(2, h, w, 3)), r.normal(size=(k, k, 3, 4)), r.normal(size=4)


def _feats(r, b=4):
    return [r.normal(size=(b, 3, 3, 2)), r.normal(size=(b, 2, 2, 3))]


def _tgd_total(r):
    labels = r.integers(0, 3, 4)
    l1, l2 = r.normal(size=(2, 4, 3))
    t1 = ForwardRecord(Tensor(l1), [Tensor(f) for f in _feats(r)])
    t2 = ForwardRecord(Tensor(l2), [Tensor(f) for f in _feats(r)])
    other = r.normal(size=(4, 2, 2, 3))
    head = r.normal(size=(18, 3))

    def build(s):
        logits = T.matmul(T.reshape(s, (4, -1)), Tensor(head))
        rec = ForwardRecord(logits, [s, Tensor(other)])
        return D.compose_loss("tgd", labels, rec, t1, t2, lam=0.6, tau=2.0, gamma=5.0, alpha=0.7).total

    return build, (r.normal(size=(4, 3, 3, 2)),)


def _similarity(r):
    t_maps = [D.similarity_map(Tensor(f)) for f in _feats(r)]
    other = _feats(r)[1]
    return (lambda s: D.loss_similarity(t_maps, [D.similarity_map(s), D.similarity_map(Tensor(other))])), (r.normal(size=(4, 3, 3, 2)),)


def _ce(r):
    labels = r.integers(0, 5, 4)
    return (lambda s: D.loss_ce(s, labels)), (r.normal(size=(4, 5)),)


def _kl(r):
    lt = r.normal(size=(4, 5)) * 2
    return (lambda s: D.loss_kl_soft(lt, s, 4.0)), (r.normal(size=(4, 5)),)


def _two_teacher(r):
    l1, l2 = r.normal(size=(2, 4, 5)) * 2
    return (lambda s: D.loss_logit_two_teacher(l1, l2, s, 3.0, 0.7)), (r.normal(size=(4, 5)),)


OPERATORS: dict[str, Callable] = {
    "matmul": lambda r: (T.matmul, (r.normal(size=(3, 4)), r.normal(size=(4, 2)))),
    "add": lambda r: (T.add, (r.normal(size=(3, 4)), r.normal(size=(4,)))),
    "sub": lambda r: (T.sub, (r.normal(size=(3, 4)), r.normal(size=(3, 4)))),
    "mul": lambda r: (T.mul, (r.normal(size=(3, 4)), r.normal(size=(1, 4)))),
    "scale": lambda r: ((lambda a: T.scale(a, -2.5)), (r.normal(size=(5,)),)),
    "square": lambda r: (T.square, (r.normal(size=(2, 3)),)),
    "relu": lambda r: (T.relu, (r.normal(size=(4, 5)),)),
    "sum": lambda r: ((lambda a: T.tsum(a, axis=1)), (r.normal(size=(3, 4)),)),
    "mean": lambda r: ((lambda a: T.mean(a, axis=0)), (r.normal(size=(3, 4)),)),
    "reshape": lambda r: ((lambda a: T.reshape(a, (6, 2))), (r.normal(size=(3, 4)),)),
    "transpose": lambda r: (T.transpose, (r.normal(size=(3, 4)),)),
    "row_normalize": lambda r: (T.row_normalize, (r.normal(size=(4, 5)),)),
    "softmax": lambda r: ((lambda a: T.softmax(a, 3.0)), (r.normal(size=(3, 5)),)),
    "log_softmax": lambda r: ((lambda a: T.log_softmax(a, 2.0)), (r.normal(size=(3, 5)),)),
    "conv2d": lambda r: ((lambda x, w, b: T.conv2d(x, w, b, 1, 1)), _conv(r)),
    "conv2d_stride2": lambda r: ((lambda x, w, b: T.conv2d(x, w, b, 2, 1)), _conv(r, 6, 7)),
    "max_pool2d": lambda r: ((lambda a: T.max_pool2d(a, 2)), (r.normal(size=(2, 4, 6, 3)),)),
    "global_avg_pool": lambda r: (T.global_avg_pool, (r.normal(size=(2, 3, 4, 5)),)),
    "similarity_map": lambda r: ((lambda f: D.similarity_map(f).matrix), (r.normal(size=(4, 2, 2, 3)),)),
}

LOSSES: dict[str, Callable] = {
    "loss_ce": _ce,
    "loss_kl_soft": _kl,
    "loss_logit_two_teacher": _two_teacher,
    "loss_similarity": _similarity,
    "loss_total_tgd": _tgd_total,
}


def run_suite(seeds=range(5), names=None) -> list[CaseResult]:
    cases = {**OPERATORS, **LOSSES}
    selected = cases if names is None else {n: cases[n] for n in names}
    results = []
    for name, make in selected.items():
        for seed in seeds:
            build, arrays = make(np.random.default_rng(seed))
            results.append(CaseResult(name, seed, check(build, arrays, seed)))
    return results
