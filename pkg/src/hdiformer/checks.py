"""Gradient-check suites run by ``hdiformer gradcheck``.

Each suite reports the worst relative error against an independent
reference: central differences for dense compositions and the frame block
pair, a closed-form BPTT recursion for a single LIF neuron.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ann_attention import SESTBlock, sest_block_pair
from .lif import DEFAULT_LIF, lif_sequence
from .numcore import Tape, Tensor, backward, finite_diff_check, grad_hook, ops, precision

LIF_SEQUENCES = ((0.5, 1.2, 0.3), (2.5, 0.1, 1.9), (-0.4, 0.8, 3.0))


@dataclass(frozen=True)
class SuiteResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance


def _compositions() -> float:
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((6, 5)))
    mix = Tensor(rng.standard_normal((5, 5)) * 0.5)
    gamma, beta = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
    target = Tensor(rng.standard_normal((4, 5)))
    kernel = Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.5)

    def attention_like(x):
        y = ops.softmax_rows(ops.matmul(ops.layer_norm(x, gamma, beta), mix))
        return (y * target).sum()

    def dense(x):
        h = ops.gelu(ops.linear(x, w))
        return (ops.log(ops.sigmoid(h) + 0.5) * target).sum() + ops.exp(h * 0.1).mean()

    def conv(x):
        y = ops.conv2d(x, kernel, padding=1)
        return (ops.maxpool2d(y, 2) * ops.maxpool2d(y, 2)).sum()

    errors = [
        finite_diff_check(attention_like, Tensor(rng.standard_normal((4, 5)))),
        finite_diff_check(dense, Tensor(rng.standard_normal((4, 6)))),
        finite_diff_check(conv, Tensor(rng.standard_normal((1, 4, 4, 2)))),
    ]
    return max(errors)


def _block_pair() -> float:
    rng = np.random.default_rng(7)
    blocks = [SESTBlock(rng, 8, 2, 2, shifted=False), SESTBlock(rng, 8, 2, 2, shifted=True)]
    target = Tensor(rng.standard_normal((16, 8)))

    def f(t):
        out = sest_block_pair(t, blocks)
        return ((out - target) * (out - target)).sum()

    return finite_diff_check(f, Tensor(rng.standard_normal((16, 8))))


def lif_bptt_reference(xs, tau: float = DEFAULT_LIF.tau, v_th: float = DEFAULT_LIF.v_th) -> list:
    """dL/dx_t for L = sum_t S_t of one neuron with detached hard reset to 0.

    With a_j = (1 - 1/tau)(1 - S_j), the gradient is
    ``(1/tau) * sum_{k>=t} sg(H_k - v_th) * a_t * ... * a_{k-1}``.
    """
    v, hs, spikes = 0.0, [], []
    for x in xs:
        h = v + (x - v) / tau
        s = 1.0 if h - v_th >= 0 else 0.0
        hs.append(h)
        spikes.append(s)
        v = h * (1.0 - s)
    grads = []
    for t in range(len(xs)):
        total, chain = 0.0, 1.0
        for k in range(t, len(xs)):
            total += chain / (1.0 + (math.pi * (hs[k] - v_th)) ** 2)
            chain *= (1.0 - 1.0 / tau) * (1.0 - spikes[k])
        grads.append(total / tau)
    return grads


def _lif() -> float:
    worst = 0.0
    for xs in LIF_SEQUENCES:
        x = Tensor(np.array(xs).reshape(len(xs), 1), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(lif_sequence(x))
        backward(loss, tape)
        ref = np.array(lif_bptt_reference(xs))
        worst = max(worst, float(np.max(np.abs(x.grad[:, 0] - ref) / (np.abs(ref) + 1e-12))))
    return worst


SUITES: dict[str, tuple[Callable[[], float], float]] = {
    "numcore_compositions": (_compositions, 1e-5),
    "sest_block_pair": (_block_pair, 1e-4),
    "lif_bptt": (_lif, 1e-10),
}


def _corrupt(node, grads):
    # test hook: a small systematic error in every backward rule
    return tuple(None if g is None else g * 1.01 for g in grads)


def run_suites(corrupt_backward: bool = False) -> list[SuiteResult]:
    """Run every suite once in 64-bit mode."""
    hook = grad_hook(_corrupt) if corrupt_backward else contextlib.nullcontext()
    results = []
    with precision(64), hook:
        for name, (fn, tol) in SUITES.items():
            results.append(SuiteResult(name, fn(), tol))
    return results
