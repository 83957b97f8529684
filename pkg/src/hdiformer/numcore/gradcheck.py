"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DeterminismError, StateError
from .tensor import Tape, Tensor, backward, get_precision, no_record


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      require_64: bool = True) -> float:
    """Max relative error between tape gradients of ``f`` at ``x`` and central differences.

    ``f`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if require_64 and get_precision() != 64:
        raise StateError("finite_diff_check needs 64-bit precision")
    x = Tensor(x.data.copy(), requires_grad=True)

    with no_record():
        first = f(Tensor(x.data)).data.copy()
        second = f(Tensor(x.data)).data
    if not np.array_equal(first, second):
        raise DeterminismError("f returned different values for identical input")

    with Tape() as tape:
        y = f(x)
    backward(y, tape, wrt=[x])
    analytic = x.grad.reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x.data)).data.sum())
            flat[i] = orig - h
            fm = float(f(Tensor(x.data)).data.sum())
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def param_grad_check(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-5,
                     max_coords: int | None = None, rng=None) -> dict:
    """Relative error of tape gradients w.r.t. named parameters of a model.

    ``loss_fn`` rebuilds the forward pass each call. ``max_coords`` samples a
    subset of coordinates per parameter to bound the cost.
    """
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape, wrt=list(params.values()))
    analytic = {k: p.grad.copy() for k, p in params.items()}
    errors = {}
    with no_record():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data.sum())
                flat[i] = orig - h
                fm = float(loss_fn().data.sum())
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = analytic[name].reshape(-1)[i]
                worst = max(worst, abs(ana - num) / (abs(num) + 1e-8))
            errors[name] = worst
    return errors
