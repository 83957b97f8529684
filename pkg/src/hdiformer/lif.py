"""Leaky integrate-and-fire neurons trained with an arctan surrogate gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .numcore import Tensor, as_tensor, ops
from .numcore.tensor import record


@dataclass(frozen=True)
class LIFParams:
    tau: float = 2.0
    v_reset: float = 0.0
    v_th: float = 1.0
    surrogate_width: float = math.pi

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ParameterError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")


ATTENTION_LIF = LIFParams(v_th=0.5)
DEFAULT_LIF = LIFParams()


@dataclass
class LIFState:
    v: Tensor
    step: int = 0


def surrogate_grad(v, width: float = math.pi):
    """dS/dH stand-in: ``1 / (1 + (width * v)^2)``."""
    v = np.asarray(v, dtype=np.float64) if not isinstance(v, np.ndarray) else v
    return 1.0 / (1.0 + (width * v) ** 2)


def heaviside_spike(u, width: float = math.pi) -> Tensor:
    """Spike where ``u >= 0``; backward uses the surrogate instead of a delta."""
    u = as_tensor(u)
    out = Tensor((u.data >= 0).astype(u.dtype))
    return record("spike", (u,), out, lambda g: (g * surrogate_grad(u.data, width),))


def lif_step(state: Optional[LIFState], x, p: LIFParams = DEFAULT_LIF) -> tuple[Tensor, LIFState]:
    """One Euler step: charge, fire where ``H - v_th >= 0``, hard reset.

    The reset gate uses the detached spike so no gradient flows through it.
    """
    x = as_tensor(x)
    if state is None:
        state = LIFState(Tensor(np.full(x.shape, p.v_reset, dtype=x.dtype)))
    v = state.v
    if v.shape != x.shape:
        raise ShapeError(f"LIF state {v.shape} does not match input {x.shape}")
    h = v + (x - (v - p.v_reset)) / p.tau
    s = heaviside_spike(h - p.v_th, p.surrogate_width)
    keep = Tensor(1.0 - s.data, dtype=s.dtype)
    v_next = h * keep
    if p.v_reset != 0.0:
        v_next = v_next + Tensor(p.v_reset * s.data, dtype=s.dtype)
    return s, LIFState(v_next, state.step + 1)


def lif_sequence(x, p: LIFParams = DEFAULT_LIF, meter: Optional["FiringMeter"] = None,
                 name: Optional[str] = None) -> Tensor:
    """Run a fresh neuron population over the leading time axis of ``x``."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ShapeError("lif_sequence needs a leading time axis of length >= 1")
    state = None
    spikes = []
    for t in range(x.shape[0]):
        s, state = lif_step(state, ops.getitem(x, t), p)
        spikes.append(s)
    out = spikes[0].reshape((1,) + spikes[0].shape) if len(spikes) == 1 else ops.stack(spikes, 0)
    if meter is not None and name is not None:
        meter.record(name, out.data)
    return out


class SpikingNeuron:
    """Named LIF layer that reports to an optional firing meter."""

    def __init__(self, name: str, params: LIFParams = DEFAULT_LIF):
        self.name = name
        self.params = params
        self.meter: Optional[FiringMeter] = None

    def __call__(self, x) -> Tensor:
        return lif_sequence(x, self.params, self.meter, self.name)


@dataclass
class FiringMeter:
    """Spike and element-timestep counts per named layer."""

    spikes: dict = field(default_factory=dict)
    elements: dict = field(default_factory=dict)

    def record(self, name: str, spikes: np.ndarray) -> None:
        self.spikes[name] = self.spikes.get(name, 0) + int(np.count_nonzero(spikes))
        self.elements[name] = self.elements.get(name, 0) + int(spikes.size)

    def reset(self) -> None:
        self.spikes.clear()
        self.elements.clear()

    def layers(self) -> list:
        return list(self.spikes)

    def rate(self, layer: Optional[str] = None) -> float:
        """Fraction of neuron-timesteps that spiked (one layer, a prefix, or all).

        ``layer`` matches exactly or as a dotted prefix.
        """
        if not self.elements:
            raise StateError("firing meter has no recorded forward pass")
        if layer is None:
            keys = list(self.elements)
        else:
            keys = [k for k in self.elements if k == layer or k.startswith(layer + ".")]
            if not keys:
                raise StateError(f"no firing record for layer {layer!r}")
        total = sum(self.elements[k] for k in keys)
        return sum(self.spikes[k] for k in keys) / total if total else 0.0


def firing_rate(meter: FiringMeter, layer: Optional[str] = None) -> float:
    return meter.rate(layer)
