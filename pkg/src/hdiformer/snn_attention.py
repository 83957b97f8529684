"""Spiking window attention for the event (SNN) branch.

All tensors carry a leading time axis: (T, B, H, W, C). Spiking layers are
Linear/Conv -> BatchNorm -> LIF, and attention never uses softmax.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .ann_attention import (RelativePositionEmbedding, RelativeSemanticEmbedding, layout_for,
                            window_partition, window_reverse)
from .errors import ConfigError, DomainError, ShapeError
from .lif import ATTENTION_LIF, DEFAULT_LIF, LIFParams, SpikingNeuron
from .numcore import BatchNorm, Conv2d, Linear, Module, Tensor, as_tensor, ops

DEFAULT_SCALE = 0.125


def assert_binary(x, what: str = "input") -> None:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((data == 0) | (data == 1)):
        raise DomainError(f"{what} must be binary spikes")


def _time_fold(x: Tensor) -> Tensor:
    """(T, B, ...) -> (T*B, ...)"""
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


class SpikingLinear(Module):
    """Linear -> BatchNorm -> LIF applied tokenwise over (T, ..., C)."""

    def __init__(self, rng, d_in: int, d_out: int, name: str, lif: LIFParams = DEFAULT_LIF):
        self.fc = Linear(rng, d_in, d_out)
        self.bn = BatchNorm(d_out)
        self.sn = SpikingNeuron(name, lif)

    def __call__(self, x) -> Tensor:
        return self.sn(self.bn(self.fc(x)))


class SpikingConv(Module):
    """Conv -> BatchNorm [-> MaxPool] -> LIF on (T, B, H, W, C)."""

    def __init__(self, rng, c_in: int, c_out: int, name: str, kernel: int = 3, pool: int = 1):
        self.conv = Conv2d(rng, c_in, c_out, kernel, padding=kernel // 2)
        self.bn = BatchNorm(c_out)
        self.pool = pool
        self.sn = SpikingNeuron(name)

    def pre_spike(self, x: Tensor) -> Tensor:
        t, b = x.shape[:2]
        y = self.bn(self.conv(_time_fold(x)))
        if self.pool > 1:
            y = ops.maxpool2d(y, self.pool)
        return y.reshape((t, b) + y.shape[1:])

    def __call__(self, x) -> Tensor:
        return self.sn(self.pre_spike(as_tensor(x)))


def spike_qkv(x, layers, strict: bool = True) -> tuple[Tensor, ...]:
    """Q, K, V = SN(BN(Linear(x))) for each layer in ``layers``.

    ``strict`` rejects non-binary input; blocks pass integer residual sums
    with ``strict=False`` and rely on the SN layers to re-binarize.
    """
    x = as_tensor(x)
    if strict:
        assert_binary(x, "spike_qkv input")
    return tuple(layer(x) for layer in layers)


def ssa_scores(q, k, pos_bias=None, sem_bias=None, scale: float = DEFAULT_SCALE,
               lam1: float = 1.0, lam2: float = 1.0) -> Tensor:
    """R = Q K^T * s + lam1 * P + lam2 * S_e (no softmax).

    ``q``, ``k``: (..., H, N, d); ``pos_bias``: (H, N, N); ``sem_bias``:
    (..., N, N), shared across heads.
    """
    q, k = as_tensor(q), as_tensor(k)
    r = ops.matmul(q, ops.swap_last(k)) * scale
    if pos_bias is not None:
        r = r + as_tensor(pos_bias) * lam1
    if sem_bias is not None:
        s = as_tensor(sem_bias)
        r = r + s.reshape(s.shape[:-2] + (1,) + s.shape[-2:]) * lam2
    return r


def ssa_core(q, k, v, pos_bias=None, sem_bias=None, scale: float = DEFAULT_SCALE,
             lam1: float = 1.0, lam2: float = 1.0, neuron: Optional[SpikingNeuron] = None) -> Tensor:
    """SN_0.5(R V) for per-window heads (T, ..., H, N, d); time is the leading axis."""
    r = ssa_scores(q, k, pos_bias, sem_bias, scale, lam1, lam2)
    neuron = neuron or SpikingNeuron("ssa.attn", ATTENTION_LIF)
    return neuron(ops.matmul(r, as_tensor(v)))


class SpikingSelfAttention(Module):
    """Windowed spiking self-attention with positional and semantic pair biases.

    The shifted-window mask is applied multiplicatively (blocked pairs are
    zeroed) since there is no softmax for an additive mask to act through.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, shifted: bool, name: str,
                 scale: float = DEFAULT_SCALE, lam1: float = 1.0, lam2: float = 1.0, use_rse: bool = True):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window, self.shifted = dim, heads, window, shifted
        self.scale, self.lam1, self.lam2 = scale, lam1, lam2
        self.q = SpikingLinear(rng, dim, dim, f"{name}.q")
        self.k = SpikingLinear(rng, dim, dim, f"{name}.k")
        self.v = SpikingLinear(rng, dim, dim, f"{name}.v")
        self.rpe = RelativePositionEmbedding(rng, window, heads)
        self.rse = RelativeSemanticEmbedding(rng, dim) if use_rse else None
        self.attn_sn = SpikingNeuron(f"{name}.attn", ATTENTION_LIF)
        self.proj = SpikingLinear(rng, dim, dim, f"{name}.proj")

    def _windows(self, x: Tensor, layout, pad) -> Tensor:
        """(T, B, H, W, C) -> (T*B*nW, N, C)"""
        x = _time_fold(x)
        if pad != (0, 0):
            x = ops.pad(x, ((0, 0), (0, pad[0]), (0, pad[1]), (0, 0)))
        return window_partition(x, layout)

    def _heads(self, xw: Tensor) -> Tensor:
        bw, n, c = xw.shape
        return xw.reshape(bw, n, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def begin(self, z, strict: bool = False) -> dict:
        z = as_tensor(z)
        t, b, h, w, c = z.shape
        layout, pad = layout_for(h, w, self.window, self.shifted)
        q, k, v = spike_qkv(z, (self.q, self.k, self.v), strict)
        qw, kw, vw = (self._heads(self._windows(a, layout, pad)) for a in (q, k, v))
        sem = self.rse(self._windows(z, layout, pad)) if self.rse is not None else None
        r = ssa_scores(qw, kw, self.rpe(layout.window), sem, self.scale, self.lam1, self.lam2)
        keep = None
        if layout.mask is not None:
            nw, n = layout.n_windows, layout.tokens
            keep = (layout.mask == 0).astype(r.dtype).reshape(1, nw, 1, n, n)
            r = self._apply_keep(r, keep)
        return {"z": z, "layout": layout, "pad": pad, "scores": r, "v": vw, "keep": keep}

    def _apply_keep(self, r: Tensor, keep: np.ndarray) -> Tensor:
        bw, heads, n, _ = r.shape
        nw = keep.shape[1]
        return (r.reshape(bw // nw, nw, heads, n, n) * keep).reshape(bw, heads, n, n)

    @staticmethod
    def attention_map(state: dict) -> Tensor:
        """Raw scores (T, B*nW, H, N, N) before any injection."""
        r = state["scores"]
        t = state["z"].shape[0]
        return r.reshape((t, r.shape[0] // t) + r.shape[1:])

    def finish(self, state: dict, extra=None) -> Tensor:
        z, layout, pad = state["z"], state["layout"], state["pad"]
        t, b, h, w, c = z.shape
        r = state["scores"]
        if extra is not None:
            # extra is (T, B*nW, H, N, N) or (B*nW, H, N, N) shared by all steps
            r = (r.reshape((t, -1) + r.shape[1:]) + extra).reshape(r.shape)
            if state["keep"] is not None:
                r = self._apply_keep(r, state["keep"])
        vw = state["v"]
        out = ops.matmul(r, vw)  # (T*B*nW, H, N, d)
        bw, heads, n, d = out.shape
        out = out.transpose(0, 2, 1, 3).reshape(bw, n, heads * d)
        out = window_reverse(out, layout, t * b)
        if pad != (0, 0):
            out = ops.getitem(out, (slice(None), slice(0, h), slice(0, w)))
        out = out.reshape(t, b, h, w, c)
        return self.proj(self.attn_sn(out))

    def __call__(self, z, strict: bool = True) -> Tensor:
        return self.finish(self.begin(z, strict))


def ssa(x, attn: SpikingSelfAttention) -> Tensor:
    """Spiking self-attention on binary spikes (T, B, H, W, C)."""
    return attn(x, strict=True)


class QKAttention(Module):
    """Token-wise Q-K attention: A_t = SN(sum_c Q) gates K by a Hadamard product."""

    def __init__(self, rng, dim: int, name: str):
        self.dim = dim
        self.q = SpikingLinear(rng, dim, dim, f"{name}.q")
        self.k = SpikingLinear(rng, dim, dim, f"{name}.k")
        self.token_sn = SpikingNeuron(f"{name}.token", DEFAULT_LIF)
        self.proj = SpikingLinear(rng, dim, dim, f"{name}.proj")

    def gate(self, q, k) -> Tensor:
        return qka(q, k, self.token_sn)

    def __call__(self, z, strict: bool = True) -> Tensor:
        q, k = spike_qkv(z, (self.q, self.k), strict)
        return self.proj(self.gate(q, k))


def qka(q, k, neuron: Optional[SpikingNeuron] = None) -> Tensor:
    """``SN(sum over channels of Q)`` broadcast-multiplied with ``K``.

    ``q``, ``k``: (T, ..., C). The token neuron is a stateful LIF over T.
    """
    q, k = as_tensor(q), as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"Q {q.shape} and K {k.shape} differ")
    neuron = neuron or SpikingNeuron("qka.token", DEFAULT_LIF)
    a = neuron(ops.sum(q, axis=-1, keepdims=True))
    return a * k


class SpikingMLP(Module):
    def __init__(self, rng, dim: int, hidden: int, name: str):
        self.fc1 = SpikingLinear(rng, dim, hidden, f"{name}.fc1")
        self.fc2 = SpikingLinear(rng, hidden, dim, f"{name}.fc2")

    def __call__(self, x) -> Tensor:
        return self.fc2(self.fc1(x))


class SpikingBlock(Module):
    """Z^ = Attn(Z) + Z, then Z' = MLP(Z^) + Z^, with attention kind 'ssa' or 'qka'.

    Residual sums are integer-valued; each following SN layer re-binarizes.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, kind: str, shifted: bool, name: str,
                 mlp_ratio: int = 4, scale: float = DEFAULT_SCALE, lam1: float = 1.0, lam2: float = 1.0,
                 use_rse: bool = True):
        if kind not in ("ssa", "qka"):
            raise ConfigError(f"unknown spiking attention kind {kind!r}")
        self.kind, self.dim, self.name = kind, dim, name
        if kind == "ssa":
            self.attn = SpikingSelfAttention(rng, dim, heads, window, shifted, f"{name}.attn",
                                             scale, lam1, lam2, use_rse)
        else:
            self.attn = QKAttention(rng, dim, f"{name}.attn")
        self.mlp = SpikingMLP(rng, dim, mlp_ratio * dim, f"{name}.mlp")

    def begin(self, z) -> dict:
        if self.kind != "ssa":
            raise ConfigError(f"block {self.name} uses QKA and has no pairwise attention map")
        return self.attn.begin(z, strict=False)

    def attention_map(self, state: dict) -> Tensor:
        return self.attn.attention_map(state)

    def finish(self, state: dict, extra=None) -> Tensor:
        z = state["z"]
        return self._residual(z, self.attn.finish(state, extra))

    def _residual(self, z: Tensor, a: Tensor) -> Tensor:
        z = a + z
        return self.mlp(z) + z

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        if self.kind == "ssa":
            return self.finish(self.begin(z))
        return self._residual(z, self.attn(z, strict=False))


def spiking_block(z, block: SpikingBlock) -> Tensor:
    return block(z)


class SpikingPatchStage(Module):
    """Downsample by ``factor``: SN(MaxPool(BN(Conv3x3 x)) + BN(Linear(MaxPool x))).

    The shortcut is a pooled, linearly projected copy of the input.
    """

    def __init__(self, rng, c_in: int, c_out: int, factor: int, name: str):
        self.factor = factor
        self.conv = Conv2d(rng, c_in, c_out, 3, padding=1)
        self.bn = BatchNorm(c_out)
        self.short = Linear(rng, c_in, c_out)
        self.short_bn = BatchNorm(c_out)
        self.sn = SpikingNeuron(name)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        t, b, h, w, c = x.shape
        if h % self.factor or w % self.factor:
            raise ShapeError(f"spatial {h}x{w} not divisible by downsampling factor {self.factor}")
        xf = _time_fold(x)
        main = ops.maxpool2d(self.bn(self.conv(xf)), self.factor)
        short = self.short_bn(self.short(ops.maxpool2d(xf, self.factor)))
        y = main + short
        return self.sn(y.reshape((t, b) + y.shape[1:]))

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h // self.factor, w // self.factor


class SpikingPatchEmbed(Module):
    """Conv-BN-SN spike conversion of real voxels, then a patch stage (factor P)."""

    def __init__(self, rng, in_ch: int, dim: int, patch: int, name: str):
        self.patch = patch
        self.convert = SpikingConv(rng, in_ch, max(dim // 2, 1), f"{name}.convert")
        self.stage = SpikingPatchStage(rng, max(dim // 2, 1), dim, patch, f"{name}.embed")

    def __call__(self, voxels) -> Tensor:
        return self.stage(self.convert(voxels))

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h // self.patch, w // self.patch


def spiking_patch_embed(voxels, embed: SpikingPatchEmbed) -> Tensor:
    return embed(voxels)


def spiking_patch_merge(x, stage: SpikingPatchStage) -> Tensor:
    return stage(x)


def spiking_neurons(module: Module) -> list[SpikingNeuron]:
    """Every SN layer reachable from ``module``, in construction order."""
    found = []

    def walk(obj):
        for value in vars(obj).values():
            if isinstance(value, SpikingNeuron):
                found.append(value)
            elif isinstance(value, Module):
                walk(value)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        walk(item)

    walk(module)
    return found
