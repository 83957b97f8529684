"""Semantic-enhanced shifted-window attention for the frame (ANN) branch."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ShapeError
from .numcore import LayerNorm, Linear, MLP, Module, Tensor, as_tensor, ops, trunc_normal

MASK_VALUE = -100.0


# -- window layout ---------------------------------------------------------------

@dataclass(frozen=True)
class WindowLayout:
    """Window tiling of an ``height`` x ``width`` grid (already padded).

    ``shift`` is the cyclic offset applied before partitioning; ``mask`` is
    (nW, N, N) with 0 for allowed pairs and ``MASK_VALUE`` for pairs that
    come from different regions after the shift.
    """

    height: int
    width: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.height % self.window or self.width % self.window:
            raise ShapeError(f"grid {self.height}x{self.width} not divisible by window {self.window}")
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift {self.shift} outside [0, {self.window})")

    @property
    def tokens(self) -> int:
        return self.window * self.window

    @property
    def n_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)

    @property
    def mask(self) -> Optional[np.ndarray]:
        return _shift_mask(self.height, self.width, self.window, self.shift)


def layout_for(height: int, width: int, window: int, shifted: bool) -> tuple[WindowLayout, tuple[int, int]]:
    """Layout for a block, clamping the window to small grids and padding to a multiple.

    Returns the layout and the (pad_h, pad_w) added at the bottom/right.
    """
    if min(height, width) <= window:
        window = min(height, width)
        shifted = False
    pad_h, pad_w = (-height) % window, (-width) % window
    shift = window // 2 if shifted else 0
    return WindowLayout(height + pad_h, width + pad_w, window, shift), (pad_h, pad_w)


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, m: int, s: int) -> Optional[np.ndarray]:
    if s == 0:
        return None
    labels = np.zeros((h, w), dtype=np.int64)
    region = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            labels[hs, ws] = region
            region += 1
    win = labels.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = win[:, :, None] != win[:, None, :]
    mask = np.where(diff, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def window_partition(x, layout: WindowLayout) -> Tensor:
    """(B, H, W, C) -> (B * nW, M*M, C) after rolling by ``-shift``."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    m = layout.window
    if (h, w) != (layout.height, layout.width):
        raise ShapeError(f"feature map {h}x{w} does not match layout {layout.height}x{layout.width}")
    if layout.shift:
        x = ops.roll(x, (-layout.shift, -layout.shift), (1, 2))
    x = x.reshape(b, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * layout.n_windows, m * m, c)


def window_reverse(windows, layout: WindowLayout, batch: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    windows = as_tensor(windows)
    m, h, w = layout.window, layout.height, layout.width
    c = windows.shape[-1]
    x = windows.reshape(batch, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(batch, h, w, c)
    if layout.shift:
        x = ops.roll(x, (layout.shift, layout.shift), (1, 2))
    return x


# -- embeddings ------------------------------------------------------------------

@lru_cache(maxsize=16)
def relative_position_index(m: int, table_window: Optional[int] = None) -> np.ndarray:
    """(M*M, M*M) row index into a (2K-1)^2 table for each token pair.

    ``table_window`` K defaults to M; a smaller window reads the centre of
    a larger table.
    """
    k = table_window or m
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (k - 1)
    idx = rel[0] * (2 * k - 1) + rel[1]
    idx.setflags(write=False)
    return idx


class RelativePositionEmbedding(Module):
    """Learned per-head bias indexed by the relative offset of two tokens."""

    def __init__(self, rng, window: int, heads: int):
        self.window, self.heads = window, heads
        self.register("table", trunc_normal(rng, ((2 * window - 1) ** 2, heads)))

    def __call__(self, window: Optional[int] = None) -> Tensor:
        """(H, N, N) bias for a ``window`` (defaults to the full size)."""
        idx = relative_position_index(window or self.window, self.window)
        return ops.take(self.table, idx, axis=0).transpose(2, 0, 1)


def relative_semantic_distance(x) -> Tensor:
    """``a[..., i, j, :] = x[..., i, :] - x[..., j, :]`` for x of shape (..., N, C)."""
    x = as_tensor(x)
    lead, (n, c) = x.shape[:-2], x.shape[-2:]
    xi = x.reshape(lead + (n, 1, c))
    xj = x.reshape(lead + (1, n, c))
    return xi - xj


@lru_cache(maxsize=16)
def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    iu, ju = np.triu_indices(n)
    pair_of = np.empty((n, n), dtype=np.int64)
    pair_of[iu, ju] = np.arange(len(iu))
    pair_of[ju, iu] = np.arange(len(iu))
    for a in (iu, ju, pair_of):
        a.setflags(write=False)
    return iu, ju, pair_of


class RelativeSemanticEmbedding(Module):
    """Symmetric token-pair bias from a two-layer map of feature differences.

    Only pairs with i <= j are evaluated; the lower triangle is mirrored.
    The two layers are affine with no activation between them, exactly as
    ``S_ij = W2 (W1 a_ij + b1) + b2``.
    """

    def __init__(self, rng, dim: int, hidden: Optional[int] = None):
        self.dim = dim
        self.hidden = hidden or max(dim // 4, 1)
        self.inner = Linear(rng, dim, self.hidden)
        self.outer = Linear(rng, self.hidden, 1)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        n = x.shape[-2]
        iu, ju, pair_of = _upper_pairs(n)
        a = ops.take(x, iu, axis=-2) - ops.take(x, ju, axis=-2)
        s = self.outer(self.inner(a))
        s = s.reshape(s.shape[:-1])
        return ops.take(s, pair_of, axis=-1)


def rse(x, mlp: RelativeSemanticEmbedding) -> Tensor:
    """(…, N, C) tokens -> (…, N, N) symmetric semantic bias."""
    return mlp(x)


# -- attention ---------------------------------------------------------------------

def semsa_weights(q, k, pos_bias=None, sem_bias=None, lam1: float = 1.0, lam2: float = 1.0,
                  mask: Optional[np.ndarray] = None, extra=None, return_logits: bool = False):
    """softmax(q k^T / sqrt(d) + lam1*P + lam2*S + mask [+ extra]) over the last axis.

    ``q``, ``k``: (B*nW, H, N, d); ``pos_bias``: (H, N, N); ``sem_bias``:
    (B*nW, N, N), shared by all heads; ``mask``: (nW, N, N).
    ``extra`` is an additive logit term (used for cross-branch injection).
    """
    q, k = as_tensor(q), as_tensor(k)
    logits = semsa_logits(q, k, pos_bias, sem_bias, lam1, lam2, mask)
    if extra is not None:
        logits = logits + extra
    weights = ops.softmax_rows(logits)
    return (weights, logits) if return_logits else weights


def semsa_logits(q, k, pos_bias=None, sem_bias=None, lam1: float = 1.0, lam2: float = 1.0,
                 mask: Optional[np.ndarray] = None) -> Tensor:
    bw, heads, n, d = q.shape
    logits = ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(d))
    if pos_bias is not None:
        logits = logits + as_tensor(pos_bias) * lam1
    if sem_bias is not None:
        logits = logits + as_tensor(sem_bias).reshape(bw, 1, n, n) * lam2
    if mask is not None:
        nw = mask.shape[0]
        logits = logits.reshape(bw // nw, nw, heads, n, n) + mask.reshape(1, nw, 1, n, n).astype(q.dtype)
        logits = logits.reshape(bw, heads, n, n)
    return logits


class SEMSA(Module):
    """Windowed multi-head attention with positional and semantic pair biases."""

    def __init__(self, rng, dim: int, heads: int, window: int, lam1: float = 1.0, lam2: float = 1.0,
                 use_rse: bool = True):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.lam1, self.lam2 = lam1, lam2
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.rpe = RelativePositionEmbedding(rng, window, heads)
        self.rse = RelativeSemanticEmbedding(rng, dim) if use_rse else None

    def logits(self, xw: Tensor, layout: WindowLayout) -> tuple[Tensor, Tensor]:
        """Pre-softmax logits (B*nW, H, N, N) and values (B*nW, H, N, d)."""
        bw, n, c = xw.shape
        d = c // self.heads
        qkv = self.qkv(xw).reshape(bw, n, 3, self.heads, d).transpose(2, 0, 3, 1, 4)
        q, k, v = (ops.getitem(qkv, i) for i in range(3))
        sem = self.rse(xw) if self.rse is not None else None
        logits = semsa_logits(q, k, self.rpe(layout.window), sem, self.lam1, self.lam2, layout.mask)
        return logits, v

    def attend(self, logits: Tensor, v: Tensor) -> Tensor:
        weights = ops.softmax_rows(logits)
        bw, heads, n, d = v.shape
        out = ops.matmul(weights, v).transpose(0, 2, 1, 3).reshape(bw, n, heads * d)
        return self.proj(out)


class SESTBlock(Module):
    """Pre-norm transformer block: x + W-SEMSA(LN x), then x + MLP(LN x).

    ``begin`` computes the attention logits so a partner branch can read
    them before ``finish`` applies the (optionally injected) softmax.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, shifted: bool,
                 mlp_ratio: int = 4, lam1: float = 1.0, lam2: float = 1.0, use_rse: bool = True,
                 drop: float = 0.0):
        self.dim, self.window, self.shifted = dim, window, shifted
        self.norm1 = LayerNorm(dim)
        self.attn = SEMSA(rng, dim, heads, window, lam1, lam2, use_rse)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio * dim, drop)

    def layout(self, h: int, w: int) -> tuple[WindowLayout, tuple[int, int]]:
        return layout_for(h, w, self.window, self.shifted)

    def begin(self, x: Tensor) -> dict:
        b, h, w, c = x.shape
        layout, (ph, pw) = self.layout(h, w)
        y = self.norm1(x)
        if ph or pw:
            y = ops.pad(y, ((0, 0), (0, ph), (0, pw), (0, 0)))
        xw = window_partition(y, layout)
        logits, v = self.attn.logits(xw, layout)
        return {"x": x, "layout": layout, "logits": logits, "v": v, "hw": (h, w)}

    @staticmethod
    def attention_map(state: dict) -> Tensor:
        """Own post-softmax weights (B*nW, H, N, N) before any injection."""
        if "weights" not in state:
            state["weights"] = ops.softmax_rows(state["logits"])
        return state["weights"]

    def finish(self, state: dict, extra_logits=None) -> Tensor:
        x, layout = state["x"], state["layout"]
        logits = state["logits"]
        if extra_logits is not None:
            out = self.attn.attend(logits + extra_logits, state["v"])
        elif "weights" in state:
            w = state["weights"]
            bw, heads, n, d = state["v"].shape
            out = ops.matmul(w, state["v"]).transpose(0, 2, 1, 3).reshape(bw, n, heads * d)
            out = self.attn.proj(out)
        else:
            out = self.attn.attend(logits, state["v"])
        h, w = state["hw"]
        y = window_reverse(out, layout, x.shape[0])
        if (layout.height, layout.width) != (h, w):
            y = ops.getitem(y, (slice(None), slice(0, h), slice(0, w)))
        x = x + y
        return x + self.mlp(self.norm2(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.finish(self.begin(x))


class PatchEmbed(Module):
    """Non-overlapping P x P patches -> linear projection -> LayerNorm."""

    def __init__(self, rng, patch: int, in_ch: int, dim: int):
        self.patch, self.in_ch = patch, in_ch
        self.proj = Linear(rng, patch * patch * in_ch, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, img) -> Tensor:
        img = as_tensor(img)
        b, h, w, c = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch {p}")
        x = img.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // p, w // p, p * p * c)
        return self.norm(self.proj(x))

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return h // self.patch, w // self.patch


class PatchMerging(Module):
    """Concatenate 2 x 2 neighbours (4C) -> LayerNorm -> linear to 2C."""

    def __init__(self, rng, dim: int, out_dim: Optional[int] = None):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, out_dim or 2 * dim, bias=False)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even spatial size, got {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.reduction(self.norm(x))

    @staticmethod
    def out_hw(h: int, w: int) -> tuple[int, int]:
        return h // 2, w // 2


def sest_block_pair(y, blocks, hw: Optional[tuple[int, int]] = None) -> Tensor:
    """Regular-window block followed by shifted-window block.

    ``y`` is (N, C) or (B, N, C) tokens of an ``hw`` grid (square by
    default) or already (B, H, W, C).
    """
    y = as_tensor(y)
    orig = y.shape
    if y.ndim in (2, 3):
        n, c = y.shape[-2:]
        h, w = hw or (math.isqrt(n), math.isqrt(n))
        y = y.reshape(-1, h, w, c)
    for blk in blocks:
        y = blk(y)
    return y.reshape(orig)
