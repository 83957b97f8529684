"""Dual-branch detector: staged frame and event backbones, fusion, toy head, training."""
from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ann_attention import PatchEmbed, PatchMerging, SESTBlock
from .errors import ConfigError, NumericError, ShapeError, TrainingError, VersionError
from .interaction import InteractionConfig, interact, interaction_schedule
from .lif import FiringMeter
from .numcore import (Linear, Module, ParamStore, Tape, Tensor, adamw_step, as_tensor, backward,
                      get_dtype, ops, scope)
from .snn_attention import (DEFAULT_SCALE, SpikingBlock, SpikingPatchEmbed, SpikingPatchStage,
                            spiking_neurons)

BOX_CHANNELS = 5
PROB_EPS = 1e-7
CONF_THRESHOLD = 0.5


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Use :meth:`toy` or :meth:`paper` for presets."""

    preset: str = "toy"
    image_hw: tuple = (32, 32)
    patch: int = 2
    window: int = 4
    ann_dims: tuple = (16, 32, 64, 128)
    ann_heads: tuple = (1, 2, 4, 8)
    snn_dims: tuple = (8, 16, 32, 64)
    snn_heads: tuple = (1, 2, 4, 8)
    depths: tuple = (2, 2, 2, 2)
    snn_kinds: tuple = ("qka", "qka", "ssa", "ssa")
    steps: int = 2
    scale: float = DEFAULT_SCALE
    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 0.3
    lam4: float = 0.2
    n_interact: int = 4
    interact_start: int = 3
    interaction: bool = True
    use_snn: bool = True
    use_rse: bool = True
    mlp_ratio: int = 4
    fused_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        n = len(self.depths)
        for name in ("ann_dims", "ann_heads", "snn_dims", "snn_heads", "snn_kinds"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs {n} entries")
        for dims, heads, branch in ((self.ann_dims, self.ann_heads, "ann"), (self.snn_dims, self.snn_heads, "snn")):
            for d, h in zip(dims, heads):
                if h < 1 or d % h:
                    raise ConfigError(f"{branch} width {d} not divisible by {h} heads")
        h, w = self.image_hw
        down = self.patch * 2 ** (n - 1)
        if h % down or w % down:
            raise ConfigError(f"image {h}x{w} must be divisible by {down} (patch x merges)")
        if self.steps < 1:
            raise ConfigError("steps (T) must be >= 1")
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")
        if any(k not in ("qka", "ssa") for k in self.snn_kinds):
            raise ConfigError(f"snn_kinds must be qka or ssa, got {self.snn_kinds}")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(preset="paper", image_hw=(480, 640), patch=4, window=8,
                    ann_dims=(96, 192, 384, 768), ann_heads=(3, 6, 12, 24),
                    snn_dims=(64, 128, 256, 512), snn_heads=(4, 8, 16, 32),
                    depths=(2, 2, 6, 2), steps=5, fused_dim=256)
        base.update(overrides)
        return cls(**base)

    @property
    def interaction_config(self) -> InteractionConfig:
        return InteractionConfig(self.lam3, self.lam4, self.n_interact, self.interact_start,
                                 self.interaction and self.use_snn)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        """Build from string values; unknown keys raise ConfigError."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(kv) - set(fields)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        defaults = cls.paper() if kv.get("preset") == "paper" else cls()
        out = {}
        for k, raw in kv.items():
            proto = getattr(defaults, k)
            out[k] = _coerce(k, raw, proto)
        return dataclasses.replace(defaults, **out)


def _coerce(key, raw, proto):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(proto, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(proto, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(proto[0]) if proto else str
            return tuple(kind(x) for x in items)
        return type(proto)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


# -- detections ---------------------------------------------------------------------

@dataclass
class Detections:
    """Per-cell boxes (cx, cy, w, h) normalized to [0, 1] and confidences.

    ``boxes``: (B, gh, gw, 4); ``conf``: (B, gh, gw).
    """

    boxes: Tensor
    conf: Tensor

    @property
    def grid(self) -> tuple[int, int]:
        return self.conf.shape[1], self.conf.shape[2]

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.boxes.data, self.conf.data

    def select(self, threshold: float = CONF_THRESHOLD) -> list[list[tuple]]:
        """Per image, list of (cx, cy, w, h, conf) above ``threshold``, best first."""
        out = []
        for b in range(self.conf.shape[0]):
            conf = self.conf.data[b].reshape(-1)
            boxes = self.boxes.data[b].reshape(-1, 4)
            keep = np.flatnonzero(conf >= threshold)
            keep = keep[np.argsort(-conf[keep], kind="stable")]
            out.append([tuple(float(v) for v in boxes[i]) + (float(conf[i]),) for i in keep])
        return out


@dataclass
class Targets:
    """Ground truth on the detection grid: normalized boxes and a positive-cell mask."""

    boxes: np.ndarray  # (B, gh, gw, 4)
    positive: np.ndarray  # (B, gh, gw) in {0, 1}


def make_targets(boxes_px: Sequence[Sequence[tuple]], grid: tuple[int, int],
                 image_hw: tuple[int, int]) -> Targets:
    """Assign each (x0, y0, w, h) pixel box to the cell containing its centre.

    When two centres share a cell the later box wins.
    """
    gh, gw = grid
    h, w = image_hw
    out = np.zeros((len(boxes_px), gh, gw, 4))
    pos = np.zeros((len(boxes_px), gh, gw))
    for b, boxes in enumerate(boxes_px):
        for x0, y0, bw, bh in boxes:
            cx, cy = (x0 + bw / 2) / w, (y0 + bh / 2) / h
            col = min(int(cx * gw), gw - 1)
            row = min(int(cy * gh), gh - 1)
            out[b, row, col] = (cx, cy, bw / w, bh / h)
            pos[b, row, col] = 1.0
    return Targets(out, pos)


def box_iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def mean_iou(pred: Detections, targets: Targets, threshold: float = CONF_THRESHOLD) -> float:
    """Each target box scores the best IoU among detections above ``threshold`` (0 if none)."""
    picked = pred.select(threshold)
    scores = []
    for b in range(targets.positive.shape[0]):
        for r, c in zip(*np.nonzero(targets.positive[b])):
            tgt = targets.boxes[b, r, c]
            scores.append(max((box_iou(d[:4], tgt) for d in picked[b]), default=0.0))
    return float(np.mean(scores)) if scores else 0.0


# -- model ------------------------------------------------------------------------------

class Model(Module):
    """Frame backbone + event backbone joined by attention injection and late fusion."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        n = len(c.depths)
        self.ann_embed = PatchEmbed(rng, c.patch, 3, c.ann_dims[0])
        self.ann_blocks = []
        self.ann_merges = []
        for s in range(n):
            for b in range(c.depths[s]):
                self.ann_blocks.append(SESTBlock(rng, c.ann_dims[s], c.ann_heads[s], c.window, b % 2 == 1,
                                                 c.mlp_ratio, c.lam1, c.lam2, c.use_rse))
            if s < n - 1:
                self.ann_merges.append(PatchMerging(rng, c.ann_dims[s], c.ann_dims[s + 1]))
        self.snn_blocks = []
        self.snn_merges = []
        if c.use_snn:
            self.snn_embed = SpikingPatchEmbed(rng, 2, c.snn_dims[0], c.patch, "snn.embed")
            for s in range(n):
                for b in range(c.depths[s]):
                    self.snn_blocks.append(SpikingBlock(
                        rng, c.snn_dims[s], c.snn_heads[s], c.window, c.snn_kinds[s], b % 2 == 1,
                        f"snn.stage{s + 1}.block{b}", c.mlp_ratio, c.scale, c.lam1, c.lam2, c.use_rse))
                if s < n - 1:
                    self.snn_merges.append(SpikingPatchStage(rng, c.snn_dims[s], c.snn_dims[s + 1], 2,
                                                             f"snn.merge{s + 1}"))
        fused_in = c.ann_dims[-1] + (c.snn_dims[-1] if c.use_snn else 0)
        self.fuse = Linear(rng, fused_in, c.fused_dim)
        self.head = Linear(rng, c.fused_dim, BOX_CHANNELS)
        self.schedule = interaction_schedule(c.interaction_config, c.depths, c.snn_kinds) if c.use_snn else []
        self.meter = FiringMeter()
        for neuron in self.neurons():
            neuron.meter = self.meter

    def neurons(self):
        return spiking_neurons(self) if self.config.use_snn else []

    def block_index(self, stage: int, block: int) -> int:
        return sum(self.config.depths[:stage]) + block

    def stage_hw(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial size after each stage for an h x w input (both branches share it)."""
        hw = [self.ann_embed.out_hw(h, w)]
        for merge in self.ann_merges:
            hw.append(merge.out_hw(*hw[-1]))
        if self.config.use_snn:
            snn = [self.snn_embed.out_hw(h, w)]
            for merge in self.snn_merges:
                snn.append(merge.out_hw(*snn[-1]))
            if snn != hw:
                raise ShapeError(f"branch grids differ: frame {hw} vs event {snn}")
        return hw

    @property
    def grid(self) -> tuple[int, int]:
        return self.stage_hw(*self.config.image_hw)[-1]

    def __call__(self, frames, voxels=None) -> tuple[Detections, dict]:
        return forward(self, frames, voxels)


def build(config: ModelConfig) -> Model:
    return Model(config)


def voxels_to_input(voxels) -> np.ndarray:
    """(B, T, 2, H, W) voxel batch -> (T, B, H, W, 2) spiking-branch input."""
    v = np.asarray(voxels.data if hasattr(voxels, "data") else voxels)
    if v.ndim == 4:
        v = v[None]
    if v.ndim != 5 or v.shape[2] != 2:
        raise ShapeError(f"voxels must be (B, T, 2, H, W), got {v.shape}")
    return v.transpose(1, 0, 3, 4, 2)


def forward(model: Model, frames, voxels=None) -> tuple[Detections, dict]:
    """Run both branches and the head.

    ``frames``: (B, H, W, 3) in [0, 1]; ``voxels``: (B, T, 2, H, W) counts.
    Returns detections and diagnostics (firing rates, attention maps of the
    interacting blocks).
    """
    c = model.config
    frames = as_tensor(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"frames must be (B, H, W, 3), got {frames.shape}")
    b, h, w, _ = frames.shape
    model.meter.reset()
    diagnostics = {"attention": {}}
    with scope("ann"):
        x = model.ann_embed(frames)
    z = None
    if c.use_snn:
        if voxels is None:
            voxels = np.zeros((b, c.steps, 2, h, w))
        v = voxels_to_input(voxels)
        if v.shape[1:4] != (b, h, w):
            raise ShapeError(f"voxels {v.shape[1:4]} do not match frames {(b, h, w)}")
        if v.shape[0] != c.steps:
            raise ShapeError(f"voxels have {v.shape[0]} bins, model expects T={c.steps}")
        with scope("snn"):
            z = model.snn_embed(Tensor(v))
    paired = set(model.schedule)
    icfg = c.interaction_config
    for s, depth in enumerate(c.depths):
        for blk in range(depth):
            i = model.block_index(s, blk)
            if (s, blk) in paired:
                x, z = interact(model.ann_blocks[i], model.snn_blocks[i], x, z, icfg)
            else:
                with scope("ann"):
                    x = model.ann_blocks[i](x)
                if z is not None:
                    with scope("snn"):
                        z = model.snn_blocks[i](z)
        if s < len(c.depths) - 1:
            with scope("ann"):
                x = model.ann_merges[s](x)
            if z is not None:
                with scope("snn"):
                    z = model.snn_merges[s](z)
    with scope("head"):
        feats = x
        if z is not None:
            feats = ops.concat([x, ops.mean(z, axis=0)], axis=-1)
        out = model.head(ops.gelu(model.fuse(feats)))
        det = decode(out)
    if c.use_snn:
        diagnostics["firing"] = {name: model.meter.rate(name) for name in model.meter.layers()}
        diagnostics["firing_counts"] = (dict(model.meter.spikes), dict(model.meter.elements))
    return det, diagnostics


def decode(out: Tensor) -> Detections:
    """Raw (B, gh, gw, 5) head output -> normalized boxes and confidences."""
    b, gh, gw, _ = out.shape
    sig = ops.sigmoid(out)
    cols = np.arange(gw, dtype=get_dtype()).reshape(1, 1, gw)
    rows = np.arange(gh, dtype=get_dtype()).reshape(1, gh, 1)
    cx = (ops.getitem(sig, (..., 0)) + cols) * (1.0 / gw)
    cy = (ops.getitem(sig, (..., 1)) + rows) * (1.0 / gh)
    wh = ops.getitem(sig, (..., slice(2, 4)))
    boxes = ops.concat([cx.reshape(b, gh, gw, 1), cy.reshape(b, gh, gw, 1), wh], axis=-1)
    return Detections(boxes, ops.getitem(sig, (..., 4)))


def loss(pred: Detections, target: Targets, box_weight: float = 1.0) -> Tensor:
    """Mean L1 box error over positive cells + mean clamped BCE on confidence over all cells.

    The box term sums |pred - target| over the four coordinates of each
    positive cell and divides by the number of positive cells.
    """
    if pred.conf.shape != target.positive.shape:
        raise ShapeError(f"prediction grid {pred.conf.shape} vs target {target.positive.shape}")
    pos = target.positive
    n_pos = max(float(pos.sum()), 1.0)
    diff = ops.abs(pred.boxes - target.boxes) * pos[..., None]
    box_term = ops.sum(diff) * (box_weight / n_pos)
    p = ops.clip(pred.conf, PROB_EPS, 1.0 - PROB_EPS)
    bce = -(ops.log(p) * pos + ops.log(1.0 - p) * (1.0 - pos))
    return box_term + ops.mean(bce)


# -- training ------------------------------------------------------------------------

@dataclass
class Batch:
    frames: np.ndarray  # (B, H, W, 3)
    voxels: Optional[np.ndarray]  # (B, T, 2, H, W)
    targets: Targets


@dataclass
class Trainer:
    """Model + optimizer state + learning-rate schedule."""

    model: Model
    store: ParamStore = None
    lr: float = 1e-4
    weight_decay: float = 0.05
    milestones: tuple = ()
    gamma: float = 0.1
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.store is None:
            self.store = ParamStore.from_module(self.model)

    def current_lr(self) -> float:
        from .numcore import step_lr
        return step_lr(self.lr, self.store.step, self.milestones, self.gamma)

    def step(self, batch: Batch) -> float:
        return train_step(self, batch)


def train_step(trainer: Trainer, batch: Batch) -> float:
    """Forward, backward through both branches, AdamW update. Returns the loss."""
    model = trainer.model
    model.train()
    trainer.store.zero_grad()
    try:
        with Tape() as tape:
            det, diag = forward(model, batch.frames, batch.voxels)
            value = loss(det, batch.targets)
    except NumericError as exc:
        # parameters already diverged: the forward pass hit non-finite values before the loss
        raise TrainingError(f"non-finite forward pass at step {trainer.store.step}: {exc}",
                            {"step": trainer.store.step, "loss": float("nan"), "error": str(exc)}) from exc
    lv = value.item()
    if not np.isfinite(lv):
        raise TrainingError(f"non-finite loss at step {trainer.store.step}",
                            {"step": trainer.store.step, "loss": lv, "firing": diag.get("firing", {})})
    backward(value, tape, wrt=list(trainer.store.trainable().values()))
    adamw_step(trainer.store, trainer.current_lr(), trainer.weight_decay)
    trainer.history.append(lv)
    return lv


def predict(model: Model, frames, voxels=None) -> tuple[Detections, dict]:
    """Eval-mode forward without recording a tape."""
    from .numcore import no_record
    model.eval()
    try:
        with no_record():
            return forward(model, frames, voxels)
    finally:
        model.train()


def trace_shapes(config: ModelConfig, model: Optional[Model] = None, execute: bool = False,
                 batch: int = 1) -> list[tuple[int, int]]:
    """Stage output sizes for ``config.image_hw``, checked across both branches.

    With ``execute``, real zero tensors are pushed through the patch
    embeddings and merges of both branches (attention blocks preserve shape
    and are skipped), and the measured sizes must match the analytic ones.
    """
    model = model or build(config)
    expected = model.stage_hw(*config.image_hw)
    if not execute:
        return expected
    from .numcore import no_record
    h, w = config.image_hw
    with no_record():
        model.eval()
        try:
            x = model.ann_embed(np.zeros((batch, h, w, 3)))
            measured = [x.shape[1:3]]
            for merge in model.ann_merges:
                x = merge(x)
                measured.append(x.shape[1:3])
            if config.use_snn:
                z = model.snn_embed(np.zeros((config.steps, batch, h, w, 2)))
                snn = [z.shape[2:4]]
                for merge in model.snn_merges:
                    z = merge(z)
                    snn.append(z.shape[2:4])
                if snn != measured:
                    raise ShapeError(f"event branch sizes {snn} differ from frame branch {measured}")
        finally:
            model.train()
    if measured != expected:
        raise ShapeError(f"measured stage sizes {measured} differ from analytic {expected}")
    return measured


# -- checkpoints -------------------------------------------------------------------------

MAGIC = b"HDIFCKPT"
FORMAT_VERSION = 1


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise VersionError("truncated checkpoint")
    return data


def save_checkpoint(path, model: Model, store: Optional[ParamStore] = None, extra_text: str = "") -> None:
    """Versioned binary: magic, version, config text, step, then named float32 arrays.

    Arrays are parameters (``param/``), batch-norm buffers (``buffer/``) and
    AdamW moments (``adam_m/``, ``adam_v/``).
    """
    store = store or ParamStore.from_module(model)
    arrays = [(f"param/{k}", p.data) for k, p in model.named_parameters()]
    arrays += [(f"buffer/{k}", a) for k, a in model.named_buffers()]
    arrays += [(f"adam_m/{k}", a) for k, a in store.m.items()]
    arrays += [(f"adam_v/{k}", a) for k, a in store.v.items()]
    text = (model.config.to_text() + extra_text).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<Q", store.step))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    version: int
    config_text: str
    step: int
    arrays: dict

    @property
    def config(self) -> ModelConfig:
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        lines = [ln for ln in self.config_text.splitlines() if ln.partition("=")[0].strip() in model_keys]
        return ModelConfig.from_text("\n".join(lines))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise VersionError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise VersionError(f"checkpoint format {version}, reader supports {FORMAT_VERSION}")
        (n_text,) = struct.unpack("<I", _read_exact(f, 4))
        text = _read_exact(f, n_text).decode("utf-8")
        (step,) = struct.unpack("<Q", _read_exact(f, 8))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(count):
            (n_name,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n_name).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(shape)
    return Checkpoint(version, text, step, arrays)


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> tuple[Model, ParamStore, Checkpoint]:
    """Rebuild the model from the checkpoint and restore weights, buffers and optimizer state.

    A ``config`` that differs from the stored one raises VersionError.
    """
    ckpt = read_checkpoint(path)
    stored = ckpt.config
    if config is not None and config != stored:
        raise VersionError("checkpoint was written for a different model configuration")
    model = build(stored)
    store = ParamStore.from_module(model)
    restore(model, store, ckpt)
    return model, store, ckpt


def restore(model: Model, store: ParamStore, ckpt: Checkpoint) -> None:
    a = ckpt.arrays
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = ({f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
                | {f"adam_m/{k}" for k in store.m} | {f"adam_v/{k}" for k in store.v})
    if expected != set(a):
        missing = sorted(expected - set(a))[:3]
        extra = sorted(set(a) - expected)[:3]
        raise VersionError(f"checkpoint arrays do not match model (missing {missing}, unexpected {extra})")
    for k, p in params.items():
        _assign(p.data, a[f"param/{k}"], k)
    for k, buf in buffers.items():
        _assign(buf, a[f"buffer/{k}"], k)
    for k in store.m:
        _assign(store.m[k], a[f"adam_m/{k}"], k)
        _assign(store.v[k], a[f"adam_v/{k}"], k)
    store.step = ckpt.step


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise VersionError(f"shape mismatch for {name}: {src.shape} vs {dst.shape}")
    dst[...] = src
