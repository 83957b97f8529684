"""Synthetic moving-rectangle scenes with exact box labels."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .events import (DEFAULT_THRESHOLD, US, EventStream, FrameSequence, simulate_events, voxelize)

DEFAULT_WINDOW_S = 0.05


@dataclass(frozen=True)
class ObjectSpec:
    """A textured rectangle moving at constant velocity (pixels per frame)."""

    x: float
    y: float
    w: int
    h: int
    vx: float
    vy: float
    intensity: float = 0.9


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    n_frames: int = 20
    rate_hz: float = 20.0
    threshold: float = DEFAULT_THRESHOLD
    background: float = 0.25
    objects: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("a scene needs at least two frames")
        for ob in self.objects:
            for k in (0, self.n_frames - 1):
                x0, y0 = _position(ob, k)
                if x0 < 0 or y0 < 0 or x0 + ob.w > self.width or y0 + ob.h > self.height:
                    raise ConfigError(f"object {ob} leaves the {self.width}x{self.height} canvas")

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.rate_hz


def _position(ob: ObjectSpec, k: int) -> tuple[int, int]:
    return int(round(ob.x + ob.vx * k)), int(round(ob.y + ob.vy * k))


def random_scene(seed: int, width: int = 32, height: int = 32, n_frames: int = 20, n_objects: int = 1,
                 rate_hz: float = 20.0, threshold: float = DEFAULT_THRESHOLD,
                 size_range: tuple = (8, 14), max_speed: float = 1.0) -> SceneSpec:
    """Random objects whose whole trajectory stays inside the canvas."""
    rng = np.random.default_rng(seed)
    objects = []
    span = n_frames - 1
    for _ in range(n_objects):
        w, h = (int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
        vx, vy = rng.uniform(-max_speed, max_speed, size=2)
        # integer start range that keeps both endpoints in-canvas
        x_lo, x_hi = int(np.ceil(max(0.0, -vx * span))), int(np.floor(width - w - max(0.0, vx * span)))
        y_lo, y_hi = int(np.ceil(max(0.0, -vy * span))), int(np.floor(height - h - max(0.0, vy * span)))
        if x_hi < x_lo or y_hi < y_lo:
            vx, vy = 0.0, 0.0
            x_lo, x_hi, y_lo, y_hi = 0, width - w, 0, height - h
        x = float(rng.integers(x_lo, x_hi + 1))
        y = float(rng.integers(y_lo, y_hi + 1))
        objects.append(ObjectSpec(x, y, w, h, float(vx), float(vy), float(rng.uniform(0.7, 1.0))))
    return SceneSpec(width, height, n_frames, rate_hz, threshold, 0.25, tuple(objects))


@dataclass
class Scene:
    spec: SceneSpec
    frames: FrameSequence
    boxes: list  # per frame: list of (x0, y0, w, h) in pixels
    events: EventStream


def render(spec: SceneSpec) -> tuple[FrameSequence, list]:
    """Frames and per-frame pixel boxes. The background is a static gradient."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    bg = spec.background * (0.6 + 0.4 * (xx + yy) / max(h + w - 2, 1))
    frames, boxes = [], []
    for k in range(spec.n_frames):
        img = np.repeat(bg[..., None], 3, axis=2).copy()
        frame_boxes = []
        for ob in spec.objects:
            x0, y0 = _position(ob, k)
            # checker texture relative to the object, so it moves with it
            cy, cx = np.mgrid[0:ob.h, 0:ob.w]
            tex = np.where(((cx // 2) + (cy // 2)) % 2 == 0, 1.0, 0.7) * ob.intensity
            img[y0:y0 + ob.h, x0:x0 + ob.w] = tex[..., None] * np.array([1.0, 0.9, 0.8])
            frame_boxes.append((x0, y0, ob.w, ob.h))
        frames.append(img)
        boxes.append(frame_boxes)
    return FrameSequence.at_rate(np.stack(frames), spec.rate_hz), boxes


def make_scene(spec: SceneSpec) -> Scene:
    frames, boxes = render(spec)
    return Scene(spec, frames, boxes, simulate_events(frames, spec.threshold))


def event_window(t_end: int, window_s: float = DEFAULT_WINDOW_S) -> tuple[int, int]:
    return t_end - int(round(window_s * US)), t_end


def samples(scene: Scene, bins: int, window_s: float = DEFAULT_WINDOW_S,
            indices: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray, list]:
    """Per frame: the image, the voxel grid of the events ending at that frame, and its boxes.

    Returns frames (N, H, W, 3), voxels (N, T, 2, H, W) and box lists.
    """
    idx = range(len(scene.frames)) if indices is None else indices
    frames, voxels, boxes = [], [], []
    for k in idx:
        t1 = int(scene.frames.timestamps[k])
        t0, t1 = event_window(t1, window_s)
        voxels.append(voxelize(scene.events, t0, t1, bins).data)
        frames.append(scene.frames.frames[k])
        boxes.append(scene.boxes[k])
    return np.stack(frames), np.stack(voxels), boxes


def write_boxes(path, scene: Scene) -> None:
    """CSV of ``frame,t_us,object,x,y,w,h`` in pixels."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["frame", "t_us", "object", "x", "y", "w", "h"])
        for k, frame_boxes in enumerate(scene.boxes):
            for j, (x, y, w, h) in enumerate(frame_boxes):
                out.writerow([k, int(scene.frames.timestamps[k]), j, x, y, w, h])


def read_boxes(path, n_frames: Optional[int] = None) -> list:
    rows: dict = {}
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "t_us", "object", "x", "y", "w", "h"]:
            raise ParseError(f"unexpected boxes header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                k, _, _, x, y, w, h = (int(v) for v in row)
            except ValueError:
                raise ParseError(f"bad box row {row}", line=lineno) from None
            rows.setdefault(k, []).append((x, y, w, h))
    n = n_frames if n_frames is not None else (max(rows) + 1 if rows else 0)
    return [rows.get(k, []) for k in range(n)]


def scene_from_files(frames: FrameSequence, events: EventStream, boxes: list,
                     threshold: float = DEFAULT_THRESHOLD) -> Scene:
    spec = SceneSpec(frames.width, frames.height, len(frames), US / float(np.diff(frames.timestamps[:2])[0]),
                     threshold)
    return Scene(spec, frames, boxes, events)


def write_scene(scene: Scene, out_dir) -> dict:
    """Write frames (PPM + index), events and boxes; returns the paths."""
    from .events import write_events, write_frames
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"frames": write_frames(scene.frames, out / "frames"), "events": out / "events.txt",
             "boxes": out / "boxes.csv"}
    write_events(scene.events, paths["events"])
    write_boxes(paths["boxes"], scene)
    return paths


def read_scene(data_dir, threshold: float = DEFAULT_THRESHOLD) -> Scene:
    from .events import read_events, read_frames
    d = Path(data_dir)
    frames = read_frames(d / "frames" / "frames.txt")
    events = read_events(d / "events.txt")
    boxes = read_boxes(d / "boxes.csv", len(frames))
    return scene_from_files(frames, events, boxes, threshold)
