"""``hdiformer`` command line: data generation, training, evaluation, async inference,
energy reports and gradient checks.

Exit codes: 0 success, 1 validation or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .checks import run_suites
from .config import RunConfig, echo_lines
from .data import make_scene, random_scene, read_scene, samples, write_scene
from .energy import count_ops, estimate
from .errors import ConfigError, DeterminismError, HDIError, NumericError, TrainingError, VersionError
from .events import US, sliding_windows, voxelize
from .model import (Batch, Detections, Targets, Trainer, build, load_checkpoint, make_targets, mean_iou,
                    predict, save_checkpoint)
from .numcore import Tensor, precision

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
CHUNK = 16


# -- helpers ----------------------------------------------------------------------------

def _write_csv(path: Path, cfg: RunConfig, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in echo_lines(cfg):
            fh.write(line + "\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _write_text(path: Path, cfg: RunConfig, body: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(echo_lines(cfg)) + "\n" + body, encoding="utf-8")


def _scene_spec(cfg: RunConfig):
    h, w = cfg.model.image_hw
    return random_scene(cfg.seed, width=w, height=h, n_frames=cfg.n_frames, n_objects=cfg.n_objects,
                        rate_hz=cfg.rate_hz, threshold=cfg.threshold, max_speed=cfg.max_speed)


def _load_scene(cfg: RunConfig, data: Optional[str]):
    d = Path(data or cfg.data_dir)
    if not (d / "events.txt").exists():
        raise ConfigError(f"no generated data in {d} (run gen-data first)")
    scene = read_scene(d, cfg.threshold)
    if (scene.spec.height, scene.spec.width) != tuple(cfg.model.image_hw):
        raise ConfigError(f"data is {scene.spec.height}x{scene.spec.width}, model expects "
                          f"{cfg.model.image_hw[0]}x{cfg.model.image_hw[1]}")
    return scene


def _same_model(a, b) -> bool:
    return dataclasses.replace(a, seed=0) == dataclasses.replace(b, seed=0)


def _trained_model(args, cfg: RunConfig):
    """Model and effective config from ``--checkpoint``; a given ``--config`` must agree."""
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, store, ckpt = load_checkpoint(args.checkpoint)
    if args.config and not _same_model(cfg.model, ckpt.config):
        raise VersionError(f"{args.checkpoint} was trained with a different model configuration")
    return model, dataclasses.replace(cfg, model=ckpt.config), store


def _predict_chunks(model, frames, voxels):
    boxes, conf = [], []
    for i in range(0, len(frames), CHUNK):
        det, _ = predict(model, frames[i:i + CHUNK], voxels[i:i + CHUNK])
        boxes.append(det.boxes.data.astype(np.float64))
        conf.append(det.conf.data.astype(np.float64))
    return np.concatenate(boxes), np.concatenate(conf)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    scene = make_scene(_scene_spec(cfg))
    paths = write_scene(scene, out)
    _write_text(out / "config.txt", cfg, "")
    print(f"wrote {len(scene.frames)} frames, {len(scene.events)} events, "
          f"{sum(len(b) for b in scene.boxes)} boxes to {out}")
    for key, path in paths.items():
        print(f"  {key}: {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out or "out")
    scene = _load_scene(cfg, args.data)
    frames, voxels, boxes = samples(scene, cfg.model.steps, cfg.window_s)
    ckpt_path = Path(args.checkpoint or out / "model.ckpt")
    if args.resume:
        model, store, _ = load_checkpoint(ckpt_path)
        if not _same_model(model.config, cfg.model):
            raise VersionError(f"{ckpt_path} was trained with a different model configuration")
    else:
        model, store = build(cfg.model), None
    targets = make_targets(boxes, model.grid, cfg.model.image_hw)
    trainer = Trainer(model, store, cfg.lr, cfg.weight_decay, cfg.milestones, cfg.gamma)
    n = len(frames)
    rows = []
    try:
        for _ in range(cfg.train_steps):
            step = trainer.store.step
            # batches cycle through the frames by global step, so a resumed run sees the same order
            idx = [(step * cfg.batch_size + i) % n for i in range(cfg.batch_size)]
            batch = Batch(frames[idx], voxels[idx], Targets(targets.boxes[idx], targets.positive[idx]))
            lr = trainer.current_lr()
            value = trainer.step(batch)
            rate = model.meter.rate() if model.meter.elements else 0.0
            rows.append([trainer.store.step, repr(value), repr(lr), _fmt(rate)])
    except TrainingError as exc:
        _write_text(out / "diagnostics.txt", cfg, "".join(f"{k}={v}\n" for k, v in exc.diagnostics.items()))
        raise
    finally:
        _write_csv(out / "loss.csv", cfg, ["step", "loss", "lr", "firing_rate"], rows)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, model, trainer.store, cfg.run_text())
    if rows:
        first, last = float(rows[0][1]), float(rows[-1][1])
        print(f"steps {rows[0][0]}..{rows[-1][0]}: loss {first:.4f} -> {last:.4f} "
              f"(ratio {last / first:.3f})")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, cfg, _ = _trained_model(args, cfg)
    out = Path(args.out or "out")
    scene = _load_scene(cfg, args.data)
    frames, voxels, boxes = samples(scene, cfg.model.steps, cfg.window_s)
    pb, pc = _predict_chunks(model, frames, voxels)
    targets = make_targets(boxes, model.grid, cfg.model.image_hw)
    det = Detections(Tensor(pb, dtype=np.float64), Tensor(pc, dtype=np.float64))
    rows = []
    for k, picked in enumerate(det.select()):
        for rank, (cx, cy, w, h, c) in enumerate(picked):
            rows.append([k, int(scene.frames.timestamps[k]), rank, _fmt(cx), _fmt(cy), _fmt(w), _fmt(h), _fmt(c)])
    _write_csv(out / "detections.csv", cfg, ["frame", "t_us", "rank", "cx", "cy", "w", "h", "conf"], rows)
    miou = mean_iou(det, targets)
    _write_text(out / "eval_summary.txt", cfg, f"frames={len(frames)}\ndetections={len(rows)}\nmean_iou={miou:.6f}\n")
    print(f"mean_iou={miou:.4f} over {len(frames)} frames ({len(rows)} detections)")
    return EXIT_OK


def cmd_async_infer(args, cfg: RunConfig) -> int:
    model, cfg, _ = _trained_model(args, cfg)
    out = Path(args.out or "out")
    scene = _load_scene(cfg, args.data)
    ts = scene.frames.timestamps
    period = int(ts[1] - ts[0])
    # the last frame stays current for one frame period
    windows = sliding_windows(scene.events, cfg.window_s, cfg.stride_s, int(ts[0]), int(ts[0]) + len(ts) * period)
    if not windows:
        raise ConfigError("recording is shorter than one event window")
    idx = [scene.frames.index_at(w.end) for w in windows]
    frames = scene.frames.frames[idx]
    voxels = np.stack([voxelize(scene.events, w.start, w.end, cfg.model.steps).data for w in windows])
    pb, pc = _predict_chunks(model, frames, voxels)
    rows = []
    for i, w in enumerate(windows):
        conf = pc[i].reshape(-1)
        best = int(np.argmax(conf))
        cx, cy, bw, bh = pb[i].reshape(-1, 4)[best]
        rows.append([i, w.start, w.end, f"{w.end // US}.{w.end % US:06d}", idx[i],
                     _fmt(cx), _fmt(cy), _fmt(bw), _fmt(bh), _fmt(conf[best]), int(np.sum(conf >= 0.5))])
    _write_csv(out / "async_detections.csv", cfg,
               ["window", "t_start_us", "t_end_us", "t_s", "frame", "cx", "cy", "w", "h", "conf", "n_detections"],
               rows)
    print(f"{len(windows)} detection windows from {len(ts)} frames, stride {cfg.stride_s} s")
    return EXIT_OK


def cmd_energy(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        model, cfg, _ = _trained_model(args, cfg)
    else:
        model = build(cfg.model)
    out = Path(args.out or "out")
    d = Path(args.data or cfg.data_dir)
    scene = read_scene(d, cfg.threshold) if (d / "events.txt").exists() else make_scene(_scene_spec(cfg))
    k = max(1, min(cfg.energy_frames, len(scene.frames) - 1))
    frames, voxels, _ = samples(scene, cfg.model.steps, cfg.window_s, indices=range(1, k + 1))
    predict(model, frames, voxels)
    report = estimate(count_ops(model, cfg.model.image_hw), model.meter if cfg.model.use_snn else None)
    csv_text = report.to_csv(cfg.to_text())
    (out / "energy.csv").parent.mkdir(parents=True, exist_ok=True)
    (out / "energy.csv").write_text(csv_text, encoding="utf-8")
    (out / "energy_summary.txt").write_text(report.summary(cfg.to_text()), encoding="utf-8")
    print(report.summary(), end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.precision == 32:
        raise ConfigError("gradcheck runs in 64-bit mode")
    results = run_suites(corrupt_backward=args.corrupt_backward)
    rows = [[r.name, f"{r.error:.3e}", f"{r.tolerance:.0e}", "pass" if r.passed else "FAIL"] for r in results]
    print("suite,max_rel_error,tolerance,status")
    for row in rows:
        print(",".join(row))
    if args.out:
        _write_csv(Path(args.out) / "gradcheck.csv", cfg, ["suite", "max_rel_error", "tolerance", "status"], rows)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": (cmd_gen_data, "render a synthetic scene: frames, events and boxes"),
    "train": (cmd_train, "train on a generated scene and save a checkpoint"),
    "eval": (cmd_eval, "per-frame detections and mean IoU"),
    "async-infer": (cmd_async_infer, "detections at the event-window stride between frames"),
    "energy": (cmd_energy, "operation counts and energy estimate"),
    "gradcheck": (cmd_gradcheck, "gradient-check suites (64-bit)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdiformer", description=__doc__.split("\n\n")[0].replace("\n", " "),
                                     epilog=__doc__.split("\n\n")[1].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--precision", type=int, choices=(32, 64), help="real width (default 32, gradcheck 64)")
        p.add_argument("--data", help="data directory (overrides data_dir)")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
        if name == "gradcheck":
            p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        bits = args.precision or (64 if args.command == "gradcheck" else 32)
        with precision(bits):
            return fn(args, cfg)
    except (TrainingError, NumericError, DeterminismError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HDIError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
