"""Build the toy detector, run one synthetic scene through it and look inside.

Run with ``python3 demos/quickstart.py``. Nothing is trained here; the
point is the data path: frames plus an event voxel grid in, one box per
grid cell out, with spike statistics from the event branch.
"""
import numpy as np

from hdiformer.data import make_scene, random_scene, samples
from hdiformer.model import ModelConfig, build, forward, predict, trace_shapes


def main():
    cfg = ModelConfig.toy()
    scene = make_scene(random_scene(seed=0, n_frames=6))
    print(f"scene: {len(scene.frames)} frames, {len(scene.events)} events, first box {scene.boxes[1]}")

    frames, voxels, _ = samples(scene, cfg.steps, indices=[1, 2, 3])
    print(f"frames {frames.shape}, voxels {voxels.shape}, events binned {int(voxels.sum())}")

    model = build(cfg)
    print("stage sizes:", trace_shapes(cfg, model, execute=True))

    det, _ = predict(model, frames, voxels)
    boxes, conf = det.numpy()
    print(f"output grid {det.grid}: boxes {boxes.shape}, confidences {conf.shape}")
    print("confidence per cell of frame 1:\n", np.round(conf[0], 3))

    # inference mode uses batch-norm running statistics, which start at unit
    # variance; an untrained network is therefore nearly silent
    print(f"event-branch firing rate, inference mode {model.meter.rate():.4f}")
    forward(model, frames, voxels)
    print(f"event-branch firing rate, training mode {model.meter.rate():.4f}")
    for layer in sorted(model.meter.layers())[:6]:
        print(f"  {layer:<40s} {model.meter.rate(layer):.4f}")


if __name__ == "__main__":
    main()
