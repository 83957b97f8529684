"""Per-block operation counts and the energy estimate for the toy model.

Firing rates come from a forward pass over a few synthetic frames. The
same counts are then priced with every spiking block silent and with
every spiking block saturated, which brackets the measured estimate.

Pass a checkpoint (for instance from ``demos/overfit.sh``) to price a
trained model. A fresh model first runs a few gradient-free forwards in
training mode: its batch-norm running variance starts at 1 while the
real activations are far smaller, and an uncalibrated network is silent.

    python3 demos/energy_breakdown.py [model.ckpt]
"""
import sys

from hdiformer.data import make_scene, random_scene, samples
from hdiformer.energy import compare_ratio, count_ops, estimate
from hdiformer.model import ModelConfig, build, forward, load_checkpoint, predict
from hdiformer.numcore import no_record


def main(checkpoint=None):
    if checkpoint:
        model, _, _ = load_checkpoint(checkpoint)
        cfg = model.config
    else:
        cfg = ModelConfig.toy()
        model = build(cfg)
    scene = make_scene(random_scene(seed=1, n_frames=5))
    frames, voxels, _ = samples(scene, cfg.steps, indices=[1, 2, 3, 4])
    if not checkpoint:
        with no_record():
            for _ in range(100):
                forward(model, frames, voxels)
    predict(model, frames, voxels)

    counts = count_ops(model)
    report = estimate(counts, model.meter)
    print(f"{'block':<28s} {'T':>2s} {'f':>7s} {'OP_A':>10s} {'OP_M':>10s} {'pJ':>12s}")
    for row in report.rows:
        print(f"{row.block:<28s} {row.steps:>2d} {row.rate:>7.4f} {row.op_a:>10d} {row.op_m:>10d} {row.pj:>12.1f}")
    print()
    print(report.summary(), end="")

    names = [b.name for b in counts.blocks if b.branch == "snn"]
    silent = estimate(counts, {n: 0.0 for n in names})
    saturated = estimate(counts, {n: 1.0 for n in names})
    print(f"event branch: silent {silent.branch_pj('snn'):.0f} pJ, measured {report.branch_pj('snn'):.0f} pJ, "
          f"saturated {saturated.branch_pj('snn'):.0f} pJ")
    print(f"frame/event ratio at measured rates: "
          f"{compare_ratio(report.branch_pj('ann'), report.branch_pj('snn'))}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
