"""End-to-end toy experiment: synthesize data, train, evaluate, export visuals.

Runs the whole pipeline at the small 64px scale on a laptop CPU. With the
defaults this takes around ten minutes and ends with a metrics table, an
attention overlay and a footprint overlay under --out.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from crossrot.geometry import UnitQuaternion
from crossrot.harness import (
    evaluate,
    export_attention,
    export_footprints,
    random_rotation_baseline,
    toy_train_config,
    train,
)
from crossrot.model import RotationNet, toy_config
from crossrot.panorama import DatasetSpec, build_dataset, load_png

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--out", default="runs/toy", help="output directory")
parser.add_argument("--panoramas", type=int, default=32)
parser.add_argument("--crops", type=int, default=50, help="crops per panorama")
parser.add_argument("--rel-yaw", type=float, default=60.0,
                    help="max relative yaw between the two crops (deg)")
parser.add_argument("--steps", type=int, default=3000)
parser.add_argument("--batch", type=int, default=8)
parser.add_argument("--data-seed", type=int, default=7)
parser.add_argument("--model-seed", type=int, default=0)
parser.add_argument("--train-seed", type=int, default=0)


def main():
    args = parser.parse_args()
    out = Path(args.out)
    t0 = time.time()

    spec = DatasetSpec(n_panoramas=args.panoramas, crops_per_panorama=args.crops,
                       crop_size=64, pitch_limit_deg=0.0,
                       rel_yaw_limit_deg=args.rel_yaw, seed=args.data_seed,
                       pano_height=128)
    index = build_dataset(spec, out / "data")
    n_train = sum(r["split"] == "train" for r in index.records)
    print(f"dataset: {len(index.records)} pairs ({n_train} train) "
          f"[{time.time() - t0:.0f}s]")

    net = RotationNet(toy_config(), seed=args.model_seed)
    cfg = toy_train_config(max_steps=args.steps, batch_size=args.batch,
                           seed=args.train_seed, checkpoint_dir=str(out / "ckpt"),
                           eval_interval=max(1, args.steps // 6))
    log = train(net, index, cfg)
    print(f"trained {args.steps} steps, final loss {log[-1]['loss']:.4f} "
          f"[{time.time() - t0:.0f}s]")

    rows, per_pair = evaluate(net, index, "test", out_dir=out / "eval")
    bl = random_rotation_baseline(len(per_pair), np.random.default_rng(0))
    for r in rows:
        print(f"  {r.overlap:>6}: n={r.count:<4d} avg {r.avg_deg:7.2f}  "
              f"med {r.med_deg:7.2f}  <10deg {r.pct_under_10:5.1f}%")
    print(f"  uniform-random-rotation baseline median: {bl['median_deg']:.1f} deg")

    # visuals for the first held-out pair
    rec = next(r for r in index.records if r["split"] == "test")
    crops = out / "data" / "crops"
    img_a = load_png(crops / rec["crop_a"])
    img_b = load_png(crops / rec["crop_b"])
    export_attention(net, img_a, img_b, out / "viz" / "attn")
    q_pred, _ = net.predict(img_a, img_b)
    pid = rec["pair_id"].rsplit("_", 1)[0]
    pano = load_png(out / "data" / "panos" / f"{pid}.png")
    export_footprints(pano, UnitQuaternion.from_array(rec["quat_a"]),
                      UnitQuaternion.from_array(rec["quat_b"]), q_pred,
                      out / "viz" / "footprint.png", fov_deg=spec.fov_deg,
                      crop_size=spec.crop_size)
    print(f"visuals for {rec['pair_id']} under {out / 'viz'} "
          f"[{time.time() - t0:.0f}s total]")


if __name__ == "__main__":
    main()
