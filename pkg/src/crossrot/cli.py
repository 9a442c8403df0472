"""Command-line interface: dataset generation, training, evaluation,
inference and visualization export.

Exit codes: 0 success, 1 user error (bad flags, config, missing files,
corrupt checkpoints), 2 internal error. Errors go to stderr as one JSON
line; regular output goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; here 2 means internal, so remap
    def error(self, message):
        print(json.dumps({"kind": "usage", "error": message}), file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="crossrot",
                description="relative 3D rotation estimation between image pairs")
    p.add_argument("--threads", type=int, default=None,
                   help="pin BLAS/OpenMP thread count for reproducibility "
                        "(takes effect if set before numpy loads)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a panorama crop-pair dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override dataset.seed")
    g.add_argument("--n-panoramas", type=int, default=None)
    g.add_argument("--crops", type=int, default=None,
                   help="override dataset.crops_per_panorama")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint base path to continue from")
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--eval-interval", type=int, default=None)

    e = sub.add_parser("eval", help="geodesic-error table per overlap class")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--out", default=None, help="directory for metrics CSVs")
    e.add_argument("--oracle-gt", action="store_true",
                   help="test hook: score ground-truth predictions")
    e.add_argument("--max-pairs", type=int, default=None)

    i = sub.add_parser("infer", help="predict the relative rotation of two images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image-a", required=True)
    i.add_argument("--image-b", required=True)

    a = sub.add_parser("attend", help="export attention heatmap overlays")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--pair", required=True, help="pair id from index.jsonl")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--per-layer", action="store_true")
    a.add_argument("--per-head", action="store_true")

    f = sub.add_parser("footprint", help="overlay crop footprints on the panorama")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--pair", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--fov", type=float, default=90.0)
    return p


def _pin_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_model(checkpoint: str):
    from .harness import load_checkpoint
    return load_checkpoint(checkpoint)


def _find_record(index, pair_id: str) -> dict:
    for rec in index.records:
        if rec["pair_id"] == pair_id:
            return rec
    raise FileNotFoundError(f"pair id {pair_id!r} not in {index.root}/index.jsonl")


def _cmd_gen_data(args) -> int:
    from .panorama import build_dataset
    from .runconfig import echo_config, load_run_config
    overrides = {"dataset": {"seed": args.seed, "n_panoramas": args.n_panoramas,
                             "crops_per_panorama": args.crops}}
    rc = load_run_config(args.config, overrides)
    index = build_dataset(rc.dataset, args.out)
    echo_config(rc.as_dict(), args.out)
    print(f"dataset written to {args.out} "
          f"({len(index.records)} pairs, {rc.dataset.n_panoramas} panoramas)")
    for split in ("train", "test"):
        counts = index.class_counts[split]
        total = sum(counts.values())
        print(f"  {split}: {total} pairs "
              f"(large {counts['large']}, small {counts['small']}, "
              f"none {counts['none']})")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .autodiff import Adam
    from .harness import load_checkpoint, train
    from .model import RotationNet
    from .panorama import open_dataset
    from .runconfig import echo_config, load_run_config
    overrides = {"train": {"seed": args.seed, "max_steps": args.max_steps,
                           "batch_size": args.batch_size, "lr": args.lr,
                           "eval_interval": args.eval_interval}}
    rc = load_run_config(args.config, overrides)
    cfg = replace(rc.train, checkpoint_dir=args.out)
    index = open_dataset(args.data)

    optimizer, start_step = None, 0
    if args.resume:
        model, state = load_checkpoint(args.resume)
        optimizer = Adam(model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1,
                         beta2=cfg.beta2, eps=cfg.eps)
        if state.adam:
            optimizer.load_state_dict(state.adam)
        start_step = state.step
    else:
        model = RotationNet(rc.model, seed=cfg.seed)

    echo_config(rc.as_dict(), args.out)
    log = train(model, index, cfg, optimizer=optimizer, start_step=start_step)
    final = log[-1]["loss"] if log else float("nan")
    print(f"trained {len(log)} steps (through step {cfg.max_steps}); "
          f"final loss {final:.6f}")
    print(f"checkpoint: {Path(args.out) / 'last'}.manifest.json")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .geometry import UnitQuaternion
    from .harness import evaluate
    from .panorama import open_dataset
    from .runconfig import echo_config
    model, _ = _load_model(args.checkpoint)
    index = open_dataset(args.data)
    predict_fn = None
    if args.oracle_gt:
        def predict_fn(record, img_a, img_b):
            return UnitQuaternion.from_array(np.asarray(record["quat_rel"]))
    rows, _ = evaluate(model, index, args.split, out_dir=args.out,
                       predict_fn=predict_fn, max_pairs=args.max_pairs)
    if args.out:
        echo_config({"model": _model_cfg_dict(model),
                     "eval": {"checkpoint": args.checkpoint, "split": args.split,
                              "oracle_gt": bool(args.oracle_gt)}}, args.out)
    print(f"{'overlap':<8} {'n':>5} {'avg(deg)':>10} {'med(deg)':>10} {'<10deg(%)':>10}")
    for r in rows:
        print(f"{r.overlap:<8} {r.count:>5} {r.avg_deg:>10.3f} "
              f"{r.med_deg:>10.3f} {r.pct_under_10:>10.2f}")
    return 0


def _cmd_infer(args) -> int:
    from .geometry import quat_to_yaw_pitch
    from .panorama import load_png
    model, _ = _load_model(args.checkpoint)
    img_a = load_png(Path(args.image_a))
    img_b = load_png(Path(args.image_b))
    q, _ = model.predict(img_a, img_b)
    yp = quat_to_yaw_pitch(q)
    print(json.dumps({"quat": [q.w, q.x, q.y, q.z],
                      "yaw_deg": yp.yaw_deg, "pitch_deg": yp.pitch_deg}))
    return 0


def _cmd_attend(args) -> int:
    from .harness import export_attention
    from .panorama import load_png, open_dataset
    from .runconfig import echo_config
    model, _ = _load_model(args.checkpoint)
    index = open_dataset(args.data)
    rec = _find_record(index, args.pair)
    crops = Path(index.root) / "crops"
    paths = export_attention(model, load_png(crops / rec["crop_a"]),
                             load_png(crops / rec["crop_b"]),
                             Path(args.out) / args.pair,
                             per_layer=args.per_layer, per_head=args.per_head)
    echo_config({"model": _model_cfg_dict(model),
                 "attend": {"checkpoint": args.checkpoint, "pair": args.pair}},
                args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_footprint(args) -> int:
    from .geometry import UnitQuaternion
    from .harness import export_footprints
    from .panorama import load_png, open_dataset
    from .runconfig import echo_config
    model, _ = _load_model(args.checkpoint)
    index = open_dataset(args.data)
    rec = _find_record(index, args.pair)
    root = Path(index.root)
    img_a = load_png(root / "crops" / rec["crop_a"])
    img_b = load_png(root / "crops" / rec["crop_b"])
    q_pred, _ = model.predict(img_a, img_b)
    pano_id = rec["pair_id"].rsplit("_", 1)[0]
    pano = load_png(root / "panos" / f"{pano_id}.png")
    out = export_footprints(pano, UnitQuaternion.from_array(rec["quat_a"]),
                            UnitQuaternion.from_array(rec["quat_b"]), q_pred,
                            Path(args.out) / f"{args.pair}_footprint.png",
                            fov_deg=args.fov, crop_size=img_a.shape[0])
    echo_config({"model": _model_cfg_dict(model),
                 "footprint": {"checkpoint": args.checkpoint, "pair": args.pair,
                               "fov_deg": args.fov}}, args.out)
    print(out)
    return 0


def _model_cfg_dict(model) -> dict:
    from dataclasses import asdict
    return asdict(model.cfg)


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "attend": _cmd_attend,
    "footprint": _cmd_footprint,
}


def _user_error_types():
    from .autodiff import ShapeMismatch
    from .geometry import GeometryError
    from .harness import CheckpointError, EmptySplit
    from .panorama import PanoramaError
    from .runconfig import ConfigError
    return (ConfigError, PanoramaError, CheckpointError, EmptySplit,
            GeometryError, ShapeMismatch, FileNotFoundError, OSError, ValueError)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _pin_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - single funnel for exit codes
        kind = type(e).__name__
        code = 1 if isinstance(e, _user_error_types()) else 2
        print(json.dumps({"kind": kind, "error": str(e)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
