"""Command-line surface: scene generation, training, rendering, evaluation,
and primitive-overlap reporting.

Exit codes: 0 success, 1 validation or usage error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .boundaries import make_refiner
from .cameras import Camera, look_at
from .errors import ConfigError, NumericError, ParseError
from .field import ModelConfig, SceneModel
from .metrics import (
    ConfusionMatrix,
    confusion_matrix,
    depth_metrics,
    metric_report,
    multiview_consistency,
    panoptic_quality,
    write_report,
)
from .primitives import primitive_overlap_stats
from .rendering import RenderConfig, render_view
from .scene import (
    NoiseSpec,
    SceneSpec,
    corrupt_labels,
    decode_labels,
    encode_labels,
    gen_scene,
    load_bundle,
    pack_panoptic,
    read_depth_raster,
    read_pgm16,
    save_bundle,
    unpack_panoptic,
    write_depth_raster,
    write_pgm16,
    write_ppm,
)
from .training import TrainConfig, train_stage1, train_stage2, write_loss_csv


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise UsageError(f"expected WxH, got {text!r}")


# ---------------------------------------------------------------------------
# Model persistence (checkpoint + sidecar metadata)


def _meta_path(ckpt):
    return Path(ckpt).with_suffix(".json")


def save_model(ckpt_path, model):
    save_checkpoint(ckpt_path, model.store)
    meta = {
        "model": model.cfg.as_dict(),
        "n_frames": model.n_frames,
        "n_classes": model.n_classes,
    }
    with open(_meta_path(ckpt_path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(ckpt_path):
    meta_path = _meta_path(ckpt_path)
    if not meta_path.exists():
        meta_path = Path(ckpt_path).parent / "model.json"
    if not meta_path.exists():
        raise ParseError(f"{ckpt_path}: no model metadata "
                         f"({_meta_path(ckpt_path).name} or model.json)")
    meta = json.loads(meta_path.read_text())
    store = load_checkpoint(ckpt_path)
    return SceneModel(ModelConfig.from_dict(meta["model"]),
                      n_frames=meta["n_frames"], n_classes=meta["n_classes"],
                      store=store)


_PRESETS = {
    "tiny": (ModelConfig.tiny, TrainConfig.tiny),
    "desk": (ModelConfig.desk, TrainConfig.desk),
    "full": (ModelConfig, TrainConfig),
}


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_scene(args):
    w, h = _parse_size(args.size)
    spec = SceneSpec(
        n_buildings=args.buildings, n_cars=args.cars, n_trees=args.trees,
        adjacent=args.adjacent, overlap=args.overlap,
        n_frames=args.frames, width=w, height=h,
    )
    bundle = gen_scene(args.seed, spec)
    noise = NoiseSpec(boundary_dilate_px=args.noise_dilate,
                      flip_rate=args.noise_flip,
                      region_swap_count=args.noise_swaps)
    if noise != NoiseSpec():
        rng = np.random.default_rng(args.seed + 1)
        for name in sorted(bundle.pseudo_sem):
            bundle.pseudo_sem[name] = corrupt_labels(
                bundle.pseudo_sem[name], noise, rng, bundle.n_classes)
    save_bundle(bundle, args.out)
    print(f"wrote scene with {len(bundle.primitives)} primitives, "
          f"{len(bundle.cameras)} views to {args.out}")
    return 0


def cmd_train(args):
    bundle = load_bundle(args.scene)
    data = bundle.to_scene_data()
    model_cfg, train_cfg = (f() for f in _PRESETS[args.preset])
    overrides = {}
    if args.iters is not None:
        overrides["stage1_iters"] = args.iters
    if args.stage2_iters is not None:
        overrides["stage2_iters"] = args.stage2_iters
    if args.checkpoint_interval:
        overrides["checkpoint_interval"] = args.checkpoint_interval
    if overrides:
        train_cfg = train_cfg.with_overrides(**overrides)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = SceneModel(model_cfg, n_frames=data.n_frames,
                       n_classes=data.n_classes, seed=args.seed)
    model.set_normalizer_from_primitives(data.primitives)
    ckpt_dir = out if args.checkpoint_interval else None
    rows = train_stage1(model, data, train_cfg, seed=args.seed,
                        checkpoint_dir=ckpt_dir)
    save_model(out / "stage1.lfck", model)
    if args.stage2:
        refiner = make_refiner(data.building_class)
        rows += train_stage2(model, data, train_cfg, refiner,
                             seed=args.seed + 1, checkpoint_dir=ckpt_dir)
        save_model(out / "stage2.lfck", model)
    write_loss_csv(out / "losses.csv", rows)
    last = rows[-1]["total"] if rows else float("nan")
    print(f"trained {len(rows)} iterations, final loss {last:.4f}, "
          f"checkpoints in {out}")
    return 0


def _render_config(args, fuse_far=None):
    return RenderConfig(
        n_primitive_samples=args.samples, n_sky_samples=args.sky_samples,
        fuse_far=fuse_far, chunk=4096,
    )


def _panorama_camera(bundle, frame, width, height):
    left = bundle.camera_by_name(f"fisheye_left_{frame:02d}")
    right = bundle.camera_by_name(f"fisheye_right_{frame:02d}")
    pos = (left.pose_t + right.pose_t) / 2.0
    cam = Camera(
        kind="panorama", width=width, height=height,
        pose_r=look_at(pos, pos + np.array([0.0, 0.0, 8.0])),
        pose_t=pos, frame_index=frame, role="aux",
        name=f"panorama_{frame:02d}",
    )
    return cam, (left, right)


def cmd_render(args):
    bundle = load_bundle(args.scene)
    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _render_config(args, fuse_far=args.fuse_far)
    if args.panorama:
        w, h = _parse_size(args.panorama)
        camera, anchors = _panorama_camera(bundle, args.frame, w, h)
    elif args.view:
        camera, anchors = bundle.camera_by_name(args.view), None
    else:
        raise UsageError("render needs --view NAME or --panorama WxH")
    result = render_view(model, camera, bundle.primitives, cfg,
                         sky_class=bundle.sky_class,
                         thing_classes=bundle.thing_classes,
                         pano_anchors=anchors)
    name = camera.name
    rgb = np.clip(np.round(result["rgb"] * 255.0), 0, 255).astype(np.uint8)
    write_ppm(out / f"{name}.rgb.ppm", rgb)
    write_depth_raster(out / f"{name}.depth.lfdp",
                       result["depth"].astype(np.float32))
    write_pgm16(out / f"{name}.sem.pgm", encode_labels(result["class_map"]))
    write_pgm16(out / f"{name}.pan.pgm",
                pack_panoptic(result["class_map"], result["instance_map"]))
    print(f"rendered {name} to {out}")
    return 0


def _pooled_confusion(pairs, n_classes):
    total = None
    for pred, gt in pairs:
        conf = confusion_matrix(pred, gt, n_classes)
        if total is None:
            total = conf
        else:
            total = ConfusionMatrix(total.counts + conf.counts,
                                    total.invalid_pred + conf.invalid_pred,
                                    total.void + conf.void)
    return total


def cmd_eval(args):
    bundle = load_bundle(args.scene)
    if not bundle.has_gt:
        raise ConfigError(f"{args.scene}: bundle has no ground-truth rasters")
    pred_dir = Path(args.pred)
    names = [cam.name for cam in bundle.cameras
             if (pred_dir / f"{cam.name}.sem.pgm").exists()]
    if not names:
        raise ConfigError(f"{pred_dir}: no *.sem.pgm predictions found")

    sem_pairs = []
    pan_rows = {}
    depth_pred, depth_gt = [], []
    for name in names:
        pred_sem = decode_labels(read_pgm16(pred_dir / f"{name}.sem.pgm"))
        gt_sem = bundle.gt_sem[name]
        sem_pairs.append((pred_sem, np.where(pred_sem < 0, -1, gt_sem)))
        pan_path = pred_dir / f"{name}.pan.pgm"
        if pan_path.exists():
            p_cls, p_inst = unpack_panoptic(read_pgm16(pan_path))
            res = panoptic_quality(
                p_cls, p_inst, np.where(p_cls < 0, -1, gt_sem),
                bundle.gt_inst[name], bundle.n_classes,
                bundle.thing_classes, bundle.sky_class)
            res.pop("matches")
            pan_rows[name] = res
        d_path = pred_dir / f"{name}.depth.lfdp"
        if d_path.exists():
            depth_pred.append(read_depth_raster(d_path).reshape(-1))
            depth_gt.append(bundle.gt_depth[name].reshape(-1))

    conf = _pooled_confusion(sem_pairs, bundle.n_classes)
    iou = conf.iou()
    present = conf.present()
    semantic = {
        "iou": iou,
        "miou": float(np.nanmean(iou[present])) if present.size else None,
        "accuracy": conf.accuracy(),
    }

    panoptic = None
    if pan_rows:
        panoptic = {"per_view": pan_rows}
        for key in ("pq", "sq", "rq", "pq_dagger"):
            vals = [r[key] for r in pan_rows.values() if np.isfinite(r[key])]
            panoptic[key] = float(np.mean(vals)) if vals else None

    depth = None
    if depth_pred:
        rmse, delta = depth_metrics(np.concatenate(depth_pred),
                                    np.concatenate(depth_gt))
        depth = {"rmse": rmse, "delta_1.25": delta}

    consistency = {}
    by_role = {}
    for name in names:
        cam = bundle.camera_by_name(name)
        if (pred_dir / f"{name}.depth.lfdp").exists():
            by_role.setdefault(cam.role, []).append(cam)
    for role, cams in sorted(by_role.items()):
        cams.sort(key=lambda c: c.frame_index)
        if len(cams) < 2:
            continue
        labels = [decode_labels(read_pgm16(pred_dir / f"{c.name}.sem.pgm"))
                  for c in cams]
        depths = [read_depth_raster(pred_dir / f"{c.name}.depth.lfdp")
                  for c in cams]
        consistency[role] = multiview_consistency(labels, depths, cams)

    report = metric_report(
        config={"scene": str(args.scene), "pred": str(pred_dir),
                "views": names},
        semantic=semantic,
        panoptic=panoptic,
        depth=depth,
        consistency=consistency or None,
    )
    out = Path(args.out) if args.out else pred_dir / "metrics.json"
    write_report(out, report)
    miou = semantic["miou"]
    print(f"evaluated {len(names)} views: "
          f"mIoU {miou if miou is None else round(miou, 4)}, report at {out}")
    return 0


def cmd_overlap_stats(args):
    bundle = load_bundle(args.scene)
    report = primitive_overlap_stats(
        bundle.primitives, rng=np.random.default_rng(args.seed)).as_dict()
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = _Parser(prog="labelfield",
                     description="Primitive-annotation label fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic street bundle")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--buildings", type=int, default=2)
    g.add_argument("--cars", type=int, default=1)
    g.add_argument("--trees", type=int, default=1)
    g.add_argument("--frames", type=int, default=2)
    g.add_argument("--size", default="64x64")
    g.add_argument("--adjacent", action="store_true")
    g.add_argument("--overlap", action="store_true")
    g.add_argument("--noise-dilate", type=int, default=0)
    g.add_argument("--noise-flip", type=float, default=0.0)
    g.add_argument("--noise-swaps", type=int, default=0)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="optimize the fields on a bundle")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(_PRESETS), default="desk")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--stage2", action="store_true")
    t.add_argument("--stage2-iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render maps from a checkpoint")
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--view")
    r.add_argument("--panorama", metavar="WxH")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--fuse-far", type=float, default=None)
    r.add_argument("--samples", type=int, default=24)
    r.add_argument("--sky-samples", type=int, default=4)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--scene", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("overlap-stats", help="report intersecting primitives")
    o.add_argument("--scene", required=True)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_overlap_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except (ConfigError, ParseError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
