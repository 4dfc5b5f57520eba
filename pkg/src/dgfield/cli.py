"""Command-line entry point: ``dgfield {synth,train,render,eval}``.

All outputs go under ``--out``.  The number of BLAS threads can be capped
with ``DGFIELD_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, sidecar_path
from .dataset import DEFAULT_DEPTH_SCALE, View, load_dataset, read_rgb, write_dataset, write_depth16, write_rgb
from .errors import DGFieldError, InputError
from .geometry import CameraModel
from .plots import training_curves, view_comparison
from .render import DENSITY_SCALE, NDCFrame, render_view
from .synth import AnalyticScene, MetricsReport, add_depth_noise, evaluate_images, raycast_view
from .train import LOG_COLUMNS, TrainConfig, format_config, parse_config, train

log = logging.getLogger("dgfield")

DEPTH_PNG_SCALE = 1e-4  # NDC ray units per raw 16-bit value


def _indices(text: str):
    try:
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view indices, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("at least one view index is required")
    return out


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError("depth noise must lie in [0, 1]")
    return v


def content_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _dataset_files(data_dir):
    data_dir = Path(data_dir)
    files = [data_dir / "cameras.json"]
    for rec in json.loads(files[0].read_text()):
        files += [data_dir / rec["image"], data_dir / rec["depth"]]
    return files


# ---------------------------------------------------------------------------
# commands


def command_synth(args) -> int:
    scene = AnalyticScene.from_json(Path(args.scene).read_text())
    records = json.loads(Path(args.cameras).read_text())
    if not isinstance(records, list) or not records:
        raise InputError(f"{args.cameras}: expected a non-empty array of cameras")
    rng = np.random.default_rng(args.seed)
    views = []
    for rec in records:
        cam = CameraModel.from_record(rec)
        image, depth = raycast_view(scene, cam)
        if args.depth_noise:
            depth = add_depth_noise(depth, args.depth_noise, rng)
        views.append(View(cam, image, depth))
    out = write_dataset(args.out, views, args.depth_scale)
    print(json.dumps({"dataset": str(out), "views": len(views), "depth_noise": args.depth_noise}))
    return 0


def command_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text()) if args.config else TrainConfig()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    ds = load_dataset(args.data)
    ds = ds.split(args.views) if args.views else ds
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    render_meta = {"q_samples": cfg.q_samples, "density_scale": cfg.density_scale}
    saved = []

    def on_milestone(it, model, frame):
        p = ckpt_dir / f"iter_{it:06d}.dgpf"
        save_checkpoint(model, p, frame, render_meta)
        saved.append(str(p))

    result = train(ds.train_views(), cfg, on_milestone=on_milestone, record_time=args.timing)
    final = save_checkpoint(result.model, out / "checkpoint.dgpf", result.frame, render_meta)
    (out / "config.txt").write_text(format_config(cfg))
    metrics = out / "metrics.csv"
    write_metrics_csv(result.log, metrics)
    figure = training_curves(result.log, out / "training.png")
    manifest = {
        "config": str(out / "config.txt"),
        "seed": cfg.seed,
        "train_views": ds.train,
        "held_out_views": ds.held_out,
        "checkpoint": str(final),
        "checkpoint_sidecar": str(sidecar_path(final)),
        "milestone_checkpoints": saved,
        "metrics_csv": str(metrics),
        "figure": str(figure) if figure else None,
        "input_hash": content_hash(_dataset_files(args.data) + ([Path(args.config)] if args.config else [])),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(final), "final_loss": last.get("loss_total")}))
    return 0


def _load_for_render(path):
    model, meta = load_checkpoint(path)
    if not meta or "frame" not in meta:
        raise InputError(f"{path}: checkpoint sidecar with the rendering frame is missing")
    frame = NDCFrame.from_record(meta["frame"])
    render = meta.get("render", {})
    return model, frame, int(render.get("q_samples", 64)), float(render.get("density_scale", DENSITY_SCALE))


def _write_depth(path, depth):
    raw = np.clip(np.rint(depth / DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    write_depth16(path, raw)
    Path(str(path) + ".json").write_text(json.dumps({"scale": DEPTH_PNG_SCALE, "units": "NDC ray distance"}))


def command_render(args) -> int:
    model, frame, Q, scale = _load_for_render(args.checkpoint)
    records = json.loads(Path(args.poses).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, rec in enumerate(records):
        cam = CameraModel.from_record(rec)
        img, depth = render_view(model, frame, cam, Q, scale)
        write_rgb(out / f"render_{i:03d}.png", img)
        _write_depth(out / f"depth_{i:03d}.png", depth)
        written.append(str(out / f"render_{i:03d}.png"))
    print(json.dumps({"renders": written}))
    return 0


def _report_out(report: MetricsReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    (out / "metrics.json").write_text(json.dumps(payload, indent=2))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "psnr", "ssim"])
        for row in report.per_view:
            w.writerow([row["view"], repr(row["psnr"]), repr(row["ssim"])])
        w.writerow(["mean", repr(report.psnr), repr(report.ssim)])
    print(json.dumps(payload))


def command_eval(args) -> int:
    out = Path(args.out)
    if args.image:
        a, b = read_rgb(args.image), read_rgb(args.reference)
        _report_out(evaluate_images([(0, a, b)]), out)
        return 0
    model, frame, Q, scale = _load_for_render(args.checkpoint)
    ds = load_dataset(args.data)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in args.views:
        if not 0 <= i < len(ds.views):
            raise InputError(f"view {i} not in dataset ({len(ds.views)} views)")
        v = ds.views[i]
        img, depth = render_view(model, frame, v.camera, Q, scale)
        write_rgb(out / f"render_{i:03d}.png", img)
        view_comparison(v.image, img, depth, out / f"compare_{i:03d}.png", title=f"view {i}")
        pairs.append((i, img, v.image))
    _report_out(evaluate_images(pairs), out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgfield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="ray-cast an analytic scene into an RGB-D dataset")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--depth-noise", type=_fraction, default=0.0)
    s.add_argument("--depth-scale", type=float, default=DEFAULT_DEPTH_SCALE)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=command_synth)

    t = sub.add_parser("train", help="fit a model to the selected training views")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--views", type=_indices)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--timing", action="store_true", help="record wall_ms (makes metrics.csv run-dependent)")
    t.set_defaults(func=command_train)

    r = sub.add_parser("render", help="render camera poses from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=command_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of rendered views against the dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--views", type=_indices)
    e.add_argument("--image", help="compare this PNG with --reference instead of rendering")
    e.add_argument("--reference")
    e.add_argument("--out", required=True)
    e.set_defaults(func=command_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval":
        if args.image or args.reference:
            if not (args.image and args.reference):
                parser.error("--image and --reference go together")
        elif not (args.checkpoint and args.data and args.views):
            parser.error("eval needs --checkpoint, --data and --views (or --image/--reference)")
    try:
        return args.func(args)
    except (DGFieldError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"dgfield {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
