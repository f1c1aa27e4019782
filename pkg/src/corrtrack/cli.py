"""Command line front end.

Six subcommands: synth, chain-flows, track, eval, train-refiner, render.
Every option resolves as: explicit flag > --config JSON file > built-in
default, and the resolved values are echoed into the output metadata so
a result always records how it was produced. Outputs are deterministic:
the same command on the same inputs writes byte-identical files.

Failures print a single JSON object to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import core, flowchain, matching, metrics, micronet, render, synthgen
from .core import CorrtrackError, Point, ValidationError

DEFAULTS: dict[str, dict] = {
    "synth": {
        "kind": "tracking",
        "scenes": 1,
        "frames": 8,
        "channels": None,
        "height": None,
        "width": None,
        "cell_size": None,
        "drift_rate": None,
        "noise_sigma": None,
        "onset_frame": None,
        "seed": 0,
    },
    "chain-flows": {
        "stride": 4,
        "query_frame": 0,
        "cyc_thresh": 1.5,
        "reject_dist": 2.0,
        "scale_thresholds": True,
        "long_range_filter": False,
    },
    "track": {
        "stride": 4,
        "window_radius": 35.0,
        "occlusion_threshold": 0.6,
        "segment_length": None,
        "image_height": None,
        "image_width": None,
    },
    "eval": {
        "rescale_to_256": False,
        "video": "video",
    },
    "train-refiner": {
        "epochs": 10,
        "seed": 0,
        "lr": 1e-3,
        "weight_decay": 1e-2,
        "loss_weight": 8.0,
        "pairs_per_step": 64,
        "fg_ratio": 0.5,
        "window_radius": 2.0,
        "max_pair_error": None,
        "propagate_into_backbone": True,
        "train_backbone": True,
    },
    "render": {
        "overlays": True,
    },
}


def _resolve(args: argparse.Namespace, command: str) -> dict:
    """Merge flag > config file > default for every knob of a command."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS[command])
        if unknown:
            raise ValidationError(f"config keys not understood by {command}: {sorted(unknown)}")
    resolved = {}
    for name, default in DEFAULTS[command].items():
        cli_val = getattr(args, name, None)
        if cli_val is not None:
            resolved[name] = cli_val
        elif name in file_cfg:
            resolved[name] = file_cfg[name]
        else:
            resolved[name] = default
    return resolved


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _meta(command: str, resolved: dict) -> dict:
    return {"command": command, "config": resolved}


def _load_queries(path) -> tuple[int, int, list[tuple[Point, int]]]:
    """Query file: {"height": H, "width": W, "queries": [{"x","y","frame"}]}."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise core.FormatError(f"queries file is not valid JSON: {exc}") from exc
    try:
        height = int(obj["height"])
        width = int(obj["width"])
        queries = [(Point(float(q["x"]), float(q["y"])), int(q["frame"])) for q in obj["queries"]]
    except (KeyError, TypeError) as exc:
        raise core.FormatError(f"queries file is missing {exc}") from exc
    if not queries:
        raise ValidationError("queries file holds no queries")
    return height, width, queries


def cmd_synth(args: argparse.Namespace) -> int:
    res = _resolve(args, "synth")
    corruption = None
    if any(res[k] is not None for k in ("drift_rate", "noise_sigma", "onset_frame")):
        corruption = synthgen.CorruptionSpec(
            drift_rate=res["drift_rate"] if res["drift_rate"] is not None else 0.25,
            noise_sigma=res["noise_sigma"] if res["noise_sigma"] is not None else 0.1,
            onset_frame=res["onset_frame"] if res["onset_frame"] is not None else 1,
        )
    items = synthgen.make_benchmark(
        res["scenes"],
        seed=res["seed"],
        kind=res["kind"],
        channels=res["channels"],
        height=res["height"],
        width=res["width"],
        num_frames=res["frames"],
        cell_size=res["cell_size"],
        corruption=corruption,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "meta.json", _meta("synth", res))
    for idx, item in enumerate(items):
        scene_dir = out / f"scene_{idx:03d}"
        scene_dir.mkdir(exist_ok=True)
        bundle = item.bundle
        _write_json(
            scene_dir / "scene.json",
            {
                "name": bundle.name,
                "cell_size": item.cell_size,
                "fg_area_per_frame": [float(a) for a in bundle.fg_area_per_frame],
                "spec": bundle.spec.to_dict(),
            },
        )
        core.write_feature_volume(scene_dir / "features.t4gf", item.features)
        if item.corrupted is not None:
            core.write_feature_volume(scene_dir / "corrupted.t4gf", item.corrupted)
        core.write_flows(scene_dir / "flows.t4gw", bundle.flows)
        core.write_tracks(scene_dir / "gt_tracks.json", bundle.tracks, meta=_meta("synth", res))
        np.save(scene_dir / "masks.npy", bundle.masks)
    print(f"wrote {len(items)} scene(s) to {out}")
    return 0


def cmd_chain_flows(args: argparse.Namespace) -> int:
    res = _resolve(args, "chain-flows")
    flows = core.read_flows(args.flows)
    if args.queries:
        height, width, queries = _load_queries(args.queries)
        if (height, width) != (flows.height, flows.width):
            raise ValidationError(
                f"queries canvas {(height, width)} does not match flows {(flows.height, flows.width)}"
            )
        seeds = [flowchain.Seed(p, f) for p, f in queries]
    else:
        seeds = flowchain.seeds_from_grid(
            flows.height, flows.width, res["stride"], query_frame=res["query_frame"]
        )
    tracks = flowchain.chain_tracks(
        flows,
        seeds,
        cyc_fwd_thresh=res["cyc_thresh"],
        reject_dist=res["reject_dist"],
        scale_thresholds=res["scale_thresholds"],
        apply_long_range_filter=res["long_range_filter"],
    )
    core.write_tracks(args.out, tracks, meta=_meta("chain-flows", res))
    print(f"chained {len(tracks.tracks)} track(s) to {args.out}")
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    res = _resolve(args, "track")
    vol = core.read_feature_volume(args.features)
    if args.checkpoint:
        model = micronet.load_checkpoint(args.checkpoint)
        vol = micronet.apply_refiner(model, vol)
    image_size = None
    if res["image_height"] is not None or res["image_width"] is not None:
        if res["image_height"] is None or res["image_width"] is None:
            raise ValidationError("image_height and image_width must be given together")
        image_size = (res["image_height"], res["image_width"])
    if args.queries:
        height, width, queries = _load_queries(args.queries)
        expect = image_size or (vol.grid_height, vol.grid_width)
        if (height, width) != tuple(expect):
            raise ValidationError(f"queries canvas {(height, width)} does not match {tuple(expect)}")
    else:
        h_px, w_px = image_size or (vol.grid_height, vol.grid_width)
        queries = [
            (s.point, s.frame) for s in flowchain.seeds_from_grid(h_px, w_px, res["stride"])
        ]
    cfg = matching.MatchConfig(
        window_radius=res["window_radius"], occlusion_threshold=res["occlusion_threshold"]
    )
    if res["segment_length"] is not None:
        tracks = matching.track_zero_shot_segmented(vol, queries, cfg, res["segment_length"], image_size)
    else:
        tracks = matching.track_zero_shot(vol, queries, cfg, image_size)
    core.write_tracks(args.out, tracks, meta=_meta("track", res))
    print(f"tracked {len(tracks.tracks)} quer(ies) to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    res = _resolve(args, "eval")
    pred = core.read_tracks(args.pred)
    gt = core.read_tracks(args.gt)
    areas = None
    if args.scene:
        with open(args.scene, "r", encoding="utf-8") as fh:
            scene = json.load(fh)
        areas = np.asarray(scene["fg_area_per_frame"], dtype=np.float64)
    cfg = metrics.EvalConfig(rescale_to_256=res["rescale_to_256"])
    report = metrics.evaluate(pred, gt, cfg, fg_area_per_frame=areas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(meta=_meta("eval", res)), encoding="utf-8")
    (out / "summary.csv").write_text(
        report.csv_header() + "\n" + report.csv_row(res["video"]) + "\n", encoding="utf-8"
    )
    render.render_metrics(report, out / "metrics.png", title=res["video"])
    print(f"delta_avg={report.delta_avg:.4f} OA={report.occlusion_accuracy:.4f} AJ={report.average_jaccard:.4f}")
    return 0


def cmd_train_refiner(args: argparse.Namespace) -> int:
    res = _resolve(args, "train-refiner")
    data = Path(args.data)
    scene_dirs = sorted(d for d in data.iterdir() if d.is_dir() and d.name.startswith("scene_"))
    if not scene_dirs:
        raise ValidationError(f"no scene_* directories under {data}")
    items = []
    for d in scene_dirs:
        corrupted = d / "corrupted.t4gf"
        if not corrupted.exists():
            raise ValidationError(f"{d} has no corrupted features; synth with kind=training")
        items.append(
            micronet.TrainItem(
                noisy=core.read_feature_volume(corrupted),
                clean=core.read_feature_volume(d / "features.t4gf"),
                tracks=core.read_tracks(d / "gt_tracks.json"),
                masks=np.load(d / "masks.npy"),
            )
        )
    cfg = micronet.TrainConfig(
        lr=res["lr"],
        weight_decay=res["weight_decay"],
        propagate_into_backbone=res["propagate_into_backbone"],
        train_backbone=res["train_backbone"],
        match=matching.MatchConfig(window_radius=res["window_radius"]),
        loss=micronet.LossConfig(
            loss_weight=res["loss_weight"],
            pairs_per_step=res["pairs_per_step"],
            fg_ratio=res["fg_ratio"],
            max_pair_error=res["max_pair_error"],
        ),
    )
    model, log = micronet.train_refiner(items, epochs=res["epochs"], seed=res["seed"], cfg=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "meta.json", _meta("train-refiner", res))
    micronet.save_checkpoint(out / "checkpoint.t4gc", model)
    (out / "loss.csv").write_text(micronet.loss_log_to_csv(log), encoding="utf-8")
    render.render_loss_curves(log, out / "loss_curve.png")
    last = log[-1] if log else {"loss_diff": float("nan"), "loss_corr": float("nan")}
    print(f"trained {len(log)} step(s); final loss_diff={last['loss_diff']:.6f} loss_corr={last['loss_corr']:.6f}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    res = _resolve(args, "render")
    tracks = core.read_tracks(args.tracks)
    features = core.read_feature_volume(args.features) if args.features else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "meta.json", _meta("render", res))
    written = 1
    if res["overlays"]:
        written += len(render.render_track_overlays(tracks, out, features=features))
    render.render_trajectories(tracks, out / "trajectories.svg")
    print(f"rendered {written} figure(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file with defaults for this command")

    p = sub.add_parser("synth", help="generate synthetic scenes with features, flows and ground truth")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=["tracking", "training"])
    p.add_argument("--scenes", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--cell-size", type=int, dest="cell_size")
    p.add_argument("--drift-rate", type=float, dest="drift_rate")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--onset-frame", type=int, dest="onset_frame")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("chain-flows", help="chain flow fields into tracks with cycle checks")
    common(p)
    p.add_argument("--flows", required=True)
    p.add_argument("--queries", help="queries JSON; omit to seed a grid")
    p.add_argument("--out", required=True, help="output tracks JSON")
    p.add_argument("--stride", type=int)
    p.add_argument("--query-frame", type=int, dest="query_frame")
    p.add_argument("--cyc-thresh", type=float, dest="cyc_thresh")
    p.add_argument("--reject-dist", type=float, dest="reject_dist")
    p.add_argument("--scale-thresholds", action=argparse.BooleanOptionalAction, dest="scale_thresholds")
    p.add_argument("--long-range-filter", action=argparse.BooleanOptionalAction, dest="long_range_filter")
    p.set_defaults(func=cmd_chain_flows)

    p = sub.add_parser("track", help="zero-shot feature tracking from a feature volume")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--queries", help="queries JSON; omit to seed a grid")
    p.add_argument("--out", required=True, help="output tracks JSON")
    p.add_argument("--checkpoint", help="refiner checkpoint applied to the features first")
    p.add_argument("--stride", type=int)
    p.add_argument("--window-radius", type=float, dest="window_radius")
    p.add_argument("--occlusion-threshold", type=float, dest="occlusion_threshold")
    p.add_argument("--segment-length", type=int, dest="segment_length")
    p.add_argument("--image-height", type=int, dest="image_height")
    p.add_argument("--image-width", type=int, dest="image_width")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted tracks against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scene", help="scene.json for foreground areas (segment-scaled accuracy)")
    p.add_argument("--rescale-to-256", action=argparse.BooleanOptionalAction, dest="rescale_to_256")
    p.add_argument("--video")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-refiner", help="train the refiner splice on a training dataset")
    common(p)
    p.add_argument("--data", required=True, help="synth output directory (kind=training)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--loss-weight", type=float, dest="loss_weight")
    p.add_argument("--pairs-per-step", type=int, dest="pairs_per_step")
    p.add_argument("--fg-ratio", type=float, dest="fg_ratio")
    p.add_argument("--window-radius", type=float, dest="window_radius")
    p.add_argument("--max-pair-error", type=float, dest="max_pair_error")
    p.add_argument(
        "--propagate-into-backbone", action=argparse.BooleanOptionalAction, dest="propagate_into_backbone"
    )
    p.add_argument("--train-backbone", action=argparse.BooleanOptionalAction, dest="train_backbone")
    p.set_defaults(func=cmd_train_refiner)

    p = sub.add_parser("render", help="draw tracks as per-frame overlays and a trajectory plot")
    common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--features", help="feature volume drawn as the backdrop")
    p.add_argument("--overlays", action=argparse.BooleanOptionalAction)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorrtrackError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
