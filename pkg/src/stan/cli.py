"""Command-line entry point covering the whole workflow.

Subcommands: datagen, segment, extract, train, eval, gradcheck, report.
Settings resolve as defaults < --config JSON file (flat keys named like the
flags) < explicit flags. All randomness stems from --seed. Outputs under
--out are a pure function of inputs and seed, so reruns are idempotent.
"""

import argparse
import json
import os
import sys

import numpy as np

from .datagen import SyntheticSpec, generate_dataset
from .encoders import FeatureStore, encode_spatial, encode_temporal
from .errors import StanError
from .gradcheck import run_suite
from .metrics import MetricsReport
from .model import Model, ModelConfig, load_checkpoint
from .scenes import CutDetectorConfig, PipelineConfig, detect_scenes, load_source, segment_video
from .training import TrainConfig, evaluate, fit, load_dataset, read_vocab

MODEL_KEYS = {
    "d_model", "n_heads", "n_layers", "lambda", "max_scenes", "mode", "fusion",
    "ffn_hidden", "streams", "use_positional", "classifier_gate", "q_hidden",
    "distill_temperature", "distill_alpha", "d_spatial", "d_temporal",
    "spatial_channels", "temporal_channels",
}
TRAIN_KEYS = {
    "lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs", "seed",
    "grad_clip", "eval_every", "subsample",
}
PIPE_KEYS = {"window", "threshold", "min_scene_len", "frames_per_scene", "low_res", "high_res"}


def _load_config_file(path, parser):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config {path}: {exc}")
    if not isinstance(cfg, dict):
        parser.error(f"--config {path}: expected a JSON object")
    unknown = set(cfg) - MODEL_KEYS - TRAIN_KEYS - PIPE_KEYS
    if unknown:
        parser.error(f"--config {path}: unknown keys {sorted(unknown)}")
    return cfg


def _merged(args, parser):
    """Flat settings dict honoring defaults < config file < flags."""
    merged = _load_config_file(getattr(args, "config", None), parser)
    for flag, key in (
        ("seed", "seed"), ("mode", "mode"), ("fusion", "fusion"), ("lam", "lambda"),
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
        ("subsample", "subsample"), ("streams", "streams"), ("d_model", "d_model"),
        ("low_res", "low_res"), ("high_res", "high_res"), ("eval_every", "eval_every"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            merged[key] = v
    return merged


def _pipeline_config(merged):
    det = CutDetectorConfig(
        window=int(merged.get("window", 12)),
        threshold=float(merged.get("threshold", 0.08)),
        min_scene_len=int(merged.get("min_scene_len", 12)),
    )
    return PipelineConfig(
        detector=det,
        frames_per_scene=int(merged.get("frames_per_scene", 12)),
        low_res=int(merged.get("low_res", 64)),
        high_res=int(merged.get("high_res", 128)),
    )


def _model_config(merged, n_classes, pipeline, feature_input=False):
    kw = {}
    for key in MODEL_KEYS & set(merged):
        kw["lam" if key == "lambda" else key] = merged[key]
    kw["feature_input"] = feature_input
    kw["clip_len"] = pipeline.frames_per_scene
    return ModelConfig(n_classes=n_classes, **kw)


def _train_config(merged):
    kw = {}
    for key in TRAIN_KEYS & set(merged):
        kw["eps" if key == "adam_eps" else key] = merged[key]
    return TrainConfig(**kw)


def _add_common(sp, out_required=True):
    sp.add_argument("--config", help="JSON file with flat config keys (flags win)")
    sp.add_argument("--seed", type=int, default=None, help="master random seed")
    sp.add_argument("--out", required=out_required, help="output directory")
    sp.add_argument("--workers", type=int, default=1,
                    help="worker-thread cap (current pipeline runs single-threaded)")


def build_parser():
    parser = argparse.ArgumentParser(prog="stan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    dg = sub.add_parser("datagen", help="generate a labeled synthetic video dataset")
    _add_common(dg)
    dg.add_argument("--classes", type=int, default=4, help="number of classes (2, 4 or 6)")
    dg.add_argument("--samples", type=int, default=64, help="number of videos")
    dg.add_argument("--resolution", type=int, default=64, help="square frame size in pixels")
    dg.add_argument("--scenes", type=int, nargs=2, default=[4, 6], metavar=("LO", "HI"),
                    help="scenes-per-video range")
    dg.add_argument("--frames", type=int, nargs=2, default=[12, 24], metavar=("LO", "HI"),
                    help="frames-per-scene range")
    dg.add_argument("--format", choices=["png", "ppm", "raw"], default="png",
                    help="frame storage format")

    sg = sub.add_parser("segment", help="emit scene boundaries as JSON lines")
    _add_common(sg, out_required=False)
    sg.add_argument("--data", required=True, help="dataset manifest (JSON lines)")

    ex = sub.add_parser("extract", help="export per-scene features to a FeatureStore")
    _add_common(ex, out_required=False)
    ex.add_argument("--data", required=True, help="dataset manifest")
    ex.add_argument("--features", required=True, help="output store prefix")
    ex.add_argument("--ckpt", help="checkpoint to take encoder weights from")
    ex.add_argument("--streams", default="both", choices=["both", "spatial", "temporal"])
    ex.add_argument("--low-res", dest="low_res", type=int, default=None)
    ex.add_argument("--high-res", dest="high_res", type=int, default=None)

    tr = sub.add_parser("train", help="fit the two-stream model")
    _add_common(tr)
    tr.add_argument("--data", required=True, help="training manifest")
    tr.add_argument("--val", help="validation manifest (defaults to training data)")
    tr.add_argument("--labels", help="label vocabulary JSON (default: labels.json beside --data)")
    tr.add_argument("--mode", choices=["small", "large"], default=None,
                    help="small freezes the temporal conv encoder")
    tr.add_argument("--fusion", choices=["sum", "gated", "distill"], default=None)
    tr.add_argument("--streams", choices=["both", "spatial", "temporal"], default=None,
                    help="stream ablation")
    tr.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="temporal-stream scale in sum fusion")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    tr.add_argument("--subsample", type=int, default=None,
                    help="train on a seeded random subset of N manifest entries")
    tr.add_argument("--features", help="store prefix; train on precomputed features")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--d-model", dest="d_model", type=int, default=None)
    tr.add_argument("--low-res", dest="low_res", type=int, default=None)
    tr.add_argument("--high-res", dest="high_res", type=int, default=None)
    tr.add_argument("--target-map", dest="target_map", type=float, default=None,
                    help="stop once validation weighted mAP reaches this value")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_common(ev, out_required=False)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--labels", help="label vocabulary JSON")
    ev.add_argument("--features", help="store prefix for feature input")
    ev.add_argument("--shuffle-scenes", dest="shuffle_scenes", type=int, default=None,
                    metavar="SEED", help="permute scene order per video before scoring")

    gc = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(gc, out_required=False)
    gc.add_argument("--coords", type=int, default=100,
                    help="coordinates sampled per parameter group")
    gc.add_argument("--fusion", choices=["sum", "gated", "distill"], default="sum")
    gc.add_argument("--tolerance", type=float, default=1e-4)

    rp = sub.add_parser("report", help="render a metrics JSON as an aligned table")
    rp.add_argument("--metrics", required=True, help="report JSON written by eval/train")

    return parser


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_datagen(args, parser):
    merged = _merged(args, parser)
    spec = SyntheticSpec(
        n_classes=args.classes,
        scenes_per_video=tuple(args.scenes),
        frames_per_scene=tuple(args.frames),
        resolution=args.resolution,
    )
    manifest = generate_dataset(spec, args.samples, int(merged.get("seed", 0)), args.out,
                                fmt=args.format)
    print(manifest)
    return 0


def _cmd_segment(args, parser):
    merged = _merged(args, parser)
    pipeline = _pipeline_config(merged)
    base = os.path.dirname(os.path.abspath(args.data))
    lines = []
    with open(args.data) as fh:
        entries = [json.loads(l) for l in fh if l.strip()]
    for entry in entries:
        source = entry["source"]
        if "features" in source:
            print(f"warning: {entry['video_id']}: feature source has no frames; skipped",
                  file=sys.stderr)
            continue
        src = {k: v if os.path.isabs(v) else os.path.join(base, v) for k, v in source.items()}
        video = load_source(src)
        for start, end in detect_scenes(video, pipeline.detector):
            lines.append(json.dumps(
                {"video_id": entry["video_id"], "start": int(start), "end": int(end)},
                sort_keys=True))
    text = "\n".join(lines) + ("\n" if lines else "")
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "boundaries.jsonl"), "w") as fh:
            fh.write(text)
    return 0


def _cmd_extract(args, parser):
    merged = _merged(args, parser)
    pipeline = _pipeline_config(merged)
    if args.ckpt:
        model, _, _ = load_checkpoint(args.ckpt)
        if model.config.feature_input:
            raise StanError("checkpoint has no conv encoders (feature_input model)")
    else:
        config = _model_config(merged, n_classes=2, pipeline=pipeline)
        model = Model(config, seed=int(merged.get("seed", 0)))
    cfg = model.config
    streams = ("spatial", "temporal") if args.streams == "both" else (args.streams,)
    store = FeatureStore()
    base = os.path.dirname(os.path.abspath(args.data))
    with open(args.data) as fh:
        entries = [json.loads(l) for l in fh if l.strip()]
    for entry in entries:
        src = {k: v if os.path.isabs(v) else os.path.join(base, v)
               for k, v in entry["source"].items()}
        video = load_source(src)
        for seg in segment_video(video, pipeline):
            if "spatial" in streams:
                vec = encode_spatial(model.params, "enc.s", seg.center_frame, cfg.spatial_channels)
                store.put(entry["video_id"], seg.scene_index, "spatial", vec.data)
            if "temporal" in streams:
                vec = encode_temporal(model.params, "enc.t", seg.clip, cfg.temporal_channels,
                                      cfg.clip_len)
                store.put(entry["video_id"], seg.scene_index, "temporal", vec.data)
    for path in store.save(args.features, streams=streams):
        print(path)
    return 0


def _cmd_train(args, parser):
    merged = _merged(args, parser)
    pipeline = _pipeline_config(merged)
    tcfg = _train_config(merged)
    vocab = read_vocab(args.data, args.labels)
    feature_prefix = args.features
    train_samples, _ = load_dataset(args.data, vocab, pipeline, feature_prefix)
    val_samples = None
    if args.val:
        val_samples, _ = load_dataset(args.val, vocab, pipeline, feature_prefix)
    start_epoch = 0
    opt_state = None
    if args.resume:
        model, opt_state, epoch = load_checkpoint(args.resume)
        start_epoch = epoch + 1
    else:
        if feature_prefix is not None:
            store = FeatureStore.load(feature_prefix)
            merged["d_spatial"] = store.dim("spatial")
            merged["d_temporal"] = store.dim("temporal")
        config = _model_config(merged, len(vocab), pipeline, feature_input=feature_prefix is not None)
        model = Model(config, seed=tcfg.seed)
    history, best = fit(model, train_samples, val_samples, vocab, tcfg, args.out,
                        opt_state=opt_state, start_epoch=start_epoch, log_stream=sys.stdout,
                        target_map=args.target_map)
    print(best)
    return 0


def _cmd_eval(args, parser):
    merged = _merged(args, parser)
    pipeline = _pipeline_config(merged)
    model, _, _ = load_checkpoint(args.ckpt)
    vocab = read_vocab(args.data, args.labels)
    samples, _ = load_dataset(args.data, vocab, pipeline, args.features)
    report = evaluate(model, samples, vocab, shuffle_scenes_seed=args.shuffle_scenes)
    print(report.render_table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
    return 0


def _cmd_gradcheck(args, parser):
    merged = _merged(args, parser)
    results = run_suite(seed=int(merged.get("seed", 1)), n_coords=args.coords,
                        fusion=args.fusion)
    worst = 0.0
    for name, (err, n) in results.items():
        print(f"{name:24s} max_rel_err={err:.3e}  coords={n}")
        worst = max(worst, err)
    print(f"overall max_rel_err={worst:.3e} tolerance={args.tolerance:.0e}")
    return 0 if worst < args.tolerance else 1


def _cmd_report(args, parser):
    with open(args.metrics) as fh:
        d = json.load(fh)
    report = MetricsReport(
        class_names=[c["name"] for c in d["classes"]],
        per_class_ap=[c["ap"] for c in d["classes"]],
        supports=[c["support"] for c in d["classes"]],
        weighted_map=d["weighted_map"],
        p_w=d["p_w"],
        r_w=d["r_w"],
        f1_w=d["f1_w"],
        accuracy=d.get("accuracy"),
    )
    print(report.render_table())
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "segment": _cmd_segment,
    "extract": _cmd_extract,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return _COMMANDS[args.command](args, parser)
    except (StanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
