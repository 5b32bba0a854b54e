"""Command-line frontend for the full pipeline.

Subcommands: synth (generate synthetic data), curate (fuse, filter,
extract negatives, split), flow (estimate and normalize optical flow),
train, eval, and segment.  Option precedence is flags > config file >
defaults; a config file holds key=value lines using the long flag names.
Every run writes its fully resolved configuration (run_config.json,
no timestamps) next to its outputs, so identical inputs and seed yield
byte-identical results.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import (
    NEGATIVE_LABEL,
    Annotation,
    Manifest,
    StrokeSegment,
    SynthClass,
    SynthSpec,
    assemble_window_arrays,
    compute_stats,
    derive_segments,
    extract_windows,
    generate_synthetic_dataset,
    split_dataset,
)
from .flow import FlowField, NormalizationMethod, flow_for_video, normalize_flow
from .model import ModelConfig, build_model, load_model, save_model
from .tensor import ShapeError, read_tensor, write_tensor
from .training import SgdConfig, SplitArrays, evaluate, train, vote_over_windows

DEFAULTS = {
    "seed": 0,
    "threads": 0,  # 0 = no cap
    "variant": "twin",
    "attention": "on",
    "window": 100,
    "stride": 50,
    "spatial": None,  # inferred from the first video when absent
    "filters": (30, 60, 80),
    "fc_size": 500,
    "lr": 0.01,
    "momentum": 0.9,
    "batch": 8,
    "epochs": 10,
    "norm": "normal",
    "estimator": "block",
    "block": 8,
    "radius": 4,
    "split": "val",
    "fractions": (0.7, 0.2, 0.1),
    "min_duration": 50,
}


def _parse_spatial(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"spatial must look like 120x120, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _parse_on_off(text: str) -> str:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text


# converters applied to config-file values; keys use flag spelling
_CONVERTERS = {
    "manifest": str,
    "out": str,
    "seed": int,
    "threads": int,
    "variant": str,
    "attention": _parse_on_off,
    "window": int,
    "stride": int,
    "spatial": _parse_spatial,
    "filters": _parse_int_tuple,
    "fc-size": int,
    "lr": float,
    "momentum": float,
    "batch": int,
    "epochs": int,
    "norm": str,
    "estimator": str,
    "block": int,
    "radius": int,
    "split": str,
    "fractions": _parse_float_tuple,
    "min-duration": int,
    "flow-dir": str,
    "checkpoint": str,
    "video": str,
    "spec": str,
}

_CHOICES = {
    "variant": ("rgb", "flow", "twin", "late"),
    "norm": ("normal", "max"),
    "estimator": ("block", "precomputed"),
    "split": ("train", "val", "test"),
}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse key=value lines; # starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


class _Resolver:
    """Precedence: command-line flag > config file > default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_values = read_config_file(args.config) if args.config else {}
        self.resolved: dict = {}

    def get(self, key: str, default=None):
        attr = key.replace("-", "_")
        value = getattr(self.args, attr, None)
        if value is None and key in self.file_values:
            value = _CONVERTERS[key](self.file_values[key])
        if value is None:
            value = default
        if key in _CHOICES and value is not None and value not in _CHOICES[key]:
            raise ValueError(f"{key} must be one of {_CHOICES[key]}, got {value!r}")
        self.resolved[key] = value
        return value

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ValueError(f"missing required option --{key}")
        return value

    def dump(self, out_dir: Path, command: str) -> None:
        doc = {"command": command}
        for key, value in sorted(self.resolved.items()):
            doc[key] = list(value) if isinstance(value, tuple) else value
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n"
        )


@contextlib.contextmanager
def _thread_cap(threads: int):
    if threads and threads > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            yield
    else:
        yield


def _class_names(manifest: Manifest) -> list[str]:
    """Deterministic label order: sorted, with the negative class last."""
    labels = sorted({a.label for a in manifest.annotations})
    if NEGATIVE_LABEL in labels:
        labels.remove(NEGATIVE_LABEL)
        labels.append(NEGATIVE_LABEL)
    return labels


def _segments_from_curated(manifest: Manifest) -> list[StrokeSegment]:
    """Curated manifests store one annotation per final segment."""
    segments = []
    for a in manifest.annotations:
        source = "negative" if a.label == NEGATIVE_LABEL else "annotated"
        segments.append(
            StrokeSegment(a.video_id, a.start_frame, a.end_frame, a.label, source)
        )
    return segments


def _load_videos(manifest: Manifest, base: Path, ids: set[str]) -> dict[str, np.ndarray]:
    return {
        v.video_id: read_tensor(base / v.path)
        for v in manifest.videos
        if v.video_id in ids
    }


def _load_flows(flow_dir: Path, ids: set[str]) -> dict[str, np.ndarray]:
    flows = {}
    for video_id in sorted(ids):
        path = flow_dir / f"{video_id}.tt3d"
        if not path.exists():
            raise FileNotFoundError(
                f"no flow tensor for video {video_id!r} at {path}; run the flow command"
            )
        flows[video_id] = read_tensor(path)
    return flows


def _split_arrays(
    manifest: Manifest,
    split: str,
    base: Path,
    window: int,
    label_index: dict[str, int],
    need_flow: bool,
    flow_dir: Path,
    norm: NormalizationMethod | None,
) -> SplitArrays:
    segments = [
        s for s in _segments_from_curated(manifest) if manifest.splits.get(s.key) == split
    ]
    if not segments:
        raise ValueError(f"split {split!r} has no segments; curate the manifest first")
    windows = []
    for seg in segments:
        windows.extend(
            extract_windows(
                seg, window, video_frames=manifest.video_by_id(seg.video_id).frames
            )
        )
    ids = {w.video_id for w in windows}
    videos = _load_videos(manifest, base, ids)
    flows = _load_flows(flow_dir, ids) if need_flow else None
    rgb, flow, labels = assemble_window_arrays(windows, videos, flows, label_index, norm)
    return SplitArrays(rgb=rgb, flow=flow, labels=labels)


def _model_config(res: _Resolver, manifest: Manifest, base: Path, n_classes: int) -> ModelConfig:
    spatial = res.get("spatial", DEFAULTS["spatial"])
    if spatial is None:
        first = read_tensor(base / manifest.videos[0].path)
        spatial = (int(first.shape[2]), int(first.shape[3]))
        res.resolved["spatial"] = spatial
    return ModelConfig(
        variant=res.get("variant", DEFAULTS["variant"]),
        attention=res.get("attention", DEFAULTS["attention"]) == "on",
        window_frames=res.get("window", DEFAULTS["window"]),
        spatial=spatial,
        filters=res.get("filters", DEFAULTS["filters"]),
        fc_size=res.get("fc-size", DEFAULTS["fc_size"]),
        n_classes=n_classes,
    )


def _classes_path(checkpoint: str | Path) -> Path:
    return Path(f"{checkpoint}.classes.json")


def _copy_params(dst, src) -> None:
    src_params = dict(src.named_parameters())
    src_params.update(src.named_buffers())
    for name, arr in list(dst.named_parameters()) + list(dst.named_buffers()):
        arr[...] = src_params[name]


# ---------------------------------------------------------------- commands


def cmd_synth(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    spec_path = res.require("spec")
    out = Path(res.require("out"))
    seed = res.get("seed", DEFAULTS["seed"])

    doc = json.loads(Path(spec_path).read_text())
    classes = tuple(
        SynthClass(c["name"], tuple(float(v) for v in c["velocity"]))
        for c in doc.get("classes", ())
    )
    kwargs = {k: v for k, v in doc.items() if k != "classes"}
    spec = SynthSpec(classes=classes, **kwargs)

    manifest = generate_synthetic_dataset(spec, out, seed=seed)
    res.dump(out, "synth")
    print(
        f"wrote {len(manifest.videos)} videos, "
        f"{len(manifest.annotations)} annotations to {out}"
    )
    return 0


def cmd_curate(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    manifest_path = Path(res.require("manifest"))
    out = Path(res.require("out"))
    seed = res.get("seed", DEFAULTS["seed"])
    window = res.get("window", DEFAULTS["window"])
    fractions = res.get("fractions", DEFAULTS["fractions"])

    manifest = Manifest.load(manifest_path)
    segments = derive_segments(manifest, window_frames=window)
    if not segments:
        raise ValueError("curation produced no segments")
    splits = split_dataset(segments, fractions, seed=seed)

    # keep video paths resolvable from the curated manifest's directory
    out.mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent.resolve()
    videos = [
        replace(v, path=os.path.relpath(base / v.path, out.resolve()))
        for v in manifest.videos
    ]
    curated = Manifest(
        fps=manifest.fps,
        videos=videos,
        annotations=[
            Annotation(s.video_id, s.start_frame, s.end_frame, s.label, "curated")
            for s in segments
        ],
        splits=splits,
    )
    curated.save(out / "manifest.json")

    order = sorted({s.label for s in segments} - {NEGATIVE_LABEL}) + [NEGATIVE_LABEL]
    order = [label for label in order if any(s.label == label for s in segments)]
    stats = compute_stats(segments, splits, class_order=order)
    (out / "stats.txt").write_text(stats.to_text())
    (out / "stats.csv").write_text(stats.to_csv())
    res.dump(out, "curate")
    print(stats.to_text(), end="")
    return 0


def cmd_flow(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    manifest_path = Path(res.require("manifest"))
    out = Path(res.require("out"))
    estimator = res.get("estimator", DEFAULTS["estimator"])
    norm_kind = res.get("norm", DEFAULTS["norm"])
    block = res.get("block", DEFAULTS["block"])
    radius = res.get("radius", DEFAULTS["radius"])

    manifest = Manifest.load(manifest_path)
    base = manifest_path.parent
    method = NormalizationMethod(kind=norm_kind)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    for video in manifest.videos:
        if estimator == "block":
            rgb = read_tensor(base / video.path)
            gray = rgb.mean(axis=0)
            field = flow_for_video(gray, block=block, search_radius=radius)
        else:
            field = FlowField(read_tensor(base / "flow" / f"{video.video_id}.tt3d"))
        # the whole video is the normalization unit here; training
        # normalizes per window from raw flow instead
        normalized, degenerate = normalize_flow(field, method)
        write_tensor(out / "flow" / f"{video.video_id}.tt3d", normalized.data)
        print(f"{video.video_id}: {field.n_pairs} pairs, degenerate={degenerate}")
    res.dump(out, "flow")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    manifest_path = Path(res.require("manifest"))
    out = Path(res.require("out"))
    seed = res.get("seed", DEFAULTS["seed"])
    window = res.get("window", DEFAULTS["window"])
    norm_kind = res.get("norm", DEFAULTS["norm"])
    flow_dir = res.get("flow-dir")

    manifest = Manifest.load(manifest_path)
    if not manifest.splits:
        raise ValueError("manifest has no splits; run the curate command first")
    base = manifest_path.parent
    classes = _class_names(manifest)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, found {classes}")
    label_index = {label: i for i, label in enumerate(classes)}

    config = _model_config(res, manifest, base, n_classes=len(classes))
    sgd = SgdConfig(
        learning_rate=res.get("lr", DEFAULTS["lr"]),
        momentum=res.get("momentum", DEFAULTS["momentum"]),
        batch_size=res.get("batch", DEFAULTS["batch"]),
        max_epochs=res.get("epochs", DEFAULTS["epochs"]),
        seed=seed,
    )
    need_flow = config.variant != "rgb"
    flow_base = Path(flow_dir) if flow_dir else base / "flow"
    norm = NormalizationMethod(kind=norm_kind) if need_flow else None

    train_data = _split_arrays(
        manifest, "train", base, window, label_index, need_flow, flow_base, norm
    )
    val_data = _split_arrays(
        manifest, "val", base, window, label_index, need_flow, flow_base, norm
    )

    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, seed=seed)
    ckpt = out / "model.ckpt"
    if config.variant == "late":
        # the two streams are trained independently and fused post hoc
        for name, sub in (("rgb", model.rgb_model), ("flow", model.flow_model)):
            state = train(
                sub,
                train_data,
                val_data,
                sgd,
                checkpoint_path=out / f"{name}.ckpt",
                log_path=out / f"train_log_{name}.csv",
            )
            _copy_params(sub, load_model(out / f"{name}.ckpt"))
            print(f"{name} stream: best val {state.best_val_acc:.4f} "
                  f"at epoch {state.best_epoch}")
        save_model(ckpt, model)
        fused_acc, _ = evaluate(model, val_data, batch_size=sgd.batch_size)
        print(f"late fusion val accuracy {fused_acc:.4f}")
    else:
        state = train(
            model,
            train_data,
            val_data,
            sgd,
            checkpoint_path=ckpt,
            log_path=out / "train_log.csv",
        )
        print(
            f"trained {state.epoch} epochs; best val {state.best_val_acc:.4f} "
            f"at epoch {state.best_epoch}"
        )
    _classes_path(ckpt).write_text(json.dumps({"classes": classes}, indent=2) + "\n")
    res.dump(out, "train")
    return 0


def _load_model_and_classes(checkpoint: str | Path) -> tuple[object, list[str]]:
    model = load_model(checkpoint)
    classes_file = _classes_path(checkpoint)
    if not classes_file.exists():
        raise FileNotFoundError(f"missing class list {classes_file}")
    classes = json.loads(classes_file.read_text())["classes"]
    if len(classes) != model.config.n_classes:
        raise ValueError(
            f"checkpoint expects {model.config.n_classes} classes, "
            f"class list has {len(classes)}"
        )
    return model, classes


def cmd_eval(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    checkpoint = res.require("checkpoint")
    manifest_path = Path(res.require("manifest"))
    out = Path(res.require("out"))
    split = res.get("split", DEFAULTS["split"])
    norm_kind = res.get("norm", DEFAULTS["norm"])
    flow_dir = res.get("flow-dir")

    model, classes = _load_model_and_classes(checkpoint)
    manifest = Manifest.load(manifest_path)
    base = manifest_path.parent
    label_index = {label: i for i, label in enumerate(classes)}
    need_flow = model.config.variant != "rgb"
    flow_base = Path(flow_dir) if flow_dir else base / "flow"
    norm = NormalizationMethod(kind=norm_kind) if need_flow else None

    data = _split_arrays(
        manifest, split, base, model.config.window_frames,
        label_index, need_flow, flow_base, norm,
    )
    accuracy, cm = evaluate(model, data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion_raw.csv").write_text(cm.to_csv(class_names=classes))
    (out / "confusion_normalized.csv").write_text(
        cm.to_csv(normalized=True, class_names=classes)
    )
    res.dump(out, "eval")
    print(f"{split} accuracy {accuracy:.4f} over {cm.total} windows")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    res = _Resolver(args)
    checkpoint = res.require("checkpoint")
    manifest_path = Path(res.require("manifest"))
    video_id = res.require("video")
    out = Path(res.require("out"))
    window = res.get("window", DEFAULTS["window"])
    stride = res.get("stride", DEFAULTS["stride"])
    min_duration = res.get("min-duration", DEFAULTS["min_duration"])
    norm_kind = res.get("norm", DEFAULTS["norm"])
    flow_dir = res.get("flow-dir")

    model, classes = _load_model_and_classes(checkpoint)
    manifest = Manifest.load(manifest_path)
    base = manifest_path.parent
    video = manifest.video_by_id(video_id)
    rgb = read_tensor(base / video.path)

    need_flow = model.config.variant != "rgb"
    flow_field = None
    norm = None
    if need_flow:
        flow_base = Path(flow_dir) if flow_dir else base / "flow"
        flow_field = _load_flows(flow_base, {video_id})[video_id]
        norm = NormalizationMethod(kind=norm_kind)

    frames, segments = vote_over_windows(
        model, rgb, flow_field, window, stride,
        min_duration=min_duration, norm=norm,
    )
    out.mkdir(parents=True, exist_ok=True)
    lines = ["start,end,class"]
    for start, end, cls in segments:
        lines.append(f"{start},{end},{classes[cls]}")
    (out / "segments.csv").write_text("\n".join(lines) + "\n")
    res.dump(out, "segment")
    for start, end, cls in segments:
        print(f"[{start:6d}, {end:6d}) {classes[cls]}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostream3d",
        description="Two-stream 3D convnet pipeline: synthesize, curate, "
        "compute flow, train, evaluate, segment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--spec", help="JSON synthetic-dataset description")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="fuse, filter, extract negatives, split")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--window", type=int)
    p.add_argument("--fractions", type=_parse_float_tuple)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("flow", help="estimate and normalize optical flow")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--norm", choices=_CHOICES["norm"])
    p.add_argument("--estimator", choices=_CHOICES["estimator"])
    p.add_argument("--block", type=int)
    p.add_argument("--radius", type=int)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--variant", choices=_CHOICES["variant"])
    p.add_argument("--attention", type=_parse_on_off)
    p.add_argument("--window", type=int)
    p.add_argument("--spatial", type=_parse_spatial, help="HxW, e.g. 120x120")
    p.add_argument("--filters", type=_parse_int_tuple)
    p.add_argument("--fc-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--norm", choices=_CHOICES["norm"])
    p.add_argument("--flow-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrices")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=_CHOICES["split"])
    p.add_argument("--norm", choices=_CHOICES["norm"])
    p.add_argument("--flow-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="window-vote segmentation of one video")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--video", help="video id from the manifest")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--min-duration", type=int)
    p.add_argument("--norm", choices=_CHOICES["norm"])
    p.add_argument("--flow-dir")
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    threads = args.threads if args.threads is not None else 0
    try:
        with _thread_cap(threads):
            return args.func(args)
    except (ValueError, ShapeError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary between exit codes
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
