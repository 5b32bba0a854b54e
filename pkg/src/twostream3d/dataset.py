"""Dataset curation and synthesis.

Ingests annotation manifests and applies the curation pipeline: fusing
overlapping multi-annotator intervals, dropping label disagreements,
extracting negative (non-stroke) segments from stroke-dense videos,
placing fixed-length windows, computing per-class statistics, and
assigning stratified splits.  Also provides a deterministic synthetic
video generator (moving textured patch over a static background) used
for end-to-end tests of the full pipeline.

Frame intervals are half-open [start, end) throughout.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import ShapeError, write_tensor

NEGATIVE_LABEL = "Non stroke"
SPLIT_NAMES = ("train", "val", "test")
HANDEDNESS = ("left", "right")

_STROKE_NAMES = (
    "Defensive Backhand Backspin",
    "Defensive Backhand Block",
    "Defensive Backhand Push",
    "Defensive Forehand Backspin",
    "Defensive Forehand Block",
    "Defensive Forehand Push",
    "Offensive Backhand Flip",
    "Offensive Backhand Hit",
    "Offensive Backhand Loop",
    "Offensive Forehand Flip",
    "Offensive Forehand Hit",
    "Offensive Forehand Loop",
    "Serve Backhand Backspin",
    "Serve Backhand Loop",
    "Serve Backhand Sidespin",
    "Serve Backhand Topspin",
    "Serve Forehand Backspin",
    "Serve Forehand Loop",
    "Serve Forehand Sidespin",
    "Serve Forehand Topspin",
)


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class names plus an optional super-class per entry."""

    names: tuple[str, ...]
    super_classes: tuple[str | None, ...] = ()

    def __post_init__(self) -> None:
        names = tuple(self.names)
        supers = tuple(self.super_classes)
        if not supers:
            supers = (None,) * len(names)
        if len(names) == 0:
            raise ValueError("taxonomy needs at least one class")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(supers) != len(names):
            raise ValueError(
                f"super_classes has {len(supers)} entries for {len(names)} classes"
            )
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "super_classes", supers)

    @classmethod
    def table_tennis(cls) -> "ClassTaxonomy":
        """The 21-class stroke taxonomy: 20 strokes plus the negative class."""
        supers = tuple(
            "Forehand" if "Forehand" in n else "Backhand" for n in _STROKE_NAMES
        )
        return cls(names=_STROKE_NAMES + (NEGATIVE_LABEL,), super_classes=supers + (None,))

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown class {name!r}") from None

    def super_class(self, name: str) -> str | None:
        return self.super_classes[self.index_of(name)]


@dataclass(frozen=True)
class Annotation:
    """One annotator's labelled interval in one video."""

    video_id: str
    start_frame: int
    end_frame: int
    label: str
    annotator_id: str
    handedness: str = "right"

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ValueError("video_id must be non-empty")
        if not (0 <= self.start_frame < self.end_frame):
            raise ValueError(
                f"need 0 <= start < end, got [{self.start_frame}, {self.end_frame})"
            )
        if self.handedness not in HANDEDNESS:
            raise ValueError(f"handedness must be one of {HANDEDNESS}")

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class VideoInfo:
    video_id: str
    path: str
    frames: int

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ValueError("video_id must be non-empty")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


@dataclass(frozen=True)
class StrokeSegment:
    """A curated interval: an annotated/fused stroke or an extracted negative.

    label_votes holds the multiset of contributing annotation labels
    (sorted); it is the authority for consistency filtering.  label is
    the unanimous vote once filtered.
    """

    video_id: str
    start_frame: int
    end_frame: int
    label: str
    source: str = "annotated"
    label_votes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.end_frame - self.start_frame < 1:
            raise ValueError("segment must span at least one frame")
        if self.source not in ("annotated", "fused", "negative"):
            raise ValueError(f"unknown segment source {self.source!r}")
        if not self.label_votes:
            object.__setattr__(self, "label_votes", (self.label,))

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame

    @property
    def key(self) -> str:
        return f"{self.video_id}:{self.start_frame}-{self.end_frame}"


@dataclass(frozen=True)
class WindowSample:
    """A fixed-length model input window placed inside a video."""

    video_id: str
    start_frame: int
    length: int
    label: str

    def __post_init__(self) -> None:
        if self.start_frame < 0 or self.length < 1:
            raise ValueError("window must have start >= 0 and length >= 1")


@dataclass
class Manifest:
    """Dataset description: videos, raw annotations, split assignment."""

    fps: float = 120.0
    videos: list[VideoInfo] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)

    def video_by_id(self, video_id: str) -> VideoInfo:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise ValueError(f"unknown video {video_id!r}")

    def annotations_for(self, video_id: str) -> list[Annotation]:
        return [a for a in self.annotations if a.video_id == video_id]

    def to_json_dict(self) -> dict:
        return {
            "fps": self.fps,
            "videos": [
                {"id": v.video_id, "path": v.path, "frames": v.frames}
                for v in self.videos
            ],
            "annotations": [
                {
                    "video_id": a.video_id,
                    "start": a.start_frame,
                    "end": a.end_frame,
                    "label": a.label,
                    "annotator": a.annotator_id,
                    "handedness": a.handedness,
                }
                for a in self.annotations
            ],
            "splits": dict(sorted(self.splits.items())),
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "Manifest":
        videos = [
            VideoInfo(video_id=v["id"], path=v["path"], frames=int(v["frames"]))
            for v in d.get("videos", ())
        ]
        annotations = [
            Annotation(
                video_id=a["video_id"],
                start_frame=int(a["start"]),
                end_frame=int(a["end"]),
                label=a["label"],
                annotator_id=a["annotator"],
                handedness=a.get("handedness", "right"),
            )
            for a in d.get("annotations", ())
        ]
        splits = dict(d.get("splits", {}))
        for key, split in splits.items():
            if split not in SPLIT_NAMES:
                raise ValueError(f"split for {key!r} must be one of {SPLIT_NAMES}")
        return cls(
            fps=float(d.get("fps", 120.0)),
            videos=videos,
            annotations=annotations,
            splits=splits,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _overlap(a_start: int, a_end: int, b_start: int, b_end: int) -> int:
    return min(a_end, b_end) - max(a_start, b_start)


def fuse_overlapping_annotations(
    annotations: Sequence[Annotation], fuse_threshold: float = 0.25
) -> list[StrokeSegment]:
    """Merge annotations of one video that overlap beyond the threshold.

    Two annotations are the same stroke when their frame overlap is
    strictly greater than fuse_threshold times the shorter annotation's
    duration.  Merging is transitive (union-find) and yields
    [min start, max end] with the multiset of contributing labels.
    Output is sorted by (start, end), independent of input order.
    """
    if not annotations:
        return []
    video_ids = {a.video_id for a in annotations}
    if len(video_ids) != 1:
        raise ValueError(f"annotations span multiple videos: {sorted(video_ids)}")

    anns = sorted(
        annotations,
        key=lambda a: (a.start_frame, a.end_frame, a.label, a.annotator_id),
    )
    parent = list(range(len(anns)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(anns)):
        for j in range(i + 1, len(anns)):
            a, b = anns[i], anns[j]
            ov = _overlap(a.start_frame, a.end_frame, b.start_frame, b.end_frame)
            shorter = min(a.duration, b.duration)
            if ov > fuse_threshold * shorter:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[rb] = ra

    groups: dict[int, list[Annotation]] = {}
    for i, a in enumerate(anns):
        groups.setdefault(find(i), []).append(a)

    segments = []
    for members in groups.values():
        votes = tuple(sorted(m.label for m in members))
        segments.append(
            StrokeSegment(
                video_id=members[0].video_id,
                start_frame=min(m.start_frame for m in members),
                end_frame=max(m.end_frame for m in members),
                label=votes[0],
                source="annotated" if len(members) == 1 else "fused",
                label_votes=votes,
            )
        )
    segments.sort(key=lambda s: (s.start_frame, s.end_frame, s.label))
    return segments


def filter_inconsistent_labels(segments: Iterable[StrokeSegment]) -> list[StrokeSegment]:
    """Drop fused segments whose contributing labels disagree."""
    kept = []
    for seg in segments:
        if len(set(seg.label_votes)) == 1:
            kept.append(replace(seg, label=seg.label_votes[0]))
    return kept


def extract_negative_segments(
    video: VideoInfo,
    strokes: Sequence[StrokeSegment],
    window_frames: int = 100,
    negative_label: str = NEGATIVE_LABEL,
    min_strokes: int = 10,
) -> list[StrokeSegment]:
    """Extract non-stroke segments from the gaps of a stroke-dense video.

    Only videos with more than min_strokes strokes contribute.  Each
    inter-stroke gap is widened by window_frames // 10 into the
    neighbouring strokes, clipped to the video, and kept only if at
    least window_frames long.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    if len(strokes) <= min_strokes:
        return []
    margin = window_frames // 10
    ordered = sorted(strokes, key=lambda s: (s.start_frame, s.end_frame))
    negatives = []
    for prev, nxt in zip(ordered, ordered[1:]):
        lo = max(0, prev.end_frame - margin)
        hi = min(video.frames, nxt.start_frame + margin)
        if hi - lo >= window_frames:
            negatives.append(
                StrokeSegment(
                    video_id=video.video_id,
                    start_frame=lo,
                    end_frame=hi,
                    label=negative_label,
                    source="negative",
                )
            )
    return negatives


def extract_windows(
    segment: StrokeSegment,
    window_frames: int,
    stride: int | None = None,
    video_frames: int | None = None,
) -> list[WindowSample]:
    """Place windows inside a segment.

    With stride=None (training placement) one window is centered on the
    segment midpoint and clipped to the video; video_frames is required
    and a video shorter than the window yields a warning and no sample.
    With a stride (sliding evaluation) windows start every stride frames
    while they fit inside the segment.
    """
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    if stride is None:
        if video_frames is None:
            raise ValueError("centered placement needs video_frames")
        if video_frames < window_frames:
            warnings.warn(
                f"video {segment.video_id} shorter than window "
                f"({video_frames} < {window_frames}); segment skipped"
            )
            return []
        mid = (segment.start_frame + segment.end_frame) // 2
        start = mid - window_frames // 2
        start = min(max(start, 0), video_frames - window_frames)
        return [
            WindowSample(
                video_id=segment.video_id,
                start_frame=start,
                length=window_frames,
                label=segment.label,
            )
        ]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if segment.duration < window_frames:
        return []
    return [
        WindowSample(
            video_id=segment.video_id,
            start_frame=s,
            length=window_frames,
            label=segment.label,
        )
        for s in range(segment.start_frame, segment.end_frame - window_frames + 1, stride)
    ]


def derive_segments(
    manifest: Manifest,
    window_frames: int = 100,
    fuse_threshold: float = 0.25,
    negative_label: str = NEGATIVE_LABEL,
    min_strokes_for_negatives: int = 10,
) -> list[StrokeSegment]:
    """Run the full curation pipeline over every video of a manifest.

    Per video: fuse overlapping annotations, drop label disagreements,
    then extract negatives from the surviving strokes.  Returns all
    segments sorted by (video, start).
    """
    out: list[StrokeSegment] = []
    for video in manifest.videos:
        fused = fuse_overlapping_annotations(
            manifest.annotations_for(video.video_id), fuse_threshold
        )
        strokes = filter_inconsistent_labels(fused)
        out.extend(strokes)
        out.extend(
            extract_negative_segments(
                video,
                strokes,
                window_frames=window_frames,
                negative_label=negative_label,
                min_strokes=min_strokes_for_negatives,
            )
        )
    out.sort(key=lambda s: (s.video_id, s.start_frame, s.end_frame))
    return out


@dataclass(frozen=True)
class ClassStats:
    label: str
    train: int
    val: int
    test: int
    total: int
    min_frames: int
    max_frames: int
    mean_frames: float
    std_frames: float


@dataclass(frozen=True)
class DatasetStats:
    rows: tuple[ClassStats, ...]
    total: ClassStats

    def to_text(self) -> str:
        """Aligned-column table, one row per class plus a totals row."""
        header = ("Class", "Train", "Val", "Test", "Sum", "Min", "Max", "Mean")
        lines = [self._format(r) for r in self.rows + (self.total,)]
        cells = [header] + lines
        widths = [max(len(row[c]) for row in cells) for c in range(len(header))]
        out = []
        for row in cells:
            out.append(
                "  ".join(
                    cell.ljust(widths[c]) if c == 0 else cell.rjust(widths[c])
                    for c, cell in enumerate(row)
                ).rstrip()
            )
        return "\n".join(out) + "\n"

    @staticmethod
    def _format(r: ClassStats) -> tuple[str, ...]:
        return (
            r.label,
            str(r.train),
            str(r.val),
            str(r.test),
            str(r.total),
            str(r.min_frames),
            str(r.max_frames),
            f"{r.mean_frames:.1f}±{r.std_frames:.1f}",
        )

    def to_csv(self) -> str:
        lines = ["class,train,val,test,total,min_frames,max_frames,mean_frames,std_frames"]
        for r in self.rows + (self.total,):
            lines.append(
                f"{r.label},{r.train},{r.val},{r.test},{r.total},"
                f"{r.min_frames},{r.max_frames},{r.mean_frames:.6g},{r.std_frames:.6g}"
            )
        return "\n".join(lines) + "\n"


def compute_stats(
    segments: Sequence[StrokeSegment],
    splits: Mapping[str, str] | None = None,
    class_order: Sequence[str] | None = None,
) -> DatasetStats:
    """Per-class segment counts per split and frame-length statistics.

    Length statistics use the population standard deviation.  Classes
    appear in class_order if given (zero rows included), otherwise in
    sorted order of observed labels.
    """
    splits = splits or {}
    by_label: dict[str, list[StrokeSegment]] = {}
    for seg in segments:
        by_label.setdefault(seg.label, []).append(seg)
    labels = list(class_order) if class_order is not None else sorted(by_label)

    def make_row(label: str, segs: Sequence[StrokeSegment]) -> ClassStats:
        counts = Counter(splits.get(s.key, "") for s in segs)
        lengths = np.array([s.duration for s in segs], dtype=np.float64)
        if len(segs) == 0:
            return ClassStats(label, 0, 0, 0, 0, 0, 0, 0.0, 0.0)
        return ClassStats(
            label=label,
            train=counts.get("train", 0),
            val=counts.get("val", 0),
            test=counts.get("test", 0),
            total=len(segs),
            min_frames=int(lengths.min()),
            max_frames=int(lengths.max()),
            mean_frames=float(lengths.mean()),
            std_frames=float(lengths.std()),
        )

    rows = tuple(make_row(label, by_label.get(label, [])) for label in labels)
    total = make_row("Total", list(segments))
    return DatasetStats(rows=rows, total=total)


def split_dataset(
    segments: Sequence[StrokeSegment],
    fractions: Sequence[float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> dict[str, str]:
    """Assign each segment to train/val/test, stratified per class.

    Within each class the per-split counts follow largest-remainder
    rounding of fractions * n, remainder ties resolved in split order
    (train, then val, then test).  The shuffle is seeded and consumed
    in sorted label order, so the assignment is deterministic.  A class
    with fewer segments than splits goes entirely to train with a
    warning.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    by_label: dict[str, list[StrokeSegment]] = {}
    for seg in segments:
        by_label.setdefault(seg.label, []).append(seg)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in sorted(by_label):
        keys = sorted(s.key for s in by_label[label])
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate segment keys in class {label!r}")
        order = rng.permutation(len(keys))
        n = len(keys)
        if n < len(SPLIT_NAMES):
            warnings.warn(
                f"class {label!r} has only {n} segment(s); all assigned to train"
            )
            for k in keys:
                assignment[k] = "train"
            continue
        quotas = [f * n for f in fractions]
        counts = [int(q) for q in quotas]
        leftover = n - sum(counts)
        # distribute by largest fractional remainder, ties to earlier splits
        order_by_remainder = sorted(
            range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i)
        )
        for i in order_by_remainder[:leftover]:
            counts[i] += 1
        cursor = 0
        for split, count in zip(SPLIT_NAMES, counts):
            for idx in order[cursor : cursor + count]:
                assignment[keys[idx]] = split
            cursor += count
    return assignment


@dataclass(frozen=True)
class SynthClass:
    """A synthetic motion class: a patch translating at a fixed velocity."""

    name: str
    velocity: tuple[float, float]  # (vy, vx) in pixels per frame

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("class name must be non-empty")
        if len(self.velocity) != 2:
            raise ValueError("velocity must be (vy, vx)")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset generator."""

    classes: tuple[SynthClass, ...]
    n_videos: int = 4
    strokes_per_video: int = 8
    stroke_frames: int = 24
    gap_frames: int = 16
    height: int = 32
    width: int = 32
    patch_size: int = 8
    noise_scale: float = 0.05
    fps: float = 120.0
    # every k-th stroke (1-based, k=0 disables) gains a shifted duplicate
    # annotation, or a same-span annotation with a conflicting label
    inject_overlap_every: int = 0
    inject_disagreement_every: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if min(self.n_videos, self.strokes_per_video, self.stroke_frames) < 1:
            raise ValueError("n_videos, strokes_per_video, stroke_frames must be >= 1")
        if self.gap_frames < 1:
            raise ValueError("gap_frames must be >= 1")
        if not (0 < self.patch_size <= min(self.height, self.width)):
            raise ValueError("patch_size must fit inside the frame")

    @property
    def frames_per_video(self) -> int:
        return self.gap_frames + self.strokes_per_video * (
            self.stroke_frames + self.gap_frames
        )

    def taxonomy(self, include_negative: bool = True) -> ClassTaxonomy:
        names = tuple(c.name for c in self.classes)
        if include_negative:
            names = names + (NEGATIVE_LABEL,)
        return ClassTaxonomy(names=names)


def _patch_trajectory(
    spec: SynthSpec, cls: SynthClass, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Integer patch positions per stroke frame, kept inside the frame."""
    vy, vx = cls.velocity
    span_y = vy * (spec.stroke_frames - 1)
    span_x = vx * (spec.stroke_frames - 1)
    max_y = spec.height - spec.patch_size
    max_x = spec.width - spec.patch_size
    lo_y, hi_y = max(0, -span_y), min(max_y, max_y - span_y)
    lo_x, hi_x = max(0, -span_x), min(max_x, max_x - span_x)
    if lo_y > hi_y or lo_x > hi_x:
        raise ValueError(
            f"class {cls.name!r} moves too far for the frame; "
            f"reduce speed or stroke_frames"
        )
    y0 = lo_y + float(rng.random()) * (hi_y - lo_y)
    x0 = lo_x + float(rng.random()) * (hi_x - lo_x)
    return [
        (int(round(y0 + vy * t)), int(round(x0 + vx * t)))
        for t in range(spec.stroke_frames)
    ]


def generate_synthetic_dataset(
    spec: SynthSpec, out_dir: str | Path, seed: int = 0
) -> Manifest:
    """Write deterministic synthetic videos, analytic flow, and a manifest.

    Each video holds strokes_per_video strokes separated by idle gaps;
    classes rotate round-robin.  A stroke shows a textured patch
    translating with its class velocity over a static textured
    background.  Alongside each video (videos/<id>.tt3d, C=3) the exact
    flow implied by the integer patch motion is written
    (flow/<id>.tt3d, C=2, component 0 horizontal).  All randomness
    derives from the seed, so outputs are byte-identical across runs.
    """
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    background = (rng.random((3, spec.height, spec.width)) * spec.noise_scale).astype(
        np.float32
    )
    patch = (0.3 + 0.7 * rng.random((3, spec.patch_size, spec.patch_size))).astype(
        np.float32
    )

    manifest = Manifest(fps=spec.fps)
    stroke_counter = 0
    for vid_idx in range(spec.n_videos):
        video_id = f"v{vid_idx:03d}"
        frames = spec.frames_per_video
        rgb = np.broadcast_to(
            background[:, None], (3, frames, spec.height, spec.width)
        ).copy()
        flow = np.zeros((2, frames - 1, spec.height, spec.width), dtype=np.float32)

        cursor = spec.gap_frames
        for s in range(spec.strokes_per_video):
            cls = spec.classes[stroke_counter % len(spec.classes)]
            start, end = cursor, cursor + spec.stroke_frames
            positions = _patch_trajectory(spec, cls, rng)
            p = spec.patch_size
            for t, (py, px) in enumerate(positions):
                rgb[:, start + t, py : py + p, px : px + p] = patch
            for t in range(spec.stroke_frames - 1):
                py, px = positions[t]
                ny, nx = positions[t + 1]
                flow[0, start + t, py : py + p, px : px + p] = nx - px
                flow[1, start + t, py : py + p, px : px + p] = ny - py

            stroke_counter += 1
            label = cls.name
            manifest.annotations.append(
                Annotation(video_id, start, end, label, "a0", "right")
            )
            if spec.inject_overlap_every and stroke_counter % spec.inject_overlap_every == 0:
                # shifted duplicate overlapping ~70% of the stroke: fused by the pipeline
                shift = max(1, spec.stroke_frames * 3 // 10)
                manifest.annotations.append(
                    Annotation(video_id, start + shift, end + shift, label, "a1", "right")
                )
            if (
                spec.inject_disagreement_every
                and stroke_counter % spec.inject_disagreement_every == 0
            ):
                other = spec.classes[stroke_counter % len(spec.classes)].name
                manifest.annotations.append(
                    Annotation(video_id, start, end, other, "a2", "right")
                )
            cursor = end + spec.gap_frames

        rel = f"videos/{video_id}.tt3d"
        write_tensor(out / rel, rgb)
        write_tensor(out / "flow" / f"{video_id}.tt3d", flow)
        manifest.videos.append(VideoInfo(video_id, rel, frames))

    manifest.save(out / "manifest.json")
    return manifest


def plant_stroke_video(
    spec: SynthSpec,
    cls_name: str,
    frames: int,
    stroke_start: int,
    stroke_frames: int,
    out_dir: str | Path,
    video_id: str,
    seed: int = 0,
) -> tuple[VideoInfo, StrokeSegment]:
    """Write one long video with a single planted stroke, for segmentation tests.

    Uses the same background/patch texture construction as
    generate_synthetic_dataset with the given seed; the stroke occupies
    [stroke_start, stroke_start + stroke_frames) and the rest is idle
    background.  Analytic flow is written alongside.  When the stroke is
    too long for a straight trajectory to fit the frame, the patch keeps
    its constant velocity on a torus, wrapping across the frame edges, so
    every frame pair shows the class displacement.
    """
    cls = next((c for c in spec.classes if c.name == cls_name), None)
    if cls is None:
        raise ValueError(f"unknown synthetic class {cls_name!r}")
    if not (0 <= stroke_start and stroke_start + stroke_frames <= frames):
        raise ValueError("planted stroke must lie inside the video")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    background = (rng.random((3, spec.height, spec.width)) * spec.noise_scale).astype(
        np.float32
    )
    patch = (0.3 + 0.7 * rng.random((3, spec.patch_size, spec.patch_size))).astype(
        np.float32
    )
    rgb = np.broadcast_to(background[:, None], (3, frames, spec.height, spec.width)).copy()
    flow = np.zeros((2, frames - 1, spec.height, spec.width), dtype=np.float32)

    vy, vx = cls.velocity
    max_y = spec.height - spec.patch_size
    max_x = spec.width - spec.patch_size
    span_y = vy * (stroke_frames - 1)
    span_x = vx * (stroke_frames - 1)
    fits = max(0, -span_y) <= min(max_y, max_y - span_y) and max(0, -span_x) <= min(
        max_x, max_x - span_x
    )
    if fits:
        positions = _patch_trajectory(replace(spec, stroke_frames=stroke_frames), cls, rng)
    else:
        y0 = float(rng.random()) * max_y
        x0 = float(rng.random()) * max_x
        positions = [
            (int(round(y0 + vy * t)), int(round(x0 + vx * t)))
            for t in range(stroke_frames)
        ]
    p = spec.patch_size
    offsets = np.arange(p)
    for t, (py, px) in enumerate(positions):
        rows = (py + offsets) % spec.height
        cols = (px + offsets) % spec.width
        rgb[:, stroke_start + t, rows[:, None], cols[None, :]] = patch
    for t in range(stroke_frames - 1):
        py, px = positions[t]
        ny, nx = positions[t + 1]
        rows = (py + offsets) % spec.height
        cols = (px + offsets) % spec.width
        flow[0, stroke_start + t, rows[:, None], cols[None, :]] = nx - px
        flow[1, stroke_start + t, rows[:, None], cols[None, :]] = ny - py

    rel = f"videos/{video_id}.tt3d"
    write_tensor(out / rel, rgb)
    write_tensor(out / "flow" / f"{video_id}.tt3d", flow)
    info = VideoInfo(video_id, rel, frames)
    truth = StrokeSegment(
        video_id=video_id,
        start_frame=stroke_start,
        end_frame=stroke_start + stroke_frames,
        label=cls_name,
        source="annotated",
    )
    return info, truth


def assemble_window_arrays(
    windows: Sequence[WindowSample],
    videos: Mapping[str, np.ndarray],
    flows: Mapping[str, np.ndarray] | None,
    label_index: Mapping[str, int],
    norm=None,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Stack window samples into model input arrays.

    videos maps video_id to (3, T, H, W) arrays; flows, when given, maps
    video_id to (2, T-1, H, W) arrays whose window slices are zero-padded
    to the window length on the last frame.  norm, a flow
    NormalizationMethod, normalizes each flow window before padding (the
    window is the normalization unit).  Returns (rgb batch, flow batch
    or None, int64 label vector).
    """
    from .flow import FlowField, flow_window_to_input, normalize_flow

    if not windows:
        raise ValueError("no windows to assemble")
    rgb_list, flow_list, labels = [], [], []
    for w in windows:
        video = videos[w.video_id]
        if video.ndim != 4 or video.shape[0] != 3:
            raise ShapeError(f"video {w.video_id!r} must be (3, T, H, W), got {video.shape}")
        if w.start_frame + w.length > video.shape[1]:
            raise ShapeError(
                f"window [{w.start_frame}, {w.start_frame + w.length}) exceeds "
                f"video {w.video_id!r} with {video.shape[1]} frames"
            )
        rgb_list.append(video[:, w.start_frame : w.start_frame + w.length])
        if flows is not None:
            pairs = flows[w.video_id][:, w.start_frame : w.start_frame + w.length - 1]
            if norm is not None:
                normalized, _ = normalize_flow(FlowField(pairs), norm)
                pairs = normalized.data
            flow_list.append(flow_window_to_input(pairs, w.length))
        labels.append(label_index[w.label])
    rgb = np.stack(rgb_list).astype(np.float32)
    flow = np.stack(flow_list).astype(np.float32) if flows is not None else None
    return rgb, flow, np.array(labels, dtype=np.int64)
