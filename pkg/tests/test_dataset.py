"""Curation pipeline tests: fusion, filtering, negatives, windows, stats, splits."""

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostream3d.dataset import (
    NEGATIVE_LABEL,
    Annotation,
    ClassTaxonomy,
    Manifest,
    StrokeSegment,
    SynthClass,
    SynthSpec,
    VideoInfo,
    WindowSample,
    assemble_window_arrays,
    compute_stats,
    derive_segments,
    extract_negative_segments,
    extract_windows,
    filter_inconsistent_labels,
    fuse_overlapping_annotations,
    generate_synthetic_dataset,
    split_dataset,
)
from twostream3d.tensor import read_tensor


def ann(start, end, label="Loop", annotator="a0", video="v0"):
    return Annotation(video, start, end, label, annotator)


# ---------------------------------------------------------------- taxonomy


def test_table_tennis_taxonomy_has_21_classes():
    tax = ClassTaxonomy.table_tennis()
    assert len(tax) == 21
    assert len(set(tax.names)) == 21
    assert tax.names[20] == NEGATIVE_LABEL


def test_every_stroke_has_a_super_class():
    tax = ClassTaxonomy.table_tennis()
    for name in tax.names[:20]:
        assert tax.super_class(name) in ("Forehand", "Backhand")
    assert tax.super_class(NEGATIVE_LABEL) is None


def test_taxonomy_index_and_validation():
    tax = ClassTaxonomy.table_tennis()
    assert tax.names[tax.index_of("Serve Forehand Topspin")] == "Serve Forehand Topspin"
    with pytest.raises(ValueError):
        tax.index_of("Smash")
    with pytest.raises(ValueError):
        ClassTaxonomy(names=("a", "a"))
    with pytest.raises(ValueError):
        ClassTaxonomy(names=("a", "b"), super_classes=("x",))


def test_annotation_validation():
    with pytest.raises(ValueError):
        ann(50, 50)
    with pytest.raises(ValueError):
        ann(-1, 10)
    with pytest.raises(ValueError):
        Annotation("v0", 0, 10, "Loop", "a0", handedness="ambidextrous")


# ---------------------------------------------------------------- fusion


def test_twenty_percent_overlap_is_not_fused():
    # overlap 20 frames = 20% of the shorter (100): allowed, kept apart
    segs = fuse_overlapping_annotations([ann(0, 100), ann(80, 180)])
    assert [(s.start_frame, s.end_frame) for s in segs] == [(0, 100), (80, 180)]
    assert all(s.source == "annotated" for s in segs)


def test_thirty_percent_overlap_is_fused():
    segs = fuse_overlapping_annotations([ann(0, 100), ann(70, 170)])
    assert [(s.start_frame, s.end_frame) for s in segs] == [(0, 170)]
    assert segs[0].source == "fused"
    assert segs[0].label_votes == ("Loop", "Loop")


def test_exact_25_percent_overlap_is_not_fused():
    # the rule is strictly greater than 25%
    segs = fuse_overlapping_annotations([ann(0, 100), ann(75, 175)])
    assert len(segs) == 2


def test_identical_annotations_fuse_to_same_bounds():
    segs = fuse_overlapping_annotations([ann(10, 110), ann(10, 110, annotator="a1")])
    assert [(s.start_frame, s.end_frame) for s in segs] == [(10, 110)]


def test_fusion_is_transitive():
    # a overlaps b, b overlaps c, a does not overlap c: still one stroke
    segs = fuse_overlapping_annotations([ann(0, 100), ann(60, 160), ann(120, 220)])
    assert [(s.start_frame, s.end_frame) for s in segs] == [(0, 220)]
    assert len(segs[0].label_votes) == 3


def test_overlap_measured_against_shorter_annotation():
    # overlap 30 = 15% of the long one but 30% of the short one: fused
    segs = fuse_overlapping_annotations([ann(0, 200), ann(170, 270)])
    assert len(segs) == 1


def test_fusion_rejects_mixed_videos():
    with pytest.raises(ValueError):
        fuse_overlapping_annotations([ann(0, 100), ann(0, 100, video="v1")])


def test_empty_input_gives_empty_output():
    assert fuse_overlapping_annotations([]) == []


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(5)))
def test_fusion_is_input_order_independent(order):
    base = [
        ann(0, 100, "Loop", "a0"),
        ann(70, 170, "Loop", "a1"),
        ann(300, 400, "Flip", "a0"),
        ann(390, 490, "Flip", "a1"),
        ann(600, 700, "Hit", "a0"),
    ]
    reference = fuse_overlapping_annotations(base)
    permuted = fuse_overlapping_annotations([base[i] for i in order])
    assert permuted == reference


def test_kept_segments_overlap_at_most_25_percent_of_shorter():
    rng = np.random.default_rng(3)
    anns = []
    for _ in range(30):
        start = int(rng.integers(0, 2000))
        length = int(rng.integers(50, 200))
        anns.append(ann(start, start + length, "Loop", f"a{rng.integers(3)}"))
    segs = fuse_overlapping_annotations(anns)
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            a, b = segs[i], segs[j]
            ov = min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame)
            assert ov <= 0.25 * min(a.duration, b.duration)


# ---------------------------------------------------------------- filtering


def test_unanimous_labels_are_kept():
    segs = fuse_overlapping_annotations([ann(0, 100), ann(50, 150, annotator="a1")])
    kept = filter_inconsistent_labels(segs)
    assert len(kept) == 1
    assert kept[0].label == "Loop"


def test_disagreeing_labels_are_dropped():
    segs = fuse_overlapping_annotations(
        [ann(0, 100, "Flip"), ann(50, 150, "Loop", annotator="a1")]
    )
    assert len(segs) == 1
    assert filter_inconsistent_labels(segs) == []


def test_single_annotator_always_kept():
    kept = filter_inconsistent_labels(fuse_overlapping_annotations([ann(0, 100)]))
    assert len(kept) == 1


# ---------------------------------------------------------------- negatives


def strokes_evenly(n, duration=100, gap=150, video="v0"):
    segs = []
    pos = 0
    for _ in range(n):
        segs.append(StrokeSegment(video, pos, pos + duration, "Loop"))
        pos += duration + gap
    return segs


def test_no_negatives_for_ten_strokes():
    video = VideoInfo("v0", "v0.tt3d", 5000)
    assert extract_negative_segments(video, strokes_evenly(10)) == []


def test_negatives_widen_gaps_by_ten_frames_each_side():
    video = VideoInfo("v0", "v0.tt3d", 10000)
    strokes = strokes_evenly(11)
    # first gap is [100, 250): negative [90, 260), length 170
    negs = extract_negative_segments(video, strokes)
    assert len(negs) == 10
    assert (negs[0].start_frame, negs[0].end_frame) == (90, 260)
    assert all(n.label == NEGATIVE_LABEL and n.source == "negative" for n in negs)


def test_negative_from_explicit_gap_example():
    video = VideoInfo("v0", "v0.tt3d", 10000)
    strokes = strokes_evenly(9, duration=50, gap=5)  # packed prefix
    strokes += [StrokeSegment("v0", 450, 500, "Loop"), StrokeSegment("v0", 800, 850, "Loop")]
    negs = extract_negative_segments(video, strokes, window_frames=100)
    spans = {(n.start_frame, n.end_frame) for n in negs}
    assert (490, 810) in spans
    assert all(n.duration >= 100 for n in negs)


def test_negative_minimum_length_boundary():
    video = VideoInfo("v0", "v0.tt3d", 10000)
    base = strokes_evenly(10, duration=50, gap=5)
    last = base[-1].end_frame

    # widened candidate is exactly 100 frames: kept
    kept = base + [StrokeSegment("v0", last + 80, last + 130, "Loop")]
    negs = extract_negative_segments(video, kept, window_frames=100)
    exact = [n for n in negs if n.start_frame == last - 10]
    assert len(exact) == 1 and exact[0].duration == 100

    # one frame shorter: discarded
    short = base + [StrokeSegment("v0", last + 79, last + 129, "Loop")]
    negs = extract_negative_segments(video, short, window_frames=100)
    assert all(n.duration >= 100 for n in negs)
    assert not [n for n in negs if n.start_frame == last - 10]


def test_negatives_clip_to_video_bounds():
    video = VideoInfo("v0", "v0.tt3d", 2760)
    strokes = strokes_evenly(11)
    negs = extract_negative_segments(video, strokes)
    assert all(0 <= n.start_frame < n.end_frame <= video.frames for n in negs)


def test_negative_margin_scales_with_window():
    video = VideoInfo("v0", "v0.tt3d", 10000)
    strokes = strokes_evenly(11, duration=20, gap=30)
    negs = extract_negative_segments(video, strokes, window_frames=30)
    # margin 3 = 30 // 10: gap [20, 50) widens to [17, 53)
    assert (negs[0].start_frame, negs[0].end_frame) == (17, 53)


# ---------------------------------------------------------------- windows


def test_centered_window_on_long_segment():
    seg = StrokeSegment("v0", 100, 300, "Loop")
    out = extract_windows(seg, 100, video_frames=1000)
    assert out == [WindowSample("v0", 150, 100, "Loop")]


def test_segment_of_exact_window_length_is_itself():
    seg = StrokeSegment("v0", 40, 140, "Loop")
    out = extract_windows(seg, 100, video_frames=1000)
    assert out == [WindowSample("v0", 40, 100, "Loop")]


def test_centered_window_clips_to_video_start_and_end():
    out = extract_windows(StrokeSegment("v0", 0, 60, "Loop"), 100, video_frames=1000)
    assert out[0].start_frame == 0
    out = extract_windows(StrokeSegment("v0", 950, 1000, "Loop"), 100, video_frames=1000)
    assert out[0].start_frame == 900


def test_video_shorter_than_window_is_skipped_with_warning():
    with pytest.warns(UserWarning, match="shorter than window"):
        out = extract_windows(StrokeSegment("v0", 0, 50, "Loop"), 100, video_frames=80)
    assert out == []


def test_sliding_windows_every_stride_frames():
    seg = StrokeSegment("v0", 0, 130, "Loop")
    out = extract_windows(seg, 100, stride=10)
    assert [w.start_frame for w in out] == [0, 10, 20, 30]
    assert all(w.length == 100 for w in out)


def test_sliding_requires_positive_stride():
    with pytest.raises(ValueError):
        extract_windows(StrokeSegment("v0", 0, 130, "Loop"), 100, stride=0)


# ---------------------------------------------------------------- stats


def test_stats_single_segment():
    stats = compute_stats([StrokeSegment("v0", 0, 150, "Loop")])
    row = stats.rows[0]
    assert (row.min_frames, row.max_frames) == (150, 150)
    assert row.mean_frames == 150.0 and row.std_frames == 0.0


def test_stats_mean_and_population_std():
    segs = [StrokeSegment("v0", 0, 100, "Loop"), StrokeSegment("v0", 200, 400, "Loop")]
    row = compute_stats(segs).rows[0]
    assert row.mean_frames == 150.0
    assert row.std_frames == 50.0


def test_stats_hand_built_fixture():
    lengths_a = [100, 200, 150, 150]
    lengths_b = [110, 130, 110, 130, 110, 130, 110, 130]
    segs, pos = [], 0
    for L in lengths_a:
        segs.append(StrokeSegment("v0", pos, pos + L, "A"))
        pos += L + 10
    for L in lengths_b:
        segs.append(StrokeSegment("v0", pos, pos + L, "B"))
        pos += L + 10
    splits = {s.key: ("train" if i % 2 == 0 else "val") for i, s in enumerate(segs)}
    stats = compute_stats(segs, splits)

    a = next(r for r in stats.rows if r.label == "A")
    assert (a.train, a.val, a.test, a.total) == (2, 2, 0, 4)
    assert (a.min_frames, a.max_frames, a.mean_frames) == (100, 200, 150.0)
    assert a.std_frames == pytest.approx(np.sqrt(1250.0))

    b = next(r for r in stats.rows if r.label == "B")
    assert (b.total, b.mean_frames, b.std_frames) == (8, 120.0, 10.0)

    assert stats.total.total == 12
    assert stats.total.total == sum(r.total for r in stats.rows)
    assert stats.total.mean_frames == pytest.approx(130.0)
    assert stats.total.std_frames == pytest.approx(np.sqrt(8200.0 / 12.0))


def test_stats_text_and_csv_shapes():
    segs = [StrokeSegment("v0", 0, 100, "A"), StrokeSegment("v0", 200, 350, "B")]
    stats = compute_stats(segs)
    text = stats.to_text()
    assert "Class" in text and "Total" in text
    csv = stats.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0].startswith("class,train,val,test,total")
    assert len(lines) == 1 + 2 + 1  # header + classes + total


def test_stats_respects_class_order_with_zero_rows():
    segs = [StrokeSegment("v0", 0, 100, "B")]
    stats = compute_stats(segs, class_order=["A", "B"])
    assert [r.label for r in stats.rows] == ["A", "B"]
    assert stats.rows[0].total == 0


# ---------------------------------------------------------------- splits


def segments_of_class(n, label, video="v0"):
    return [StrokeSegment(video, 1000 * i, 1000 * i + 100, label) for i in range(n)]


def test_split_ten_segments_is_7_2_1():
    segs = segments_of_class(10, "Loop")
    splits = split_dataset(segs, (0.7, 0.2, 0.1), seed=0)
    counts = {s: list(splits.values()).count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 7, "val": 2, "test": 1}


def test_split_95_segments_is_67_19_9():
    segs = segments_of_class(95, "Serve Forehand Topspin")
    splits = split_dataset(segs, (0.7, 0.2, 0.1), seed=11)
    counts = {s: list(splits.values()).count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 67, "val": 19, "test": 9}


def test_split_is_deterministic_and_exhaustive():
    segs = segments_of_class(40, "A") + segments_of_class(25, "B", video="v1")
    first = split_dataset(segs, seed=7)
    second = split_dataset(segs, seed=7)
    assert first == second
    assert set(first) == {s.key for s in segs}
    other = split_dataset(segs, seed=8)
    assert other != first  # different seed shuffles differently


def test_split_is_stratified_per_class():
    segs = segments_of_class(20, "A") + segments_of_class(10, "B", video="v1")
    splits = split_dataset(segs, (0.7, 0.2, 0.1), seed=0)
    for label, n in (("A", 20), ("B", 10)):
        keys = [s.key for s in segs if s.label == label]
        counts = {name: sum(splits[k] == name for k in keys) for name in ("train", "val", "test")}
        expected = {"train": round(0.7 * n), "val": round(0.2 * n), "test": round(0.1 * n)}
        assert counts == expected


def test_tiny_class_goes_to_train_with_warning():
    segs = segments_of_class(2, "Rare")
    with pytest.warns(UserWarning, match="assigned to train"):
        splits = split_dataset(segs)
    assert all(v == "train" for v in splits.values())


def test_split_fraction_validation():
    segs = segments_of_class(10, "A")
    with pytest.raises(ValueError):
        split_dataset(segs, (0.5, 0.5))
    with pytest.raises(ValueError):
        split_dataset(segs, (0.8, 0.3, -0.1))
    with pytest.raises(ValueError):
        split_dataset(segs, (0.5, 0.4, 0.2))


# ---------------------------------------------------------------- manifest


def test_manifest_json_round_trip(tmp_path):
    m = Manifest(
        fps=120.0,
        videos=[VideoInfo("v0", "videos/v0.tt3d", 500)],
        annotations=[ann(0, 100), ann(200, 330, "Flip", "a1")],
        splits={"v0:0-100": "train", "v0:200-330": "val"},
    )
    path = tmp_path / "manifest.json"
    m.save(path)
    loaded = Manifest.load(path)
    assert loaded.fps == m.fps
    assert loaded.videos == m.videos
    assert loaded.annotations == m.annotations
    assert loaded.splits == m.splits


def test_manifest_rejects_bad_split_name(tmp_path):
    payload = {"fps": 120, "videos": [], "annotations": [], "splits": {"k": "holdout"}}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError):
        Manifest.load(path)


# ---------------------------------------------------------------- pipeline


def test_derive_segments_full_pipeline():
    video = VideoInfo("v0", "v0.tt3d", 20000)
    annotations = []
    pos = 0
    for i in range(12):
        annotations.append(ann(pos, pos + 100, "Loop"))
        annotations.append(ann(pos + 30, pos + 130, "Loop", annotator="a1"))
        pos += 400
    # one disagreeing stroke: fused then dropped
    annotations.append(ann(pos, pos + 100, "Flip"))
    annotations.append(ann(pos + 10, pos + 110, "Hit", annotator="a1"))

    manifest = Manifest(videos=[video], annotations=annotations)
    segments = derive_segments(manifest, window_frames=100)

    strokes = [s for s in segments if s.source != "negative"]
    negatives = [s for s in segments if s.source == "negative"]
    assert len(strokes) == 12  # 12 fused pairs kept, disagreement dropped
    assert all(s.source == "fused" for s in strokes)
    assert all(s.duration == 130 for s in strokes)
    assert len(negatives) == 11  # 11 gaps of 270 frames, all >= 100 after widening
    assert all(n.duration == 290 for n in negatives)


# ---------------------------------------------------------------- synthetic


def tiny_spec(**kw):
    defaults = dict(
        classes=(
            SynthClass("left", (0.0, -1.0)),
            SynthClass("right", (0.0, 1.0)),
        ),
        n_videos=2,
        strokes_per_video=4,
        stroke_frames=12,
        gap_frames=8,
        height=24,
        width=24,
        patch_size=6,
    )
    defaults.update(kw)
    return SynthSpec(**defaults)


def test_synthetic_dataset_files_and_manifest(tmp_path):
    spec = tiny_spec()
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=5)
    assert len(manifest.videos) == 2
    assert len(manifest.annotations) == 8
    for v in manifest.videos:
        rgb = read_tensor(tmp_path / v.path)
        assert rgb.shape == (3, spec.frames_per_video, 24, 24)
        flow = read_tensor(tmp_path / "flow" / f"{v.video_id}.tt3d")
        assert flow.shape == (2, spec.frames_per_video - 1, 24, 24)
    assert (tmp_path / "manifest.json").exists()


def test_synthetic_dataset_is_seed_stable(tmp_path):
    spec = tiny_spec()
    generate_synthetic_dataset(spec, tmp_path / "a", seed=9)
    generate_synthetic_dataset(spec, tmp_path / "b", seed=9)
    for rel in ["videos/v000.tt3d", "flow/v001.tt3d", "manifest.json"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synthetic_classes_have_mirrored_flow(tmp_path):
    spec = tiny_spec()
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=2)
    flows = {
        v.video_id: read_tensor(tmp_path / "flow" / f"{v.video_id}.tt3d")
        for v in manifest.videos
    }
    sums = {"left": 0.0, "right": 0.0}
    for a in manifest.annotations:
        window = flows[a.video_id][0, a.start_frame : a.end_frame - 1]
        sums[a.label] += float(window.sum())
    assert sums["left"] < 0 < sums["right"]
    assert abs(sums["left"]) > 0 and abs(sums["right"]) > 0


def test_injected_overlap_is_fused_by_pipeline(tmp_path):
    spec = tiny_spec(inject_overlap_every=1, stroke_frames=16, gap_frames=30)
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=4)
    video = manifest.videos[0]
    fused = fuse_overlapping_annotations(manifest.annotations_for(video.video_id))
    # every stroke has a 70%-overlap duplicate: fused back to one segment each
    assert len(fused) == spec.strokes_per_video
    assert all(s.source == "fused" for s in fused)
    kept = filter_inconsistent_labels(fused)
    assert len(kept) == len(fused)


def test_injected_disagreement_is_dropped_by_pipeline(tmp_path):
    spec = tiny_spec(inject_disagreement_every=2, gap_frames=30)
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=4)
    segments = derive_segments(manifest, window_frames=10)
    strokes = [s for s in segments if s.source != "negative"]
    total = spec.n_videos * spec.strokes_per_video
    assert len(strokes) == total // 2  # every 2nd stroke had a conflicting label


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(classes=(SynthClass("only", (0.0, 1.0)),))
    with pytest.raises(ValueError):
        tiny_spec(patch_size=50)
    with pytest.raises(ValueError):
        SynthClass("", (0.0, 1.0))


def test_fast_class_rejected_when_it_leaves_frame(tmp_path):
    spec = tiny_spec(classes=(SynthClass("slow", (0.0, 0.5)), SynthClass("fast", (0.0, 9.0))))
    with pytest.raises(ValueError, match="moves too far"):
        generate_synthetic_dataset(spec, tmp_path, seed=0)


# ---------------------------------------------------------------- assembly


def test_assemble_window_arrays_shapes_and_padding(tmp_path):
    spec = tiny_spec()
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=3)
    videos = {v.video_id: read_tensor(tmp_path / v.path) for v in manifest.videos}
    flows = {
        v.video_id: read_tensor(tmp_path / "flow" / f"{v.video_id}.tt3d")
        for v in manifest.videos
    }
    windows = [
        extract_windows(
            StrokeSegment(a.video_id, a.start_frame, a.end_frame, a.label),
            8,
            video_frames=manifest.video_by_id(a.video_id).frames,
        )[0]
        for a in manifest.annotations
    ]
    label_index = {"left": 0, "right": 1}
    rgb, flow, labels = assemble_window_arrays(windows, videos, flows, label_index)
    assert rgb.shape == (8, 3, 8, 24, 24)
    assert flow.shape == (8, 2, 8, 24, 24)
    assert labels.shape == (8,) and labels.dtype == np.int64
    assert np.all(flow[:, :, -1] == 0.0)  # padded final pair

    rgb_only, none_flow, _ = assemble_window_arrays(windows, videos, None, label_index)
    assert none_flow is None and rgb_only.shape == rgb.shape


def test_assemble_rejects_out_of_range_window():
    videos = {"v0": np.zeros((3, 10, 4, 4), dtype=np.float32)}
    windows = [WindowSample("v0", 5, 8, "x")]
    with pytest.raises(Exception):
        assemble_window_arrays(windows, videos, None, {"x": 0})
