"""Optimizer, training-loop, evaluation, and window-vote tests."""

import types

import numpy as np
import pytest

from twostream3d.model import ModelConfig, build_model, load_model
from twostream3d.tensor import NonFiniteError, ShapeError
from twostream3d.training import (
    ConfusionMatrix,
    SgdConfig,
    SplitArrays,
    evaluate,
    interval_iou,
    sgd_step,
    train,
    vote_over_windows,
)

TINY = ModelConfig(
    variant="rgb",
    attention=False,
    window_frames=8,
    spatial=(8, 8),
    filters=(2, 2, 2),
    fc_size=4,
    n_classes=2,
)


def tiny_data(n=4, seed=0, classes=2):
    rng = np.random.default_rng(seed)
    rgb = rng.random((n, 3, 8, 8, 8), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % classes
    return SplitArrays(rgb=rgb, flow=None, labels=labels)


# ---------------------------------------------------------------- sgd_step


def test_sgd_step_without_momentum():
    params = {"w": np.array([1.0], dtype=np.float32)}
    grads = {"w": np.array([2.0], dtype=np.float32)}
    vel = {"w": np.zeros(1, dtype=np.float32)}
    sgd_step(params, grads, vel, SgdConfig(learning_rate=0.1, momentum=0.0))
    assert params["w"][0] == pytest.approx(0.8)


def test_sgd_step_zero_gradient_is_identity():
    params = {"w": np.array([3.0, -1.0], dtype=np.float32)}
    vel = {"w": np.zeros(2, dtype=np.float32)}
    sgd_step(params, {"w": np.zeros(2, dtype=np.float32)}, vel, SgdConfig())
    np.testing.assert_array_equal(params["w"], [3.0, -1.0])


def test_sgd_step_matches_hand_unrolled_momentum():
    # v1 = -0.1, p1 = 0.9; v2 = 0.9*(-0.1) - 0.1 = -0.19, p2 = 0.71
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9)
    params = {"w": np.array([1.0], dtype=np.float64)}
    grads = {"w": np.array([1.0], dtype=np.float64)}
    vel = {"w": np.zeros(1, dtype=np.float64)}
    sgd_step(params, grads, vel, cfg)
    assert params["w"][0] == pytest.approx(0.9)
    sgd_step(params, grads, vel, cfg)
    assert params["w"][0] == pytest.approx(0.71)


def test_sgd_step_rejects_non_finite_gradient():
    params = {"w": np.array([1.0])}
    vel = {"w": np.zeros(1)}
    with pytest.raises(NonFiniteError, match="w"):
        sgd_step(params, {"w": np.array([np.nan])}, vel, SgdConfig())


def test_sgd_step_updates_in_place():
    p = np.array([1.0], dtype=np.float32)
    params = {"w": p}
    vel = {"w": np.zeros(1, dtype=np.float32)}
    sgd_step(params, {"w": np.array([1.0], dtype=np.float32)}, vel, SgdConfig(learning_rate=0.5, momentum=0.0))
    assert p[0] == pytest.approx(0.5)  # same array object mutated


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SgdConfig(batch_size=0)
    with pytest.raises(ValueError):
        SgdConfig(max_epochs=0)
    SgdConfig(learning_rate=0.0)  # zero step is a legal control run


# ---------------------------------------------------------------- train


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = build_model(TINY, seed=0)
    before = {k: v.copy() for k, v in model.named_parameters()}
    state = train(
        model,
        tiny_data(4),
        tiny_data(4, seed=1),
        SgdConfig(learning_rate=0.0, max_epochs=3, batch_size=2, seed=0),
    )
    for k, v in model.named_parameters():
        np.testing.assert_array_equal(v, before[k])
    accs = [r.val_acc for r in state.history]
    assert accs == [accs[0]] * 3


def test_single_sample_loss_strictly_decreases():
    model = build_model(TINY, seed=1)
    data = tiny_data(1)
    state = train(
        model,
        data,
        data,
        SgdConfig(learning_rate=0.005, momentum=0.0, batch_size=1, max_epochs=10, seed=0),
    )
    losses = [r.train_loss for r in state.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_reproducible_for_fixed_seed():
    cfg = SgdConfig(learning_rate=0.01, max_epochs=3, batch_size=2, seed=42)
    results = []
    for _ in range(2):
        model = build_model(TINY, seed=7)
        state = train(model, tiny_data(8), tiny_data(4, seed=3), cfg)
        results.append((state.history, dict(model.named_parameters())))
    assert results[0][0] == results[1][0]
    for k in results[0][1]:
        np.testing.assert_array_equal(results[0][1][k], results[1][1][k])


def test_best_val_checkpoint_round_trips(tmp_path):
    model = build_model(TINY, seed=0)
    val = tiny_data(4, seed=5)
    ckpt = tmp_path / "model.ckpt"
    log = tmp_path / "log.csv"
    state = train(
        model,
        tiny_data(8, seed=2),
        val,
        SgdConfig(max_epochs=3, batch_size=4, seed=0),
        checkpoint_path=ckpt,
        log_path=log,
    )
    assert ckpt.exists() and state.checkpoint_path == str(ckpt)
    best_model = load_model(ckpt)
    assert best_model.config == TINY
    acc, _ = evaluate(best_model, val)
    assert acc == pytest.approx(state.best_val_acc)
    text = log.read_text()
    assert text.startswith("epoch,train_loss,train_acc,val_acc")
    assert len(text.strip().split("\n")) == 1 + state.epoch


def test_train_rejects_empty_splits():
    model = build_model(TINY, seed=0)
    data = tiny_data(2)
    empty = SplitArrays(
        rgb=np.zeros((0, 3, 8, 8, 8), dtype=np.float32),
        flow=None,
        labels=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(ValueError, match="train split"):
        train(model, empty, data, SgdConfig(max_epochs=1))
    with pytest.raises(ValueError, match="val split"):
        train(model, data, empty, SgdConfig(max_epochs=1))


def test_flow_variant_requires_flow_arrays():
    model = build_model(
        ModelConfig(variant="flow", attention=False, window_frames=8, spatial=(8, 8),
                    filters=(2, 2, 2), fc_size=4, n_classes=2),
        seed=0,
    )
    with pytest.raises(ValueError, match="flow"):
        train(model, tiny_data(2), tiny_data(2), SgdConfig(max_epochs=1))


def test_stop_when_halts_early():
    model = build_model(TINY, seed=0)
    state = train(
        model,
        tiny_data(4),
        tiny_data(4, seed=1),
        SgdConfig(max_epochs=50, batch_size=2, seed=0),
        stop_when=lambda s: s.epoch >= 2,
    )
    assert state.epoch == 2


# ---------------------------------------------------------------- evaluate


class OracleModel:
    """Reads the class index planted in the first voxel of each window."""

    def __init__(self, n_classes, variant="rgb"):
        self.config = types.SimpleNamespace(variant=variant, n_classes=n_classes)

    def forward(self, x, train=False):
        k = self.config.n_classes
        idx = np.clip(np.round(x[:, 0, 0, 0, 0]).astype(int), 0, k - 1)
        probs = np.full((len(x), k), 1e-6)
        probs[np.arange(len(x)), idx] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)


class RandomModel:
    def __init__(self, n_classes, seed=0):
        self.config = types.SimpleNamespace(variant="rgb", n_classes=n_classes)
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        probs = self.rng.random((len(x), self.config.n_classes))
        return probs / probs.sum(axis=1, keepdims=True)


def planted_data(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    rgb = np.zeros((len(labels), 3, 2, 2, 2), dtype=np.float32)
    rgb[:, 0, 0, 0, 0] = labels
    return SplitArrays(rgb=rgb, flow=None, labels=labels)


def test_perfect_predictor_gives_identity_confusion():
    labels = [0, 1, 2, 0, 1, 2, 2]
    acc, cm = evaluate(OracleModel(3), planted_data(labels, 3))
    assert acc == 1.0
    assert np.trace(cm.counts) == len(labels)
    np.testing.assert_array_equal(cm.counts, np.diag([2, 2, 3]))


def test_row_sums_equal_class_counts():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=60)
    acc, cm = evaluate(RandomModel(5), planted_data(labels, 5))
    np.testing.assert_array_equal(cm.row_sums(), np.bincount(labels, minlength=5))
    assert acc == pytest.approx(np.trace(cm.counts) / cm.total)


def test_uniform_random_predictor_near_chance():
    n, k = 2000, 21
    labels = np.arange(n) % k
    acc, _ = evaluate(RandomModel(k, seed=3), planted_data(labels, k))
    # 5 sigma binomial tolerance around 1/21
    assert abs(acc - 1 / k) < 5 * np.sqrt((1 / k) * (1 - 1 / k) / n)


def test_evaluate_rejects_empty_split():
    empty = SplitArrays(
        rgb=np.zeros((0, 3, 2, 2, 2), dtype=np.float32),
        flow=None,
        labels=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(ValueError):
        evaluate(OracleModel(3), empty)


def test_confusion_matrix_properties_and_csv():
    cm = ConfusionMatrix(np.array([[5, 1], [0, 4]]))
    assert cm.accuracy == pytest.approx(0.9)
    norm = cm.normalized()
    np.testing.assert_allclose(norm.sum(axis=1), [1.0, 1.0])
    raw = cm.to_csv(class_names=["a", "b"])
    assert raw.splitlines()[1] == "a,5,1"
    norm_csv = cm.to_csv(normalized=True, class_names=["a", "b"])
    assert "0.833333" in norm_csv

    zero_row = ConfusionMatrix(np.array([[0, 0], [1, 1]]))
    np.testing.assert_array_equal(zero_row.normalized()[0], [0.0, 0.0])

    with pytest.raises(ShapeError):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ConfusionMatrix(np.array([[-1, 0], [0, 1]]))
    with pytest.raises(ValueError):
        cm.to_csv(class_names=["only-one"])


# ---------------------------------------------------------------- voting


class ConstantModel:
    def __init__(self, n_classes, pred):
        self.config = types.SimpleNamespace(variant="rgb", n_classes=n_classes)
        self.pred = pred

    def forward(self, x, train=False):
        probs = np.full((len(x), self.config.n_classes), 0.01)
        probs[:, self.pred] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)


class FirstFrameModel:
    """Predicts the class planted in the first frame the window sees."""

    def __init__(self, n_classes):
        self.config = types.SimpleNamespace(variant="rgb", n_classes=n_classes)

    def forward(self, x, train=False):
        k = self.config.n_classes
        idx = np.clip(np.round(x[:, 0, 0, 0, 0]).astype(int), 0, k - 1)
        probs = np.full((len(x), k), 1e-6)
        probs[np.arange(len(x)), idx] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)


def video_with_frame_codes(codes):
    video = np.zeros((3, len(codes), 2, 2), dtype=np.float32)
    video[0, :, 0, 0] = codes
    return video


def test_unanimous_windows_give_one_segment():
    video = np.zeros((3, 60, 2, 2), dtype=np.float32)
    frames, segments = vote_over_windows(
        ConstantModel(3, pred=1), video, None, window_frames=10, stride=5,
        min_duration=5,
    )
    assert segments == [(0, 60, 1)]
    assert np.all(frames == 1)


def test_window_spanning_whole_video_decides_everything():
    video = np.zeros((3, 40, 2, 2), dtype=np.float32)
    frames, segments = vote_over_windows(
        ConstantModel(4, pred=2), video, None, window_frames=40, stride=40,
        min_duration=5,
    )
    assert segments == [(0, 40, 2)]


def test_tied_frames_fall_to_negative_class():
    # windows at 0 and 10 predict 0 and 1; the overlap [10, 20) ties
    codes = np.zeros(30)
    codes[10] = 1.0
    video = video_with_frame_codes(codes)
    frames, _ = vote_over_windows(
        FirstFrameModel(3), video, None, window_frames=20, stride=10,
        negative_index=2, min_duration=1,
    )
    assert list(frames[:10]) == [0] * 10
    assert list(frames[10:20]) == [2] * 10
    assert list(frames[20:30]) == [1] * 10


def test_uncovered_tail_frames_are_negative():
    video = np.zeros((3, 25, 2, 2), dtype=np.float32)
    frames, _ = vote_over_windows(
        ConstantModel(3, pred=0), video, None, window_frames=10, stride=10,
        min_duration=1,
    )
    # windows cover [0, 20); frames 20..24 get no vote
    assert np.all(frames[:20] == 0)
    assert np.all(frames[20:] == 2)


def test_short_segments_relabeled_negative():
    codes = np.zeros(100)
    codes[40] = 1.0  # a single window votes class 1 over [40, 50)
    video = video_with_frame_codes(codes)
    frames, segments = vote_over_windows(
        FirstFrameModel(3), video, None, window_frames=10, stride=10,
        negative_index=2, min_duration=50,
    )
    # runs [0,40) of class 0 and [40,50) of class 1 are short: relabeled and
    # merged into one negative span; the exactly-50-frame tail run survives
    assert segments == [(0, 50, 2), (50, 100, 0)]
    assert np.all(frames[:50] == 2) and np.all(frames[50:] == 0)


def test_vote_validation_errors():
    model = ConstantModel(3, pred=0)
    video = np.zeros((3, 30, 2, 2), dtype=np.float32)
    with pytest.raises(ShapeError):
        vote_over_windows(model, video, None, window_frames=40, stride=10)
    with pytest.raises(ValueError):
        vote_over_windows(model, video, None, window_frames=10, stride=0)
    with pytest.raises(ShapeError):
        vote_over_windows(model, np.zeros((2, 30, 2, 2), dtype=np.float32), None, 10, 5)
    with pytest.raises(ValueError):
        vote_over_windows(model, video, None, 10, 5, negative_index=7)
    twin = types.SimpleNamespace(config=types.SimpleNamespace(variant="twin", n_classes=3))
    with pytest.raises(ValueError, match="flow"):
        vote_over_windows(twin, video, None, 10, 5)
    with pytest.raises(ShapeError, match="pairs"):
        vote_over_windows(
            model, video, np.zeros((2, 10, 2, 2), dtype=np.float32), 10, 5
        )


def test_interval_iou():
    assert interval_iou((0, 100), (0, 100)) == 1.0
    assert interval_iou((0, 100), (50, 150)) == pytest.approx(50 / 150)
    assert interval_iou((0, 10), (20, 30)) == 0.0
