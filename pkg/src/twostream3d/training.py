"""Training loop, evaluation, and window-vote segmentation.

SGD with classical momentum over cross-entropy, per-epoch train/val
accuracy logging with best-validation checkpointing, confusion-matrix
evaluation, and plurality voting of sliding windows over untrimmed
videos.  Everything is deterministic for a fixed seed: shuffling comes
from one seeded generator and all reductions are ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flow import FlowField, flow_window_to_input, normalize_flow
from .model import save_model
from .ops import cross_entropy, cross_entropy_grad_logits
from .tensor import NonFiniteError, ShapeError


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer and loop parameters.

    learning_rate may be zero (a zero step leaves parameters unchanged,
    useful as a control run); momentum is the classical kind.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    cfg: SgdConfig,
) -> None:
    """One momentum update, in place: v <- m*v - lr*g; p <- p + v."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        v = velocities[name]
        v *= cfg.momentum
        v -= cfg.learning_rate * g
        p += v


@dataclass
class SplitArrays:
    """One split's windows stacked into batch-ready arrays."""

    rgb: np.ndarray            # (N, 3, T, H, W)
    flow: np.ndarray | None    # (N, 2, T, H, W) when present
    labels: np.ndarray         # (N,) integer class indices

    def __post_init__(self) -> None:
        if self.rgb.ndim != 5:
            raise ShapeError(f"rgb batch must be 5-D, got {self.rgb.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.rgb):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match batch of {len(self.rgb)}"
            )
        if self.flow is not None and (
            self.flow.ndim != 5 or len(self.flow) != len(self.rgb)
        ):
            raise ShapeError(f"flow batch shape {self.flow.shape} does not match rgb")

    def __len__(self) -> int:
        return len(self.rgb)


def _forward(model, data: SplitArrays, idx: np.ndarray, train: bool) -> np.ndarray:
    variant = model.config.variant
    if variant == "rgb":
        return model.forward(data.rgb[idx], train)
    if data.flow is None:
        raise ValueError(f"variant {variant!r} needs flow arrays")
    if variant == "flow":
        return model.forward(data.flow[idx], train)
    return model.forward(data.rgb[idx], data.flow[idx], train)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainState:
    """Progress of one training run; history grows one record per epoch."""

    history: list[EpochRecord] = field(default_factory=list)
    best_val_acc: float = -1.0
    best_epoch: int = 0
    checkpoint_path: str | None = None
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return len(self.history)

    def log_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_acc"]
        for r in self.history:
            lines.append(
                f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},{r.val_acc:.6f}"
            )
        return "\n".join(lines) + "\n"


def train(
    model,
    train_data: SplitArrays,
    val_data: SplitArrays,
    cfg: SgdConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    stop_when: Callable[[TrainState], bool] | None = None,
) -> TrainState:
    """Minimize cross-entropy with momentum SGD; keep the best-val checkpoint.

    Per epoch: seeded shuffle, mini-batch forward/backward/update, then
    validation accuracy.  When checkpoint_path is given the model is
    saved whenever validation accuracy strictly improves.  stop_when,
    when given, is consulted after each epoch and ends the run early
    (used to stop at a target accuracy; there is no other early
    stopping).  Train accuracy is measured on the pre-update forward of
    each batch.
    """
    if len(train_data) == 0:
        raise ValueError("train split is empty")
    if len(val_data) == 0:
        raise ValueError("val split is empty")

    params = dict(model.named_parameters())
    state = TrainState(velocities={k: np.zeros_like(p) for k, p in params.items()})
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            labels = train_data.labels[idx]
            probs = _forward(model, train_data, idx, train=True)
            loss = cross_entropy(probs, labels)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss in epoch {epoch}")
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels))
            model.backward_from_logits(cross_entropy_grad_logits(probs, labels))
            sgd_step(params, dict(model.named_gradients()), state.velocities, cfg)

        val_acc, _ = evaluate(model, val_data, batch_size=cfg.batch_size)
        state.history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                train_acc=correct / n,
                val_acc=val_acc,
            )
        )
        if val_acc > state.best_val_acc:
            state.best_val_acc = val_acc
            state.best_epoch = epoch
            if checkpoint_path is not None:
                save_model(checkpoint_path, model)
                state.checkpoint_path = str(checkpoint_path)
        if stop_when is not None and stop_when(state):
            break

    if log_path is not None:
        Path(log_path).write_text(state.log_csv())
    return state


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix, rows = true class, columns = predicted."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix has no accuracy")
        return float(np.trace(self.counts)) / self.total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def normalized(self) -> np.ndarray:
        """Rows divided by their sums; all-zero rows stay zero."""
        sums = self.row_sums().astype(np.float64)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        nonzero = sums > 0
        out[nonzero] = self.counts[nonzero] / sums[nonzero, None]
        return out

    def to_csv(self, normalized: bool = False, class_names: Sequence[str] | None = None) -> str:
        names = (
            list(class_names)
            if class_names is not None
            else [f"c{i}" for i in range(self.n_classes)]
        )
        if len(names) != self.n_classes:
            raise ValueError(f"need {self.n_classes} class names, got {len(names)}")
        table = self.normalized() if normalized else self.counts
        lines = ["true\\pred," + ",".join(names)]
        for i, row in enumerate(table):
            cells = (f"{x:.6f}" if normalized else str(int(x)) for x in row)
            lines.append(names[i] + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(model, data: SplitArrays, batch_size: int = 8) -> tuple[float, ConfusionMatrix]:
    """Argmax accuracy and confusion counts over one split."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    k = model.config.n_classes
    counts = np.zeros((k, k), dtype=np.int64)
    n = len(data)
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        probs = _forward(model, data, idx, train=False)
        preds = np.argmax(probs, axis=1)
        np.add.at(counts, (data.labels[idx], preds), 1)
    cm = ConfusionMatrix(counts)
    return cm.accuracy, cm


def interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """Intersection over union of two half-open frame intervals."""
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of equal values as (start, end, value)."""
    runs = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            runs.append((start, t, int(labels[start])))
            start = t
    return runs


def vote_over_windows(
    model,
    rgb_video: np.ndarray,
    flow_field: np.ndarray | None,
    window_frames: int,
    stride: int,
    negative_index: int | None = None,
    min_duration: int = 50,
    batch_size: int = 8,
    norm=None,
) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Classify every frame of an untrimmed video by sliding-window voting.

    Windows start every stride frames; each window adds its argmax class
    to every frame it covers.  A frame's class is the plurality vote;
    ties (including frames no window covers) go to the negative class,
    which defaults to the last class index.  Consecutive equal-class
    frames merge into segments and segments shorter than min_duration
    are relabeled negative.  norm, a flow NormalizationMethod, is
    applied per window before padding, matching training assembly.
    Returns (per-frame labels, segments) where segments partition the
    video as (start, end, class) triples.
    """
    if rgb_video.ndim != 4 or rgb_video.shape[0] != 3:
        raise ShapeError(f"video must be (3, T, H, W), got {rgb_video.shape}")
    t_total = rgb_video.shape[1]
    if window_frames < 1 or stride < 1:
        raise ValueError("window_frames and stride must be >= 1")
    if t_total < window_frames:
        raise ShapeError(f"video of {t_total} frames is shorter than window {window_frames}")
    k = model.config.n_classes
    negative = k - 1 if negative_index is None else negative_index
    if not (0 <= negative < k):
        raise ValueError(f"negative_index {negative} outside {k} classes")
    variant = model.config.variant
    if variant != "rgb" and flow_field is None:
        raise ValueError(f"variant {variant!r} needs a flow field")
    if flow_field is not None and flow_field.shape[1] != t_total - 1:
        raise ShapeError(
            f"flow has {flow_field.shape[1]} pairs for a {t_total}-frame video"
        )

    starts = list(range(0, t_total - window_frames + 1, stride))
    votes = np.zeros((t_total, k), dtype=np.int64)
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo : lo + batch_size]
        rgb = np.stack([rgb_video[:, s : s + window_frames] for s in chunk])
        flow = None
        if flow_field is not None:
            slices = []
            for s in chunk:
                pairs = flow_field[:, s : s + window_frames - 1]
                if norm is not None:
                    normalized, _ = normalize_flow(FlowField(pairs), norm)
                    pairs = normalized.data
                slices.append(flow_window_to_input(pairs, window_frames))
            flow = np.stack(slices)
        data = SplitArrays(rgb=rgb, flow=flow, labels=np.zeros(len(chunk), dtype=np.int64))
        probs = _forward(model, data, np.arange(len(chunk)), train=False)
        for s, pred in zip(chunk, np.argmax(probs, axis=1)):
            votes[s : s + window_frames, pred] += 1

    top = votes.max(axis=1)
    frame_labels = np.argmax(votes, axis=1)
    tied = (votes == top[:, None]).sum(axis=1) > 1
    frame_labels[tied | (top == 0)] = negative

    for start, end, value in _runs(frame_labels):
        if value != negative and end - start < min_duration:
            frame_labels[start:end] = negative
    segments = _runs(frame_labels)
    return frame_labels, segments
