"""Stream branches, the twin two-stream model and its fusion variants.

A branch is three conv/relu/pool stages followed by a fully connected layer;
attention blocks slot in after pooling at every stage whose extents support
them. The twin model joins an RGB branch and a flow branch with bilinear
fusion into class probabilities; single-stream variants replace the fusion
with a plain linear head; the late variant holds both single-stream models
and averages their probabilities at prediction time.

Checkpoints pair the binary tensor container with a JSON sidecar describing
the configuration, so a model can be rebuilt from the two files alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .blocks import MIN_ATTENTION_EXTENT, AttentionBlock3d
from .checkpoint import load_checkpoint, save_checkpoint
from .ops import Bilinear, Conv3d, Layer, Linear, MaxPool3d, ReLU, softmax, softmax_backward
from .tensor import ShapeError

VARIANTS = ("rgb", "flow", "twin", "late")
STAGES = (1, 2, 3)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "twin"
    attention: bool = False
    # None resolves to every stage whose post-pool extents are large enough
    attention_stages: Optional[Tuple[int, ...]] = None
    window_frames: int = 100
    spatial: Tuple[int, int] = (120, 120)
    filters: Tuple[int, int, int] = (30, 60, 80)
    fc_size: int = 500
    n_classes: int = 21
    rgb_channels: int = 3
    flow_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(self.spatial))
        object.__setattr__(self, "filters", tuple(self.filters))
        if self.attention_stages is not None:
            object.__setattr__(self, "attention_stages",
                               tuple(self.attention_stages))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.filters) != 3 or any(f < 1 for f in self.filters):
            raise ValueError("filters must be three positive counts")
        if len(self.spatial) != 2 or any(s < 8 for s in self.spatial):
            raise ValueError("spatial extents must be at least 8")
        if self.window_frames < 8:
            raise ValueError("window must cover at least 8 frames")
        if self.fc_size < 1 or self.n_classes < 2:
            raise ValueError("fc_size must be >= 1 and n_classes >= 2")
        if self.rgb_channels < 1 or self.flow_channels < 1:
            raise ValueError("channel counts must be positive")
        # resolve eagerly so impossible attention configs fail at build time
        if self.attention:
            self.resolved_attention_stages()

    def stage_extents(self) -> List[Tuple[int, int, int]]:
        """Extents after each of the three pooling steps."""
        d, h, w = self.window_frames, self.spatial[0], self.spatial[1]
        out = []
        for _ in STAGES:
            d, h, w = d // 2, h // 2, w // 2
            if min(d, h, w) < 1:
                raise ShapeError("input too small for three pooling steps")
            out.append((d, h, w))
        return out

    def resolved_attention_stages(self) -> Tuple[int, ...]:
        if not self.attention:
            return ()
        extents = self.stage_extents()
        if self.attention_stages is None:
            stages = tuple(s for s in STAGES
                           if min(extents[s - 1]) >= MIN_ATTENTION_EXTENT)
            if not stages:
                raise ShapeError(
                    "attention enabled but no stage keeps every extent >= "
                    f"{MIN_ATTENTION_EXTENT} after pooling")
            return stages
        for s in self.attention_stages:
            if s not in STAGES:
                raise ValueError(f"attention stage {s} outside {STAGES}")
            if min(extents[s - 1]) < MIN_ATTENTION_EXTENT:
                raise ShapeError(
                    f"stage {s}: extents {extents[s - 1]} too small for attention")
        return tuple(sorted(set(self.attention_stages)))

    def flatten_length(self) -> int:
        d, h, w = self.stage_extents()[-1]
        return self.filters[2] * d * h * w

    def channels_for(self, modality: str) -> int:
        if modality == "rgb":
            return self.rgb_channels
        if modality == "flow":
            return self.flow_channels
        raise ValueError(f"unknown modality {modality!r}")


class StreamBranch(Layer):
    """One modality branch: (conv, relu, pool[, attention]) x3, then FC."""

    def __init__(self, channels: int, config: ModelConfig,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.in_channels = channels
        widths = (channels,) + config.filters
        self.convs = [Conv3d.initialize(widths[i], widths[i + 1], 3,
                                        padding=(1, 1, 1), rng=rng, dtype=dtype)
                      for i in range(3)]
        self.relus = [ReLU() for _ in STAGES]
        self.pools = [MaxPool3d((2, 2, 2)) for _ in STAGES]
        stages = config.resolved_attention_stages()
        self.attention = {s: AttentionBlock3d(config.filters[s - 1], rng, dtype)
                          for s in stages}
        self.fc = Linear.initialize(config.flatten_length(), config.fc_size,
                                    rng, dtype)
        self._conv_out_shape: Optional[Tuple[int, ...]] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        cfg = self.config
        if x.ndim != 5:
            raise ShapeError("branch input must be (B, C, T, H, W)")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"branch expects {self.in_channels} channels, got {x.shape[1]}")
        want = (cfg.window_frames,) + cfg.spatial
        if x.shape[2:] != want:
            raise ShapeError(f"branch expects extents {want}, got {x.shape[2:]}")
        h = x
        for i in range(3):
            try:
                h = self.convs[i].forward(h)
                h = self.relus[i].forward(h)
                h = self.pools[i].forward(h)
                if (i + 1) in self.attention:
                    h = self.attention[i + 1].forward(h, train)
            except ShapeError as exc:
                raise ShapeError(f"stage {i + 1}: {exc}") from exc
        self._conv_out_shape = h.shape
        return self.fc.forward(h.reshape(h.shape[0], -1))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._conv_out_shape is None:
            raise RuntimeError("branch backward called before forward")
        g = self.fc.backward(grad_out).reshape(self._conv_out_shape)
        for i in reversed(range(3)):
            if (i + 1) in self.attention:
                g = self.attention[i + 1].backward(g)
            g = self.pools[i].backward(g)
            g = self.relus[i].backward(g)
            g = self.convs[i].backward(g)
        return g

    def activation_signature(self) -> bytes:
        """Relu and pool pattern of the last forward through every stage."""
        parts = []
        for i in range(3):
            parts.append(self.relus[i].activation_signature())
            parts.append(self.pools[i].activation_signature())
            if (i + 1) in self.attention:
                parts.append(self.attention[i + 1].activation_signature())
        return b"".join(parts)

    def _named(self, getter):
        out = []
        for i, conv in enumerate(self.convs, start=1):
            out.extend((f"conv{i}.{n}", a) for n, a in getter(conv))
            if i in self.attention:
                out.extend((f"att{i}.{n}", a) for n, a in getter(self.attention[i]))
        out.extend((f"fc.{n}", a) for n, a in getter(self.fc))
        return out

    def named_parameters(self):
        return self._named(lambda l: l.named_parameters())

    def named_gradients(self):
        return self._named(lambda l: l.named_gradients())

    def named_buffers(self):
        return self._named(lambda l: l.named_buffers())


def _check_probs_grad(probs, grad):
    if probs is None:
        raise RuntimeError("model backward called before forward")
    if grad.shape != probs.shape:
        raise ShapeError("gradient shape does not match class scores")


class SingleStreamModel(Layer):
    """One branch plus a linear head producing class probabilities."""

    def __init__(self, config: ModelConfig,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if config.variant not in ("rgb", "flow"):
            raise ValueError("single-stream model needs variant rgb or flow")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.branch = StreamBranch(config.channels_for(config.variant),
                                   config, rng, dtype)
        self.head = Linear.initialize(config.fc_size, config.n_classes, rng, dtype)
        self._probs: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        logits = self.head.forward(self.branch.forward(x, train))
        self._probs = softmax(logits)
        return self._probs

    def backward_from_logits(self, grad_logits: np.ndarray) -> np.ndarray:
        _check_probs_grad(self._probs, grad_logits)
        return self.branch.backward(self.head.backward(grad_logits))

    def backward(self, grad_probs: np.ndarray) -> np.ndarray:
        _check_probs_grad(self._probs, grad_probs)
        return self.backward_from_logits(softmax_backward(grad_probs, self._probs))

    def activation_signature(self) -> bytes:
        return self.branch.activation_signature()

    def named_parameters(self):
        return [(f"branch.{n}", a) for n, a in self.branch.named_parameters()] \
            + [(f"head.{n}", a) for n, a in self.head.named_parameters()]

    def named_gradients(self):
        return [(f"branch.{n}", a) for n, a in self.branch.named_gradients()] \
            + [(f"head.{n}", a) for n, a in self.head.named_gradients()]

    def named_buffers(self):
        return [(f"branch.{n}", a) for n, a in self.branch.named_buffers()]


class TwinModel(Layer):
    """RGB and flow branches joined by bilinear fusion and softmax."""

    def __init__(self, config: ModelConfig,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if config.variant != "twin":
            raise ValueError("twin model needs variant twin")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.rgb_branch = StreamBranch(config.rgb_channels, config, rng, dtype)
        self.flow_branch = StreamBranch(config.flow_channels, config, rng, dtype)
        self.fusion = Bilinear.initialize(config.fc_size, config.fc_size,
                                          config.n_classes, rng, dtype)
        self._probs: Optional[np.ndarray] = None

    def forward(self, rgb: np.ndarray, flow: np.ndarray, train: bool) -> np.ndarray:
        if rgb.shape[0] != flow.shape[0] or rgb.shape[2:] != flow.shape[2:]:
            raise ShapeError(
                f"modality windows disagree: rgb {rgb.shape} vs flow {flow.shape}")
        f_rgb = self.rgb_branch.forward(rgb, train)
        f_flow = self.flow_branch.forward(flow, train)
        self._probs = softmax(self.fusion.forward(f_rgb, f_flow))
        return self._probs

    def backward_from_logits(self, grad_logits: np.ndarray):
        _check_probs_grad(self._probs, grad_logits)
        g_rgb, g_flow = self.fusion.backward(grad_logits)
        return self.rgb_branch.backward(g_rgb), self.flow_branch.backward(g_flow)

    def backward(self, grad_probs: np.ndarray):
        _check_probs_grad(self._probs, grad_probs)
        return self.backward_from_logits(softmax_backward(grad_probs, self._probs))

    def activation_signature(self) -> bytes:
        return self.rgb_branch.activation_signature() \
            + self.flow_branch.activation_signature()

    def named_parameters(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_branch.named_parameters()] \
            + [(f"flow.{n}", a) for n, a in self.flow_branch.named_parameters()] \
            + [(f"fusion.{n}", a) for n, a in self.fusion.named_parameters()]

    def named_gradients(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_branch.named_gradients()] \
            + [(f"flow.{n}", a) for n, a in self.flow_branch.named_gradients()] \
            + [(f"fusion.{n}", a) for n, a in self.fusion.named_gradients()]

    def named_buffers(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_branch.named_buffers()] \
            + [(f"flow.{n}", a) for n, a in self.flow_branch.named_buffers()]


class LateFusionModel(Layer):
    """Two independently trained single-stream models fused at scoring time."""

    def __init__(self, config: ModelConfig,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if config.variant != "late":
            raise ValueError("late-fusion model needs variant late")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.rgb_model = SingleStreamModel(replace(config, variant="rgb"), rng, dtype)
        self.flow_model = SingleStreamModel(replace(config, variant="flow"), rng, dtype)

    def forward(self, rgb: np.ndarray, flow: np.ndarray, train: bool) -> np.ndarray:
        return late_fusion_score(self.rgb_model.forward(rgb, train),
                                 self.flow_model.forward(flow, train))

    def named_parameters(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_model.named_parameters()] \
            + [(f"flow.{n}", a) for n, a in self.flow_model.named_parameters()]

    def named_gradients(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_model.named_gradients()] \
            + [(f"flow.{n}", a) for n, a in self.flow_model.named_gradients()]

    def named_buffers(self):
        return [(f"rgb.{n}", a) for n, a in self.rgb_model.named_buffers()] \
            + [(f"flow.{n}", a) for n, a in self.flow_model.named_buffers()]


def late_fusion_score(probs_a: np.ndarray, probs_b: np.ndarray) -> np.ndarray:
    """Mean of two probability tables, renormalized against float drift."""
    if probs_a.shape != probs_b.shape:
        raise ShapeError(
            f"score shapes disagree: {probs_a.shape} vs {probs_b.shape}")
    mean = 0.5 * (probs_a + probs_b)
    return mean / mean.sum(axis=1, keepdims=True)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    if config.variant == "twin":
        return TwinModel(config, rng, dtype)
    if config.variant == "late":
        return LateFusionModel(config, rng, dtype)
    return SingleStreamModel(config, rng, dtype)


def parameter_count(model: Layer) -> int:
    return sum(int(a.size) for _, a in model.named_parameters())


def config_to_sidecar(config: ModelConfig) -> Dict:
    # attention key: false / true (auto stages) / explicit stage list
    if not config.attention:
        attention = False
    elif config.attention_stages is None:
        attention = True
    else:
        attention = list(config.attention_stages)
    return {
        "variant": config.variant,
        "attention": attention,
        "window_frames": config.window_frames,
        "spatial": list(config.spatial),
        "filters": list(config.filters),
        "fc_size": config.fc_size,
        "n_classes": config.n_classes,
        "channels": {"rgb": config.rgb_channels, "flow": config.flow_channels},
    }


def sidecar_to_config(doc: Dict) -> ModelConfig:
    want = {"variant", "attention", "window_frames", "spatial", "filters",
            "fc_size", "n_classes", "channels"}
    if set(doc) != want:
        raise ValueError(f"sidecar keys {sorted(doc)} != {sorted(want)}")
    attention = doc["attention"]
    if isinstance(attention, list):
        enabled, stages = True, tuple(attention)
    else:
        enabled, stages = bool(attention), None
    return ModelConfig(
        variant=doc["variant"],
        attention=enabled,
        attention_stages=stages,
        window_frames=doc["window_frames"],
        spatial=tuple(doc["spatial"]),
        filters=tuple(doc["filters"]),
        fc_size=doc["fc_size"],
        n_classes=doc["n_classes"],
        rgb_channels=doc["channels"]["rgb"],
        flow_channels=doc["channels"]["flow"],
    )


def sidecar_path(path) -> str:
    return f"{path}.json"


def save_model(path, model: Layer) -> None:
    tensors = list(model.named_parameters()) + list(model.named_buffers())
    save_checkpoint(path, tensors)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(config_to_sidecar(model.config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        config = sidecar_to_config(json.load(fh))
    model = build_model(config)
    stored = load_checkpoint(path)
    expected = dict(model.named_parameters())
    expected.update(model.named_buffers())
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match architecture; missing {missing[:3]}, "
            f"unexpected {extra[:3]}")
    for name, arr in expected.items():
        if stored[name].shape != arr.shape:
            raise ValueError(
                f"tensor {name!r} has shape {stored[name].shape}, "
                f"expected {arr.shape}")
        arr[...] = stored[name]
    return model
