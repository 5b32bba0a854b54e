"""Optical-flow fields, normalization, masking and a block-matching estimator.

Flow is stored channels-first as (2, T-1, H, W): component 0 is the
horizontal displacement v_x, component 1 the vertical displacement v_y, in
pixels per frame. Normalization statistics are taken over one component of
the whole sample window, never per frame, so clamping cannot flicker from
frame to frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .tensor import NonFiniteError, ShapeError

DEFAULT_EPSILON_GUARD = 1e-8


@dataclass
class FlowField:
    """A stack of per-frame-pair displacement fields."""

    data: np.ndarray  # (2, T-1, H, W)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ShapeError(
                f"flow data must be (2, T-1, H, W), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("flow field contains non-finite values")

    @property
    def n_pairs(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class NormalizationMethod:
    kind: str = "normal"
    epsilon_guard: float = DEFAULT_EPSILON_GUARD

    def __post_init__(self):
        if self.kind not in ("normal", "max"):
            raise ValueError(f"normalization kind must be normal or max, got {self.kind!r}")
        if self.epsilon_guard <= 0:
            raise ValueError("epsilon_guard must be positive")


def _sign(v: np.ndarray) -> np.ndarray:
    # SIGN(0) = 0
    return np.sign(v)


def normalize_normal(component: np.ndarray,
                     epsilon_guard: float = DEFAULT_EPSILON_GUARD
                     ) -> Tuple[np.ndarray, bool]:
    """Scale one flow component by mean + 3 * population std of the window.

    Values with |v'| < 1 pass through; the rest collapse to their sign.
    Returns the scaled field and a degenerate flag; the flag is set and the
    output zeroed when the divisor is not safely positive (still scenes).
    """
    if not np.isfinite(component).all():
        raise NonFiniteError("flow component contains non-finite values")
    mu = float(component.mean(dtype=np.float64))
    sigma = float(component.std(dtype=np.float64))
    divisor = mu + 3.0 * sigma
    if divisor <= epsilon_guard:
        return np.zeros_like(component), True
    scaled = component / divisor
    return np.where(np.abs(scaled) < 1.0, scaled, _sign(scaled)), False


def normalize_max(component: np.ndarray,
                  epsilon_guard: float = DEFAULT_EPSILON_GUARD
                  ) -> Tuple[np.ndarray, bool]:
    """Scale one flow component by the window's max absolute value."""
    if not np.isfinite(component).all():
        raise NonFiniteError("flow component contains non-finite values")
    peak = float(np.abs(component).max(initial=0.0))
    if peak <= epsilon_guard:
        return np.zeros_like(component), True
    return component / peak, False


def normalize_flow(flow: FlowField, method: NormalizationMethod
                   ) -> Tuple[FlowField, Tuple[bool, bool]]:
    """Normalize both components independently; flags report degeneracy."""
    fn = normalize_normal if method.kind == "normal" else normalize_max
    out = np.empty_like(flow.data)
    flags = []
    for c in range(2):
        out[c], degenerate = fn(flow.data[c], method.epsilon_guard)
        flags.append(degenerate)
    return FlowField(out), (flags[0], flags[1])


def apply_foreground_mask(flow: FlowField, masks: np.ndarray) -> FlowField:
    """Zero flow vectors outside the foreground; masks are (T-1, H, W) in {0,1}."""
    if masks.shape != (flow.n_pairs, flow.height, flow.width):
        raise ShapeError(
            f"mask extents {masks.shape} do not match flow "
            f"{(flow.n_pairs, flow.height, flow.width)}")
    if not np.isin(masks, (0, 1)).all():
        raise ValueError("foreground masks must be binary")
    return FlowField(flow.data * masks[None].astype(flow.data.dtype))


def _block_starts(extent: int, block: int) -> List[int]:
    return list(range(0, extent, block))


def estimate_flow_block_matching(prev: np.ndarray, nxt: np.ndarray,
                                 block: int = 8, search_radius: int = 4
                                 ) -> np.ndarray:
    """Integer block-matching flow between two grayscale frames.

    Each block of ``prev`` is compared against displaced positions in ``nxt``
    within the search radius; the displacement with the smallest sum of
    absolute differences wins. Ties prefer the smallest displacement
    magnitude, then the lexicographically smallest (dy, dx). Only fully
    contained displaced blocks compete. Returns (2, H, W) with v_x first.
    """
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ShapeError(
            f"frames must be matching 2-D arrays, got {prev.shape} and {nxt.shape}")
    if block < 1 or search_radius < 1:
        raise ValueError("block and search_radius must be >= 1")
    h, w = prev.shape
    p = prev.astype(np.float64, copy=False)
    n = nxt.astype(np.float64, copy=False)
    # fixed candidate order makes "first strictly better wins" apply the tie rule
    candidates = sorted(
        ((dy, dx) for dy in range(-search_radius, search_radius + 1)
         for dx in range(-search_radius, search_radius + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    out = np.zeros((2, h, w), dtype=np.float32)
    for y0 in _block_starts(h, block):
        y1 = min(y0 + block, h)
        for x0 in _block_starts(w, block):
            x1 = min(x0 + block, w)
            ref = p[y0:y1, x0:x1]
            best = None
            best_d = (0, 0)
            for dy, dx in candidates:
                if y0 + dy < 0 or x0 + dx < 0 or y1 + dy > h or x1 + dx > w:
                    continue
                sad = float(np.abs(ref - n[y0 + dy:y1 + dy, x0 + dx:x1 + dx]).sum())
                if best is None or sad < best:
                    best = sad
                    best_d = (dy, dx)
            out[0, y0:y1, x0:x1] = best_d[1]
            out[1, y0:y1, x0:x1] = best_d[0]
    return out


def flow_for_video(frames: np.ndarray, block: int = 8, search_radius: int = 4
                   ) -> FlowField:
    """Block-matching flow for every consecutive grayscale frame pair."""
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ShapeError("need at least two (T, H, W) frames")
    fields = [estimate_flow_block_matching(frames[t], frames[t + 1],
                                           block, search_radius)
              for t in range(frames.shape[0] - 1)]
    return FlowField(np.stack(fields, axis=1))


def background_mask_baseline(frames: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground = pixels deviating from the running-mean background.

    The background for frame t is the mean of frames 0..t-1; frame 0 is
    all-background by definition. Returns (T, H, W) uint8 masks.
    """
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ShapeError("need at least two (T, H, W) frames")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    masks = np.zeros(frames.shape, dtype=np.uint8)
    background = frames[0].astype(np.float64)
    for t in range(1, frames.shape[0]):
        masks[t] = (np.abs(frames[t].astype(np.float64) - background)
                    > threshold).astype(np.uint8)
        background += (frames[t] - background) / (t + 1)
    return masks


def flow_window_to_input(flow_window: np.ndarray,
                         window_frames: Optional[int] = None) -> np.ndarray:
    """Pad a (2, T-1, H, W) flow window to T frames for the flow branch.

    Flow has one field fewer than the frame count; the final frame is
    zero-padded so both branches share the temporal extent.
    """
    if flow_window.ndim != 4 or flow_window.shape[0] != 2:
        raise ShapeError("flow window must be (2, T-1, H, W)")
    target = window_frames if window_frames is not None else flow_window.shape[1] + 1
    missing = target - flow_window.shape[1]
    if missing < 0:
        raise ShapeError(
            f"flow window holds {flow_window.shape[1]} fields, more than "
            f"{target} frames")
    if missing == 0:
        return flow_window
    pad = np.zeros((2, missing) + flow_window.shape[2:], dtype=flow_window.dtype)
    return np.concatenate([flow_window, pad], axis=1)
