"""Pre-activation residual blocks and the soft-mask attention block.

The attention block wires twelve residual blocks into a trunk branch and a
three-level bottom-up/top-down mask branch. Backward is a hand-rolled walk of
that DAG; tensors that fan out (the entry output and the two bottom-up
intermediates) accumulate gradients from every consumer.
"""

from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .ops import (
    BatchNorm3d,
    Conv3d,
    Layer,
    MaxPool3d,
    Sigmoid,
    Upsample3d,
    relu,
    relu_backward,
)
from .tensor import ShapeError

# pool depth of the mask branch; each level halves every spatial extent
_MASK_LEVELS = 3
MIN_ATTENTION_EXTENT = 2 ** _MASK_LEVELS


def _prefixed(prefix: str, items):
    return [(f"{prefix}.{name}", arr) for name, arr in items]


class BnReluConv3d(Layer):
    """Pre-activation unit: batchnorm, relu, then convolution."""

    def __init__(self, bn: BatchNorm3d, conv: Conv3d):
        if bn.channels != conv.in_channels:
            raise ShapeError("batchnorm width must match conv input channels")
        self.bn = bn
        self.conv = conv
        self._pre: Optional[np.ndarray] = None

    @classmethod
    def initialize(cls, c_in: int, c_out: int, kernel, padding=(0, 0, 0),
                   rng: Optional[np.random.Generator] = None,
                   dtype=np.float32) -> "BnReluConv3d":
        bn = BatchNorm3d.initialize(c_in, dtype=dtype)
        conv = Conv3d.initialize(c_in, c_out, kernel, padding=padding,
                                 rng=rng, dtype=dtype)
        return cls(bn, conv)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = self.bn.forward(x, train)
        self._pre = h
        return self.conv.forward(relu(h))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._pre is None:
            raise RuntimeError("backward called before forward")
        ga = self.conv.backward(grad_out)
        return self.bn.backward(relu_backward(ga, self._pre))

    def activation_signature(self) -> bytes:
        """Relu sign pattern of the last forward; identifies the smooth region.

        Empty when the unit has not run, so skipped branches contribute
        nothing to a composite signature.
        """
        if self._pre is None:
            return b""
        return np.packbits((self._pre > 0).reshape(-1)).tobytes()

    def named_parameters(self):
        return _prefixed("bn", self.bn.named_parameters()) \
            + _prefixed("conv", self.conv.named_parameters())

    def named_gradients(self):
        return _prefixed("bn", self.bn.named_gradients()) \
            + _prefixed("conv", self.conv.named_gradients())

    def named_buffers(self):
        return _prefixed("bn", self.bn.named_buffers())


class ResidualBlock3d(Layer):
    """Identity-skip bottleneck: three BN-ReLU-conv units plus the input.

    Channel flow is N -> max(1, N // 4) -> max(1, N // 4) -> N with kernels
    1, 3 (padded), 1, so shape is preserved end to end.
    """

    def __init__(self, sub1: BnReluConv3d, sub2: BnReluConv3d, sub3: BnReluConv3d):
        if sub1.bn.channels != sub3.conv.out_channels:
            raise ShapeError("residual block must preserve its channel count")
        if sub1.conv.out_channels != sub2.bn.channels \
                or sub2.conv.out_channels != sub3.bn.channels:
            raise ShapeError("residual sub-layer channel chain is inconsistent")
        self._subs = (sub1, sub2, sub3)

    @classmethod
    def initialize(cls, channels: int, rng: Optional[np.random.Generator] = None,
                   dtype=np.float32) -> "ResidualBlock3d":
        mid = max(1, channels // 4)
        sub1 = BnReluConv3d.initialize(channels, mid, 1, (0, 0, 0), rng, dtype)
        sub2 = BnReluConv3d.initialize(mid, mid, 3, (1, 1, 1), rng, dtype)
        sub3 = BnReluConv3d.initialize(mid, channels, 1, (0, 0, 0), rng, dtype)
        return cls(sub1, sub2, sub3)

    @property
    def channels(self) -> int:
        return self._subs[0].bn.channels

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = x
        for sub in self._subs:
            h = sub.forward(h, train)
        return h + x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = grad_out
        for sub in reversed(self._subs):
            g = sub.backward(g)
        return g + grad_out

    def activation_signature(self) -> bytes:
        return b"".join(sub.activation_signature() for sub in self._subs)

    def _named(self, getter):
        out = []
        for i, sub in enumerate(self._subs, start=1):
            for name, arr in getter(sub):
                kind, leaf = name.split(".", 1)
                out.append((f"{kind}{i}.{leaf}", arr))
        return out

    def named_parameters(self):
        return self._named(lambda s: s.named_parameters())

    def named_gradients(self):
        return self._named(lambda s: s.named_gradients())

    def named_buffers(self):
        return self._named(lambda s: s.named_buffers())


class AttentionBlock3d(Layer):
    """Residual attention: trunk output modulated by a learned soft mask.

    out = exit(trunk * (1 + mask)). The mask branch pools the entry output
    three times, then walks back up with trilinear upsampling and skip
    residuals, ending in two 1x1x1 pre-activation heads and a sigmoid.

    Every spatial extent at the block input must be at least 8 so the third
    pooling level stays non-degenerate.

    ``force_zero_mask`` skips the mask branch entirely; the block then
    computes exit(trunk(entry(x))) bit for bit, which pins down the wiring in
    tests.
    """

    RESIDUAL_BLOCK_COUNT = 12

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32, force_zero_mask: bool = False):
        rng = rng or np.random.default_rng(0)
        block = lambda: ResidualBlock3d.initialize(channels, rng, dtype)  # noqa: E731
        self.channels = channels
        self.force_zero_mask = force_zero_mask
        self.entry = block()
        self.trunk1 = block()
        self.trunk2 = block()
        self.bu = (block(), block(), block())
        self.td = (block(), block(), block())
        self.skips = (block(), block())
        self.heads = (
            BnReluConv3d.initialize(channels, channels, 1, (0, 0, 0), rng, dtype),
            BnReluConv3d.initialize(channels, channels, 1, (0, 0, 0), rng, dtype),
        )
        self.exit = block()
        self._pools = tuple(MaxPool3d((2, 2, 2)) for _ in range(_MASK_LEVELS))
        self._ups = tuple(Upsample3d() for _ in range(_MASK_LEVELS))
        self._sig = Sigmoid()
        self._cache = None

    def _mask_forward(self, e: np.ndarray, train: bool) -> np.ndarray:
        bu1, bu2, bu3 = self.bu
        td1, td2, td3 = self.td
        skip1, skip2 = self.skips
        p1, p2, p3 = self._pools
        up1, up2, up3 = self._ups
        x1 = bu1.forward(p1.forward(e), train)
        x2 = bu2.forward(p2.forward(x1), train)
        x3 = bu3.forward(p3.forward(x2), train)
        y1 = up1.forward(td1.forward(x3, train), x2.shape[2:]) + skip1.forward(x2, train)
        y2 = up2.forward(td2.forward(y1, train), x1.shape[2:]) + skip2.forward(x1, train)
        y3 = up3.forward(td3.forward(y2, train), e.shape[2:])
        h = self.heads[1].forward(self.heads[0].forward(y3, train), train)
        return self._sig.forward(h)

    def mask_branch(self, e: np.ndarray, train: bool = False) -> np.ndarray:
        """Mask for a given entry-block output; exposed for inspection."""
        return self._mask_forward(e, train)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeError("attention input must be (B, C, D, H, W)")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"channel mismatch: input has {x.shape[1]}, block expects {self.channels}")
        if min(x.shape[2:]) < MIN_ATTENTION_EXTENT:
            raise ShapeError(
                f"attention block needs every spatial extent >= {MIN_ATTENTION_EXTENT}, "
                f"got {x.shape[2:]}")
        e = self.entry.forward(x, train)
        t = self.trunk2.forward(self.trunk1.forward(e, train), train)
        if self.force_zero_mask:
            self._cache = (None, None)
            return self.exit.forward(t, train)
        m = self._mask_forward(e, train)
        self._cache = (t, m)
        return self.exit.forward(t * (1.0 + m), train)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        t, m = self._cache
        gp = self.exit.backward(grad_out)
        if t is None:  # mask branch was skipped
            ge = self.trunk1.backward(self.trunk2.backward(gp))
            return self.entry.backward(ge)

        bu1, bu2, bu3 = self.bu
        td1, td2, td3 = self.td
        skip1, skip2 = self.skips
        p1, p2, p3 = self._pools
        up1, up2, up3 = self._ups

        gt = gp * (1.0 + m)
        gm = gp * t
        gy3 = self.heads[0].backward(self.heads[1].backward(self._sig.backward(gm)))
        gy2 = td3.backward(up3.backward(gy3))
        gx1 = skip2.backward(gy2)
        gy1 = td2.backward(up2.backward(gy2))
        gx2 = skip1.backward(gy1)
        gx3 = td1.backward(up1.backward(gy1))
        gx2 += p3.backward(bu3.backward(gx3))
        gx1 += p2.backward(bu2.backward(gx2))
        ge = p1.backward(bu1.backward(gx1))
        ge += self.trunk1.backward(self.trunk2.backward(gt))
        return self.entry.backward(ge)

    def activation_signature(self) -> bytes:
        """Digest of every relu sign mask and pool argmax of the last forward.

        Two inputs with equal signatures lie in the same smooth region of the
        block, where finite differences of the block are valid.
        """
        h = hashlib.blake2b(digest_size=16)
        for _, comp in self._components():
            h.update(comp.activation_signature())
        for pool in self._pools:
            if pool._arg is not None:
                h.update(pool._arg.astype(np.int8).tobytes())
        return h.digest()

    def _components(self):
        bu1, bu2, bu3 = self.bu
        td1, td2, td3 = self.td
        return [
            ("entry", self.entry),
            ("trunk1", self.trunk1), ("trunk2", self.trunk2),
            ("mask.bu1", bu1), ("mask.bu2", bu2), ("mask.bu3", bu3),
            ("mask.td1", td1), ("mask.td2", td2), ("mask.td3", td3),
            ("mask.skip1", self.skips[0]), ("mask.skip2", self.skips[1]),
            ("mask.head1", self.heads[0]), ("mask.head2", self.heads[1]),
            ("exit", self.exit),
        ]

    def named_parameters(self):
        out = []
        for prefix, comp in self._components():
            out.extend(_prefixed(prefix, comp.named_parameters()))
        return out

    def named_gradients(self):
        out = []
        for prefix, comp in self._components():
            out.extend(_prefixed(prefix, comp.named_gradients()))
        return out

    def named_buffers(self):
        out = []
        for prefix, comp in self._components():
            out.extend(_prefixed(prefix, comp.named_buffers()))
        return out
