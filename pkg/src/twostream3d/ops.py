"""Primitive network layers with explicit forward and backward passes.

Every layer caches what its backward pass needs during ``forward``; a
forward/backward pair therefore belongs to one thread. Parameters are plain
numpy arrays updated in place by the optimizer. Gradients land in matching
``grad_*`` attributes when ``backward`` runs.

Data layout is channels-first throughout: ``(B, C, D, H, W)`` with the
temporal axis in the D slot and row-major storage.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import NonFiniteError, ShapeError

Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 extents, got {v!r}")
    return t


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform init in +-sqrt(1/fan_in), the default for every layer here.

    Samples are drawn in the target dtype so large float32 layers never
    materialize a float64 temporary.
    """
    bound = math.sqrt(1.0 / max(1, fan_in))
    if np.dtype(dtype) == np.float32:
        u = rng.random(size=shape, dtype=np.float32)
    else:
        u = rng.random(size=shape)
    u *= 2.0 * bound
    u -= bound
    return u.astype(dtype, copy=False)


class Layer:
    """Minimal parameter protocol shared by all layers and blocks."""

    def named_parameters(self):
        return []

    def named_gradients(self):
        return []

    def named_buffers(self):
        return []


def conv3d_output_extents(in_dhw: Sequence[int], kernel: Triple, stride: Triple,
                          padding: Triple) -> Triple:
    out = []
    for i, k, s, p in zip(in_dhw, kernel, stride, padding):
        o = (i + 2 * p - k) // s + 1
        if o < 1:
            raise ShapeError(
                f"degenerate conv output extent for input {tuple(in_dhw)}, "
                f"kernel {kernel}, stride {stride}, padding {padding}")
        out.append(o)
    return tuple(out)


class Conv3d(Layer):
    """3D cross-correlation with zero padding (no kernel flip).

    weight: (C_out, C_in, k_d, k_h, k_w), bias: (C_out,).
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 stride=(1, 1, 1), padding=(0, 0, 0)):
        if weight.ndim != 5:
            raise ShapeError("conv weight must have rank 5")
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv bias must have one value per output channel")
        self.weight = weight
        self.bias = bias
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        if any(k < 1 for k in weight.shape[2:]) or any(s < 1 for s in self.stride):
            raise ShapeError("kernel extents and strides must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ShapeError("padding must be non-negative")
        self.grad_weight: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None
        self._x: Optional[np.ndarray] = None

    @classmethod
    def initialize(cls, c_in: int, c_out: int, kernel, stride=(1, 1, 1),
                   padding=(0, 0, 0), rng: Optional[np.random.Generator] = None,
                   dtype=np.float32) -> "Conv3d":
        rng = rng or np.random.default_rng(0)
        kernel = _triple(kernel)
        fan_in = c_in * kernel[0] * kernel[1] * kernel[2]
        w = uniform_init(rng, (c_out, c_in) + kernel, fan_in, dtype)
        b = uniform_init(rng, (c_out,), fan_in, dtype)
        return cls(w, b, stride, padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def _pad(self, x: np.ndarray) -> np.ndarray:
        pd, ph, pw = self.padding
        if pd == ph == pw == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeError("conv input must be (B, C, D, H, W)")
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"channel mismatch: input has {x.shape[1]}, layer expects {self.in_channels}")
        out_dhw = conv3d_output_extents(x.shape[2:], self.weight.shape[2:],
                                        self.stride, self.padding)
        self._x = x
        xp = self._pad(x)
        kd, kh, kw = self.weight.shape[2:]
        sd, sh, sw = self.stride
        do, ho, wo = out_dhw
        acc = np.zeros((x.shape[0], do, ho, wo, self.out_channels), dtype=x.dtype)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    sl = xp[:, :, a:a + sd * (do - 1) + 1:sd,
                            b:b + sh * (ho - 1) + 1:sh,
                            c:c + sw * (wo - 1) + 1:sw]
                    acc += np.tensordot(sl, self.weight[:, :, a, b, c], axes=([1], [1]))
        out = np.moveaxis(acc, -1, 1)
        out += self.bias.reshape(1, -1, 1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("conv backward called before forward")
        x = self._x
        if grad_out.shape[:2] != (x.shape[0], self.out_channels):
            raise ShapeError("grad_out does not match conv output")
        xp = self._pad(x)
        kd, kh, kw = self.weight.shape[2:]
        sd, sh, sw = self.stride
        do, ho, wo = grad_out.shape[2:]
        g = np.moveaxis(grad_out, 1, -1)  # (B, Do, Ho, Wo, C_out)
        self.grad_bias = grad_out.sum(axis=(0, 2, 3, 4)).astype(self.bias.dtype)
        gw = np.zeros_like(self.weight)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    dsl = (slice(None), slice(None),
                           slice(a, a + sd * (do - 1) + 1, sd),
                           slice(b, b + sh * (ho - 1) + 1, sh),
                           slice(c, c + sw * (wo - 1) + 1, sw))
                    sl = xp[dsl]
                    gw[:, :, a, b, c] = np.tensordot(
                        grad_out, sl, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                    contrib = np.tensordot(g, self.weight[:, :, a, b, c],
                                           axes=([4], [0]))  # (B,Do,Ho,Wo,C_in)
                    gxp[dsl] += np.moveaxis(contrib, -1, 1)
        self.grad_weight = gw
        pd, ph, pw = self.padding
        if pd or ph or pw:
            grad_x = gxp[:, :, pd:gxp.shape[2] - pd, ph:gxp.shape[3] - ph,
                         pw:gxp.shape[4] - pw]
        else:
            grad_x = gxp
        return np.ascontiguousarray(grad_x)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_gradients(self):
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]


class MaxPool3d(Layer):
    """Non-overlapping max pooling (stride = kernel) with floor semantics.

    Trailing elements beyond floor(extent / kernel) * kernel are dropped.
    Ties inside a window resolve to the lowest flat index, which the argmax
    over the window-local row-major layout yields directly.
    """

    def __init__(self, kernel=(2, 2, 2), record_tie_gap: bool = False):
        self.kernel = _triple(kernel)
        if any(k < 1 for k in self.kernel):
            raise ShapeError("pool kernel extents must be >= 1")
        self.record_tie_gap = record_tie_gap
        self.last_tie_gap: Optional[float] = None
        self._arg: Optional[np.ndarray] = None
        self._in_shape: Optional[Tuple[int, ...]] = None

    def output_extents(self, in_dhw: Sequence[int]) -> Triple:
        for i, k in zip(in_dhw, self.kernel):
            if i < k:
                raise ShapeError(f"pool input extent {i} smaller than kernel {k}")
        return tuple(i // k for i, k in zip(in_dhw, self.kernel))

    def _windows(self, x: np.ndarray) -> np.ndarray:
        kd, kh, kw = self.kernel
        do, ho, wo = self.output_extents(x.shape[2:])
        xc = x[:, :, :do * kd, :ho * kh, :wo * kw]
        win = xc.reshape(x.shape[0], x.shape[1], do, kd, ho, kh, wo, kw)
        win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7)
        return win.reshape(x.shape[0], x.shape[1], do, ho, wo, kd * kh * kw)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeError("pool input must be (B, C, D, H, W)")
        win = self._windows(x)
        self._arg = win.argmax(axis=-1)
        self._in_shape = x.shape
        if self.record_tie_gap:
            if win.shape[-1] >= 2:
                top2 = np.partition(win, win.shape[-1] - 2, axis=-1)[..., -2:]
                self.last_tie_gap = float((top2[..., 1] - top2[..., 0]).min())
            else:
                self.last_tie_gap = math.inf
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def activation_signature(self) -> bytes:
        """Argmax pattern of the last forward; identifies the smooth region."""
        if self._arg is None:
            return b""
        return self._arg.astype(np.int8).tobytes()

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._arg is None:
            raise RuntimeError("pool backward called before forward")
        if grad_out.shape != self._arg.shape:
            raise ShapeError("grad_out does not match pool output")
        b, ch, d, h, w = self._in_shape
        kd, kh, kw = self.kernel
        do, ho, wo = grad_out.shape[2:]
        gwin = np.zeros(grad_out.shape + (kd * kh * kw,), dtype=grad_out.dtype)
        np.put_along_axis(gwin, self._arg[..., None], grad_out[..., None], axis=-1)
        gwin = gwin.reshape(b, ch, do, ho, wo, kd, kh, kw)
        gwin = gwin.transpose(0, 1, 2, 5, 3, 6, 4, 7)
        gx = np.zeros(self._in_shape, dtype=grad_out.dtype)
        gx[:, :, :do * kd, :ho * kh, :wo * kw] = gwin.reshape(
            b, ch, do * kd, ho * kh, wo * kw)
        return gx


class BatchNorm3d(Layer):
    """Per-channel batch normalization over batch and all positions.

    Train mode normalizes by the population statistics of the current batch
    and updates running statistics with the configured momentum; eval mode
    normalizes by the running statistics. Statistics accumulate in float64.
    """

    def __init__(self, gamma: np.ndarray, beta: np.ndarray, epsilon: float = 1e-5,
                 momentum: float = 0.1,
                 running_mean: Optional[np.ndarray] = None,
                 running_var: Optional[np.ndarray] = None):
        if gamma.shape != beta.shape or gamma.ndim != 1:
            raise ShapeError("gamma and beta must be matching vectors")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = gamma
        self.beta = beta
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.running_mean = (running_mean if running_mean is not None
                             else np.zeros_like(gamma))
        self.running_var = (running_var if running_var is not None
                            else np.ones_like(gamma))
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")
        self.grad_gamma: Optional[np.ndarray] = None
        self.grad_beta: Optional[np.ndarray] = None
        self._cache = None

    @classmethod
    def initialize(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1,
                   dtype=np.float32) -> "BatchNorm3d":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype),
                   epsilon, momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeError("batchnorm input must be (B, C, D, H, W)")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"channel mismatch: input has {x.shape[1]}, layer expects {self.channels}")
        axes = (0, 2, 3, 4)
        if train:
            mu = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
            m = self.momentum
            self.running_mean[...] = ((1.0 - m) * self.running_mean
                                      + m * mu.astype(self.gamma.dtype))
            self.running_var[...] = ((1.0 - m) * self.running_var
                                     + m * var.astype(self.gamma.dtype))
        else:
            mu = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.epsilon)).astype(x.dtype)
        xhat = (x - mu.astype(x.dtype).reshape(1, -1, 1, 1, 1)) \
            * inv_std.reshape(1, -1, 1, 1, 1)
        count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        self._cache = (xhat, inv_std, count, train)
        return xhat * self.gamma.reshape(1, -1, 1, 1, 1) \
            + self.beta.reshape(1, -1, 1, 1, 1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batchnorm backward called before forward")
        xhat, inv_std, count, train = self._cache
        if not train:
            raise RuntimeError("backward through eval-mode running statistics is forbidden")
        if grad_out.shape != xhat.shape:
            raise ShapeError("grad_out does not match batchnorm output")
        axes = (0, 2, 3, 4)
        dbeta = grad_out.sum(axis=axes, dtype=np.float64)
        dgamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64)
        self.grad_beta = dbeta.astype(self.beta.dtype)
        self.grad_gamma = dgamma.astype(self.gamma.dtype)
        coef = (self.gamma * inv_std).reshape(1, -1, 1, 1, 1)
        mean_g = (dbeta / count).astype(grad_out.dtype).reshape(1, -1, 1, 1, 1)
        mean_gx = (dgamma / count).astype(grad_out.dtype).reshape(1, -1, 1, 1, 1)
        return coef * (grad_out - mean_g - xhat * mean_gx)

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_gradients(self):
        return [("gamma", self.grad_gamma), ("beta", self.grad_beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu_backward(grad_out, x)
    if kind == "sigmoid":
        return sigmoid_backward(grad_out, sigmoid(x))
    raise ValueError(f"unknown activation {kind!r}")


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return relu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("relu backward called before forward")
        return relu_backward(grad_out, self._x)

    def activation_signature(self) -> bytes:
        """Sign pattern of the last forward; identifies the smooth region."""
        if self._x is None:
            return b""
        return np.packbits((self._x > 0).reshape(-1)).tobytes()


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._y is None:
            raise RuntimeError("sigmoid backward called before forward")
        return sigmoid_backward(grad_out, self._y)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; rows sum to 1 within float tolerance."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("softmax expects (B, K) with K >= 2")
    if not np.isfinite(logits).all():
        raise NonFiniteError("softmax received non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_probs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


_LOG_CLAMP = 1e-12


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the labelled class, clamped at 1e-12."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError("cross_entropy expects (B, K) probabilities and B labels")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label index out of range")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, _LOG_CLAMP)).mean(dtype=np.float64))


def cross_entropy_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of softmax + cross-entropy with respect to the logits."""
    labels = np.asarray(labels)
    g = probs.copy()
    g[np.arange(probs.shape[0]), labels] -= 1.0
    return g / probs.shape[0]


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Corner-aligned 1D linear interpolation matrix (dst x src)."""
    if dst < src:
        raise ShapeError(f"upsample target {dst} smaller than source {src}")
    m = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        m[:, 0] = 1.0
        return m
    scale = (src - 1) / (dst - 1)
    for i in range(dst):
        pos = i * scale
        lo = min(int(math.floor(pos)), src - 2)
        frac = pos - lo
        m[i, lo] = 1.0 - frac
        m[i, lo + 1] = frac
    return m


def _apply_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(m.astype(x.dtype), x, axes=([1], [axis]))
    return np.moveaxis(y, 0, axis)


def trilinear_upsample(x: np.ndarray, target: Triple) -> np.ndarray:
    """Separable corner-aligned linear upsampling of (B, C, D, H, W) data."""
    if x.ndim != 5:
        raise ShapeError("upsample input must be (B, C, D, H, W)")
    target = _triple(target)
    y = x
    for axis, (s, t) in zip((2, 3, 4), zip(x.shape[2:], target)):
        y = _apply_axis(y, _interp_matrix(s, t), axis)
    return y


def trilinear_upsample_backward(grad_out: np.ndarray, source_dhw: Triple) -> np.ndarray:
    """Adjoint of trilinear_upsample for a given source size."""
    y = grad_out
    for axis, (s, t) in zip((2, 3, 4), zip(source_dhw, grad_out.shape[2:])):
        y = _apply_axis(y, _interp_matrix(s, t).T, axis)
    return y


class Upsample3d(Layer):
    """Trilinear upsampling layer; the target extents are set per forward call."""

    def __init__(self):
        self._src: Optional[Triple] = None

    def forward(self, x: np.ndarray, target: Triple) -> np.ndarray:
        self._src = x.shape[2:]
        return trilinear_upsample(x, target)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._src is None:
            raise RuntimeError("upsample backward called before forward")
        return trilinear_upsample_backward(grad_out, self._src)


class Linear(Layer):
    """Fully connected layer y = W x + b on (B, in) inputs."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError("linear weight must be (out, in) with matching bias")
        self.weight = weight
        self.bias = bias
        self.grad_weight: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None
        self._x = None

    @classmethod
    def initialize(cls, in_features: int, out_features: int,
                   rng: Optional[np.random.Generator] = None,
                   dtype=np.float32) -> "Linear":
        rng = rng or np.random.default_rng(0)
        w = uniform_init(rng, (out_features, in_features), in_features, dtype)
        b = uniform_init(rng, (out_features,), in_features, dtype)
        return cls(w, b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear input must be (B, {self.weight.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("linear backward called before forward")
        self.grad_weight = grad_out.T @ self._x
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_gradients(self):
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]


class Bilinear(Layer):
    """Bilinear fusion out_j = x1^T W_j x2 + b_j over (B, d1) and (B, d2)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 3 or bias.shape != (weight.shape[0],):
            raise ShapeError("bilinear weight must be (classes, d1, d2) with matching bias")
        if weight.shape[0] < 2:
            raise ShapeError("bilinear fusion needs at least 2 output classes")
        self.weight = weight
        self.bias = bias
        self.grad_weight: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None
        self._cache = None

    @classmethod
    def initialize(cls, d1: int, d2: int, n_classes: int,
                   rng: Optional[np.random.Generator] = None,
                   dtype=np.float32) -> "Bilinear":
        rng = rng or np.random.default_rng(0)
        fan_in = d1 * d2
        w = uniform_init(rng, (n_classes, d1, d2), fan_in, dtype)
        b = uniform_init(rng, (n_classes,), fan_in, dtype)
        return cls(w, b)

    def forward(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        n, d1, d2 = self.weight.shape
        if x1.ndim != 2 or x2.ndim != 2 or x1.shape[0] != x2.shape[0]:
            raise ShapeError("bilinear inputs must be (B, d1) and (B, d2)")
        if x1.shape[1] != d1 or x2.shape[1] != d2:
            raise ShapeError(
                f"bilinear feature lengths {x1.shape[1]}/{x2.shape[1]} do not match "
                f"weight ({d1}, {d2})")
        self._cache = (x1, x2)
        return np.einsum("bi,nik,bk->bn", x1, self.weight, x2, optimize=True) + self.bias

    def backward(self, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("bilinear backward called before forward")
        x1, x2 = self._cache
        self.grad_weight = np.einsum("bn,bi,bk->nik", grad_out, x1, x2, optimize=True)
        self.grad_bias = grad_out.sum(axis=0)
        gx1 = np.einsum("bn,nik,bk->bi", grad_out, self.weight, x2, optimize=True)
        gx2 = np.einsum("bn,nik,bi->bk", grad_out, self.weight, x1, optimize=True)
        return gx1, gx2

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_gradients(self):
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]
