"""Forward/backward building blocks for the pore detection FCN.

Feature maps are numpy arrays laid out as ``(batch, height, width, channels)``.
Every op keeps the dtype of its input, so the same code runs in float32 for
training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

TRAIN = "train"
INFER = "infer"


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")


def _check_nhwc(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, height, width, channels), got shape {x.shape}")
    if min(x.shape[1:]) < 1:
        raise ShapeError(f"{name} has an empty spatial or channel axis: {x.shape}")


@dataclass
class ConvParams:
    weights: np.ndarray  # (kernel_h, kernel_w, in_channels, out_channels)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[3]} output channels"
            )

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @classmethod
    def init(cls, kernel: int, in_channels: int, out_channels: int, rng: np.random.Generator,
             dtype=np.float32) -> "ConvParams":
        """He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in), zero bias."""
        fan_in = kernel * kernel * in_channels
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(kernel, kernel, in_channels, out_channels))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self) -> None:
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batch-norm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, channels: int, dtype=np.float32, epsilon: float = 1e-3,
             momentum: float = 0.99) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )


# -- convolution ------------------------------------------------------------


@njit(cache=True)
def _col2im(cols, out):
    n, ho, wo, kh, kw, c = cols.shape
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    for dj in range(kw):
                        for ch in range(c):
                            out[b, i + di, j + dj, ch] += cols[b, i, j, di, dj, ch]


def conv2d_valid(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Valid-padding, unit-stride cross-correlation plus bias."""
    _check_nhwc(x)
    n, h, w, c = x.shape
    kh, kw = params.kernel_h, params.kernel_w
    if c != params.in_channels:
        raise ShapeError(f"input has {c} channels, kernel expects {params.in_channels}")
    if h < kh or w < kw:
        raise ShapeError(f"input {h}x{w} is smaller than the {kh}x{kw} kernel")
    ho, wo = h - kh + 1, w - kw + 1
    cols = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ params.weights.reshape(kh * kw * c, params.out_channels)
    out += params.bias
    return out.reshape(n, ho, wo, params.out_channels)


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray,
                    input_grad: bool = True) -> tuple[np.ndarray | None, ConvParams]:
    """Gradients of a scalar loss w.r.t. the conv input, weights and bias.

    ``input_grad=False`` skips the input gradient (first layer of a network),
    returning ``None`` in its place.
    """
    _check_nhwc(x)
    n, h, w, c = x.shape
    kh, kw, co = params.kernel_h, params.kernel_w, params.out_channels
    ho, wo = h - kh + 1, w - kw + 1
    if c != params.in_channels or ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape} does not fit kernel {params.weights.shape}")
    if grad_out.shape != (n, ho, wo, co):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {(n, ho, wo, co)}")

    g2 = grad_out.reshape(n * ho * wo, co)
    cols = sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    grad_w = (cols.T @ g2).reshape(kh, kw, c, co)
    grad_b = g2.sum(axis=0)

    grad_x = None
    if input_grad:
        grad_cols = g2 @ params.weights.reshape(kh * kw * c, co).T
        grad_x = np.zeros_like(x)
        _col2im(grad_cols.reshape(n, ho, wo, kh, kw, c), grad_x)
    return grad_x, ConvParams(grad_w, grad_b)


# -- activations ------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element binary cross-entropy from logits and its logit gradient.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so log(0) is never evaluated.
    Returns ``(loss, sigmoid(z) - y)``.
    """
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


# -- pooling ----------------------------------------------------------------


@njit(cache=True)
def _pool_forward(x, out, idx):
    n, ho, wo, c = out.shape
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[b, i, j, ch]
                    arg = 0
                    for k in range(1, 9):
                        v = x[b, i + k // 3, j + k % 3, ch]
                        if v > best:
                            best = v
                            arg = k
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = arg


@njit(cache=True)
def _pool_backward(idx, grad_out, grad_x):
    n, ho, wo, c = grad_out.shape
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    k = idx[b, i, j, ch]
                    grad_x[b, i + k // 3, j + k % 3, ch] += grad_out[b, i, j, ch]


def maxpool3x3_s1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 max pooling, stride 1, valid padding.

    Returns the pooled map and the flat in-window argmax (0..8, row-major,
    first maximum wins) used by :func:`maxpool3x3_s1_backward`.
    """
    _check_nhwc(x)
    n, h, w, c = x.shape
    if h < 3 or w < 3:
        raise ShapeError(f"input {h}x{w} is smaller than the 3x3 pooling window")
    x = np.ascontiguousarray(x)
    out = np.empty((n, h - 2, w - 2, c), dtype=x.dtype)
    idx = np.empty(out.shape, dtype=np.uint8)
    _pool_forward(x, out, idx)
    return out, idx


def maxpool3x3_s1_backward(input_shape: tuple[int, ...], argmax: np.ndarray,
                           grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {argmax.shape}")
    n, h, w, c = input_shape
    if argmax.shape != (n, h - 2, w - 2, c):
        raise ShapeError(f"argmax shape {argmax.shape} does not match input shape {input_shape}")
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    _pool_backward(np.ascontiguousarray(argmax), np.ascontiguousarray(grad_out), grad_x)
    return grad_x


# -- batch normalization ----------------------------------------------------


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str
                      ) -> tuple[np.ndarray, BatchNormCache | None]:
    """Per-channel batch norm over the (batch, height, width) axes.

    In train mode the batch statistics normalise the input and the running
    statistics are updated in place by exponential moving average. In infer
    mode the running statistics are used and ``state`` is untouched.
    """
    _check_mode(mode)
    _check_nhwc(x)
    if x.shape[-1] != state.channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, batch norm has {state.channels}")
    if mode == INFER:
        scale = state.gamma / np.sqrt(state.running_var + state.epsilon)
        return (x - state.running_mean) * scale + state.beta, None

    if x.shape[0] == 0:
        raise ShapeError("cannot compute batch statistics of an empty batch")
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    m = state.momentum
    state.running_mean[...] = m * state.running_mean + (1 - m) * mean
    state.running_var[...] = m * state.running_var + (1 - m) * var
    return x_hat * state.gamma + state.beta, BatchNormCache(x_hat, inv_std)


def batchnorm_backward(cache: BatchNormCache, state: BatchNormState, grad_out: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train-mode batch-norm gradient: returns (grad_input, grad_gamma, grad_beta)."""
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward shape {cache.x_hat.shape}")
    axes = (0, 1, 2)
    m = grad_out.shape[0] * grad_out.shape[1] * grad_out.shape[2]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=axes)
    grad_x = (state.gamma * cache.inv_std / m) * (
        m * grad_out - grad_beta - cache.x_hat * grad_gamma
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# -- dropout ----------------------------------------------------------------


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled keep-mask (None in infer mode)."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == INFER or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# -- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    base_lr: float = 0.1
    decay_rate: float = 0.96
    decay_steps: int = 2000
    step_count: int = 0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or self.decay_rate <= 0 or self.decay_steps <= 0:
            raise ValueError("base_lr, decay_rate and decay_steps must be positive")
        if self.step_count < 0 or self.weight_decay < 0:
            raise ValueError("step_count and weight_decay must be nonnegative")

    @property
    def effective_lr(self) -> float:
        # staircase: the rate drops once per completed block of decay_steps
        return self.base_lr * self.decay_rate ** (self.step_count // self.decay_steps)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], opt: OptimizerState) -> None:
    """Plain SGD, in place: ``p -= lr * (g + weight_decay * p)``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    lr = opt.effective_lr
    for p, g in zip(params, grads):
        update = g + opt.weight_decay * p if opt.weight_decay else g
        p -= (lr * update).astype(p.dtype, copy=False)
    opt.step_count += 1
