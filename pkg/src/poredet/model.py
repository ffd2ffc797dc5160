"""The pore detection FCN and its checkpoint format.

Architecture (every conv and pool is valid-padded with unit stride)::

    conv3x3(32) + relu -> batchnorm -> maxpool3x3
    conv3x3(64) + relu -> batchnorm -> maxpool3x3
    conv3x3(128) + relu -> batchnorm -> maxpool3x3 -> dropout
    conv5x5(1) -> batchnorm -> sigmoid

Each hidden stage shrinks the spatial size by 4 and the output conv by 4
more, so an MxN image maps to an (M-16)x(N-16) probability map and a 17x17
patch maps to a single probability.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import INFER, TRAIN, BatchNormState, ConvParams, ShapeError

PATCH_SIZE = 17
BORDER = PATCH_SIZE // 2  # 8
HIDDEN_FILTERS = (32, 64, 128)
OUTPUT_KERNEL = 5


@dataclass
class Layer:
    conv: ConvParams
    bn: BatchNormState | None = None


@dataclass
class PoreModel:
    """Conv layers run conv -> relu -> bn -> pool, except the last (conv -> bn -> sigmoid).

    Dropout sits right before the last layer.
    """

    layers: list[Layer]
    dropout_rate: float = 0.2
    step_count: int = 0

    @classmethod
    def create(cls, seed: int | np.random.Generator = 0, dropout_rate: float = 0.2,
               bn_epsilon: float = 1e-3, bn_momentum: float = 0.99) -> "PoreModel":
        rng = np.random.default_rng(seed)
        layers = []
        in_ch = 1
        for filters in HIDDEN_FILTERS:
            layers.append(Layer(ConvParams.init(3, in_ch, filters, rng),
                                BatchNormState.init(filters, epsilon=bn_epsilon, momentum=bn_momentum)))
            in_ch = filters
        layers.append(Layer(ConvParams.init(OUTPUT_KERNEL, in_ch, 1, rng),
                            BatchNormState.init(1, epsilon=bn_epsilon, momentum=bn_momentum)))
        return cls(layers, dropout_rate=dropout_rate)

    def copy(self) -> "PoreModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "PoreModel":
        """Copy with every array cast to ``dtype`` (float64 for gradient checks)."""
        m = self.copy()
        for layer in m.layers:
            layer.conv.weights = layer.conv.weights.astype(dtype)
            layer.conv.bias = layer.conv.bias.astype(dtype)
            if layer.bn is not None:
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(layer.bn, name, getattr(layer.bn, name).astype(dtype))
        return m

    @property
    def receptive_field(self) -> int:
        shrink = 0
        for layer in self.layers[:-1]:
            shrink += layer.conv.kernel_h - 1 + 2
        shrink += self.layers[-1].conv.kernel_h - 1
        return shrink + 1

    def trainable_arrays(self) -> list[np.ndarray]:
        """Conv weights and biases, then batch-norm gamma and beta, layer by layer."""
        out = []
        for layer in self.layers:
            out += [layer.conv.weights, layer.conv.bias]
            if layer.bn is not None:
                out += [layer.bn.gamma, layer.bn.beta]
        return out

    # -- inference ---------------------------------------------------------

    def forward(self, images: np.ndarray, mode: str = INFER,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Pore probability maps, shape ``(batch, M-16, N-16, 1)``.

        ``images`` is ``(batch, M, N)`` or ``(batch, M, N, 1)`` with pixels in [0, 1].
        Train mode updates the batch-norm running statistics.
        """
        logits, _ = self._forward(images, mode, rng, keep_cache=False)
        return nn.sigmoid(logits)

    def _prepare(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[-1] != 1:
            raise ShapeError(f"expected a (batch, M, N[, 1]) grayscale batch, got shape {x.shape}")
        rf = self.receptive_field
        if x.shape[1] < rf or x.shape[2] < rf:
            raise ShapeError(f"images must be at least {rf}x{rf}, got {x.shape[1]}x{x.shape[2]}")
        if x.size and (x.min() < 0 or x.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        dtype = self.layers[0].conv.weights.dtype
        return x.astype(dtype, copy=False)

    def _forward(self, images, mode, rng, keep_cache):
        x = self._prepare(images)
        cache = []
        for layer in self.layers[:-1]:
            z = nn.conv2d_valid(x, layer.conv)
            a = nn.relu(z)
            bn_cache = None
            if layer.bn is not None:
                a, bn_cache = nn.batchnorm_forward(a, layer.bn, mode)
            pooled, argmax = nn.maxpool3x3_s1(a)
            if keep_cache:
                cache.append((x, z, bn_cache, a.shape, argmax))
            x = pooled
        x, mask = nn.dropout(x, self.dropout_rate, mode, rng)
        last = self.layers[-1]
        z = nn.conv2d_valid(x, last.conv)
        bn_cache = None
        if last.bn is not None:
            z, bn_cache = nn.batchnorm_forward(z, last.bn, mode)
        if keep_cache:
            cache.append((x, mask, bn_cache))
        return z, cache

    # -- training ----------------------------------------------------------

    def forward_train(self, images: np.ndarray, rng: np.random.Generator):
        """Train-mode logits plus the cache needed by :meth:`backward`."""
        return self._forward(images, TRAIN, rng, keep_cache=True)

    def backward(self, cache, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients aligned with :meth:`trainable_arrays`."""
        grads: list[list[np.ndarray]] = []
        x_last, mask, bn_cache = cache[-1]
        last = self.layers[-1]
        g = grad_logits
        layer_grads = []
        if last.bn is not None:
            g, g_gamma, g_beta = nn.batchnorm_backward(bn_cache, last.bn, g)
            layer_grads = [g_gamma, g_beta]
        g, conv_g = nn.conv2d_backward(x_last, last.conv, g, input_grad=len(self.layers) > 1)
        grads.append([conv_g.weights, conv_g.bias] + layer_grads)
        if len(self.layers) > 1:
            g = nn.dropout_backward(mask, g)
        for idx in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[idx]
            x_in, z, bn_c, bn_shape, argmax = cache[idx]
            g = nn.maxpool3x3_s1_backward(bn_shape, argmax, g)
            layer_grads = []
            if layer.bn is not None:
                g, g_gamma, g_beta = nn.batchnorm_backward(bn_c, layer.bn, g)
                layer_grads = [g_gamma, g_beta]
            g = nn.relu_backward(z, g)
            g, conv_g = nn.conv2d_backward(x_in, layer.conv, g, input_grad=idx > 0)
            grads.append([conv_g.weights, conv_g.bias] + layer_grads)
        return [a for layer_g in reversed(grads) for a in layer_g]


def param_count(model: PoreModel) -> int:
    """Trainable parameters: conv weights + biases and batch-norm gamma + beta.

    Running statistics are not counted. The network as built gives 96,323;
    the published figure is 96,548. The 225-parameter gap equals the total
    channel count (32 + 64 + 128 + 1), i.e. one extra value per channel,
    which matches no standard accounting: adding both running statistics
    gives 96,773.
    """
    return int(sum(a.size for a in model.trainable_arrays()))


# -- checkpoints -----------------------------------------------------------
#
# Layout (little-endian):
#   magic b"PFCN" | u16 version | u64 step_count | f64 dropout_rate | u32 n_layers
#   per layer: u32 kh, kw, cin, cout | u8 has_bn | [f64 epsilon, f64 momentum]
#   per layer payload (f32): weights (kh*kw*cin*cout, C order), bias,
#                            [gamma, beta, running_mean, running_var]
#   u32 crc32 of every preceding byte

MAGIC = b"PFCN"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a pore model checkpoint (bad magic bytes)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written with an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared payload."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch or inconsistent header."""


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def checkpoint_bytes(model: PoreModel) -> bytes:
    parts = [MAGIC, struct.pack("<HQdI", FORMAT_VERSION, model.step_count, model.dropout_rate,
                                len(model.layers))]
    for layer in model.layers:
        kh, kw, cin, cout = layer.conv.weights.shape
        parts.append(struct.pack("<4IB", kh, kw, cin, cout, layer.bn is not None))
        if layer.bn is not None:
            parts.append(struct.pack("<dd", layer.bn.epsilon, layer.bn.momentum))
    for layer in model.layers:
        parts += [_f32(layer.conv.weights), _f32(layer.conv.bias)]
        if layer.bn is not None:
            bn = layer.bn
            parts += [_f32(bn.gamma), _f32(bn.beta), _f32(bn.running_mean), _f32(bn.running_var)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: PoreModel, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def checkpoint_from_bytes(data: bytes) -> PoreModel:
    r = _Reader(data)
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise CheckpointTruncatedError(f"checkpoint truncated to {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a pore model checkpoint (bad magic bytes)")
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    step_count, dropout_rate, n_layers = r.unpack("<QdI")
    if n_layers == 0 or n_layers > 64:
        raise CheckpointCorruptError(f"implausible layer count {n_layers}")
    headers = []
    for _ in range(n_layers):
        kh, kw, cin, cout, has_bn = r.unpack("<4IB")
        bn_cfg = r.unpack("<dd") if has_bn else None
        headers.append(((kh, kw, cin, cout), bn_cfg))
    layers = []
    for shape, bn_cfg in headers:
        w = r.array(shape)
        b = r.array((shape[3],))
        bn = None
        if bn_cfg is not None:
            arrs = [r.array((shape[3],)) for _ in range(4)]
            try:
                bn = BatchNormState(*arrs, epsilon=bn_cfg[0], momentum=bn_cfg[1])
            except ValueError as exc:
                raise CheckpointCorruptError(f"invalid batch-norm state: {exc}") from exc
        layers.append(Layer(ConvParams(w, b), bn))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch")
    return PoreModel(layers, dropout_rate=dropout_rate, step_count=step_count)


def load_checkpoint(path: str | Path) -> PoreModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
