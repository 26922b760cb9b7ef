"""Differentiable kernels used by the model zoo and the training strategies.

Every kernel accepts float32 or float64 arrays and keeps the input dtype, so
the same code serves training (float32) and finite-difference checks (float64).
Reductions accumulate in float64.
"""
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigurationError, InputError
from core.tensor import Function, Tensor

_NCHW = (0, 2, 3)


def _im2col(xp, k, stride, h_out, w_out):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, h_out, w_out),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * k * k, h_out * w_out)


def _col2im(cols, padded_shape, k, stride, h_out, w_out):
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, h_out, w_out)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, i, j]
    return out


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


class Conv2d(Function):
    def forward(self, x, w, stride=1, padding=0):
        n, _, h, wd = x.shape
        c_out, _, k, _ = w.shape
        h_out = conv_output_size(h, k, stride, padding)
        w_out = conv_output_size(wd, k, stride, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        xp = np.ascontiguousarray(xp)
        cols = _im2col(xp, k, stride, h_out, w_out)
        wmat = w.reshape(c_out, -1)
        out = np.matmul(wmat, cols)
        self.cols, self.wmat = cols, wmat
        self.geometry = (x.shape, xp.shape, w.shape, k, stride, padding, h_out, w_out)
        return out.reshape(n, c_out, h_out, w_out)

    def backward(self, grad):
        x_shape, xp_shape, w_shape, k, stride, padding, h_out, w_out = self.geometry
        n, c_out = grad.shape[:2]
        gmat = grad.reshape(n, c_out, h_out * w_out)
        dw = np.tensordot(gmat, self.cols, axes=([0, 2], [0, 2])).reshape(w_shape)
        dcols = np.matmul(self.wmat.T, gmat)
        dxp = _col2im(dcols, xp_shape, k, stride, h_out, w_out)
        h, w = x_shape[2:]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dw


def conv2d(input: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation, output size floor((H + 2p - k) / s) + 1."""
    if input.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {input.shape} and {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if input.shape[1] != c_in:
        raise ConfigurationError(f"conv2d input has {input.shape[1]} channels, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride {stride} / padding {padding}")
    h, w = input.shape[2:]
    if conv_output_size(h, kh, stride, padding) < 1 or conv_output_size(w, kw, stride, padding) < 1:
        raise ConfigurationError(f"kernel {kh} does not fit input {h}x{w} with padding {padding}")
    return Conv2d.apply(input, weight, stride=stride, padding=padding)


class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.positive,)


def relu(input: Tensor) -> Tensor:
    return ReLU.apply(input)


@dataclass
class BatchNormState:
    """Per-channel running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def for_channels(cls, channels, momentum=0.1, eps=1e-5):
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32), momentum, eps)


class BatchNorm(Function):
    def forward(self, x, gamma, beta, state=None, training=True):
        if training:
            mean = x.mean(axis=_NCHW, dtype=np.float64)
            var = x.var(axis=_NCHW, dtype=np.float64)
            m = x.size // x.shape[1]
            unbiased = var * m / (m - 1) if m > 1 else var
            mom = state.momentum
            state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(np.float32)
            state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(np.float32)
        else:
            mean = state.running_mean.astype(np.float64)
            var = state.running_var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
        self.xhat, self.inv_std, self.gamma, self.training = xhat, inv_std, gamma, training
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, gamma = self.xhat, self.inv_std, self.gamma
        dgamma = (grad * xhat).sum(axis=_NCHW)
        dbeta = grad.sum(axis=_NCHW)
        dxhat = grad * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not self.training:
            return dxhat * scale, dgamma, dbeta
        m = grad.size // grad.shape[1]
        dx = scale / m * (
            m * dxhat
            - dxhat.sum(axis=_NCHW, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=_NCHW, keepdims=True)
        )
        return dx, dgamma, dbeta


def batch_norm(input: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training=True) -> Tensor:
    """Train mode normalizes with batch statistics and updates `state`; eval mode reads it."""
    channels = input.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ConfigurationError(f"batch_norm over {channels} channels got gamma {gamma.shape}, beta {beta.shape}")
    if state.running_mean.shape != (channels,):
        raise ConfigurationError("batch_norm running statistics do not match the channel count")
    return BatchNorm.apply(input, gamma, beta, state=state, training=training)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.input_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(self, grad):
        h, w = self.input_shape[2:]
        return (np.broadcast_to(grad / (h * w), self.input_shape).copy(),)


def global_avg_pool(input: Tensor) -> Tensor:
    if input.ndim != 4 or min(input.shape[2:]) < 1:
        raise ConfigurationError(f"global_avg_pool expects (N, C, H, W), got {input.shape}")
    return GlobalAvgPool.apply(input)


class FullyConnected(Function):
    def forward(self, x, w, b):
        self.input_shape = x.shape
        self.x2 = x.reshape(x.shape[0], -1)
        self.w = w
        return self.x2 @ w.T + b

    def backward(self, grad):
        dx = (grad @ self.w).reshape(self.input_shape)
        return dx, grad.T @ self.x2, grad.sum(axis=0)


def fully_connected(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of (N, C, 1, 1) or (N, C) features to (N, num_classes) logits."""
    shape = input.shape
    if not (input.ndim == 2 or (input.ndim == 4 and shape[2:] == (1, 1))):
        raise ConfigurationError(f"fully_connected expects (N, C) or (N, C, 1, 1), got {shape}")
    if weight.ndim != 2 or weight.shape[1] != shape[1]:
        raise ConfigurationError(f"fully_connected weight {weight.shape} does not match {shape[1]} features")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"fully_connected bias {bias.shape} does not match {weight.shape[0]} outputs")
    return FullyConnected.apply(input, weight, bias)


class ElementwiseMul(Function):
    def forward(self, x, mask=None):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        # the mask is a constant
        return (grad * self.mask,)


def elementwise_mul(input: Tensor, mask) -> Tensor:
    """Hadamard product with a broadcastable 0/1 mask."""
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    try:
        broadcast = np.broadcast_shapes(mask.shape, input.shape)
    except ValueError:
        broadcast = None
    if broadcast != input.shape:
        raise ConfigurationError(f"mask {mask.shape} does not broadcast to feature {input.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ConfigurationError("mask values must be 0 or 1")
    return ElementwiseMul.apply(input, mask=mask.astype(input.dtype, copy=False))


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        z = logits.astype(np.float64)
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        n = z.shape[0]
        rows = np.arange(n)
        loss = (lse - shifted[rows, labels]).mean()
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        self.dlogits = (probs / n).astype(logits.dtype)
        # float64 scalar so summed head losses stay exact
        return np.asarray(loss, dtype=np.float64)

    def backward(self, grad):
        return (self.dlogits * self.dlogits.dtype.type(grad),)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ConfigurationError(f"logits must be (N, num_classes >= 2), got {logits.shape}")
    if labels.shape != (logits.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be {logits.shape[0]} integers, got {labels.shape} {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"label out of range [0, {logits.shape[1]})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add expects equal shapes, got {a.shape} and {b.shape}")
    return Add.apply(a, b)


class Shift(Function):
    def forward(self, x, value=0.0):
        return x + np.asarray(value, dtype=x.dtype)

    def backward(self, grad):
        return (grad,)


def shift(input: Tensor, value: float) -> Tensor:
    return Shift.apply(input, value=value)


class Scale(Function):
    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * np.asarray(factor, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


def scale(input: Tensor, factor: float) -> Tensor:
    return Scale.apply(input, factor=factor)
