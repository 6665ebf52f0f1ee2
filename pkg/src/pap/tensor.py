"""Dense tensor operations with hand-written backward passes.

Tensors are plain numpy arrays. Every forward op is a pure function of its
inputs and preserves the input dtype, so float64 arrays can be used for the
analysis paths and float32 arrays for training. Nothing here spawns threads;
the only parallelism is whatever the BLAS library does inside a matmul.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _pair_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects input [B,C,H,W] and kernel [O,C,kh,kw], got {x.shape} and {kernel.shape}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has C={x.shape[1]}, kernel expects C={kernel.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    _, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Patch matrix [B*H'*W', C*kh*kw] whose columns follow the kernel's (C, kh, kw) order."""
    b, c, h, w = x.shape
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, ho, wo, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch rows back into an image batch."""
    b, c, h, w = input_shape
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """2-D cross-correlation of ``x`` [B,C,H,W] with ``kernel`` [O,C,kh,kw]."""
    _check_conv(x, kernel, stride, padding)
    b, _, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    out = im2col(x, kh, kw, stride, padding) @ kernel.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(
    output_grad: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    need_kernel_grad: bool = True,
) -> LayerGrad:
    """Gradients of a conv2d output w.r.t. its input and kernel.

    The input gradient is the transposed convolution of ``output_grad``
    (patch-space product followed by ``col2im``).
    """
    _check_conv(x, kernel, stride, padding)
    b, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    if output_grad.shape != (b, o, ho, wo):
        raise DimensionError(
            f"output_grad shape {output_grad.shape} does not match forward output {(b, o, ho, wo)}"
        )
    g = output_grad.transpose(0, 2, 3, 1).reshape(-1, o)
    dx = col2im(g @ kernel.reshape(o, -1), x.shape, kh, kw, stride, padding)
    grads = {}
    if need_kernel_grad:
        grads["weight"] = (g.T @ im2col(x, kh, kw, stride, padding)).reshape(kernel.shape)
    return LayerGrad(dx, grads)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(output_grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return output_grad * (x > 0)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def linear_backward(output_grad: np.ndarray, x: np.ndarray, weight: np.ndarray) -> LayerGrad:
    if output_grad.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(f"linear_backward: output_grad {output_grad.shape} mismatched")
    return LayerGrad(
        output_grad @ weight,
        {"weight": output_grad.T @ x, "bias": output_grad.sum(axis=0)},
    )


def _pool_offsets(x: np.ndarray, size: int):
    b, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    return [(i, j) for i in range(size) for j in range(size)]


def maxpool2d(x: np.ndarray, size: int = 2) -> np.ndarray:
    """Non-overlapping max pooling (kernel == stride == ``size``)."""
    offsets = _pool_offsets(x, size)
    out = x[:, :, ::size, ::size].copy()
    for i, j in offsets[1:]:
        np.maximum(out, x[:, :, i::size, j::size], out=out)
    return out


def maxpool2d_backward(output_grad: np.ndarray, x: np.ndarray, size: int = 2) -> np.ndarray:
    # Ties route the whole gradient to the first maximal element in row-major window order.
    out = maxpool2d(x, size)
    dx = np.zeros(x.shape, dtype=output_grad.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for i, j in _pool_offsets(x, size):
        hit = (x[:, :, i::size, j::size] == out) & ~taken
        dx[:, :, i::size, j::size] = output_grad * hit
        taken |= hit
    return dx


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avgpool_backward(output_grad: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = input_shape
    return np.broadcast_to((output_grad / (h * w))[:, :, None, None], input_shape).copy()


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm2d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[np.ndarray, BatchNormCache, np.ndarray, np.ndarray]:
    """Per-channel batch normalization over (B, H, W).

    Returns ``(out, cache, new_running_mean, new_running_var)``. Running
    statistics are returned rather than mutated; in eval mode they are
    passed through unchanged. The running variance uses the unbiased batch
    estimate, the normalization itself the biased one.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        n = x.size // x.shape[1]
        unbiased = var * n / max(n - 1, 1)
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return out.astype(x.dtype, copy=False), BatchNormCache(xhat, inv_std, gamma, train), new_mean, new_var


def batchnorm2d_backward(output_grad: np.ndarray, cache: BatchNormCache) -> LayerGrad:
    xhat, inv_std, gamma = cache.xhat, cache.inv_std, cache.gamma
    dgamma = (output_grad * xhat).sum(axis=(0, 2, 3))
    dbeta = output_grad.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, -1, 1, 1)
    if cache.train:
        n = output_grad.size // output_grad.shape[1]
        dx = scale * (
            output_grad
            - dbeta.reshape(1, -1, 1, 1) / n
            - xhat * dgamma.reshape(1, -1, 1, 1) / n
        )
    else:
        dx = scale * output_grad
    return LayerGrad(dx.astype(output_grad.dtype, copy=False), {"gamma": dgamma, "beta": dbeta})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / b


def frobenius_sq(t: np.ndarray) -> float:
    t = np.asarray(t)
    return float(np.vdot(t, t))


def frobenius_sq_grad(t: np.ndarray) -> np.ndarray:
    return 2 * np.asarray(t)
