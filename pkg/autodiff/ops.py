"""
Differentiable Ops for the FCN
------------------------------
Every layer type the segmentation network uses, each with an exact backward:

- conv2d / transposed_conv2d: im2col through stride tricks plus one matmul
- maxpool2d: overlapping ceil-mode pooling with saved argmax indices
- relu, mvn_layer, dropout, elementwise_add, center_crop_to, softmax
- softmax_xent_pixelwise: the per-pixel multinomial logistic loss

Convolutions use the cross-correlation convention (no kernel flip). Conv weights
are laid out (outC, inC, kh, kw); transposed conv weights are (inC, outC, kh, kw),
so transposed_conv2d(y, W) is exactly the data-gradient of conv2d(x, W).

All reductions run in a fixed order, so results are bitwise reproducible for a
given input and BLAS thread count.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from autodiff.tensor import ShapeError, Tensor, make_result

MVN_EPS = 1e-6


def _require_4d(tensor: Tensor, op: str) -> None:
    if tensor.data.ndim != 4:
        raise ShapeError(f"{op} expects an N x C x H x W tensor, got shape {tensor.shape}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Read-only (n, c, kh, kw, out_h, out_w) view of every sliding window of x."""
    sn, sc, sh, sw = x.strides
    n, c = x.shape[:2]
    return as_strided(
        x,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def _fold(cols: np.ndarray, out_shape: Tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Adjoint of _windows: scatter-add (n, c, kh, kw, oh, ow) windows back into an image."""
    _, _, kh, kw, oh, ow = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out


def conv2d(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        input: (n, inC, h, w)
        weights: (outC, inC, kh, kw)
        bias: (outC,) or None
        stride: >= 1
        pad: zero padding on every side, >= 0

    Returns:
        (n, outC, (h + 2*pad - kh) // stride + 1, (w + 2*pad - kw) // stride + 1)
    """
    _require_4d(input, "conv2d")
    if weights.data.ndim != 4:
        raise ShapeError(f"conv2d weights must be (outC, inC, kh, kw), got {weights.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")

    x = input.data
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weights.shape
    if c != in_c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weights expect {in_c}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d bias must have shape ({out_c},), got {bias.shape}")

    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    if out_h < 1 or out_w < 1 or kh < 1 or kw < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {weights.shape}")

    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(padded, kh, kw, stride, out_h, out_w).reshape(n, in_c * kh * kw, out_h * out_w)
    w2 = weights.data.reshape(out_c, -1)

    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, out_c, out_h, out_w)

    def backward(grad):
        g2 = grad.reshape(n, out_c, out_h * out_w)
        grad_w = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
        grad_cols = np.matmul(w2.T, g2).reshape(n, in_c, kh, kw, out_h, out_w)
        grad_padded = _fold(grad_cols, padded.shape, stride)
        grad_x = grad_padded[:, :, pad:pad + h, pad:pad + w] if pad else grad_padded
        grad_b = g2.sum(axis=(0, 2)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (input, weights) if bias is None else (input, weights, bias)
    return make_result(out, "conv2d", parents, backward)


def transposed_conv2d(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """
    Fractional (transposed) convolution, the learnable upsampling layer.

    Args:
        input: (n, inC, h, w)
        weights: (inC, outC, kh, kw)
        bias: (outC,) or None
        stride: >= 1

    Returns:
        (n, outC, (h - 1) * stride + kh, (w - 1) * stride + kw)
    """
    _require_4d(input, "transposed_conv2d")
    if weights.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d weights must be (inC, outC, kh, kw), got {weights.shape}")
    if stride < 1:
        raise ValueError(f"transposed_conv2d needs stride >= 1, got {stride}")

    x = input.data
    n, c, h, w = x.shape
    in_c, out_c, kh, kw = weights.shape
    if kh == 0 or kw == 0:
        raise ShapeError(f"transposed_conv2d kernel is degenerate: {weights.shape}")
    if c != in_c:
        raise ShapeError(f"transposed_conv2d channel mismatch: input has {c} channels, weights expect {in_c}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"transposed_conv2d bias must have shape ({out_c},), got {bias.shape}")

    out_shape = (n, out_c, (h - 1) * stride + kh, (w - 1) * stride + kw)
    x2 = x.reshape(n, in_c, h * w)
    w2 = weights.data.reshape(in_c, out_c * kh * kw)

    cols = np.matmul(w2.T, x2).reshape(n, out_c, kh, kw, h, w)
    out = _fold(cols, out_shape, stride)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(grad):
        grad_cols = _windows(grad, kh, kw, stride, h, w).reshape(n, out_c * kh * kw, h * w)
        grad_x = np.matmul(w2, grad_cols).reshape(x.shape)
        grad_w = np.tensordot(x2, grad_cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
        grad_b = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (input, weights) if bias is None else (input, weights, bias)
    return make_result(out, "transposed_conv2d", parents, backward)


def pooled_size(size: int, kernel: int, stride: int) -> int:
    """Ceil-mode output length: ceil((size - kernel) / stride) + 1."""
    return -(-(size - kernel) // stride) + 1


def maxpool2d(input: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    """
    Overlapping max pooling in ceil mode.

    Windows hanging over the bottom/right border only see the real pixels, so no
    input pixel is dropped. Ties resolve to the first maximum in row-major window
    order; backward routes each output's gradient to that single position.
    """
    _require_4d(input, "maxpool2d")
    if kernel <= stride or stride < 1:
        raise ValueError(f"maxpool2d must overlap (kernel > stride >= 1), got kernel={kernel}, stride={stride}")

    x = input.data
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"maxpool2d input {h}x{w} is smaller than the {kernel}x{kernel} kernel")

    out_h = pooled_size(h, kernel, stride)
    out_w = pooled_size(w, kernel, stride)
    padded_shape = (n, c, (out_h - 1) * stride + kernel, (out_w - 1) * stride + kernel)
    padded = np.full(padded_shape, -np.inf, dtype=x.dtype)
    padded[:, :, :h, :w] = x

    windows = _windows(padded, kernel, kernel, stride, out_h, out_w).reshape(n, c, kernel * kernel, out_h, out_w)
    argmax = windows.argmax(axis=2)[:, :, None]
    out = np.take_along_axis(windows, argmax, axis=2)[:, :, 0]

    def backward(grad):
        routed = np.zeros((n, c, kernel * kernel, out_h, out_w), dtype=grad.dtype)
        np.put_along_axis(routed, argmax, grad[:, :, None], axis=2)
        grad_padded = _fold(routed.reshape(n, c, kernel, kernel, out_h, out_w), padded_shape, stride)
        return (grad_padded[:, :, :h, :w],)

    return make_result(out, "maxpool2d", (input,), backward, argmax=argmax)


def relu(input: Tensor) -> Tensor:
    x = input.data
    out = np.maximum(x, 0)

    def backward(grad):
        # derivative at exactly 0 is 0
        return (grad * (x > 0),)

    return make_result(out, "relu", (input,), backward)


def mvn_layer(input: Tensor, eps: float = MVN_EPS) -> Tensor:
    """
    Mean-variance normalization per (sample, channel) over the spatial axes.

    y = (x - mean) / (std + eps), with the population (divide-by-N) std.
    A constant map comes out as all zeros.
    """
    _require_4d(input, "mvn_layer")
    x = input.data
    n, c, h, w = x.shape
    count = h * w
    if count < 2:
        raise ShapeError(f"mvn_layer needs at least 2 spatial elements, got {h}x{w}")

    mean = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mean
    constant = x.max(axis=(2, 3), keepdims=True) == x.min(axis=(2, 3), keepdims=True)
    centered = np.where(constant, 0, centered).astype(x.dtype, copy=False)
    std = np.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True))
    denom = std + eps
    out = centered / denom

    def backward(grad):
        grad_mean = grad.mean(axis=(2, 3), keepdims=True)
        projection = (grad * centered).sum(axis=(2, 3), keepdims=True)
        coef = np.zeros_like(projection)
        np.divide(projection, count * std * denom * denom, out=coef, where=std > 0)
        return ((grad - grad_mean) / denom - centered * coef,)

    return make_result(out, "mvn", (input,), backward)


def dropout(input: Tensor, ratio: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Inverted dropout: survivors are scaled by 1 / (1 - ratio) at train time,
    so eval mode is the identity.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not train or ratio == 0:
        return input
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")

    x = input.data
    keep = rng.random(x.shape) >= ratio
    scale = x.dtype.type(1.0 / (1.0 - ratio))
    mask = keep.astype(x.dtype) * scale
    out = x * mask

    def backward(grad):
        return (grad * mask,)

    return make_result(out, "dropout", (input,), backward, mask=mask)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")

    def backward(grad):
        return grad, grad

    return make_result(a.data + b.data, "add", (a, b), backward)


def center_crop_to(input: Tensor, target_h: int, target_w: int) -> Tensor:
    """Crop the spatial axes to target size at offset ((h - th) // 2, (w - tw) // 2)."""
    _require_4d(input, "center_crop_to")
    x = input.data
    h, w = x.shape[2:]
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ShapeError(f"Cannot crop {h}x{w} to {target_h}x{target_w}")

    top = (h - target_h) // 2
    left = (w - target_w) // 2
    out = x[:, :, top:top + target_h, left:left + target_w].copy()

    def backward(grad):
        padded = np.zeros_like(x)
        padded[:, :, top:top + target_h, left:left + target_w] = grad
        return (padded,)

    return make_result(out, "crop", (input,), backward, offset=(top, left))


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the channel axis."""
    _require_4d(logits, "softmax")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(grad):
        return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)

    return make_result(probs, "softmax", (logits,), backward)


def softmax_xent_pixelwise(logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """
    Mean per-pixel multinomial logistic loss on softmax probabilities.

    ================================================

    inputs:
    logits: Tensor (n, K, h, w)
    labels: integer array (n, h, w), values in [0, K)

    outputs:
    loss: scalar Tensor, mean of -log softmax(logits)[label] over all n*h*w pixels
    grad: (softmax - onehot) / (n*h*w), the gradient of loss w.r.t. logits

    ================================================
    """
    _require_4d(logits, "softmax_xent_pixelwise")
    x = logits.data
    n, k, h, w = x.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels must have shape {(n, h, w)}, got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    pixels = n * h * w
    z = x - x.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    index = labels[:, None].astype(np.intp)
    picked = np.take_along_axis(log_probs, index, axis=1)
    loss = -picked.sum() / pixels

    grad = np.exp(log_probs)
    np.put_along_axis(grad, index, np.take_along_axis(grad, index, axis=1) - 1, axis=1)
    grad /= pixels

    def backward(upstream):
        return (grad * upstream,)

    return make_result(np.asarray(loss, dtype=x.dtype), "softmax_xent", (logits,), backward), grad
