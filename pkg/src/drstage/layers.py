"""Differentiable layer kernels: forward passes and explicit backward passes.

All kernels are pure functions over immutable arrays. Rank-4 activations are
NHWC; convolution kernels are [kh, kw, cin, cout]. "same" padding splits the
zero padding evenly with the extra row/column on the bottom/right; max pooling
never lets padded cells win (they are treated as absent, not as zeros).

Convolution is im2col + GEMM; its backward scatters column gradients back with
a small loop over kernel taps, which is exact and deterministic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidConfig, ShapeMismatch
from .tensor import LayerGrads, check_rank, check_same_shape

SAME = "same"
VALID = "valid"


def _check_padding(padding: str) -> str:
    if padding not in (SAME, VALID):
        raise InvalidConfig(f"padding must be 'same' or 'valid', got {padding!r}")
    return padding


def out_extent(in_extent: int, k: int, stride: int, padding: str) -> int:
    """Spatial output extent for one axis."""
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")
    if _check_padding(padding) == SAME:
        return -(-in_extent // stride)  # ceil division
    out = (in_extent - k) // stride + 1
    if out < 1:
        raise InvalidConfig(
            f"valid padding gives empty output: extent {in_extent}, window {k}, stride {stride}"
        )
    return out


def _pad_split(in_extent: int, k: int, stride: int, out: int) -> tuple[int, int]:
    # extra padding goes on the bottom/right
    total = max((out - 1) * stride + k - in_extent, 0)
    before = total // 2
    return before, total - before


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided window view of a padded NHWC array: (n, oh, ow, c, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _conv_geometry(x, kernel, stride, padding):
    n, h, w, cin_x = x.shape
    kh, kw, cin, cout = kernel.shape
    if cin_x != cin:
        raise ShapeMismatch(f"input has {cin_x} channels, kernel expects {cin}")
    oh = out_extent(h, kh, stride, padding)
    ow = out_extent(w, kw, stride, padding)
    pt, pb = _pad_split(h, kh, stride, oh)
    pl, pr = _pad_split(w, kw, stride, ow)
    return (n, h, w), (kh, kw, cin, cout), (oh, ow), (pt, pb, pl, pr)


def conv2d(x, kernel, bias, stride=1, padding=SAME):
    """2-D cross-correlation over an NHWC batch, plus per-channel bias."""
    check_rank(x, 4, "conv input")
    check_rank(kernel, 4, "conv kernel")
    check_rank(bias, 1, "conv bias")
    (n, _, _), (kh, kw, cin, cout), (oh, ow), (pt, pb, pl, pr) = _conv_geometry(
        x, kernel, stride, padding
    )
    if bias.shape[0] != cout:
        raise ShapeMismatch(f"bias length {bias.shape[0]} != output channels {cout}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, stride, oh, ow)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    out = cols @ kernel.reshape(kh * kw * cin, cout) + bias
    return out.reshape(n, oh, ow, cout)


def conv2d_backward(forward_input, kernel, upstream, stride=1, padding=SAME) -> LayerGrads:
    """Gradients of a scalar loss through conv2d.

    Returns input_grad plus "kernel" and "bias" parameter gradients; the bias
    gradient is the per-channel sum of the upstream signal.
    """
    check_rank(forward_input, 4, "conv input")
    check_rank(kernel, 4, "conv kernel")
    (n, h, w), (kh, kw, cin, cout), (oh, ow), (pt, pb, pl, pr) = _conv_geometry(
        forward_input, kernel, stride, padding
    )
    if upstream.shape != (n, oh, ow, cout):
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} != forward output {(n, oh, ow, cout)}"
        )
    xp = np.pad(forward_input, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, stride, oh, ow)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    up_mat = upstream.reshape(n * oh * ow, cout)

    grad_kernel = (cols.T @ up_mat).reshape(kh, kw, cin, cout)
    grad_bias = up_mat.sum(axis=0)

    dcols = (up_mat @ kernel.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    input_grad = gxp[:, pt : pt + h, pl : pl + w, :]
    return LayerGrads(input_grad, {"kernel": grad_kernel, "bias": grad_bias})


def _pool_geometry(x, window, stride, padding):
    if window < 1:
        raise InvalidConfig(f"pool window must be >= 1, got {window}")
    n, h, w, c = x.shape
    oh = out_extent(h, window, stride, padding)
    ow = out_extent(w, window, stride, padding)
    pt, pb = _pad_split(h, window, stride, oh)
    pl, pr = _pad_split(w, window, stride, ow)
    return (n, h, w, c), (oh, ow), (pt, pb, pl, pr)


def maxpool2d(x, window, stride, padding=SAME):
    """Max over each window footprint; padded positions never contribute."""
    check_rank(x, 4, "pool input")
    (n, h, w, c), (oh, ow), (pt, pb, pl, pr) = _pool_geometry(x, window, stride, padding)
    # -inf padding keeps out-of-bounds cells out of the max for finite inputs
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, window, window, stride, oh, ow)
    return win.reshape(n, oh, ow, c, window * window).max(axis=-1)


def maxpool2d_backward(forward_input, upstream, window, stride, padding=SAME) -> LayerGrads:
    """Routes the upstream gradient to each window's argmax.

    Ties go to the first position in row-major window scan order; overlapping
    windows accumulate.
    """
    check_rank(forward_input, 4, "pool input")
    (n, h, w, c), (oh, ow), (pt, pb, pl, pr) = _pool_geometry(
        forward_input, window, stride, padding
    )
    if upstream.shape != (n, oh, ow, c):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != forward output {(n, oh, ow, c)}")
    xp = np.pad(forward_input, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, window, window, stride, oh, ow)
    flat = win.reshape(n, oh, ow, c, window * window)
    arg = flat.argmax(axis=-1)  # first max in row-major scan
    wi, wj = arg // window, arg % window

    ns, ohs, ows, cs = np.ix_(np.arange(n), np.arange(oh), np.arange(ow), np.arange(c))
    rows = ohs * stride + wi
    cols = ows * stride + wj
    gxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=upstream.dtype)
    np.add.at(gxp, (ns, rows, cols, cs), upstream)
    return LayerGrads(gxp[:, pt : pt + h, pl : pl + w, :])


def global_avg_pool(x):
    """Mean over the spatial plane of each channel: (n, h, w, c) -> (n, c)."""
    check_rank(x, 4, "pool input")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(forward_input, upstream) -> LayerGrads:
    check_rank(forward_input, 4, "pool input")
    n, h, w, c = forward_input.shape
    if upstream.shape != (n, c):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != ({n}, {c})")
    grad = np.broadcast_to(upstream[:, None, None, :] / (h * w), forward_input.shape)
    return LayerGrads(np.ascontiguousarray(grad))


def dense(x, weights, bias):
    """Affine map on a rank-2 batch: x @ weights + bias."""
    check_rank(x, 2, "dense input")
    check_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def dense_backward(forward_input, weights, upstream) -> LayerGrads:
    if upstream.shape != (forward_input.shape[0], weights.shape[1]):
        raise ShapeMismatch(f"upstream shape {upstream.shape} mismatches dense output")
    return LayerGrads(
        upstream @ weights.T,
        {"weights": forward_input.T @ upstream, "bias": upstream.sum(axis=0)},
    )


def relu(x):
    return np.maximum(x, 0)


def relu_backward(forward_input, upstream) -> LayerGrads:
    # gradient at exactly 0 is defined as 0
    return LayerGrads(upstream * (forward_input > 0))


def softmax(x):
    """Row-wise softmax with max subtraction for overflow safety."""
    check_rank(x, 2, "softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(output, upstream) -> LayerGrads:
    """Backward through softmax given its forward *output* rows."""
    check_same_shape(output, upstream, "softmax output and upstream")
    inner = (upstream * output).sum(axis=1, keepdims=True)
    return LayerGrads(output * (upstream - inner))


def _bn_check(x, gamma, beta, running_mean, running_var):
    channels = x.shape[-1]
    for name, p in (
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        if p.shape != (channels,):
            raise ShapeMismatch(f"{name} shape {p.shape} != ({channels},)")
    return tuple(range(x.ndim - 1))


def batchnorm(x, gamma, beta, running_mean, running_var, mode, momentum=0.99, epsilon=1e-3):
    """Batch normalization over all non-channel axes.

    Train mode normalizes with batch statistics and returns updated running
    stats via run' = momentum * run + (1 - momentum) * batch; infer mode
    normalizes with the running stats as given. Returns (output,
    (running_mean', running_var')).
    """
    axes = _bn_check(x, gamma, beta, running_mean, running_var)
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        out = gamma * (x - mu) / np.sqrt(var + epsilon) + beta
        new_rm = momentum * running_mean + (1.0 - momentum) * mu
        new_rv = momentum * running_var + (1.0 - momentum) * var
        return out, (new_rm.astype(running_mean.dtype), new_rv.astype(running_var.dtype))
    if mode == "infer":
        out = gamma * (x - running_mean) / np.sqrt(running_var + epsilon) + beta
        return out, (running_mean, running_var)
    raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(
    forward_input, gamma, upstream, mode, running_mean=None, running_var=None, epsilon=1e-3
) -> LayerGrads:
    """Gradients through batchnorm; train mode recomputes batch statistics."""
    check_same_shape(forward_input, upstream, "batchnorm input and upstream")
    axes = tuple(range(forward_input.ndim - 1))
    if mode == "train":
        mu = forward_input.mean(axis=axes)
        var = forward_input.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (forward_input - mu) * inv_std
        dxhat = upstream * gamma
        dx = (
            dxhat
            - dxhat.mean(axis=axes)
            - xhat * (dxhat * xhat).mean(axis=axes)
        ) * inv_std
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (forward_input - running_mean) * inv_std
        dx = upstream * gamma * inv_std
    else:
        raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
    return LayerGrads(
        dx,
        {"gamma": (upstream * xhat).sum(axis=axes), "beta": upstream.sum(axis=axes)},
    )


def dropout(x, rate, mode, rng):
    """Inverted dropout: train scales survivors by 1/(1-rate), infer is identity.

    Returns (output, mask); the boolean mask marks survivors and is reused by
    the backward pass.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidConfig(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if mode != "train":
        raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(upstream, mask, rate) -> LayerGrads:
    if upstream.shape != mask.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != mask shape {mask.shape}")
    if rate == 0.0:
        return LayerGrads(upstream)
    return LayerGrads(upstream * mask / (1.0 - rate))


def concat_channels(inputs):
    """Concatenate rank-4 tensors along channels, preserving argument order."""
    if len(inputs) < 2:
        raise InvalidConfig("concat_channels needs at least 2 inputs")
    base = inputs[0].shape[:3]
    for t in inputs:
        check_rank(t, 4, "concat input")
        if t.shape[:3] != base:
            raise ShapeMismatch(f"non-channel extents differ: {t.shape[:3]} vs {base}")
    return np.concatenate(inputs, axis=3)


def split_channels(x, sizes):
    """Inverse of concat_channels: split along channels at the given widths."""
    check_rank(x, 4, "split input")
    if sum(sizes) != x.shape[3]:
        raise ShapeMismatch(f"split sizes {sizes} do not sum to {x.shape[3]} channels")
    offsets = np.cumsum(sizes[:-1])
    return [np.ascontiguousarray(part) for part in np.split(x, offsets, axis=3)]
