"""Minimal dense-tensor operations for the forward pipeline.

Tensors are contiguous float32 numpy arrays laid out batch, channel, height,
width. All operations are pure; convolution dispatches to the selected kernel
backend, everything else is plain vectorized numpy. For finite inputs every
operation returns finite values.
"""

import numpy as np

from . import backend as _backend
from .errors import InputError

__all__ = [
    "as_tensor",
    "conv2d",
    "affine_norm",
    "relu",
    "resample_bilinear",
    "concat_channels",
    "softmax_axis",
    "avg_pool2",
]


def as_tensor(a, name: str = "tensor") -> np.ndarray:
    """Coerce to a contiguous float32 array, rejecting non-numeric input."""
    try:
        out = np.ascontiguousarray(a, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} is not numeric: {exc}") from exc
    return out


def conv2d(x, weights, bias=None, *, stride: int = 1, padding: int = 0,
           groups: int = 1, backend=None) -> np.ndarray:
    """2-D cross-correlation with zero padding (no kernel flip).

    x: [B, Cin, H, W]; weights: [Cout, Cin/groups, Kh, Kw]; bias: [Cout].
    Output spatial size is floor((size + 2*padding - kernel) / stride) + 1.
    """
    x = as_tensor(x, "input")
    weights = as_tensor(weights, "weights")
    if x.ndim != 4:
        raise InputError(f"conv2d input must be 4-D [B,C,H,W], got {x.ndim}-D")
    if weights.ndim != 4:
        raise InputError(f"conv2d weights must be 4-D, got {weights.ndim}-D")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InputError(f"padding must be >= 0, got {padding}")
    batch, cin, height, width = x.shape
    cout, cpg, kh, kw = weights.shape
    if groups < 1 or cin % groups:
        raise InputError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise InputError(f"output channels {cout} not divisible by groups {groups}")
    if cpg != cin // groups:
        raise InputError(
            f"weights dim 1 is {cpg}, expected Cin/groups = {cin // groups}"
        )
    if bias is None:
        bias = np.zeros(cout, dtype=np.float32)
    else:
        bias = as_tensor(bias, "bias").reshape(-1)
        if bias.shape[0] != cout:
            raise InputError(f"bias length {bias.shape[0]} != output channels {cout}")
    ho = (height + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise InputError(
            f"kernel {kh}x{kw} larger than padded input {height + 2 * padding}"
            f"x{width + 2 * padding}"
        )
    out = np.empty((batch, cout, ho, wo), dtype=np.float32)
    be = backend if backend is not None else _backend.active_backend()
    be.conv2d(x, weights, bias, stride, padding, groups, out)
    return out


def affine_norm(x, scale, shift) -> np.ndarray:
    """Per-channel affine map: out[b,c] = x[b,c] * scale[c] + shift[c]."""
    x = as_tensor(x, "input")
    scale = as_tensor(scale, "scale").reshape(-1)
    shift = as_tensor(shift, "shift").reshape(-1)
    if x.ndim != 4:
        raise InputError(f"affine_norm input must be 4-D, got {x.ndim}-D")
    channels = x.shape[1]
    if scale.shape[0] != channels or shift.shape[0] != channels:
        raise InputError(
            f"scale/shift lengths ({scale.shape[0]}, {shift.shape[0]}) "
            f"!= channel count {channels}"
        )
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def relu(x) -> np.ndarray:
    x = as_tensor(x, "input")
    return np.maximum(x, 0.0)


def resample_bilinear(x, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling, align-corners = false, edge-clamped.

    Sample centers sit at (i + 0.5) * scale - 0.5. Interpolation runs in
    float64 lerp form (a + t*(b - a)), so constant inputs are preserved
    exactly and outputs never leave [min(x), max(x)].
    """
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise InputError(f"resample_bilinear input must be 4-D, got {x.ndim}-D")
    if out_h < 1 or out_w < 1:
        raise InputError(f"output size must be positive, got {out_h}x{out_w}")
    _, _, height, width = x.shape

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(height, out_h)
    x0, x1, wx = axis_coords(width, out_w)
    data = x.astype(np.float64)
    top = data[:, :, y0, :]
    rows = top + wy[None, None, :, None] * (data[:, :, y1, :] - top)
    left = rows[:, :, :, x0]
    out = left + wx[None, None, None, :] * (rows[:, :, :, x1] - left)
    return out.astype(np.float32)


def concat_channels(parts) -> np.ndarray:
    """Concatenate along the channel axis; values are copied bit-exactly."""
    if not parts:
        raise InputError("concat_channels needs at least one part")
    arrs = [as_tensor(p, f"part {i}") for i, p in enumerate(parts)]
    ref = arrs[0]
    for i, a in enumerate(arrs):
        if a.ndim != 4:
            raise InputError(f"part {i} must be 4-D, got {a.ndim}-D")
        if a.shape[0] != ref.shape[0] or a.shape[2:] != ref.shape[2:]:
            raise InputError(
                f"part {i} shape {a.shape} mismatches part 0 {ref.shape} "
                "outside the channel axis"
            )
    return np.concatenate(arrs, axis=1)


def softmax_axis(x, axis: int) -> np.ndarray:
    """Numerically stable softmax along one axis (max-subtracted, float64)."""
    x = as_tensor(x, "input")
    if not -x.ndim <= axis < x.ndim:
        raise InputError(f"axis {axis} out of range for {x.ndim}-D input")
    data = x.astype(np.float64)
    data -= data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)
    return data.astype(np.float32)


def avg_pool2(x) -> np.ndarray:
    """2x2 average pooling with stride 2; trailing odd row/column dropped."""
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise InputError(f"avg_pool2 input must be 4-D, got {x.ndim}-D")
    batch, channels, height, width = x.shape
    h2, w2 = height // 2, width // 2
    if h2 < 1 or w2 < 1:
        raise InputError(f"input {height}x{width} too small for 2x2 pooling")
    v = x[:, :, : h2 * 2, : w2 * 2].reshape(batch, channels, h2, 2, w2, 2)
    return (v.mean(axis=(3, 5), dtype=np.float64)).astype(np.float32)
