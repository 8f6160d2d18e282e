"""Pure-numpy implementations of the hot kernels.

This backend is the import-time fallback when the compiled extension is not
available. It matches the compiled kernels' contracts; floating-point results
may differ from the compiled backend by rounding (BLAS reorders accumulation)
but both satisfy the same oracle tolerances. Integer kernels are bit-exact
across backends.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INT32_INVALID = np.iinfo(np.int32).max

name = "reference"


def conv2d(x, w, bias, stride, padding, groups, num_threads, out):
    """im2col + sgemm convolution; depthwise handled without materializing columns.

    num_threads is accepted for signature parity and ignored.
    """
    batch, cin, _, _ = x.shape
    cout, cpg, kh, kw = w.shape
    _, _, ho, wo = out.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :ho, :wo]
    if groups == cin and cpg == 1:
        ratio = cout // cin
        for rep in range(ratio):
            np.einsum(
                "bchwkl,ckl->bchw",
                windows,
                w[rep::ratio, 0],
                out=out[:, rep::ratio],
                optimize=True,
            )
    else:
        copg = cout // groups
        for g in range(groups):
            cols = windows[:, g * cpg : (g + 1) * cpg]
            cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, cpg * kh * kw)
            mat = w[g * copg : (g + 1) * copg].reshape(copg, cpg * kh * kw)
            res = cols @ mat.T
            out[:, g * copg : (g + 1) * copg] = res.reshape(batch, ho, wo, copg).transpose(
                0, 3, 1, 2
            )
    out += bias[None, :, None, None]
    return None


def correlation_volume(ln, rn, num_threads, out):
    """Dot products of pre-normalized features over shifted columns."""
    _, _, _, width = ln.shape
    max_disp = out.shape[1]
    out[:] = 0.0
    for d in range(min(max_disp, width)):
        np.einsum(
            "bchw,bchw->bhw",
            ln[:, :, :, d:],
            rn[:, :, :, : width - d],
            out=out[:, d, :, d:],
            optimize=True,
        )
    return None


def concatenation_volume(left, right, num_threads, out):
    """Stacked left / shifted-right features; out shape [B, 2C, D, H, W]."""
    _, channels, _, width = left.shape
    max_disp = out.shape[2]
    out[:, :channels] = left[:, :, None, :, :]
    for d in range(max_disp):
        fill = min(d, width)
        out[:, channels:, d, :, :fill] = 0.0
        if fill < width:
            out[:, channels:, d, :, fill:] = right[:, :, :, : width - fill]
    return None


def sad_cost_volume(left, right, window, search_range, num_threads, out):
    """Box-filtered SAD per disparity hypothesis, exact int32 arithmetic."""
    height, width = left.shape
    hw = window // 2
    left32 = left.astype(np.int32)
    right32 = right.astype(np.int32)
    out[:] = INT32_INVALID
    y_lo, y_hi = hw, height - 1 - hw
    for d in range(search_range + 1):
        x_lo, x_hi = d + hw, width - 1 - hw
        if x_lo > x_hi or y_lo > y_hi:
            continue
        diff = np.abs(left32[:, d:] - right32[:, : width - d])
        hsum = sliding_window_view(diff, window, axis=1).sum(axis=2, dtype=np.int32)
        box = sliding_window_view(hsum, window, axis=0).sum(axis=2, dtype=np.int32)
        out[d, y_lo : y_hi + 1, x_lo : x_hi + 1] = box
    return None
