"""Sparse block-matching disparity used as auxiliary supervision.

Classic SAD block matching over rectified 8-bit luminance pairs: for each
left pixel the disparity minimizing the window SAD wins, then ambiguous
matches are rejected by a uniqueness ratio and a left-right consistency
check. The output is deliberately sparse; precision is favored over density
because the consumer only needs a coarse training signal.

The SAD cost volume itself is computed by the selected kernel backend in
exact integer arithmetic, so both backends produce bit-identical maps.
"""

from dataclasses import dataclass

import numpy as np

from . import backend as _backend
from .errors import InputError

INVALID = -1.0


@dataclass
class SparseDisparityMap:
    values: np.ndarray  # [H, W] float32, -1 marks invalid
    window: int
    search_range: int


def block_match(
    left_gray,
    right_gray,
    window: int = 9,
    search_range: int = 96,
    uniqueness_ratio: float = 0.95,
    lr_tolerance: int = 1,
    *,
    backend=None,
) -> SparseDisparityMap:
    """Integer-pixel SAD block matching with uniqueness and LR checks.

    A pixel is invalid (-1) when its window leaves either image, when the
    best SAD fails to beat the second best (excluding immediate disparity
    neighbors) scaled by uniqueness_ratio, or when re-matching from the
    right image disagrees by more than lr_tolerance pixels.
    """
    left = np.ascontiguousarray(left_gray, dtype=np.uint8)
    right = np.ascontiguousarray(right_gray, dtype=np.uint8)
    if left.ndim != 2 or right.ndim != 2:
        raise InputError("block matching expects 2-D luminance images")
    if left.shape != right.shape:
        raise InputError(
            f"image sizes differ: left {left.shape} vs right {right.shape}"
        )
    if window < 3 or window % 2 == 0:
        raise InputError(f"window must be odd and >= 3, got {window}")
    if window > 31:
        raise InputError(f"window must be <= 31, got {window}")
    height, width = left.shape
    if not 1 <= search_range < width:
        raise InputError(
            f"search_range must be in [1, {width - 1}], got {search_range}"
        )
    if not 0.0 < uniqueness_ratio <= 1.0:
        raise InputError(
            f"uniqueness_ratio must be in (0, 1], got {uniqueness_ratio}"
        )
    if lr_tolerance < 0:
        raise InputError(f"lr_tolerance must be >= 0, got {lr_tolerance}")

    be = backend if backend is not None else _backend.active_backend()
    n_hyp = search_range + 1
    cost = np.empty((n_hyp, height, width), dtype=np.int32)
    be.sad_cost_volume(left, right, window, search_range, cost)
    sentinel = _backend.INT32_INVALID

    best = cost.argmin(axis=0)  # ties break to the smaller disparity
    ys, xs = np.indices(best.shape)
    best_val = cost[best, ys, xs]
    valid = best_val != sentinel

    # second-best excluding invalid hypotheses and the winner's neighbors
    masked = cost.astype(np.int64, copy=True)
    masked[cost == sentinel] = np.iinfo(np.int64).max
    for off in (-1, 0, 1):
        nb = best + off
        ok = (nb >= 0) & (nb < n_hyp)
        masked[nb[ok], ys[ok], xs[ok]] = np.iinfo(np.int64).max
    second_val = masked.min(axis=0)
    has_second = second_val != np.iinfo(np.int64).max
    # no competing hypothesis means uniqueness cannot be established: reject
    uniq = has_second & (
        best_val.astype(np.float64) < second_val * float(uniqueness_ratio)
    )
    valid &= uniq

    # right-image disparity from the same volume: cost_R(x_r, d) = cost_L(x_r + d, d)
    shifted = np.full((n_hyp, height, width), sentinel, dtype=np.int32)
    for d in range(n_hyp):
        if d < width:
            shifted[d, :, : width - d] = cost[d, :, d:]
    best_r = shifted.argmin(axis=0)
    best_r_val = shifted[best_r, ys, xs]
    right_valid = best_r_val != sentinel

    xr = xs - best
    xr_ok = xr >= 0
    xr_clip = np.clip(xr, 0, width - 1)
    lr_ok = (
        xr_ok
        & right_valid[ys, xr_clip]
        & (np.abs(best_r[ys, xr_clip] - best) <= lr_tolerance)
    )
    valid &= lr_ok

    values = np.where(valid, best.astype(np.float32), np.float32(INVALID))
    return SparseDisparityMap(values=values, window=window, search_range=search_range)


def downscale_disparity(disp_map: SparseDisparityMap, factor: int) -> SparseDisparityMap:
    """Reduce resolution by an integer factor, dividing disparity values.

    Each factor-by-factor block contributes the valid value nearest its
    median (ties toward the smaller value), then the result is divided by
    the factor so disparities live on the coarse pixel grid. Blocks without
    any valid pixel stay invalid.
    """
    if factor not in (2, 4, 8, 16):
        raise InputError(f"factor must be one of 2, 4, 8, 16, got {factor}")
    values = disp_map.values
    height, width = values.shape
    oh, ow = height // factor, width // factor
    if oh < 1 or ow < 1:
        raise InputError(
            f"map {height}x{width} too small for downscale factor {factor}"
        )
    blocks = values[: oh * factor, : ow * factor].reshape(oh, factor, ow, factor)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(oh, ow, factor * factor)
    out = np.full((oh, ow), INVALID, dtype=np.float32)
    for i in range(oh):
        for j in range(ow):
            vals = blocks[i, j]
            vals = np.sort(vals[vals >= 0])
            if vals.size == 0:
                continue
            med = np.median(vals)
            nearest = vals[np.abs(vals - med).argmin()]  # sorted, ties -> smaller
            out[i, j] = nearest / factor
    return SparseDisparityMap(
        values=out, window=disp_map.window, search_range=disp_map.search_range
    )
