"""Stereo feature machinery: light-weight cost volumes, densely connected
ghost expansion, and the hierarchical multi-scale fusion forward pass.

A correlation volume stores one cosine-similarity channel per disparity
hypothesis, so a [B, C, H, W] pair yields a thin [B, max_disp, H, W] map.
The concatenation form instead stacks both feature vectors per hypothesis,
yielding [B, 2C, max_disp, H, W]; it preserves everything and costs roughly
the output-size ratio more to build, which is what the benchmark module
measures. Hypothesis index d corresponds to a d-pixel leftward shift of the
right feature map; columns with x - d < 0 are zero-filled, as are channels
with d >= W when max_disp exceeds the map width.
"""

from dataclasses import dataclass

import numpy as np

from . import backend as _backend
from .errors import InputError
from .tensor import affine_norm, as_tensor, avg_pool2, concat_channels, conv2d, relu

__all__ = [
    "CostVolume",
    "correlation_volume",
    "concatenation_volume",
    "GhostParams",
    "ghost_dense_forward",
    "PointwiseExpandParams",
    "ResidualBlockParams",
    "DownsampleParams",
    "FusionParams",
    "hierarchical_fusion_forward",
]


@dataclass
class CostVolume:
    kind: str           # "correlation" | "concatenation"
    max_disp: int
    data: np.ndarray


def _check_pair(left, right, max_disp):
    left = as_tensor(left, "left features")
    right = as_tensor(right, "right features")
    if left.ndim != 4 or right.ndim != 4:
        raise InputError("cost volumes need 4-D [B,C,H,W] feature maps")
    if left.shape != right.shape:
        raise InputError(
            f"left/right feature shapes differ: {left.shape} vs {right.shape}"
        )
    if max_disp < 1:
        raise InputError(f"max_disp must be >= 1, got {max_disp}")
    return left, right


def _normalize_features(x: np.ndarray) -> np.ndarray:
    """Scale each pixel's channel vector to unit norm; zero vectors stay zero."""
    norms = np.sqrt(np.einsum("bchw,bchw->bhw", x, x, optimize=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(norms > 0.0, 1.0 / norms, 0.0).astype(np.float32)
    return np.ascontiguousarray(x * inv[:, None, :, :])


def correlation_volume(left, right, max_disp: int, *, backend=None) -> CostVolume:
    """Cosine-similarity cost volume: out[b,d,y,x] = <L[b,:,y,x], R[b,:,y,x-d]>
    over unit-normalized channel vectors. Values lie in [-1, 1]."""
    left, right = _check_pair(left, right, max_disp)
    b, _, h, w = left.shape
    be = backend if backend is not None else _backend.active_backend()
    out = np.empty((b, max_disp, h, w), dtype=np.float32)
    be.correlation_volume(_normalize_features(left), _normalize_features(right), out)
    return CostVolume(kind="correlation", max_disp=max_disp, data=out)


def concatenation_volume(left, right, max_disp: int, *, backend=None) -> CostVolume:
    """Stacked-feature cost volume [B, 2C, max_disp, H, W], bit-exact copies."""
    left, right = _check_pair(left, right, max_disp)
    b, c, h, w = left.shape
    be = backend if backend is not None else _backend.active_backend()
    out = np.empty((b, 2 * c, max_disp, h, w), dtype=np.float32)
    be.concatenation_volume(left, right, out)
    return CostVolume(kind="concatenation", max_disp=max_disp, data=out)


@dataclass
class GhostParams:
    """Densely connected ghost expansion: pointwise C -> C primary branch,
    depthwise 3x3 cheap branch on the primary output, input concatenated."""

    pw_weight: np.ndarray   # [C, C, 1, 1]
    pw_bias: np.ndarray
    pw_scale: np.ndarray
    pw_shift: np.ndarray
    dw_weight: np.ndarray   # [C, 1, 3, 3]
    dw_bias: np.ndarray
    dw_scale: np.ndarray
    dw_shift: np.ndarray

    def validate(self, channels: int) -> None:
        if self.pw_weight.shape != (channels, channels, 1, 1):
            raise InputError(
                f"ghost pointwise weight shape {self.pw_weight.shape} does not "
                f"match {channels} input channels"
            )
        if self.dw_weight.shape[:2] != (channels, 1):
            raise InputError(
                f"ghost depthwise weight shape {self.dw_weight.shape} does not "
                f"match {channels} input channels"
            )

    def forward(self, x, *, backend=None):
        return ghost_dense_forward(x, self, backend=backend)

    def out_channels(self, channels: int) -> int:
        return 3 * channels


def ghost_dense_forward(x, params: GhostParams, *, backend=None) -> np.ndarray:
    """Triple the channel count: concat(input, primary, ghost-of-primary).

    The first C output channels are the input, bit-exact.
    """
    x = as_tensor(x, "input")
    if x.ndim != 4:
        raise InputError("ghost module input must be 4-D [B,C,H,W]")
    channels = x.shape[1]
    params.validate(channels)
    primary = relu(
        affine_norm(
            conv2d(x, params.pw_weight, params.pw_bias, backend=backend),
            params.pw_scale, params.pw_shift,
        )
    )
    kh = params.dw_weight.shape[2]
    ghost = relu(
        affine_norm(
            conv2d(
                primary, params.dw_weight, params.dw_bias,
                padding=kh // 2, groups=channels, backend=backend,
            ),
            params.dw_scale, params.dw_shift,
        )
    )
    return concat_channels([x, primary, ghost])


@dataclass
class PointwiseExpandParams:
    """Naive channel expansion: one 1x1 convolution straight to 3C."""

    weight: np.ndarray  # [3C, C, 1, 1]
    bias: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    def forward(self, x, *, backend=None):
        x = as_tensor(x, "input")
        if self.weight.shape[1] != x.shape[1]:
            raise InputError(
                f"expand weight expects {self.weight.shape[1]} channels, "
                f"got {x.shape[1]}"
            )
        return relu(
            affine_norm(conv2d(x, self.weight, self.bias, backend=backend),
                        self.scale, self.shift)
        )

    def out_channels(self, channels: int) -> int:
        return self.weight.shape[0]


@dataclass
class ResidualBlockParams:
    """Plain residual block, channel count unchanged (no expansion)."""

    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray

    def forward(self, x, *, backend=None):
        x = as_tensor(x, "input")
        y = relu(
            affine_norm(
                conv2d(x, self.conv1_weight, self.conv1_bias, padding=1, backend=backend),
                self.norm1_scale, self.norm1_shift,
            )
        )
        y = affine_norm(
            conv2d(y, self.conv2_weight, self.conv2_bias, padding=1, backend=backend),
            self.norm2_scale, self.norm2_shift,
        )
        return relu(x + y)

    def out_channels(self, channels: int) -> int:
        return channels


@dataclass
class DownsampleParams:
    """Learned stride-2 depthwise 3x3 convolution (channels preserved)."""

    weight: np.ndarray  # [C, 1, 3, 3]
    bias: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    def forward(self, x, *, backend=None):
        x = as_tensor(x, "input")
        channels = x.shape[1]
        if self.weight.shape[0] != channels:
            raise InputError(
                f"downsample weight expects {self.weight.shape[0]} channels, "
                f"got {channels}"
            )
        return relu(
            affine_norm(
                conv2d(x, self.weight, self.bias, stride=2, padding=1,
                       groups=channels, backend=backend),
                self.scale, self.shift,
            )
        )


def downsample2(x, params: DownsampleParams | None, *, backend=None) -> np.ndarray:
    """Halve spatial size: learned stride-2 convolution when weights are
    provided, 2x2 average pooling otherwise."""
    if params is None:
        return avg_pool2(x)
    return params.forward(x, backend=backend)


@dataclass
class FusionParams:
    """Everything hierarchical_fusion_forward needs besides the features."""

    max_disp4: int = 96
    max_disp8: int = 192
    max_disp16: int = 24
    use_scale8: bool = True
    use_scale16: bool = True
    expand4: GhostParams | PointwiseExpandParams | ResidualBlockParams | None = None
    expand8: GhostParams | PointwiseExpandParams | ResidualBlockParams | None = None
    down4: DownsampleParams | None = None
    down8: DownsampleParams | None = None
    reduce16_weight: np.ndarray | None = None   # [C16r, C16, 1, 1]
    reduce16_bias: np.ndarray | None = None


def _check_pyramid(lefts, rights):
    if len(lefts) != 3 or len(rights) != 3:
        raise InputError("fusion expects three pyramid levels per side")
    for i, (l, r) in enumerate(zip(lefts, rights)):
        if l.shape != r.shape:
            raise InputError(
                f"pyramid level {i}: left {l.shape} vs right {r.shape}"
            )
        if i > 0:
            prev = lefts[i - 1]
            if (prev.shape[2] != 2 * l.shape[2]) or (prev.shape[3] != 2 * l.shape[3]):
                raise InputError(
                    f"pyramid level {i} spatial {l.shape[2:]} does not halve "
                    f"level {i - 1} {prev.shape[2:]}"
                )


def hierarchical_fusion_forward(lefts, rights, params: FusionParams, *,
                                backend=None, trace=None):
    """Fuse stereo evidence from three scales into one 1/16 feature map.

    Flow: correlation volume at 1/4 -> channel expansion -> downsample ->
    concat with the 1/8 correlation volume -> expansion -> downsample ->
    concat with the flattened small concatenation volume built from
    channel-reduced 1/16 features. Every intermediate shape is appended to
    the trace record.
    """
    lefts = [as_tensor(t) for t in lefts]
    rights = [as_tensor(t) for t in rights]
    _check_pyramid(lefts, rights)
    if trace is None:
        trace = []

    def rec(name, arr):
        trace.append((name, tuple(int(v) for v in arr.shape)))
        return arr

    x = rec(
        "fusion.corr4",
        correlation_volume(lefts[0], rights[0], params.max_disp4, backend=backend).data,
    )
    if params.expand4 is not None:
        x = rec("fusion.expand4", params.expand4.forward(x, backend=backend))
    x = rec("fusion.down4", downsample2(x, params.down4, backend=backend))
    if params.use_scale8:
        corr8 = rec(
            "fusion.corr8",
            correlation_volume(
                lefts[1], rights[1], params.max_disp8, backend=backend
            ).data,
        )
        x = rec("fusion.concat8", concat_channels([x, corr8]))
    if params.expand8 is not None:
        x = rec("fusion.expand8", params.expand8.forward(x, backend=backend))
    x = rec("fusion.down8", downsample2(x, params.down8, backend=backend))
    if params.use_scale16:
        if params.reduce16_weight is None:
            raise InputError("scale-16 fusion requires the channel-reduction weights")
        red_l = rec(
            "fusion.reduce16.left",
            conv2d(lefts[2], params.reduce16_weight, params.reduce16_bias,
                   backend=backend),
        )
        red_r = rec(
            "fusion.reduce16.right",
            conv2d(rights[2], params.reduce16_weight, params.reduce16_bias,
                   backend=backend),
        )
        vol = rec(
            "fusion.volume16",
            concatenation_volume(red_l, red_r, params.max_disp16, backend=backend).data,
        )
        b, c2, d, h, w = vol.shape
        flat = rec("fusion.volume16.flat", np.ascontiguousarray(vol.reshape(b, c2 * d, h, w)))
        x = concat_channels([x, flat])
    x = rec("fusion.output", np.ascontiguousarray(x))
    return x, trace
