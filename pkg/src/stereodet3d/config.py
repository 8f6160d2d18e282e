"""Model configuration: input geometry, backbone plan, anchors, fusion knobs.

The defaults reproduce the documented forward shape table: 288x1280 input,
feature strides 4/8/16 with 64/128/256 channels, correlation volumes with 96
and 192 hypothesis channels, and a 24-hypothesis concatenation volume built
from 16-channel reduced features at 1/16.
"""

from dataclasses import dataclass

from .anchors import AnchorShape
from .errors import InputError

DEFAULT_ANCHOR_HEIGHTS = (24.0, 34.0, 47.0, 66.0, 93.0, 130.0, 182.0, 256.0)
DEFAULT_ANCHOR_ASPECTS = (1.6, 2.6)  # width / height


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 288
    input_w: int = 1280
    crop_top: int = 100
    classes: tuple[str, ...] = ("Car",)

    stem_channels: int = 32
    backbone_channels: tuple[int, int, int] = (64, 128, 256)  # strides 4, 8, 16
    backbone_blocks: tuple[int, int, int] = (2, 2, 2)

    max_disp4: int = 96
    max_disp8: int = 192
    max_disp16: int = 24
    reduce16_channels: int = 16
    use_scale8: bool = True
    use_scale16: bool = True
    expand_mode: str = "ghost"  # ghost | pointwise | block
    learned_downsample: bool = True

    head_trunk_channels: int = 256
    head_branch_channels: int = 128

    decoder_channels: int = 64

    anchor_heights: tuple[float, ...] = DEFAULT_ANCHOR_HEIGHTS
    anchor_aspects: tuple[float, ...] = DEFAULT_ANCHOR_ASPECTS
    anchor_stride: int = 16
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    z_encoding: str = "prior"  # prior | inverse_sigmoid
    ground_y: float = 1.65
    ground_tolerance: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.input_h % 16 or self.input_w % 16:
            raise InputError(
                f"input dims must be divisible by 16, got "
                f"{self.input_h}x{self.input_w}"
            )
        if self.input_h < 16 or self.input_w < 16:
            raise InputError("input dims must be at least 16x16")
        if self.crop_top < 0:
            raise InputError(f"crop_top must be >= 0, got {self.crop_top}")
        if not self.classes:
            raise InputError("at least one class is required")
        if len(self.backbone_channels) != 3 or len(self.backbone_blocks) != 3:
            raise InputError("backbone plan needs exactly three stages")
        if min(self.backbone_channels) < 1 or min(self.backbone_blocks) < 1:
            raise InputError("backbone channels and block counts must be positive")
        if min(self.max_disp4, self.max_disp8, self.max_disp16) < 1:
            raise InputError("max-disparity values must be positive")
        if self.reduce16_channels < 1:
            raise InputError("reduce16_channels must be positive")
        if self.expand_mode not in ("ghost", "pointwise", "block"):
            raise InputError(f"unknown expand_mode {self.expand_mode!r}")
        if self.z_encoding not in ("prior", "inverse_sigmoid"):
            raise InputError(f"unknown z_encoding {self.z_encoding!r}")
        if self.anchor_stride not in (4, 8, 16):
            raise InputError(f"anchor_stride must be 4, 8 or 16, got {self.anchor_stride}")
        if not self.anchor_heights or not self.anchor_aspects:
            raise InputError("anchor shape lists must be non-empty")
        if min(self.anchor_heights) <= 0 or min(self.anchor_aspects) <= 0:
            raise InputError("anchor heights and aspects must be positive")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise InputError(
                f"need 0 <= neg_iou <= pos_iou <= 1, got "
                f"{self.neg_iou}, {self.pos_iou}"
            )
        if self.head_trunk_channels < 1 or self.head_branch_channels < 1:
            raise InputError("head channel counts must be positive")
        if self.decoder_channels < 1:
            raise InputError("decoder channel count must be positive")

    # ----- derived quantities -------------------------------------------

    @property
    def feature_dims(self) -> dict[int, tuple[int, int]]:
        """Spatial (H, W) of the feature map at each stride."""
        return {s: (self.input_h // s, self.input_w // s) for s in (4, 8, 16)}

    @property
    def channels_at(self) -> dict[int, int]:
        c4, c8, c16 = self.backbone_channels
        return {4: c4, 8: c8, 16: c16}

    def anchor_shapes(self) -> tuple[AnchorShape, ...]:
        """Anchor templates per class, all tiled at the head stride."""
        shapes = []
        for class_id in range(len(self.classes)):
            for h in self.anchor_heights:
                for aspect in self.anchor_aspects:
                    shapes.append(
                        AnchorShape(
                            w2d=h * aspect, h2d=h,
                            scale_level=self.anchor_stride, class_id=class_id,
                        )
                    )
        return tuple(shapes)

    @property
    def anchors_per_location(self) -> int:
        return len(self.classes) * len(self.anchor_heights) * len(self.anchor_aspects)

    def expanded_channels(self, channels: int) -> int:
        """Channel count leaving the expansion module at one fusion level."""
        if self.expand_mode in ("ghost", "pointwise"):
            return 3 * channels
        return channels

    @property
    def fused_channels(self) -> int:
        """Channels of the hierarchical fusion output at 1/16."""
        c = self.expanded_channels(self.max_disp4)
        if self.use_scale8:
            c += self.max_disp8
        c = self.expanded_channels(c)
        if self.use_scale16:
            c += 2 * self.reduce16_channels * self.max_disp16
        return c

    @property
    def head_input_channels(self) -> int:
        return self.fused_channels + self.channels_at[16]

    @property
    def decoder_max_disp(self) -> int:
        return self.max_disp4
