"""End-to-end pipeline: preprocess, siamese backbone, fusion, heads, decode.

The backbone is a residual stack with output strides 4/8/16 whose weights
live in a WeightArchive; both images share one weight set. The detection
head runs on the fused stereo feature concatenated with the left 1/16
feature: a 1x1 trunk reduction followed by two 3x3 blocks per branch. The
auxiliary disparity decoder hangs off the fused feature and is only
evaluated (and its weights only read) when explicitly requested.

Every forward records a (name, shape) trace used by the shape-contract
tests, and counts convolutions per component.
"""

import math
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import backend as _backend
from .anchors import (
    AnchorPriors,
    AnchorSet,
    decode_predictions,
    filter_by_ground_plane,
    generate_grid,
)
from .config import ModelConfig
from .errors import InputError, InvariantError
from .geometry import nms
from .kitti import CalibrationPair, Detection3D
from .stereo import (
    DownsampleParams,
    FusionParams,
    GhostParams,
    PointwiseExpandParams,
    ResidualBlockParams,
    hierarchical_fusion_forward,
)
from .tensor import affine_norm, as_tensor, concat_channels, conv2d, relu, resample_bilinear
from .weights import WeightArchive


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass(frozen=True)
class TransformRecord:
    """Invertible record of the crop + resize applied before the network."""

    crop_top: int
    scale_x: float
    scale_y: float
    orig_h: int
    orig_w: int

    def apply_box(self, box):
        x1, y1, x2, y2 = box
        return (
            x1 * self.scale_x,
            (y1 - self.crop_top) * self.scale_y,
            x2 * self.scale_x,
            (y2 - self.crop_top) * self.scale_y,
        )

    def invert_box(self, box):
        x1, y1, x2, y2 = box
        return (
            x1 / self.scale_x,
            y1 / self.scale_y + self.crop_top,
            x2 / self.scale_x,
            y2 / self.scale_y + self.crop_top,
        )


def transform_calibration(calib: CalibrationPair, record: TransformRecord) -> CalibrationPair:
    adjust = np.array(
        [
            [record.scale_x, 0.0, 0.0],
            [0.0, record.scale_y, -record.crop_top * record.scale_y],
            [0.0, 0.0, 1.0],
        ]
    )
    return CalibrationPair.from_matrices(adjust @ calib.P2, adjust @ calib.P3)


def preprocess(pair, annotations, calib: CalibrationPair, config: ModelConfig):
    """Crop the sky rows, resize to the network input, adjust geometry.

    pair holds the normalized [1, 3, H, W] image tensors at original size.
    Returns ((left, right), annotations', calib', record); annotations may
    be None at inference time.
    """
    left, right = (as_tensor(t, n) for t, n in zip(pair, ("left", "right")))
    if left.shape != right.shape:
        raise InputError(f"pair shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 4 or left.shape[0] != 1 or left.shape[1] != 3:
        raise InputError(f"expected [1, 3, H, W] image tensors, got {left.shape}")
    _, _, height, width = left.shape
    if height <= config.crop_top:
        raise InputError(
            f"image height {height} not larger than crop_top {config.crop_top}"
        )
    record = TransformRecord(
        crop_top=config.crop_top,
        scale_x=config.input_w / width,
        scale_y=config.input_h / (height - config.crop_top),
        orig_h=height,
        orig_w=width,
    )
    left = resample_bilinear(
        left[:, :, config.crop_top :, :], config.input_h, config.input_w
    )
    right = resample_bilinear(
        right[:, :, config.crop_top :, :], config.input_h, config.input_w
    )
    new_calib = transform_calibration(calib, record)
    new_annotations = None
    if annotations is not None:
        new_annotations = [
            replace(a, box2d=record.apply_box(a.box2d)) for a in annotations
        ]
    return (left, right), new_annotations, new_calib, record


# ---------------------------------------------------------------------------
# Parameter plan


def _conv_norm_specs(prefix, cout, cin, k):
    return [
        (f"{prefix}.conv.weight", (cout, cin, k, k)),
        (f"{prefix}.conv.bias", (cout,)),
        (f"{prefix}.norm.scale", (cout,)),
        (f"{prefix}.norm.shift", (cout,)),
    ]


def _expand_specs(prefix, channels, mode):
    if mode == "ghost":
        return [
            (f"{prefix}.pw.conv.weight", (channels, channels, 1, 1)),
            (f"{prefix}.pw.conv.bias", (channels,)),
            (f"{prefix}.pw.norm.scale", (channels,)),
            (f"{prefix}.pw.norm.shift", (channels,)),
            (f"{prefix}.dw.conv.weight", (channels, 1, 3, 3)),
            (f"{prefix}.dw.conv.bias", (channels,)),
            (f"{prefix}.dw.norm.scale", (channels,)),
            (f"{prefix}.dw.norm.shift", (channels,)),
        ]
    if mode == "pointwise":
        return _conv_norm_specs(prefix, 3 * channels, channels, 1)
    return (
        _conv_norm_specs(f"{prefix}.b1", channels, channels, 3)
        + _conv_norm_specs(f"{prefix}.b2", channels, channels, 3)
    )


def parameter_plan(config: ModelConfig):
    """Every tensor the configured model requires, with its exact shape."""
    plan = []
    c4, c8, c16 = config.backbone_channels
    plan += [
        ("backbone.stem.conv.weight", (config.stem_channels, 3, 7, 7)),
        ("backbone.stem.conv.bias", (config.stem_channels,)),
        ("backbone.stem.norm.scale", (config.stem_channels,)),
        ("backbone.stem.norm.shift", (config.stem_channels,)),
    ]
    cin = config.stem_channels
    for stride, cout, blocks in zip((4, 8, 16), (c4, c8, c16), config.backbone_blocks):
        for i in range(blocks):
            prefix = f"backbone.stage{stride}.block{i}"
            block_in = cin if i == 0 else cout
            plan += _conv_norm_specs(f"{prefix}.c1", cout, block_in, 3)
            plan += _conv_norm_specs(f"{prefix}.c2", cout, cout, 3)
            if i == 0:
                plan += _conv_norm_specs(f"{prefix}.down", cout, block_in, 1)
        cin = cout
    e4_in = config.max_disp4
    plan += _expand_specs("fusion.expand4", e4_in, config.expand_mode)
    e4_out = config.expanded_channels(e4_in)
    if config.learned_downsample:
        plan += [
            ("fusion.down4.conv.weight", (e4_out, 1, 3, 3)),
            ("fusion.down4.conv.bias", (e4_out,)),
            ("fusion.down4.norm.scale", (e4_out,)),
            ("fusion.down4.norm.shift", (e4_out,)),
        ]
    e8_in = e4_out + (config.max_disp8 if config.use_scale8 else 0)
    plan += _expand_specs("fusion.expand8", e8_in, config.expand_mode)
    e8_out = config.expanded_channels(e8_in)
    if config.learned_downsample:
        plan += [
            ("fusion.down8.conv.weight", (e8_out, 1, 3, 3)),
            ("fusion.down8.conv.bias", (e8_out,)),
            ("fusion.down8.norm.scale", (e8_out,)),
            ("fusion.down8.norm.shift", (e8_out,)),
        ]
    if config.use_scale16:
        plan += [
            ("fusion.reduce16.conv.weight", (config.reduce16_channels, c16, 1, 1)),
            ("fusion.reduce16.conv.bias", (config.reduce16_channels,)),
        ]
    trunk_in = config.head_input_channels
    trunk = config.head_trunk_channels
    branch = config.head_branch_channels
    k = config.anchors_per_location
    n_classes = len(config.classes)
    plan += _conv_norm_specs("head.trunk", trunk, trunk_in, 1)
    for name, cout in (("cls", k * n_classes), ("reg", k * 13)):
        plan += _conv_norm_specs(f"head.{name}.b1", branch, trunk, 3)
        plan += _conv_norm_specs(f"head.{name}.b2", branch, branch, 3)
        plan += [
            (f"head.{name}.out.weight", (cout, branch, 3, 3)),
            (f"head.{name}.out.bias", (cout,)),
        ]
    plan += _conv_norm_specs(
        "disparity_decoder.b1", config.decoder_channels, config.fused_channels, 3
    )
    plan += [
        ("disparity_decoder.out.weight",
         (config.decoder_max_disp, config.decoder_channels, 3, 3)),
        ("disparity_decoder.out.bias", (config.decoder_max_disp,)),
    ]
    return plan


def init_weights(config: ModelConfig, seed: int = 0) -> WeightArchive:
    """He-style random initialization of every planned tensor."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_plan(config):
        if name.endswith(".weight") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = rng.normal(
                0.0, math.sqrt(2.0 / fan_in), size=shape
            ).astype(np.float32)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return WeightArchive(tensors)


def zero_weights(config: ModelConfig) -> WeightArchive:
    return WeightArchive(
        {name: np.zeros(shape, dtype=np.float32) for name, shape in parameter_plan(config)}
    )


# ---------------------------------------------------------------------------
# Forward pipeline


@dataclass
class ForwardOutputs:
    cls_logits: np.ndarray
    reg_outputs: np.ndarray
    fused: np.ndarray
    left_features: dict
    trace: list


@dataclass
class DetectResult:
    detections: list[Detection3D]
    trace: list
    dropped: int
    disparity_logits: np.ndarray | None = None


@dataclass
class _ConvNorm:
    weight: np.ndarray
    bias: np.ndarray
    scale: np.ndarray
    shift: np.ndarray


@dataclass
class _ResBlock:
    c1: _ConvNorm
    c2: _ConvNorm
    down: _ConvNorm | None  # present on the striding block


class StereoDetector:
    """Inference-time model bound to a config and a weight archive."""

    def __init__(self, config: ModelConfig, archive: WeightArchive, *, backend=None):
        self.config = config
        self.archive = archive
        self.backend = backend if backend is not None else _backend.active_backend()
        self.op_counts = Counter()
        archive.validate_plan(parameter_plan(config))
        self._load_backbone()
        self._load_fusion()
        self._load_head()
        self._decoder = None  # loaded lazily so disabled runs never read it
        self._anchors: AnchorSet | None = None

    # ----- parameter loading -------------------------------------------

    def _conv_norm(self, prefix) -> _ConvNorm:
        get = self.archive.get
        return _ConvNorm(
            weight=get(f"{prefix}.conv.weight"),
            bias=get(f"{prefix}.conv.bias"),
            scale=get(f"{prefix}.norm.scale"),
            shift=get(f"{prefix}.norm.shift"),
        )

    def _load_backbone(self):
        cfg = self.config
        self._stem = self._conv_norm("backbone.stem")
        self._stages = {}
        for stride, blocks in zip((4, 8, 16), cfg.backbone_blocks):
            stage = []
            for i in range(blocks):
                prefix = f"backbone.stage{stride}.block{i}"
                stage.append(
                    _ResBlock(
                        c1=self._conv_norm(f"{prefix}.c1"),
                        c2=self._conv_norm(f"{prefix}.c2"),
                        down=self._conv_norm(f"{prefix}.down") if i == 0 else None,
                    )
                )
            self._stages[stride] = stage

    def _load_expand(self, prefix, channels):
        cfg = self.config
        get = self.archive.get
        if cfg.expand_mode == "ghost":
            return GhostParams(
                pw_weight=get(f"{prefix}.pw.conv.weight"),
                pw_bias=get(f"{prefix}.pw.conv.bias"),
                pw_scale=get(f"{prefix}.pw.norm.scale"),
                pw_shift=get(f"{prefix}.pw.norm.shift"),
                dw_weight=get(f"{prefix}.dw.conv.weight"),
                dw_bias=get(f"{prefix}.dw.conv.bias"),
                dw_scale=get(f"{prefix}.dw.norm.scale"),
                dw_shift=get(f"{prefix}.dw.norm.shift"),
            )
        if cfg.expand_mode == "pointwise":
            return PointwiseExpandParams(
                weight=get(f"{prefix}.conv.weight"),
                bias=get(f"{prefix}.conv.bias"),
                scale=get(f"{prefix}.norm.scale"),
                shift=get(f"{prefix}.norm.shift"),
            )
        return ResidualBlockParams(
            conv1_weight=get(f"{prefix}.b1.conv.weight"),
            conv1_bias=get(f"{prefix}.b1.conv.bias"),
            norm1_scale=get(f"{prefix}.b1.norm.scale"),
            norm1_shift=get(f"{prefix}.b1.norm.shift"),
            conv2_weight=get(f"{prefix}.b2.conv.weight"),
            conv2_bias=get(f"{prefix}.b2.conv.bias"),
            norm2_scale=get(f"{prefix}.b2.norm.scale"),
            norm2_shift=get(f"{prefix}.b2.norm.shift"),
        )

    def _load_fusion(self):
        cfg = self.config
        get = self.archive.get
        down4 = down8 = None
        if cfg.learned_downsample:
            down4 = DownsampleParams(
                weight=get("fusion.down4.conv.weight"),
                bias=get("fusion.down4.conv.bias"),
                scale=get("fusion.down4.norm.scale"),
                shift=get("fusion.down4.norm.shift"),
            )
            down8 = DownsampleParams(
                weight=get("fusion.down8.conv.weight"),
                bias=get("fusion.down8.conv.bias"),
                scale=get("fusion.down8.norm.scale"),
                shift=get("fusion.down8.norm.shift"),
            )
        e4_in = cfg.max_disp4
        e8_in = cfg.expanded_channels(e4_in) + (cfg.max_disp8 if cfg.use_scale8 else 0)
        self._fusion = FusionParams(
            max_disp4=cfg.max_disp4,
            max_disp8=cfg.max_disp8,
            max_disp16=cfg.max_disp16,
            use_scale8=cfg.use_scale8,
            use_scale16=cfg.use_scale16,
            expand4=self._load_expand("fusion.expand4", e4_in),
            expand8=self._load_expand("fusion.expand8", e8_in),
            down4=down4,
            down8=down8,
            reduce16_weight=get("fusion.reduce16.conv.weight") if cfg.use_scale16 else None,
            reduce16_bias=get("fusion.reduce16.conv.bias") if cfg.use_scale16 else None,
        )

    def _load_head(self):
        get = self.archive.get
        self._trunk = self._conv_norm("head.trunk")
        self._branches = {}
        for name in ("cls", "reg"):
            self._branches[name] = (
                self._conv_norm(f"head.{name}.b1"),
                self._conv_norm(f"head.{name}.b2"),
                get(f"head.{name}.out.weight"),
                get(f"head.{name}.out.bias"),
            )

    def _load_decoder(self):
        if self._decoder is None:
            get = self.archive.get
            self._decoder = (
                self._conv_norm("disparity_decoder.b1"),
                get("disparity_decoder.out.weight"),
                get("disparity_decoder.out.bias"),
            )
        return self._decoder

    # ----- forward helpers ----------------------------------------------

    def _conv(self, component, x, weight, bias, *, stride=1, padding=0, groups=1):
        self.op_counts[component] += 1
        return conv2d(
            x, weight, bias, stride=stride, padding=padding, groups=groups,
            backend=self.backend,
        )

    def _conv_norm_act(self, component, x, p: _ConvNorm, *, stride=1, padding=0,
                       activate=True):
        y = affine_norm(
            self._conv(component, x, p.weight, p.bias, stride=stride, padding=padding),
            p.scale, p.shift,
        )
        return relu(y) if activate else y

    def backbone_forward(self, x, side: str, trace: list):
        """Residual stack; returns features keyed by stride 4/8/16."""
        cfg = self.config
        x = as_tensor(x, "backbone input")
        expected = (1, 3, cfg.input_h, cfg.input_w)
        if x.shape != expected:
            raise InputError(f"backbone expects {expected}, got {x.shape}")
        comp = "backbone"
        x = self._conv_norm_act(comp, x, self._stem, stride=2, padding=3)
        feats = {}
        for stride in (4, 8, 16):
            for i, block in enumerate(self._stages[stride]):
                s = 2 if i == 0 else 1
                y = self._conv_norm_act(comp, x, block.c1, stride=s, padding=1)
                y = self._conv_norm_act(comp, y, block.c2, padding=1, activate=False)
                if block.down is not None:
                    shortcut = self._conv_norm_act(
                        comp, x, block.down, stride=s, activate=False
                    )
                else:
                    shortcut = x
                x = relu(y + shortcut)
            feats[stride] = x
            trace.append((f"backbone.{side}.scale{stride}", tuple(x.shape)))
        return feats

    def forward(self, left, right) -> ForwardOutputs:
        trace = [("input.left", tuple(np.asarray(left).shape))]
        feats_l = self.backbone_forward(left, "left", trace)
        feats_r = self.backbone_forward(right, "right", trace)
        fused, trace = hierarchical_fusion_forward(
            [feats_l[4], feats_l[8], feats_l[16]],
            [feats_r[4], feats_r[8], feats_r[16]],
            self._fusion,
            backend=self.backend,
            trace=trace,
        )
        head_in = concat_channels([fused, feats_l[16]])
        trace.append(("head.input", tuple(head_in.shape)))
        trunk = self._conv_norm_act("head", head_in, self._trunk)
        trace.append(("head.trunk", tuple(trunk.shape)))
        outputs = {}
        for name in ("cls", "reg"):
            b1, b2, out_w, out_b = self._branches[name]
            y = self._conv_norm_act("head", trunk, b1, padding=1)
            y = self._conv_norm_act("head", y, b2, padding=1)
            outputs[name] = self._conv("head", y, out_w, out_b, padding=1)
        trace.append(("head.cls.logits", tuple(outputs["cls"].shape)))
        trace.append(("head.reg.outputs", tuple(outputs["reg"].shape)))
        for name in ("cls", "reg"):
            if not np.isfinite(outputs[name]).all():
                raise InvariantError(
                    f"non-finite values in head output tensor head.{name}"
                )
        return ForwardOutputs(
            cls_logits=outputs["cls"],
            reg_outputs=outputs["reg"],
            fused=fused,
            left_features=feats_l,
            trace=trace,
        )

    def disparity_decoder_forward(self, fused) -> np.ndarray:
        """Per-pixel disparity logits at 1/4 scale, [1, D, H/4, W/4].

        Skipped entirely during plain detection; calling it is what loads
        the decoder weights.
        """
        cfg = self.config
        fused = as_tensor(fused, "fused features")
        if fused.shape[1] != cfg.fused_channels:
            raise InputError(
                f"fused feature has {fused.shape[1]} channels, expected "
                f"{cfg.fused_channels}"
            )
        b1, out_w, out_b = self._load_decoder()
        comp = "disparity_decoder"
        x = self._conv_norm_act(comp, fused, b1, padding=1)
        h4, w4 = cfg.feature_dims[4]
        x = resample_bilinear(x, h4, w4)
        return self._conv(comp, x, out_w, out_b, padding=1)

    # ----- detection ------------------------------------------------------

    def anchors(self) -> AnchorSet:
        if self._anchors is None:
            self._anchors = generate_grid(
                self.config.input_w, self.config.input_h, self.config.anchor_shapes()
            )
        return self._anchors

    def detect(
        self,
        pair,
        calib: CalibrationPair,
        priors: AnchorPriors,
        score_threshold: float = 0.75,
        nms_threshold: float = 0.4,
        *,
        emit_disparity: bool = False,
    ) -> DetectResult:
        """Full forward pass from an original-size pair to detections.

        Deterministic for fixed inputs, weights, and backend. Detections are
        reported in the original image frame; anchors are masked dynamically
        by the ground-plane filter of each anchor's predicted class.
        """
        cfg = self.config
        if tuple(priors.classes) != tuple(cfg.classes):
            raise InputError(
                f"priors classes {priors.classes} do not match the model "
                f"classes {cfg.classes}"
            )
        (left, right), _, net_calib, record = preprocess(pair, None, calib, cfg)
        out = self.forward(left, right)
        anchors = self.anchors()
        k, n_classes = cfg.anchors_per_location, len(cfg.classes)
        h, w = cfg.feature_dims[cfg.anchor_stride]
        cls = out.cls_logits.reshape(k, n_classes, h, w).transpose(2, 3, 0, 1)
        cls = cls.reshape(len(anchors), n_classes).astype(np.float64)
        reg = out.reg_outputs.reshape(k, 13, h, w).transpose(2, 3, 0, 1)
        reg = reg.reshape(len(anchors), 13).astype(np.float64)
        with np.errstate(over="ignore"):
            scores = 1.0 / (1.0 + np.exp(-cls))
        keep = np.stack(
            [
                filter_by_ground_plane(
                    anchors, priors, net_calib,
                    ground_y=cfg.ground_y, tolerance=cfg.ground_tolerance,
                    class_ids=np.full(len(anchors), ki, dtype=np.int64),
                )
                for ki in range(n_classes)
            ]
        )
        detections, dropped = decode_predictions(
            reg[:, :12], reg[:, 12], scores, anchors, priors, net_calib,
            score_threshold, keep_mask=keep, z_encoding=cfg.z_encoding,
        )
        survivors = []
        for class_name in cfg.classes:
            group = [d for d in detections if d.class_name == class_name]
            survivors.extend(nms(group, nms_threshold))
        survivors.sort(key=lambda d: -d.score)
        final = [replace(d, box2d=record.invert_box(d.box2d)) for d in survivors]
        disparity = None
        if emit_disparity:
            disparity = self.disparity_decoder_forward(out.fused)
        return DetectResult(
            detections=final,
            trace=out.trace,
            dropped=dropped,
            disparity_logits=disparity,
        )


def detect(pair, calib, archive, priors, config, score_threshold=0.75,
           nms_threshold=0.4, *, emit_disparity=False, backend=None) -> DetectResult:
    """Convenience wrapper building a StereoDetector for one call."""
    model = StereoDetector(config, archive, backend=backend)
    return model.detect(
        pair, calib, priors, score_threshold, nms_threshold,
        emit_disparity=emit_disparity,
    )
