"""Dense anchor grids, per-shape statistical priors, and the 12-parameter
encode/decode between head outputs and world-space boxes.

Anchors are 2-D boxes tiled over the network input plane; each anchor shape
is bound to one object class so depth and orientation statistics can be
collected per (shape, class) and used to normalize regression targets. The
regression vector per anchor is

    [x2d, y2d, w2d, h2d, cx, cy, z, w3d, h3d, l3d, sin2a, cos2a]

where (cx, cy) is the projected 3-D center on the left image, z is depth,
and sin2a/cos2a encode the doubled observation angle.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import (
    alpha_to_ry,
    back_project,
    decode_orientation,
    encode_orientation,
    iou_2d_matrix,
    project_to_image,
    OrientationEncoding,
)
from .kitti import Detection3D

NORM_EPS = 1e-3
TARGET_NAMES = (
    "x2d", "y2d", "w2d", "h2d", "cx", "cy", "z",
    "w3d", "h3d", "l3d", "sin2a", "cos2a",
)
PRIORS_SCHEMA_VERSION = 1

NEGATIVE = -1
IGNORED = -2


@dataclass(frozen=True)
class AnchorShape:
    """One anchor template: 2-D size, pyramid stride, and bound class."""

    w2d: float
    h2d: float
    scale_level: int
    class_id: int

    def __post_init__(self):
        if self.w2d <= 0 or self.h2d <= 0:
            raise InputError(f"anchor shape must have positive size, got {self}")
        if self.scale_level < 1:
            raise InputError(f"anchor stride must be positive, got {self.scale_level}")


@dataclass
class AnchorSet:
    """A dense grid of anchors in deterministic (level, row, col, shape) order."""

    boxes: np.ndarray        # [A, 4] x1, y1, x2, y2
    centers: np.ndarray      # [A, 2] u, v
    shape_index: np.ndarray  # [A]
    level: np.ndarray        # [A]
    shapes: tuple[AnchorShape, ...]
    image_w: int
    image_h: int
    grid_dims: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def class_ids(self) -> np.ndarray:
        lut = np.array([s.class_id for s in self.shapes], dtype=np.int64)
        return lut[self.shape_index]


def generate_grid(image_w: int, image_h: int, shapes) -> AnchorSet:
    """Tile anchors over the image, one per (location, shape).

    Anchor centers sit at (i + 0.5) * stride. Grid extents are taken over
    the image padded up to a stride multiple. Each shape is placed on the
    level given by its scale_level (the stride in pixels).
    """
    shapes = tuple(shapes)
    if image_w < 1 or image_h < 1:
        raise InputError(f"image size must be positive, got {image_w}x{image_h}")
    if not shapes:
        raise InputError("at least one anchor shape is required")
    levels = sorted({s.scale_level for s in shapes})
    boxes, centers, shape_idx, level_arr = [], [], [], []
    grid_dims = {}
    for lvl in levels:
        lvl_shapes = [(i, s) for i, s in enumerate(shapes) if s.scale_level == lvl]
        rows = -(-image_h // lvl)
        cols = -(-image_w // lvl)
        grid_dims[lvl] = (rows, cols)
        cu = (np.arange(cols, dtype=np.float64) + 0.5) * lvl
        cv = (np.arange(rows, dtype=np.float64) + 0.5) * lvl
        for r in range(rows):
            for c in range(cols):
                for i, s in lvl_shapes:
                    boxes.append(
                        (
                            cu[c] - s.w2d / 2, cv[r] - s.h2d / 2,
                            cu[c] + s.w2d / 2, cv[r] + s.h2d / 2,
                        )
                    )
                    centers.append((cu[c], cv[r]))
                    shape_idx.append(i)
                    level_arr.append(lvl)
    return AnchorSet(
        boxes=np.array(boxes, dtype=np.float64),
        centers=np.array(centers, dtype=np.float64),
        shape_index=np.array(shape_idx, dtype=np.int64),
        level=np.array(level_arr, dtype=np.int64),
        shapes=shapes,
        image_w=image_w,
        image_h=image_h,
        grid_dims=grid_dims,
    )


@dataclass
class Assignment:
    """Per-anchor assignment: >= 0 is a ground-truth index, else NEGATIVE/IGNORED."""

    gt_index: np.ndarray
    max_iou: np.ndarray


def assign(anchors: AnchorSet, gts, pos_iou: float = 0.5, neg_iou: float = 0.4) -> Assignment:
    """Max-IoU matcher with forced assignment of every object to its best anchor.

    An anchor is positive for the object with the highest 2-D IoU when that
    IoU reaches pos_iou, negative when it stays below neg_iou, and ignored
    in between. DontCare regions never produce positives; anchors that would
    be negative but overlap a DontCare region at neg_iou or more are ignored.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise InputError(
            f"need 0 <= neg_iou <= pos_iou <= 1, got neg={neg_iou} pos={pos_iou}"
        )
    n = len(anchors)
    gt_index = np.full(n, NEGATIVE, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)
    real = [(j, g) for j, g in enumerate(gts) if not g.dontcare]
    if real:
        real_boxes = np.array([g.box2d for _, g in real], dtype=np.float64)
        iou = iou_2d_matrix(anchors.boxes, real_boxes)
        best = iou.argmax(axis=1)
        max_iou = iou[np.arange(n), best]
        chosen = np.array([real[j][0] for j in range(len(real))], dtype=np.int64)
        gt_index = np.where(max_iou >= pos_iou, chosen[best], NEGATIVE)
        gt_index[(max_iou >= neg_iou) & (max_iou < pos_iou)] = IGNORED
        # force-assign every object to its best-overlapping anchor
        for col, (orig_j, _) in enumerate(real):
            gt_index[iou[:, col].argmax()] = orig_j
    dontcare_boxes = [g.box2d for g in gts if g.dontcare]
    if dontcare_boxes:
        dc_iou = iou_2d_matrix(anchors.boxes, np.array(dontcare_boxes)).max(axis=1)
        gt_index[(gt_index == NEGATIVE) & (dc_iou >= neg_iou)] = IGNORED
    return Assignment(gt_index=gt_index, max_iou=max_iou)


@dataclass
class AnchorPriors:
    """Depth/orientation statistics per (anchor shape, class) plus class mean sizes."""

    classes: tuple[str, ...]
    shapes: tuple[AnchorShape, ...]
    count: np.ndarray       # [S, K]
    mean_z: np.ndarray      # [S, K]
    var_z: np.ndarray
    mean_sin2a: np.ndarray
    var_sin2a: np.ndarray
    mean_cos2a: np.ndarray
    var_cos2a: np.ndarray
    class_count: np.ndarray     # [K]
    class_dims: np.ndarray      # [K, 3] mean (w3d, h3d, l3d)

    def usable(self) -> np.ndarray:
        """[S, K] mask of (shape, class) cells that saw at least one sample."""
        return self.count > 0

    def class_index(self, class_name: str) -> int:
        try:
            return self.classes.index(class_name)
        except ValueError as exc:
            raise InputError(f"unknown class {class_name!r}") from exc

    def to_json_dict(self) -> dict:
        entries = []
        siz, kcls = self.count.shape
        for s in range(siz):
            for k in range(kcls):
                if self.count[s, k] == 0:
                    continue
                entries.append(
                    {
                        "shape_index": s,
                        "class_id": k,
                        "count": int(self.count[s, k]),
                        "mean_z": self.mean_z[s, k],
                        "var_z": self.var_z[s, k],
                        "mean_sin2a": self.mean_sin2a[s, k],
                        "var_sin2a": self.var_sin2a[s, k],
                        "mean_cos2a": self.mean_cos2a[s, k],
                        "var_cos2a": self.var_cos2a[s, k],
                    }
                )
        return {
            "schema_version": PRIORS_SCHEMA_VERSION,
            "classes": list(self.classes),
            "shapes": [
                {
                    "w2d": s.w2d, "h2d": s.h2d,
                    "scale_level": s.scale_level, "class_id": s.class_id,
                }
                for s in self.shapes
            ],
            "entries": entries,
            "class_dims": [
                {
                    "class_id": k,
                    "count": int(self.class_count[k]),
                    "mean_w3d": self.class_dims[k, 0],
                    "mean_h3d": self.class_dims[k, 1],
                    "mean_l3d": self.class_dims[k, 2],
                }
                for k in range(kcls)
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AnchorPriors":
        version = doc.get("schema_version")
        if version != PRIORS_SCHEMA_VERSION:
            raise InputError(f"unsupported priors schema version {version!r}")
        classes = tuple(doc["classes"])
        shapes = tuple(
            AnchorShape(
                w2d=s["w2d"], h2d=s["h2d"],
                scale_level=s["scale_level"], class_id=s["class_id"],
            )
            for s in doc["shapes"]
        )
        siz, kcls = len(shapes), len(classes)
        priors = cls.empty(classes, shapes)
        for e in doc["entries"]:
            s, k = e["shape_index"], e["class_id"]
            if not (0 <= s < siz and 0 <= k < kcls):
                raise InputError(f"priors entry indexes out of range: {e}")
            priors.count[s, k] = e["count"]
            priors.mean_z[s, k] = e["mean_z"]
            priors.var_z[s, k] = e["var_z"]
            priors.mean_sin2a[s, k] = e["mean_sin2a"]
            priors.var_sin2a[s, k] = e["var_sin2a"]
            priors.mean_cos2a[s, k] = e["mean_cos2a"]
            priors.var_cos2a[s, k] = e["var_cos2a"]
        for c in doc["class_dims"]:
            k = c["class_id"]
            priors.class_count[k] = c["count"]
            priors.class_dims[k] = (c["mean_w3d"], c["mean_h3d"], c["mean_l3d"])
        return priors

    @classmethod
    def empty(cls, classes, shapes) -> "AnchorPriors":
        siz, kcls = len(shapes), len(classes)
        z = lambda: np.zeros((siz, kcls), dtype=np.float64)  # noqa: E731
        return cls(
            classes=tuple(classes), shapes=tuple(shapes),
            count=np.zeros((siz, kcls), dtype=np.int64),
            mean_z=z(), var_z=z(), mean_sin2a=z(), var_sin2a=z(),
            mean_cos2a=z(), var_cos2a=z(),
            class_count=np.zeros(kcls, dtype=np.int64),
            class_dims=np.zeros((kcls, 3), dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "AnchorPriors":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


class _Welford:
    """Numerically stable streaming mean/variance (population)."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self, shape):
        self.count = np.zeros(shape, dtype=np.int64)
        self.mean = np.zeros(shape, dtype=np.float64)
        self.m2 = np.zeros(shape, dtype=np.float64)

    def add(self, index, value):
        self.count[index] += 1
        delta = value - self.mean[index]
        self.mean[index] += delta / self.count[index]
        self.m2[index] += delta * (value - self.mean[index])

    def variance(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.m2 / np.maximum(self.count, 1), 0.0)


def compute_priors(dataset, anchors: AnchorSet, pos_iou: float = 0.5,
                   classes=("Car",)) -> AnchorPriors:
    """Accumulate per-(shape, class) statistics of z, sin 2a, cos 2a.

    dataset iterates (annotations, calibration) pairs whose annotations are
    already expressed in the anchor grid's image frame. Mean 3-D dimensions
    per class are gathered alongside (one sample per object). Statistics use
    a single-pass streaming accumulator, so results are independent of
    dataset ordering up to floating-point noise.
    """
    classes = tuple(classes)
    class_to_idx = {c: k for k, c in enumerate(classes)}
    siz, kcls = len(anchors.shapes), len(classes)
    acc_z = _Welford((siz, kcls))
    acc_sin = _Welford((siz, kcls))
    acc_cos = _Welford((siz, kcls))
    dim_count = np.zeros(kcls, dtype=np.int64)
    dim_sum = np.zeros((kcls, 3), dtype=np.float64)
    n_frames = 0
    for annotations, _calib in dataset:
        n_frames += 1
        usable_gts = [
            g for g in annotations
            if not g.dontcare and g.class_name in class_to_idx
        ]
        if not usable_gts:
            continue
        for g in usable_gts:
            k = class_to_idx[g.class_name]
            dim_count[k] += 1
            dim_sum[k] += (g.w3d, g.h3d, g.l3d)
        result = assign(anchors, usable_gts, pos_iou=pos_iou, neg_iou=pos_iou)
        matched = np.nonzero(result.gt_index >= 0)[0]
        for a in matched:
            g = usable_gts[result.gt_index[a]]
            k = class_to_idx[g.class_name]
            s = int(anchors.shape_index[a])
            enc = encode_orientation(g.alpha)
            acc_z.add((s, k), g.location[2])
            acc_sin.add((s, k), enc.sin2a)
            acc_cos.add((s, k), enc.cos2a)
    if n_frames == 0:
        raise InputError("priors dataset is empty")
    priors = AnchorPriors.empty(classes, anchors.shapes)
    priors.count = acc_z.count
    priors.mean_z, priors.var_z = acc_z.mean, acc_z.variance()
    priors.mean_sin2a, priors.var_sin2a = acc_sin.mean, acc_sin.variance()
    priors.mean_cos2a, priors.var_cos2a = acc_cos.mean, acc_cos.variance()
    priors.class_count = dim_count
    with np.errstate(invalid="ignore", divide="ignore"):
        priors.class_dims = np.where(
            dim_count[:, None] > 0, dim_sum / np.maximum(dim_count, 1)[:, None], 0.0
        )
    return priors


def filter_by_ground_plane(
    anchors: AnchorSet,
    priors: AnchorPriors,
    calib,
    ground_y: float = 1.65,
    tolerance: float = 1.0,
    class_ids=None,
) -> np.ndarray:
    """Keep anchors whose back-projected center lies near the ground plane.

    Each anchor center is lifted to 3-D at its (shape, class) mean depth; the
    anchor survives when the vertical distance |y - ground_y| stays within
    tolerance. Anchors without priors are unusable and always masked out.
    class_ids selects which class's statistics apply per anchor (scalar or
    per-anchor array); by default each anchor uses its shape's bound class.
    """
    if tolerance < 0:
        raise InputError(f"tolerance must be non-negative, got {tolerance}")
    n = len(anchors)
    if class_ids is None:
        cls = anchors.class_ids
    else:
        cls = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (n,))
    if cls.size and (cls.min() < 0 or cls.max() >= len(priors.classes)):
        raise InputError("class id out of range for the supplied priors")
    sidx = anchors.shape_index
    usable = priors.usable()[sidx, cls]
    depth = priors.mean_z[sidx, cls]
    keep = np.zeros(n, dtype=bool)
    if usable.any():
        u = anchors.centers[usable, 0]
        v = anchors.centers[usable, 1]
        z = depth[usable]
        _, y = back_project(u, v, z, calib)
        keep[usable] = np.abs(y - ground_y) <= tolerance
    return keep


@dataclass(frozen=True)
class AnchorTarget:
    """Normalized regression targets plus the facing and class labels."""

    values: np.ndarray  # [12] ordered as TARGET_NAMES
    facing: bool
    class_id: int


def encode_z(z: float, mean_z: float, var_z: float) -> float:
    return (z - mean_z) / math.sqrt(var_z + NORM_EPS)


def decode_z(t: float, mean_z: float, var_z: float) -> float:
    return mean_z + t * math.sqrt(var_z + NORM_EPS)


def encode_z_alt(z: float) -> float:
    """Inverse of decode_z_alt: the logit of 1 / (z + 1), i.e. -log(z)."""
    if z <= 0:
        raise InputError(f"depth must be positive, got {z}")
    return -math.log(z)


def decode_z_alt(v: float) -> float:
    """Transformed-depth decoding z = 1/sigmoid(v) - 1 (equals exp(-v))."""
    return math.exp(-v)


def encode_targets(gt, anchor_box, shape_index: int, priors: AnchorPriors, calib,
                   *, z_encoding: str = "prior") -> AnchorTarget:
    """Encode one assigned object against one anchor.

    2-D terms are standard box deltas; the projected 3-D center becomes a
    pixel delta normalized by the anchor size; depth and the doubled-angle
    terms are whitened by the (shape, class) priors; dimensions are log
    ratios against the class mean size.
    """
    if min(gt.h3d, gt.w3d, gt.l3d) <= 0:
        raise InputError(f"object dimensions must be positive, got {gt}")
    if z_encoding not in ("prior", "inverse_sigmoid"):
        raise InputError(f"unknown z encoding {z_encoding!r}")
    k = priors.class_index(gt.class_name)
    s = int(shape_index)
    if priors.count[s, k] == 0:
        raise InputError(f"no prior statistics for shape {s}, class {gt.class_name!r}")
    ax1, ay1, ax2, ay2 = (float(v) for v in anchor_box)
    aw, ah = ax2 - ax1, ay2 - ay1
    acx, acy = (ax1 + ax2) / 2, (ay1 + ay2) / 2
    gx1, gy1, gx2, gy2 = gt.box2d
    x, y, z = gt.location
    center = (x, y - gt.h3d / 2, z)
    u, v = project_to_image(center, calib)
    enc = encode_orientation(gt.alpha)
    if z_encoding == "prior":
        t_z = encode_z(z, priors.mean_z[s, k], priors.var_z[s, k])
    else:
        t_z = encode_z_alt(z)
    dims = priors.class_dims[k]
    if np.any(dims <= 0):
        raise InputError(f"class {gt.class_name!r} has no mean dimension statistics")
    values = np.array(
        [
            ((gx1 + gx2) / 2 - acx) / aw,
            ((gy1 + gy2) / 2 - acy) / ah,
            math.log((gx2 - gx1) / aw),
            math.log((gy2 - gy1) / ah),
            (u - acx) / aw,
            (v - acy) / ah,
            t_z,
            math.log(gt.w3d / dims[0]),
            math.log(gt.h3d / dims[1]),
            math.log(gt.l3d / dims[2]),
            (enc.sin2a - priors.mean_sin2a[s, k])
            / math.sqrt(priors.var_sin2a[s, k] + NORM_EPS),
            (enc.cos2a - priors.mean_cos2a[s, k])
            / math.sqrt(priors.var_cos2a[s, k] + NORM_EPS),
        ],
        dtype=np.float64,
    )
    return AnchorTarget(values=values, facing=enc.facing, class_id=k)


def decode_single(values, facing: bool, class_id: int, anchor_box, shape_index: int,
                  priors: AnchorPriors, calib, *, score: float = 1.0,
                  z_encoding: str = "prior"):
    """Invert encode_targets for one anchor; returns a Detection3D.

    Raises InputError when the decoded geometry is unusable (non-finite or
    non-positive depth); batch decoding counts those instead.
    """
    values = np.asarray(values, dtype=np.float64).reshape(12)
    k, s = int(class_id), int(shape_index)
    ax1, ay1, ax2, ay2 = (float(v) for v in anchor_box)
    aw, ah = ax2 - ax1, ay2 - ay1
    acx, acy = (ax1 + ax2) / 2, (ay1 + ay2) / 2
    bcx = acx + values[0] * aw
    bcy = acy + values[1] * ah
    bw = aw * math.exp(values[2])
    bh = ah * math.exp(values[3])
    u = acx + values[4] * aw
    v = acy + values[5] * ah
    if z_encoding == "prior":
        z = decode_z(values[6], priors.mean_z[s, k], priors.var_z[s, k])
    else:
        z = decode_z_alt(values[6])
    dims = priors.class_dims[k]
    w3d, h3d, l3d = (float(dims[i] * math.exp(values[7 + i])) for i in range(3))
    sin2a = priors.mean_sin2a[s, k] + values[10] * math.sqrt(
        priors.var_sin2a[s, k] + NORM_EPS
    )
    cos2a = priors.mean_cos2a[s, k] + values[11] * math.sqrt(
        priors.var_cos2a[s, k] + NORM_EPS
    )
    if z <= 0 or not np.isfinite([bcx, bcy, bw, bh, u, v, z, w3d, h3d, l3d]).all():
        raise InputError("decoded geometry is not usable")
    x, yc = back_project(u, v, z, calib)
    alpha = decode_orientation(OrientationEncoding(sin2a, cos2a, facing))
    ry = alpha_to_ry(alpha, float(x), z)
    return Detection3D(
        class_name=priors.classes[k],
        score=float(score),
        alpha=alpha,
        box2d=(bcx - bw / 2, bcy - bh / 2, bcx + bw / 2, bcy + bh / 2),
        h3d=h3d, w3d=w3d, l3d=l3d,
        location=(float(x), float(yc) + h3d / 2, z),
        rotation_y=ry,
    )


def decode_predictions(
    reg_values,
    facing_logits,
    class_scores,
    anchors: AnchorSet,
    priors: AnchorPriors,
    calib,
    score_threshold: float,
    *,
    keep_mask=None,
    z_encoding: str = "prior",
):
    """Decode dense head outputs into detections.

    reg_values: [A, 12]; facing_logits: [A]; class_scores: [A, K] in [0, 1].
    keep_mask optionally suppresses anchors: either a flat [A] mask or a
    per-class [K, A] mask gathered by each anchor's predicted class (the
    dynamic filtering used at inference). Returns (detections, dropped)
    where dropped counts anchors whose decoded geometry was non-finite or
    behind the camera.
    """
    reg_values = np.asarray(reg_values, dtype=np.float64)
    class_scores = np.asarray(class_scores, dtype=np.float64)
    facing_logits = np.asarray(facing_logits, dtype=np.float64)
    n = len(anchors)
    if reg_values.shape != (n, 12):
        raise InputError(
            f"regression output shape {reg_values.shape} not aligned with "
            f"{n} anchors x 12 targets"
        )
    if class_scores.ndim != 2 or class_scores.shape[0] != n:
        raise InputError(f"class score shape {class_scores.shape} not aligned")
    best_class = class_scores.argmax(axis=1)
    best_score = class_scores[np.arange(n), best_class]
    selected = best_score >= score_threshold
    if keep_mask is not None:
        keep_mask = np.asarray(keep_mask, dtype=bool)
        if keep_mask.ndim == 2:
            keep_mask = keep_mask[best_class, np.arange(n)]
        selected &= keep_mask
    usable = priors.usable()[anchors.shape_index, best_class]
    selected &= usable
    detections = []
    dropped = 0
    for a in np.nonzero(selected)[0]:
        try:
            det = decode_single(
                reg_values[a],
                bool(facing_logits[a] > 0),
                int(best_class[a]),
                anchors.boxes[a],
                int(anchors.shape_index[a]),
                priors,
                calib,
                score=float(best_score[a]),
                z_encoding=z_encoding,
            )
        except InputError:
            dropped += 1
            continue
        detections.append(det)
    return detections, dropped
