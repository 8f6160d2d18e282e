"""Camera projection, orientation algebra, box overlap, and suppression.

Angles are radians. The observation angle alpha lives in (-pi, pi]; the
doubled-angle encoding (sin 2a, cos 2a) is ambiguous under a +/- pi shift,
which the boolean facing flag (|alpha| > pi/2) resolves. Yaw (rotation_y)
is measured about the camera y-axis with zero along +x.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    r = (a + math.pi) % TWO_PI - math.pi
    if r == -math.pi:
        return math.pi
    return r


@dataclass(frozen=True)
class OrientationEncoding:
    sin2a: float
    cos2a: float
    facing: bool


def encode_orientation(alpha: float) -> OrientationEncoding:
    """Map alpha in (-pi, pi] to the ambiguity-free doubled-angle encoding."""
    if not -math.pi < alpha <= math.pi:
        raise InputError(f"alpha {alpha} outside (-pi, pi]")
    return OrientationEncoding(
        sin2a=math.sin(2.0 * alpha),
        cos2a=math.cos(2.0 * alpha),
        facing=abs(alpha) > math.pi / 2.0,
    )


def decode_orientation(enc: OrientationEncoding) -> float:
    """Invert encode_orientation; the facing flag picks the half-turn branch.

    The boundary |alpha| == pi/2 belongs to facing == False.
    """
    if enc.sin2a == 0.0 and enc.cos2a == 0.0:
        raise InputError("orientation encoding is the zero vector")
    half = math.atan2(enc.sin2a, enc.cos2a) / 2.0
    if not enc.facing:
        return half
    return half + math.pi if half <= 0.0 else half - math.pi


def alpha_to_ry(alpha: float, x: float, z: float) -> float:
    """Observation angle to global yaw: ry = alpha + atan2(x, z), wrapped."""
    if z <= 0.0:
        raise InputError(f"depth must be positive, got z={z}")
    return wrap_angle(alpha + math.atan2(x, z))


def ry_to_alpha(ry: float, x: float, z: float) -> float:
    if z <= 0.0:
        raise InputError(f"depth must be positive, got z={z}")
    return wrap_angle(ry - math.atan2(x, z))


def project_to_image(point, calib) -> tuple[float, float]:
    """Homogeneous pin-hole projection of a camera-frame point through P2."""
    x, y, z = (float(v) for v in point)
    if z <= 0.0:
        raise InputError(f"cannot project point behind the camera (z={z})")
    p = calib.P2
    w = p[2, 0] * x + p[2, 1] * y + p[2, 2] * z + p[2, 3]
    u = (p[0, 0] * x + p[0, 1] * y + p[0, 2] * z + p[0, 3]) / w
    v = (p[1, 0] * x + p[1, 1] * y + p[1, 2] * z + p[1, 3]) / w
    return u, v


def back_project(u, v, z, calib):
    """Invert project_to_image for rectified zero-skew P2 at known depth.

    Exact for matrices of the rectified form (third row [0, 0, 1, t]).
    Accepts scalars or arrays; returns (x, y) in camera-frame meters.
    """
    p = calib.P2
    u = np.asarray(u)
    v = np.asarray(v)
    x = ((u - calib.cx) * z + u * p[2, 3] - p[0, 3]) / calib.fx
    y = ((v - calib.cy) * z + v * p[2, 3] - p[1, 3]) / calib.fy
    return x, y


def iou_2d(a, b) -> float:
    """IoU of axis-aligned (x1, y1, x2, y2) rectangles, continuous convention."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def iou_2d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 2-D IoU between box arrays [N, 4] and [M, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def _bev_corners(box) -> np.ndarray:
    """Corners of a BEV rectangle (cx, cz, w, l, yaw); l runs along yaw 0."""
    cx, cz, w, l, yaw = (float(v) for v in box)
    c, s = math.cos(yaw), math.sin(yaw)
    half = np.array(
        [[l / 2, w / 2], [l / 2, -w / 2], [-l / 2, -w / 2], [-l / 2, w / 2]],
        dtype=np.float64,
    )
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return half @ rot.T + np.array([cx, cz])


def _clip_polygon(subject: np.ndarray, edge_a, edge_b) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against one directed edge."""
    out = []
    n = len(subject)
    ex, ez = edge_b[0] - edge_a[0], edge_b[1] - edge_a[1]

    def inside(p):
        return ex * (p[1] - edge_a[1]) - ez * (p[0] - edge_a[0]) <= 0.0

    def intersect(p, q):
        dx, dz = q[0] - p[0], q[1] - p[1]
        denom = ex * dz - ez * dx
        t = (ex * (edge_a[1] - p[1]) - ez * (edge_a[0] - p[0])) / denom
        return (p[0] + t * dx, p[1] + t * dz)

    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        pin, qin = inside(p), inside(q)
        if pin:
            out.append(tuple(p))
            if not qin:
                out.append(intersect(p, q))
        elif qin:
            out.append(intersect(p, q))
    return np.array(out, dtype=np.float64) if out else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; vertices in consistent winding order."""
    if len(poly) < 3:
        return 0.0
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))


def _bev_intersection_area(a, b) -> float:
    ca, cb = _bev_corners(a), _bev_corners(b)
    poly = ca
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def iou_bev(a, b) -> float:
    """Exact rotated-rectangle IoU in the ground plane via polygon clipping."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise InputError("BEV box dimensions must be positive")
    inter = _bev_intersection_area(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union) if union > 0.0 else 0.0


def iou_3d(a, b) -> float:
    """Volumetric IoU of KITTI-style boxes (x, y, z, w3d, h3d, l3d, ry).

    y is the bottom-center coordinate (pointing down), so the vertical
    extent is [y - h, y].
    """
    ax, ay, az, aw, ah, al, ar = (float(v) for v in a)
    bx, by, bz, bw, bh, bl, br = (float(v) for v in b)
    if min(aw, ah, al, bw, bh, bl) <= 0:
        raise InputError("3-D box dimensions must be positive")
    y_overlap = min(ay, by) - max(ay - ah, by - bh)
    if y_overlap <= 0.0:
        return 0.0
    inter = _bev_intersection_area((ax, az, aw, al, ar), (bx, bz, bw, bl, br)) * y_overlap
    union = aw * ah * al + bw * bh * bl - inter
    return float(inter / union) if union > 0.0 else 0.0


def nms(dets, iou_threshold: float):
    """Greedy non-maximum suppression on 2-D boxes.

    Keeps detections in descending score order; ties broken by input index.
    Every surviving pair has iou_2d <= iou_threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InputError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not dets:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise InputError("detection scores must be finite")
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([dets[i].box2d for i in order], dtype=np.float64)
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(dets[order[i]])
        if i + 1 < len(order):
            ious = iou_2d_matrix(boxes[i : i + 1], boxes[i + 1 :])[0]
            suppressed[i + 1 :] |= ious > iou_threshold
    return keep
