"""KITTI object-detection artifacts: calibration, labels, detections, rasters.

Label rows carry 15 whitespace-separated fields (16 with a trailing score for
detections): type, truncation, occlusion, alpha, 2-D box, 3-D dimensions
(h, w, l), location (x, y, z), rotation_y. "DontCare" rows are retained and
flagged; their geometry carries -1 sentinels.
"""

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

DONTCARE = "DontCare"


@dataclass(frozen=True)
class CalibrationPair:
    """Left/right rectified projection matrices and derived pin-hole terms."""

    P2: np.ndarray
    P3: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float

    @classmethod
    def from_matrices(cls, P2, P3) -> "CalibrationPair":
        P2 = np.asarray(P2, dtype=np.float64).reshape(3, 4)
        P3 = np.asarray(P3, dtype=np.float64).reshape(3, 4)
        fx, fy = float(P2[0, 0]), float(P2[1, 1])
        if fx <= 0 or fy <= 0:
            raise InputError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        baseline = (float(P2[0, 3]) - float(P3[0, 3])) / fx
        if baseline <= 0:
            raise InputError(f"derived baseline must be positive, got {baseline}")
        return cls(
            P2=P2, P3=P3, fx=fx, fy=fy,
            cx=float(P2[0, 2]), cy=float(P2[1, 2]), baseline=baseline,
        )


@dataclass(frozen=True)
class ObjectAnnotation:
    """One KITTI label row."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: tuple[float, float, float, float]
    h3d: float
    w3d: float
    l3d: float
    location: tuple[float, float, float]
    rotation_y: float

    @property
    def dontcare(self) -> bool:
        return self.class_name == DONTCARE

    @property
    def box_height(self) -> float:
        return self.box2d[3] - self.box2d[1]


@dataclass(frozen=True)
class Detection3D:
    """A decoded detection in KITTI submission layout."""

    class_name: str
    score: float
    alpha: float
    box2d: tuple[float, float, float, float]
    h3d: float
    w3d: float
    l3d: float
    location: tuple[float, float, float]
    rotation_y: float


def parse_calibration(text: str) -> CalibrationPair:
    """Parse a KITTI calibration file (needs 'P2:' and 'P3:' rows)."""
    matrices = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in ("P2", "P3"):
            continue
        fields = rest.split()
        if len(fields) != 12:
            raise InputError(f"calibration key {key} has {len(fields)} values, expected 12")
        try:
            values = [float(f) for f in fields]
        except ValueError as exc:
            raise InputError(f"calibration key {key}: {exc}") from exc
        matrices[key] = np.array(values, dtype=np.float64).reshape(3, 4)
    for key in ("P2", "P3"):
        if key not in matrices:
            raise InputError(f"calibration text is missing the {key} line")
    return CalibrationPair.from_matrices(matrices["P2"], matrices["P3"])


def _parse_object_fields(fields, lineno: int, *, strict: bool = True):
    name = fields[0]
    try:
        nums = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise InputError(f"label line {lineno}: {exc}") from exc
    box = (nums[3], nums[4], nums[5], nums[6])
    if strict and (box[2] <= box[0] or box[3] <= box[1]):
        raise InputError(f"label line {lineno}: degenerate 2-D box {box}")
    h3d, w3d, l3d = nums[7], nums[8], nums[9]
    if strict and name != DONTCARE and min(h3d, w3d, l3d) <= 0:
        raise InputError(
            f"label line {lineno}: non-positive 3-D dimensions for class {name}"
        )
    return ObjectAnnotation(
        class_name=name,
        truncation=nums[0],
        occlusion=int(round(nums[1])),
        alpha=nums[2],
        box2d=box,
        h3d=h3d, w3d=w3d, l3d=l3d,
        location=(nums[10], nums[11], nums[12]),
        rotation_y=nums[13],
    )


def parse_labels(text: str) -> list[ObjectAnnotation]:
    """Parse KITTI label rows; one annotation per non-empty line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 15:
            raise InputError(f"label line {lineno} has {len(fields)} fields, expected >= 15")
        out.append(_parse_object_fields(fields, lineno))
    return out


def parse_detections(text: str) -> list[Detection3D]:
    """Parse detection rows (label fields plus a trailing score).

    Unlike ground-truth labels, detections only promise finite geometry, so
    degenerate dimensions (a side quantized to 0.00) are allowed through.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 16:
            raise InputError(
                f"detection line {lineno} has {len(fields)} fields, expected >= 16"
            )
        ann = _parse_object_fields(fields[:15], lineno, strict=False)
        try:
            score = float(fields[15])
        except ValueError as exc:
            raise InputError(f"detection line {lineno}: {exc}") from exc
        out.append(
            Detection3D(
                class_name=ann.class_name, score=score, alpha=ann.alpha,
                box2d=ann.box2d, h3d=ann.h3d, w3d=ann.w3d, l3d=ann.l3d,
                location=ann.location, rotation_y=ann.rotation_y,
            )
        )
    return out


def write_detections(dets) -> str:
    """Serialize detections in KITTI submission order.

    Geometry uses fixed 2-decimal formatting, the score 6 decimals, so a
    parse/write roundtrip preserves geometry to the 0.01 quantization step.
    """
    lines = []
    for i, d in enumerate(dets):
        values = (d.alpha, *d.box2d, d.h3d, d.w3d, d.l3d, *d.location, d.rotation_y, d.score)
        if not all(math.isfinite(float(v)) for v in values):
            raise InputError(f"detection {i} has a non-finite field")
        lines.append(
            f"{d.class_name} -1.00 -1 {d.alpha:.2f} "
            f"{d.box2d[0]:.2f} {d.box2d[1]:.2f} {d.box2d[2]:.2f} {d.box2d[3]:.2f} "
            f"{d.h3d:.2f} {d.w3d:.2f} {d.l3d:.2f} "
            f"{d.location[0]:.2f} {d.location[1]:.2f} {d.location[2]:.2f} "
            f"{d.rotation_y:.2f} {d.score:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Rasters


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB image (PNG or binary PPM) as uint8 [H, W, 3]."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        return _decode_ppm(data, str(path))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    raise InputError(f"{path}: unsupported raster container (need PNG or binary PPM)")


def _decode_ppm(data: bytes, path: str) -> np.ndarray:
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise InputError(f"{path}: truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise InputError(f"{path}: truncated PPM comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise InputError(f"{path}: bad PPM header: {exc}") from exc
    if maxval != 255:
        raise InputError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos, count=width * height * 3)
    if pixels.size != width * height * 3:
        raise InputError(f"{path}: truncated PPM pixel data")
    return pixels.reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write uint8 [H, W, 3] as binary PPM (P6)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"PPM writer needs [H, W, 3] uint8, got {image.shape}")
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def image_to_tensor(image: np.ndarray) -> np.ndarray:
    """Scale uint8 RGB to [0, 1] and normalize with fixed ImageNet statistics."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise InputError(f"expected uint8 [H, W, 3] image, got {image.dtype} {image.shape}")
    scaled = image.astype(np.float32) / 255.0
    normed = (scaled - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(normed.transpose(2, 0, 1)[None])


def load_image_pair(left_path, right_path) -> tuple[np.ndarray, np.ndarray]:
    """Load and normalize a stereo pair; both images must share dimensions."""
    left = read_image(left_path)
    right = read_image(right_path)
    if left.shape != right.shape:
        raise InputError(
            f"stereo pair dimensions differ: left {left.shape[:2]} vs "
            f"right {right.shape[:2]}"
        )
    return image_to_tensor(left), image_to_tensor(right)


def rgb_to_luminance(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma (0.299 R + 0.587 G + 0.114 B), rounded half-up."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected [H, W, 3] image, got {image.shape}")
    gray = (
        0.299 * image[:, :, 0].astype(np.float64)
        + 0.587 * image[:, :, 1]
        + 0.114 * image[:, :, 2]
    )
    return np.floor(gray + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# 16-bit disparity PNG (value = disparity * 256; 0 marks invalid)


def save_disparity_png(path, disparity: np.ndarray) -> None:
    """Persist a disparity map as 16-bit grayscale PNG scaled by 256.

    Invalid pixels (negative disparity) map to 0; consequently a true
    disparity of exactly 0 is not representable, matching the convention
    of the dataset this format comes from.
    """
    disparity = np.asarray(disparity, dtype=np.float64)
    if disparity.ndim != 2:
        raise InputError(f"disparity map must be 2-D, got {disparity.ndim}-D")
    scaled = np.where(disparity < 0, 0.0, disparity * 256.0)
    if scaled.max(initial=0.0) > 65535:
        raise InputError("disparity too large for 16-bit PNG encoding")
    _write_png16(path, np.round(scaled).astype(np.uint16))


def load_disparity_png(path) -> np.ndarray:
    """Load a 16-bit disparity PNG; zeros become the -1 invalid sentinel."""
    from PIL import Image

    with Image.open(path) as img:
        raw = np.asarray(img, dtype=np.uint16)
    out = raw.astype(np.float32) / 256.0
    out[raw == 0] = -1.0
    return out


def _write_png16(path, image: np.ndarray) -> None:
    """Minimal 16-bit grayscale PNG encoder (big-endian samples, no filter)."""
    height, width = image.shape
    raw = image.astype(">u2").tobytes()
    stride = width * 2
    scanlines = b"".join(
        b"\x00" + raw[y * stride : (y + 1) * stride] for y in range(height)
    )

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", width, height, 16, 0, 0, 0, 0)
    blob = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(scanlines, 6))
        + chunk(b"IEND", b"")
    )
    Path(path).write_bytes(blob)
