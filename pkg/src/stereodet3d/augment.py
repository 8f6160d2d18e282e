"""Stereo-consistent training-time augmentation.

Photometric distortion samples one transform per call and applies it to both
images of the pair; horizontal flipping mirrors both images, swaps their
roles, and rewrites annotations and calibration so the flipped sample stays
geometrically consistent (projecting a flipped 3-D center with the flipped
calibration lands in the flipped 2-D box).

Geometric augmentations beyond the flip (scaling, cropping jitter, rotation)
are deliberately absent: they would break the rectified-epipolar assumption
the stereo matcher relies on.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError
from .geometry import wrap_angle
from .kitti import CalibrationPair, ObjectAnnotation

__all__ = ["PhotometricParams", "photometric_distort", "StereoSample", "stereo_flip"]


@dataclass(frozen=True)
class PhotometricParams:
    """Ranges for the shared photometric transform plus the sampling seed."""

    brightness_range: tuple[float, float] = (-32.0, 32.0)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_range: tuple[float, float] = (-18.0, 18.0)  # degrees
    seed: int = 0


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    spread = maxc - minc
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(maxc > 0, spread / maxc, 0.0)
        rc = np.where(spread > 0, (maxc - r) / spread, 0.0)
        gc = np.where(spread > 0, (maxc - g) / spread, 0.0)
        bc = np.where(spread > 0, (maxc - b) / spread, 0.0)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _apply_photometric(image: np.ndarray, brightness, contrast, saturation, hue) -> np.ndarray:
    out = image.astype(np.float64)
    if brightness != 0.0:
        out = out + brightness
    if contrast != 1.0:
        out = out * contrast
    if saturation != 1.0 or hue != 0.0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 255.0) / 255.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        hsv[..., 0] = (hsv[..., 0] + hue / 360.0) % 1.0
        out = _hsv_to_rgb(hsv) * 255.0
    return np.clip(np.rint(out), 0.0, 255.0).astype(np.uint8)


def photometric_distort(pair, params: PhotometricParams):
    """Apply one sampled photometric transform to both images of a pair.

    Deterministic for a fixed seed: the transform is drawn from a seeded
    generator, in a fixed order (brightness, contrast, saturation, hue).
    """
    left, right = pair
    left = np.asarray(left)
    right = np.asarray(right)
    for name, img in (("left", left), ("right", right)):
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise InputError(f"{name} image must be uint8 [H, W, 3], got "
                             f"{img.dtype} {img.shape}")
    rng = np.random.default_rng(params.seed)
    brightness = float(rng.uniform(*params.brightness_range))
    contrast = float(rng.uniform(*params.contrast_range))
    saturation = float(rng.uniform(*params.saturation_range))
    hue = float(rng.uniform(*params.hue_range))
    return (
        _apply_photometric(left, brightness, contrast, saturation, hue),
        _apply_photometric(right, brightness, contrast, saturation, hue),
    )


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    annotations: list[ObjectAnnotation]
    calib: CalibrationPair


def _mirror_projection(p: np.ndarray, width: int) -> np.ndarray:
    """Projection matrix seen through a horizontal mirror (pixel centers at
    0..W-1, world x negated). Requires rectified zero-skew form."""
    if abs(p[0, 1]) > 1e-9 or abs(p[2, 0]) > 1e-9 or abs(p[2, 1]) > 1e-9 or \
            abs(p[2, 2] - 1.0) > 1e-9 or abs(p[2, 3]) > 1e-9:
        raise InputError("stereo flip needs rectified zero-skew projections")
    q = p.copy()
    q[0, 2] = (width - 1) - p[0, 2]
    q[0, 3] = -p[0, 3]
    q[1, 0] = -p[1, 0]
    return q


def stereo_flip(sample: StereoSample) -> StereoSample:
    """Mirror both images, swap left/right roles, rewrite labels and calib.

    Per object: x3d -> -x3d, alpha -> wrap(pi - alpha), and rotation_y is
    re-derived from the flipped alpha and position so the yaw relation stays
    exact. 2-D boxes mirror with x' = W - x; the swapped projection matrices
    take the other camera's mirrored translation so the baseline stays
    positive. Applying the flip twice restores the sample.
    """
    left = np.asarray(sample.left)
    right = np.asarray(sample.right)
    if left.shape != right.shape:
        raise InputError(
            f"stereo pair dimensions differ: {left.shape} vs {right.shape}"
        )
    width = left.shape[1]
    new_left = np.ascontiguousarray(right[:, ::-1])
    new_right = np.ascontiguousarray(left[:, ::-1])
    new_p2 = _mirror_projection(sample.calib.P3, width)
    new_p3 = _mirror_projection(sample.calib.P2, width)
    calib = CalibrationPair.from_matrices(new_p2, new_p3)
    annotations = []
    for ann in sample.annotations:
        x1, y1, x2, y2 = ann.box2d
        box = (width - x2, y1, width - x1, y2)
        if ann.dontcare:
            annotations.append(replace(ann, box2d=box))
            continue
        x, y, z = ann.location
        alpha = wrap_angle(np.pi - ann.alpha)
        ry = wrap_angle(np.pi - ann.rotation_y)
        annotations.append(
            replace(
                ann,
                box2d=box,
                alpha=alpha,
                rotation_y=ry,
                location=(-x, y, z),
            )
        )
    return StereoSample(left=new_left, right=new_right, annotations=annotations, calib=calib)
