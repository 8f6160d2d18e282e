"""Shared fixtures: synthetic calibrations, annotations, priors, tiny model."""

import numpy as np
import pytest

from stereodet3d.anchors import AnchorPriors
from stereodet3d.config import ModelConfig
from stereodet3d.kitti import CalibrationPair, Detection3D, ObjectAnnotation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def kitti_calib():
    """Realistic KITTI-like rectified calibration."""
    p2 = np.array(
        [
            [721.5377, 0.0, 609.5593, 44.85728],
            [0.0, 721.5377, 172.854, 0.2163791],
            [0.0, 0.0, 1.0, 0.002745884],
        ]
    )
    p3 = p2.copy()
    p3[0, 3] = -339.5242
    p3[1, 3] = 2.199936
    p3[2, 3] = 0.002729905
    return CalibrationPair.from_matrices(p2, p3)


@pytest.fixture
def simple_calib():
    """Zero-translation pin-hole calibration (fx=fy=100, cx=cy=50)."""
    p2 = np.array([[100.0, 0, 50, 0], [0, 100.0, 50, 0], [0, 0, 1, 0]])
    p3 = p2.copy()
    p3[0, 3] = -54.0  # baseline 0.54 m
    return CalibrationPair.from_matrices(p2, p3)


def make_annotation(
    class_name="Car",
    truncation=0.0,
    occlusion=0,
    alpha=0.1,
    box2d=(100.0, 100.0, 200.0, 160.0),
    h3d=1.5,
    w3d=1.7,
    l3d=4.0,
    location=(1.0, 1.65, 20.0),
    rotation_y=None,
):
    if rotation_y is None:
        from stereodet3d.geometry import wrap_angle

        x, _, z = location
        rotation_y = wrap_angle(alpha + float(np.arctan2(x, z)))
    return ObjectAnnotation(
        class_name=class_name,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        box2d=tuple(float(v) for v in box2d),
        h3d=h3d,
        w3d=w3d,
        l3d=l3d,
        location=tuple(float(v) for v in location),
        rotation_y=float(rotation_y),
    )


def detection_from_annotation(ann, score=1.0):
    return Detection3D(
        class_name=ann.class_name,
        score=score,
        alpha=ann.alpha,
        box2d=ann.box2d,
        h3d=ann.h3d,
        w3d=ann.w3d,
        l3d=ann.l3d,
        location=ann.location,
        rotation_y=ann.rotation_y,
    )


def synthetic_priors(config: ModelConfig, *, mean_z=15.0, var_z=64.0) -> AnchorPriors:
    """Fully populated priors for tests that do not learn them from data.

    The default mean depth keeps at least one anchor row inside the default
    ground-plane band for both the tiny and the full-scale calibrations.
    """
    priors = AnchorPriors.empty(config.classes, config.anchor_shapes())
    priors.count[:] = 10
    priors.mean_z[:] = mean_z
    priors.var_z[:] = var_z
    priors.mean_sin2a[:] = 0.0
    priors.var_sin2a[:] = 0.3
    priors.mean_cos2a[:] = 0.9
    priors.var_cos2a[:] = 0.1
    priors.class_count[:] = 10
    priors.class_dims[:] = (1.7, 1.6, 4.0)
    return priors


@pytest.fixture
def tiny_config():
    """Small but structurally complete model for fast pipeline tests."""
    return ModelConfig(
        input_h=96,
        input_w=224,
        crop_top=10,
        stem_channels=8,
        backbone_channels=(16, 24, 32),
        backbone_blocks=(1, 1, 1),
        max_disp4=12,
        max_disp8=16,
        max_disp16=6,
        reduce16_channels=4,
        head_trunk_channels=32,
        head_branch_channels=16,
        decoder_channels=8,
        anchor_heights=(12.0, 24.0, 48.0),
        anchor_aspects=(1.6,),
    )
