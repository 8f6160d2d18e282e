"""Self-contained oracle and invariant battery over synthetic data.

Runs a condensed version of the test suite's independent checks without any
pytest machinery, printing one line per check. Used by the `selftest` CLI
subcommand; exits nonzero via the CLI when any check fails.
"""

import math

import numpy as np

from .anchors import decode_z_alt, encode_z_alt
from .disparity import block_match
from .errors import EXIT_INVARIANT, EXIT_OK
from .evaluation import EASY, average_precision
from .geometry import decode_orientation, encode_orientation, iou_2d, wrap_angle
from .kitti import Detection3D, ObjectAnnotation
from .stereo import correlation_volume
from .tensor import conv2d, softmax_axis


def _conv_oracle(x, w, bias, stride, padding):
    b, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = float(bias[co])
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < wid:
                                    acc += float(w[co, ci, ky, kx]) * float(x[bi, ci, iy, ix])
                    out[bi, co, oy, ox] = acc
    return out


def _correlation_oracle(left, right, max_disp):
    b, c, h, w = left.shape
    out = np.zeros((b, max_disp, h, w), dtype=np.float64)
    for bi in range(b):
        for d in range(max_disp):
            for y in range(h):
                for x in range(w):
                    if x - d < 0:
                        continue
                    lv = left[bi, :, y, x].astype(np.float64)
                    rv = right[bi, :, y, x - d].astype(np.float64)
                    nl, nr = np.linalg.norm(lv), np.linalg.norm(rv)
                    if nl > 0 and nr > 0:
                        out[bi, d, y, x] = float(lv @ rv) / (nl * nr)
    return out


def run_selftest(verbose: bool = True) -> int:
    checks = []
    rng = np.random.default_rng(7)

    def check(name, ok):
        checks.append((name, bool(ok)))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")

    x = rng.standard_normal((1, 2, 5, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(3).astype(np.float32)
    got = conv2d(x, w, bias, stride=1, padding=1)
    want = _conv_oracle(x, w, bias, 1, 1)
    check("conv2d matches direct-summation oracle",
          np.allclose(got, want, rtol=1e-5, atol=1e-6))

    left = rng.standard_normal((1, 4, 5, 8)).astype(np.float32)
    right = rng.standard_normal((1, 4, 5, 8)).astype(np.float32)
    vol = correlation_volume(left, right, 4).data
    check("correlation volume matches cosine oracle",
          np.allclose(vol, _correlation_oracle(left, right, 4), rtol=1e-5, atol=1e-5))
    check("correlation values within [-1, 1]",
          float(np.abs(vol).max()) <= 1.0 + 1e-6)

    logits = rng.standard_normal((3, 7)).astype(np.float32)
    sums = softmax_axis(logits, 1).sum(axis=1)
    check("softmax sums to one", np.allclose(sums, 1.0, atol=1e-6))

    alphas = rng.uniform(-math.pi + 1e-6, math.pi, 200)
    alphas = alphas[np.abs(np.abs(alphas) - math.pi / 2) > 1e-3]
    err = max(
        abs(wrap_angle(decode_orientation(encode_orientation(a)) - a)) for a in alphas
    )
    check("orientation encode/decode roundtrip", err < 1e-6)

    zs = (0.5, 5.0, 50.0)
    err = max(abs(decode_z_alt(encode_z_alt(z)) - z) / z for z in zs)
    check("transformed-depth encoding roundtrip", err < 1e-9)

    texture = rng.integers(0, 256, size=(40, 120), dtype=np.uint8)
    k = 5  # L[y, x] == R[y, x - k] after trimming the shared texture
    limg, rimg = texture[:, :-k], texture[:, k:]
    disp = block_match(limg, rimg, window=5, search_range=16).values
    interior = disp[2:-2, 16 + 2 : -2]
    valid = interior[interior >= 0]
    check("block matching recovers synthetic shift",
          valid.size > 0 and float((valid == k).mean()) >= 0.95)

    ann = ObjectAnnotation(
        class_name="Car", truncation=0.0, occlusion=0, alpha=0.1,
        box2d=(100.0, 100.0, 200.0, 160.0), h3d=1.5, w3d=1.7, l3d=4.0,
        location=(1.0, 1.6, 20.0), rotation_y=0.15,
    )
    det = Detection3D(
        class_name="Car", score=1.0, alpha=ann.alpha, box2d=ann.box2d,
        h3d=ann.h3d, w3d=ann.w3d, l3d=ann.l3d,
        location=ann.location, rotation_y=ann.rotation_y,
    )
    ap = average_precision(
        [[ann]], [[det]], iou_kind="3d", iou_threshold=0.7, bucket=EASY
    )
    check("perfect predictions give AP = 1", abs(ap - 1.0) < 1e-12)
    check("identical boxes give IoU = 1",
          abs(iou_2d(ann.box2d, ann.box2d) - 1.0) < 1e-12)

    failures = [name for name, ok in checks if not ok]
    if verbose:
        print(f"{len(checks) - len(failures)}/{len(checks)} checks passed")
    return EXIT_OK if not failures else EXIT_INVARIANT
