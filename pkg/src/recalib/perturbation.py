"""Calibration corruption with exact ground truth.

Two procedures: Gaussian noise added to every extrinsic entry, and a rigid
shift of the point cloud paired with the extrinsic that undoes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadRange
from .geometry import ADDITIVE, RIGID, BiasSpec, RigidTransform
from .rng import generator
from .sceneio import Box, LabeledCloud

__all__ = [
    "BiasSpec",
    "NoiseSpec",
    "TranslationSpec",
    "gaussian_noise_calib",
    "transform_cloud_with_label",
    "translate_cloud_with_label",
    "translate_boxes",
    "sample_bias",
    "default_ranges",
    "corruption_manifest",
]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    rng_seed: int = 0
    target: str = "extrinsic"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise BadRange(f"sigma must be >= 0, got {self.sigma}")
        if self.target != "extrinsic":
            raise BadRange(f"only the extrinsic can be corrupted, not {self.target!r}")


@dataclass(frozen=True)
class TranslationSpec:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not np.isfinite([self.a, self.b, self.c]).all():
            raise BadRange("translation must be finite")

    @property
    def vector(self):
        return np.array([self.a, self.b, self.c], dtype=np.float64)

    def __neg__(self):
        return TranslationSpec(-self.a, -self.b, -self.c)


def gaussian_noise_calib(calib, spec):
    """Add an independent N(0, sigma²) draw to each of the 12 extrinsic entries.

    Returns ``(calib_noisy, true_bias)`` where ``true_bias`` holds the drawn
    deltas, so ``apply_bias(calib_noisy, -true_bias)`` gives back the clean
    extrinsic up to rounding of the addition.
    """
    delta = generator(spec.rng_seed).normal(0.0, 1.0, size=12) * spec.sigma
    noisy = calib.replace(v2c=calib.v2c + delta.reshape(3, 4))
    return noisy, BiasSpec(ADDITIVE, tuple(delta))


def transform_cloud_with_label(cloud, calib, transform):
    """Move every point by ``transform`` and return the extrinsic that hides it.

    The new extrinsic is ``v2c · transform⁻¹`` so projecting the moved cloud
    with it reproduces the original pixels.  Labels and reflectance are kept.
    """
    moved = transform.apply(cloud.xyz)
    pts = np.hstack([moved, cloud.points[:, 3:4]])
    inv = transform.inverse()
    rot = calib.v2c[:, :3]
    v2c = np.hstack([rot @ inv.rotation, (rot @ inv.translation + calib.v2c[:, 3])[:, None]])
    return LabeledCloud(pts, cloud.labels), calib.replace(v2c=v2c)


def translate_cloud_with_label(cloud, calib, t):
    """Shift the cloud by ``(a, b, c)`` and fold the reverse shift into ``v2c``."""
    shift = t.vector
    pts = cloud.points.copy()
    pts[:, :3] += shift
    v2c = calib.v2c.copy()
    v2c[:, 3] = v2c[:, 3] - v2c[:, :3] @ shift
    return LabeledCloud(pts, cloud.labels), calib.replace(v2c=v2c)


def translate_boxes(boxes, t):
    return [
        Box(tuple(np.add(b.center, t.vector)), b.half_extents, b.yaw, b.class_id)
        for b in boxes
    ]


def lidar_motion_bias(calib, transform):
    """Camera-frame rigid bias equivalent to moving the LiDAR by ``transform``.

    ``apply_bias(calib, bias)`` equals the extrinsic an uncompensated cloud
    move would demand, i.e. ``v2c · transform⁻¹``.
    """
    rot = calib.v2c[:, :3]
    inv = transform.inverse()
    rb = rot @ inv.rotation @ np.linalg.inv(rot)
    tb = rot @ inv.translation + calib.v2c[:, 3] - rb @ calib.v2c[:, 3]
    return BiasSpec.from_transform(RigidTransform(rb, tb))


# Default half-width of the translation draw, in metres; other components stay 0.
TRANSLATION_RANGE = 0.2


def default_ranges(form=RIGID):
    r = TRANSLATION_RANGE
    if form == ADDITIVE:
        # the translation column of the 3x4 extrinsic, row-major
        return [(-r, r) if i % 4 == 3 else (0.0, 0.0) for i in range(12)]
    return [(0.0, 0.0)] * 3 + [(-r, r)] * 3


def sample_bias(ranges=None, form=RIGID, rng_seed=0):
    """Uniform independent draw per component within ``[(min, max), ...]``.

    Without ``ranges`` only the translation is drawn, within +-0.2 m.
    """
    n = 12 if form == ADDITIVE else 6
    if ranges is None:
        ranges = default_ranges(form)
    ranges = [tuple(map(float, r)) for r in ranges]
    if len(ranges) != n:
        raise BadRange(f"{form} needs {n} ranges, got {len(ranges)}")
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()) or (lo > hi).any():
        raise BadRange("each range must be finite with min <= max")
    u = generator(rng_seed).random(n)
    return BiasSpec(form, tuple(lo + u * (hi - lo)))


def corruption_manifest(frame_id, corruption_type, seed, true_bias, sigma=None, translation=None, rotation=None):
    """JSON-ready record of one corruption, including its exact ground truth.

    ``true_bias`` is the corruption itself: applied to the label calibration it
    yields the corrupted input.  The correction a re-calibrator should find is
    its inverse.
    """
    doc = {
        "frame_id": frame_id,
        "corruption_type": corruption_type,
        "seed": seed,
        "true_bias": true_bias.to_json(),
    }
    if sigma is not None:
        doc["sigma"] = sigma
    if translation is not None:
        doc["a"], doc["b"], doc["c"] = (float(x) for x in translation)
    if rotation is not None:
        doc["rotation"] = [float(x) for x in rotation]
    return doc
