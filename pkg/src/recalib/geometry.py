"""Rigid transforms, KITTI calibration text, and velodyne-to-pixel projection.

Points are row vectors throughout.  A velodyne point ``X`` maps to the
rectified camera frame as ``[X, 1] @ v2c.T @ r0.T`` and to homogeneous pixels
as ``[Y, 1] @ p.T``.  In column-vector terms this is ``P @ R0 @ V2C @ [X; 1]``;
the two forms are the same numbers, only the row layout is used in code.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import MalformedNumber, MissingKey, NotARotation, WrongArity

DEPTH_EPSILON = 1e-6

_KEYS = (("P2", 12, (3, 4)), ("R0_rect", 9, (3, 3)), ("Tr_velo_to_cam", 12, (3, 4)))


def _frozen(a, shape):
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    v2c: np.ndarray
    r0: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v2c", _frozen(self.v2c, (3, 4)))
        object.__setattr__(self, "r0", _frozen(self.r0, (3, 3)))
        object.__setattr__(self, "p", _frozen(self.p, (3, 4)))

    def __eq__(self, other):
        if not isinstance(other, CalibrationSet):
            return NotImplemented
        return (
            np.array_equal(self.v2c, other.v2c)
            and np.array_equal(self.r0, other.r0)
            and np.array_equal(self.p, other.p)
        )

    def replace(self, v2c=None, r0=None, p=None):
        return CalibrationSet(
            self.v2c if v2c is None else v2c,
            self.r0 if r0 is None else r0,
            self.p if p is None else p,
        )

    def is_finite(self):
        return bool(np.isfinite(self.v2c).all() and np.isfinite(self.r0).all() and np.isfinite(self.p).all())


def identity_calibration():
    return CalibrationSet(np.eye(3, 4), np.eye(3), np.eye(3, 4))


def nearest_rotation(m):
    """Orthogonal Procrustes: closest proper rotation to ``m`` in Frobenius norm.

    Returns ``(rotation, residual)`` where residual is ``||m - rotation||_F``.
    """
    m = np.asarray(m, dtype=np.float64)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, float(np.linalg.norm(m - r))


def kitti_like_calibration():
    """A calibration with the layout and magnitudes of a KITTI raw recording.

    The rotation blocks are snapped to exact rotations so the set satisfies
    the orthonormality invariant to machine precision.
    """
    p2 = [
        [7.215377e02, 0.0, 6.095593e02, 4.485728e01],
        [0.0, 7.215377e02, 1.728540e02, 2.163791e-01],
        [0.0, 0.0, 1.0, 2.745884e-03],
    ]
    r0 = [
        [9.999239e-01, 9.837760e-03, -7.445048e-03],
        [-9.869795e-03, 9.999421e-01, -4.278459e-03],
        [7.402527e-03, 4.351614e-03, 9.999631e-01],
    ]
    v2c = np.array(
        [
            [7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03],
            [1.480249e-02, 7.280733e-04, -9.998902e-01, -7.631618e-02],
            [9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01],
        ]
    )
    v2c[:, :3] = nearest_rotation(v2c[:, :3])[0]
    return CalibrationSet(v2c, nearest_rotation(r0)[0], p2)


# -- calibration text ---------------------------------------------------------


def parse_calibration(text):
    """Parse KITTI ``calib.txt`` content into a :class:`CalibrationSet`.

    Only ``P2``, ``R0_rect`` and ``Tr_velo_to_cam`` are read; other keys and
    blank lines are skipped.  Line order does not matter.
    """
    if not isinstance(text, str):
        text = text.read()
    found = {}
    wanted = {k: (n, shape) for k, n, shape in _KEYS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in wanted:
            continue
        values = []
        offset = len(line) - len(rest)
        for m in re.finditer(r"\S+", rest):
            try:
                values.append(float(m.group()))
            except ValueError:
                raise MalformedNumber(lineno, offset + m.start() + 1, m.group()) from None
        n, shape = wanted[key]
        if len(values) != n:
            raise WrongArity(key, n, len(values))
        found[key] = np.array(values).reshape(shape)
    for key, _, _ in _KEYS:
        if key not in found:
            raise MissingKey(key)
    return CalibrationSet(found["Tr_velo_to_cam"], found["R0_rect"], found["P2"])


def _fmt(x):
    return format(float(x), ".17g")


def serialize_calibration(calib):
    rows = [
        ("P2", calib.p),
        ("R0_rect", calib.r0),
        ("Tr_velo_to_cam", calib.v2c),
    ]
    return "".join(f"{k}: {' '.join(_fmt(x) for x in m.ravel())}\n" for k, m in rows)


# -- rigid transforms ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def from_axis_angle(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        r = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        return cls(r, translation)

    @classmethod
    def from_euler(cls, seq, angles, translation=(0.0, 0.0, 0.0), degrees=False):
        r = Rotation.from_euler(seq, angles, degrees=degrees).as_matrix()
        return cls(r, translation)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        """The 3x4 ``[R | t]`` block."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def homogeneous(self):
        m = np.eye(4)
        m[:3, :4] = self.matrix()
        return m

    def rotvec(self):
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def rotation_angle_deg(a, b, tol=1e-6):
    """Geodesic angle of the relative rotation ``aᵀ·b``, in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for m in (a, b):
        if m.shape != (3, 3) or np.abs(m @ m.T - np.eye(3)).max() > tol:
            raise NotARotation("matrix is not orthonormal within %g" % tol)
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


# -- biases -------------------------------------------------------------------

ADDITIVE = "additive-12"
RIGID = "rigid-6dof"


@dataclass(frozen=True)
class BiasSpec:
    """An extrinsic perturbation.

    ``additive-12`` holds 12 row-major deltas added to ``v2c``.  ``rigid-6dof``
    holds an axis-angle rotation (radians) followed by a translation (meters),
    both expressed in the camera frame, so that ``v2c`` becomes
    ``[R_b R | R_b t + t_b]``.
    """

    form: str
    values: tuple

    def __post_init__(self):
        n = {ADDITIVE: 12, RIGID: 6}.get(self.form)
        if n is None:
            raise ValueError(f"unknown bias form {self.form!r}")
        vals = tuple(float(v) for v in np.asarray(self.values, dtype=np.float64).ravel())
        if len(vals) != n:
            raise ValueError(f"{self.form} bias needs {n} values, got {len(vals)}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zero(cls, form=RIGID):
        return cls(form, (0.0,) * (12 if form == ADDITIVE else 6))

    @classmethod
    def from_transform(cls, t):
        return cls(RIGID, tuple(t.rotvec()) + tuple(t.translation))

    def transform(self):
        if self.form != RIGID:
            raise ValueError("additive bias has no rigid transform; convert first")
        return RigidTransform.from_axis_angle(self.values[:3], self.values[3:])

    def __neg__(self):
        if self.form == ADDITIVE:
            return BiasSpec(ADDITIVE, tuple(-v for v in self.values))
        return BiasSpec.from_transform(self.transform().inverse())

    def inverse(self):
        return -self

    def to_json(self):
        return {"form": self.form, "values": list(self.values)}

    @classmethod
    def from_json(cls, d):
        return cls(d["form"], tuple(d["values"]))


def apply_bias(calib_in, bias):
    if bias.form == ADDITIVE:
        v2c = calib_in.v2c + np.asarray(bias.values).reshape(3, 4)
    else:
        tb = bias.transform()
        v2c = np.hstack(
            [
                tb.rotation @ calib_in.v2c[:, :3],
                (tb.rotation @ calib_in.v2c[:, 3] + tb.translation)[:, None],
            ]
        )
    return calib_in.replace(v2c=v2c)


def additive_to_rigid(bias, calib_in):
    """Nearest rigid bias to an additive one, via Procrustes on the rotation block."""
    if bias.form == RIGID:
        return bias
    target = apply_bias(calib_in, bias).v2c
    r_in, _ = nearest_rotation(calib_in.v2c[:, :3])
    r_out, _ = nearest_rotation(target[:, :3])
    rb = r_out @ r_in.T
    tb = target[:, 3] - rb @ calib_in.v2c[:, 3]
    return BiasSpec.from_transform(RigidTransform(rb, tb))


def rigid_to_additive(bias, calib_in):
    if bias.form == ADDITIVE:
        return bias
    delta = apply_bias(calib_in, bias).v2c - calib_in.v2c
    return BiasSpec(ADDITIVE, tuple(delta.ravel()))


# -- projection ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Projection:
    """Pixel coordinates of the points retained in front of the camera.

    Arrays are parallel; ``index`` points back into the projected cloud.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    index: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.index)

    def uv(self):
        return np.column_stack([self.u, self.v])

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, np.zeros(0, dtype=np.int64), 0)


def camera_points(xyz, calib):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return (xyz @ calib.v2c[:, :3].T + calib.v2c[:, 3]) @ calib.r0.T


def project(cloud_xyz, calib, image_size=None, clip=False):
    """Project velodyne points to pixels, dropping points at or behind the camera.

    ``image_size`` is ``(width, height)``; with ``clip=True`` points whose
    continuous pixel position falls outside ``[-0.5, size - 0.5)`` are also
    dropped.  Retained points keep their input order.
    """
    xyz = np.asarray(cloud_xyz, dtype=np.float64).reshape(-1, 3)
    y = camera_points(xyz, calib)
    keep = y[:, 2] > DEPTH_EPSILON
    idx = np.flatnonzero(keep)
    y = y[keep]
    h = y @ calib.p[:, :3].T + calib.p[:, 3]
    u = h[:, 0] / h[:, 2]
    v = h[:, 1] / h[:, 2]
    depth = y[:, 2]
    if clip:
        if image_size is None:
            raise ValueError("clip=True needs image_size")
        w, hgt = image_size
        inb = (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < hgt - 0.5)
        u, v, depth, idx = u[inb], v[inb], depth[inb], idx[inb]
    return Projection(u, v, depth, idx, len(xyz) - len(idx))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)
