"""Point clouds, per-point labels, segmentation masks and synthetic scenes."""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    ConfigError,
    CountMismatch,
    TruncatedFile,
    TruncatedPixels,
)
from .geometry import DEPTH_EPSILON, camera_points, project, round_half_away
from .rng import generator

KITTI_IMAGE_SIZE = (1242, 375)


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    points: np.ndarray  # (n, 4) x, y, z, reflectance
    labels: np.ndarray  # (n,) non-negative class ids

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(pts):
            raise ValueError(f"{len(pts)} points but {len(labels)} labels")
        if not np.isfinite(pts).all():
            raise ValueError("non-finite point coordinates")
        if (labels < 0).any():
            raise ValueError("negative class id")
        pts.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def xyz(self):
        return self.points[:, :3]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))

    def select(self, classes):
        keep = np.isin(self.labels, list(classes))
        return LabeledCloud(self.points[keep], self.labels[keep])

    def __eq__(self, other):
        if not isinstance(other, LabeledCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class SegMask:
    class_ids: np.ndarray  # (height, width) uint8, 0 = background

    def __post_init__(self):
        ids = np.asarray(self.class_ids)
        if ids.ndim != 2:
            raise ValueError("mask must be 2-D")
        if ids.size and (ids.min() < 0 or ids.max() > 255):
            raise ValueError("mask class ids must fit in 8 bits")
        ids = ids.astype(np.uint8)
        ids.setflags(write=False)
        object.__setattr__(self, "class_ids", ids)

    @property
    def width(self):
        return self.class_ids.shape[1]

    @property
    def height(self):
        return self.class_ids.shape[0]

    @classmethod
    def blank(cls, width, height):
        return cls(np.zeros((height, width), dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, SegMask):
            return NotImplemented
        return np.array_equal(self.class_ids, other.class_ids)


# -- binary formats -----------------------------------------------------------


def read_cloud_bin(data):
    if len(data) % 16:
        raise TruncatedFile(len(data))
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return LabeledCloud(pts.astype(np.float64), np.zeros(len(pts), dtype=np.int64))


def write_cloud_bin(cloud):
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def read_labels(data, expected_count):
    if len(data) != 4 * expected_count:
        raise CountMismatch(expected_count, len(data) // 4 if len(data) % 4 == 0 else len(data) / 4)
    raw = np.frombuffer(data, dtype="<u4")
    return (raw & 0xFFFF).astype(np.int64)


def write_labels(labels):
    return np.asarray(labels, dtype="<u4").tobytes()


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def read_mask_pgm(data):
    data = bytes(data)
    if data[:2] != b"P5":
        raise BadMagic("not a binary PGM (P5) file")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise BadHeader("incomplete PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise BadHeader(f"bad PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width < 0 or height < 0:
        raise BadHeader("negative PGM dimensions")
    if not 0 < maxval <= 255:
        raise BadHeader(f"unsupported PGM maxval {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        if width * height:
            raise BadHeader("missing whitespace after PGM header")
    pos += 1
    payload = data[pos : pos + width * height]
    if len(payload) < width * height:
        raise TruncatedPixels(f"expected {width * height} pixels, got {len(payload)}")
    ids = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return SegMask(ids.copy())


def write_mask_pgm(mask):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + mask.class_ids.tobytes()


# -- synthetic scenes ---------------------------------------------------------


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    yaw: float
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_extents", tuple(float(c) for c in self.half_extents))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ValueError("box center and half_extents need 3 components")
        if min(self.half_extents) <= 0:
            raise ValueError("half_extents must be strictly positive")

    def to_world(self, local):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center)

    def to_json(self):
        return {
            "center": list(self.center),
            "half_extents": list(self.half_extents),
            "yaw": self.yaw,
            "class_id": self.class_id,
        }


@dataclass(frozen=True)
class SceneSpec:
    object_boxes: tuple
    points_per_object: int
    background_points: int
    rng_seed: int

    def __post_init__(self):
        boxes = tuple(b if isinstance(b, Box) else Box(**b) for b in self.object_boxes)
        object.__setattr__(self, "object_boxes", boxes)
        if self.points_per_object < 0 or self.background_points < 0:
            raise ValueError("point counts must be non-negative")

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        try:
            return cls(
                tuple(Box(**b) for b in doc["object_boxes"]),
                int(doc["points_per_object"]),
                int(doc["background_points"]),
                int(doc["rng_seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene spec: {exc}") from None

    def to_json(self):
        return {
            "object_boxes": [b.to_json() for b in self.object_boxes],
            "points_per_object": self.points_per_object,
            "background_points": self.background_points,
            "rng_seed": self.rng_seed,
        }


# Faces of the unit box as (fixed axis, sign); the other two axes span the face.
_FACES = [(ax, sgn) for ax in range(3) for sgn in (-1.0, 1.0)]


def sample_box_surface(box, n, rng):
    """``n`` points uniformly distributed over the surface of ``box``."""
    h = np.asarray(box.half_extents)
    areas = np.array([4 * np.prod(np.delete(h, ax)) for ax, _ in _FACES])
    face = rng.choice(len(_FACES), size=n, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    for i, (ax, sgn) in enumerate(_FACES):
        sel = face == i
        local[sel, ax] = sgn * h[ax]
    return box.to_world(local)


def box_surface_grid(box, k=16):
    """Regular grid over every face, edges and corners included."""
    h = np.asarray(box.half_extents)
    t = np.linspace(-1.0, 1.0, k)
    a, b = np.meshgrid(t, t, indexing="ij")
    out = []
    for ax, sgn in _FACES:
        others = [i for i in range(3) if i != ax]
        local = np.empty((k * k, 3))
        local[:, ax] = sgn
        local[:, others[0]] = a.ravel()
        local[:, others[1]] = b.ravel()
        out.append(local * h)
    return box.to_world(np.vstack(out))


def convex_hull(points):
    """Monotone-chain hull, counter-clockwise, without repeated endpoint."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def rasterize_hull(hull, width, height):
    """Boolean (height, width) grid of pixels whose square touches the hull.

    Pixel ``(row, col)`` covers ``[col-0.5, col+0.5] x [row-0.5, row+0.5]``.
    The hull is grown by that half-pixel square (Minkowski sum), so any point
    inside the hull rounds to a marked pixel.
    """
    out = np.zeros((height, width), dtype=bool)
    if len(hull) == 0 or width == 0 or height == 0:
        return out
    corners = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
    grown = convex_hull((hull[:, None, :] + corners[None]).reshape(-1, 2))
    lo = np.maximum(np.ceil(grown.min(axis=0)), 0).astype(int)
    hi = np.minimum(np.floor(grown.max(axis=0)), [width - 1, height - 1]).astype(int)
    if (hi < lo).any():
        return out
    cols = np.arange(lo[0], hi[0] + 1, dtype=np.float64)
    rows = np.arange(lo[1], hi[1] + 1, dtype=np.float64)
    cc, rr = np.meshgrid(cols, rows)
    inside = np.ones(cc.shape, dtype=bool)
    n = len(grown)
    for i in range(n):
        a, b = grown[i], grown[(i + 1) % n]
        cr = (b[0] - a[0]) * (rr - a[1]) - (b[1] - a[1]) * (cc - a[0])
        inside &= cr >= -1e-9
    out[lo[1] : hi[1] + 1, lo[0] : hi[0] + 1] = inside
    return out


def _box_depth(box, calib):
    return float(camera_points(np.asarray(box.center), calib)[0, 2])


def render_mask(boxes, calib, width, height):
    """Rasterize each box's projected silhouette; nearer boxes paint last."""
    ids = np.zeros((height, width), dtype=np.uint8)
    order = sorted(range(len(boxes)), key=lambda i: (-_box_depth(boxes[i], calib), i))
    for i in order:
        box = boxes[i]
        proj = project(box_surface_grid(box), calib)
        if len(proj) == 0:
            continue
        # near-plane points blow up; they are clipped by the image bounds anyway
        finite = np.isfinite(proj.u) & np.isfinite(proj.v) & (proj.depth > max(DEPTH_EPSILON, 1e-3))
        if not finite.any():
            continue
        hull = convex_hull(np.column_stack([proj.u[finite], proj.v[finite]]))
        ids[rasterize_hull(hull, width, height)] = box.class_id
    return SegMask(ids)


def synth_scene(spec, calib, image_size=KITTI_IMAGE_SIZE, background_range=None):
    """Sample a labeled cloud from ``spec`` and render its matching mask.

    Background points are drawn uniformly in ``background_range``
    (``((xmin, xmax), (ymin, ymax), (zmin, zmax))``, a ground slab by default).
    """
    rng = generator(spec.rng_seed)
    width, height = image_size
    chunks, labels = [], []
    for box in spec.object_boxes:
        xyz = sample_box_surface(box, spec.points_per_object, rng)
        refl = rng.uniform(0.0, 1.0, size=(len(xyz), 1))
        chunks.append(np.hstack([xyz, refl]))
        labels.append(np.full(len(xyz), box.class_id, dtype=np.int64))
    if spec.background_points:
        rngs = background_range or ((2.0, 40.0), (-20.0, 20.0), (-1.8, -1.6))
        lo = np.array([r[0] for r in rngs])
        hi = np.array([r[1] for r in rngs])
        xyz = rng.uniform(lo, hi, size=(spec.background_points, 3))
        refl = rng.uniform(0.0, 1.0, size=(len(xyz), 1))
        chunks.append(np.hstack([xyz, refl]))
        labels.append(np.zeros(len(xyz), dtype=np.int64))
    if chunks:
        # snap to float32 so the cloud survives a .bin round trip unchanged
        pts = np.vstack(chunks).astype(np.float32).astype(np.float64)
        cloud = LabeledCloud(pts, np.concatenate(labels))
    else:
        cloud = LabeledCloud.empty()
    return cloud, render_mask(spec.object_boxes, calib, width, height)


def _corner_pixels(box, calib):
    corners = box.to_world(np.array(list(itertools.product((-1, 1), repeat=3))) * box.half_extents)
    return project(corners, calib)


def box_in_view(box, calib, image_size, margin=0.0):
    """True when every corner of ``box`` projects inside the image, ``margin`` px in."""
    p = _corner_pixels(box, calib)
    if len(p) < 8:
        return False
    w, h = image_size
    return bool(
        (p.u >= margin).all() and (p.u <= w - 1 - margin).all()
        and (p.v >= margin).all() and (p.v <= h - 1 - margin).all()
    )


def _column_span(box, calib):
    p = _corner_pixels(box, calib)
    return float(p.u.min()), float(p.u.max())


def random_scene_spec(
    rng_seed,
    n_objects=6,
    points_per_object=400,
    background_points=500,
    class_ids=(1,),
    depth_range=(7.0, 30.0),
    half_extents=(2.0, 0.9, 0.75),
    ground_z=-1.73,
    calib=None,
    image_size=KITTI_IMAGE_SIZE,
    margin=10.0,
    lateral=0.8,
    separate=True,
):
    """Car-sized boxes on a ground plane, spread across the camera's view.

    With ``calib`` given, only boxes that project fully inside the image
    (``margin`` pixels in) are kept, so no interested point falls off-image,
    and with ``separate`` their image column ranges do not overlap.
    """
    rng = generator(rng_seed)
    boxes, spans = [], []
    tries = 0
    while len(boxes) < n_objects and tries < 1000:
        tries += 1
        x = rng.uniform(*depth_range)
        y = rng.uniform(-lateral, lateral) * x
        yaw = rng.uniform(-math.pi, math.pi)
        if any(math.hypot(x - b.center[0], y - b.center[1]) < 5.0 for b in boxes):
            continue
        cid = int(class_ids[len(boxes) % len(class_ids)])
        box = Box((x, y, ground_z + half_extents[2]), half_extents, yaw, cid)
        if calib is not None:
            if not box_in_view(box, calib, image_size, margin):
                continue
            if separate:
                lo, hi = _column_span(box, calib)
                if any(lo < b_hi + margin and b_lo < hi + margin for b_lo, b_hi in spans):
                    continue
                spans.append((lo, hi))
        boxes.append(box)
    return SceneSpec(tuple(boxes), points_per_object, background_points, rng_seed)


def mask_pixel_lookup(mask, u, v):
    """Class id under each continuous pixel position; -1 when out of bounds."""
    col = round_half_away(u)
    row = round_half_away(v)
    inb = (col >= 0) & (col < mask.width) & (row >= 0) & (row < mask.height)
    out = np.full(len(col), -1, dtype=np.int64)
    out[inb] = mask.class_ids[row[inb].astype(int), col[inb].astype(int)]
    return out
