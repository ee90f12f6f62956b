"""Per-pixel network inputs and the RCTF tensor container.

The alignment feature stacks one-hot image-mask planes with one-hot planes of
projected LiDAR points; the calibration feature stores, at each pixel hit by
an interested point, that point's velodyne ``x, y, z`` and its continuous
pixel ``u, v``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, LengthMismatch, UnsupportedVersion
from .geometry import Projection, project, round_half_away

MAGIC = b"RCTF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass(frozen=True, eq=False)
class ProjectedSet:
    by_class: dict  # class id -> Projection
    calib: object = None

    def __len__(self):
        return sum(len(p) for p in self.by_class.values())

    def points(self):
        """``{class: (n, 2) array}``, the shape ``projected_loss`` expects."""
        return {c: p.uv() for c, p in self.by_class.items()}


def project_labeled(cloud, calib, interested):
    """Project the points whose label is interesting, grouped by class.

    ``index`` in every group refers to rows of ``cloud``.
    """
    by_class = {}
    for cls in sorted(set(int(c) for c in interested)):
        rows = np.flatnonzero(cloud.labels == cls)
        if len(rows) == 0:
            continue
        p = project(cloud.xyz[rows], calib)
        if len(p) == 0:
            continue
        by_class[cls] = Projection(p.u, p.v, p.depth, rows[p.index], p.dropped)
    return ProjectedSet(by_class, calib)


def _pixels(p, width, height):
    col = round_half_away(p.u)
    row = round_half_away(p.v)
    inb = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    return row[inb].astype(np.intp), col[inb].astype(np.intp), inb


@dataclass(frozen=True, eq=False)
class AlignmentFeature:
    classes: tuple
    planes: np.ndarray  # (2 * len(classes), height, width) uint8

    @property
    def width(self):
        return self.planes.shape[2]

    @property
    def height(self):
        return self.planes.shape[1]

    def image_plane(self, cls):
        return self.planes[self.classes.index(cls)]

    def point_plane(self, cls):
        return self.planes[len(self.classes) + self.classes.index(cls)]

    def tensor(self):
        return self.planes


def build_alignment_feature(proj, mask, interested):
    classes = tuple(sorted(set(int(c) for c in interested)))
    k = len(classes)
    planes = np.zeros((2 * k, mask.height, mask.width), dtype=np.uint8)
    for i, cls in enumerate(classes):
        planes[i] = mask.class_ids == cls
        p = proj.by_class.get(cls)
        if p is not None and len(p):
            rows, cols, _ = _pixels(p, mask.width, mask.height)
            planes[k + i, rows, cols] = 1
    return AlignmentFeature(classes, planes)


@dataclass(frozen=True, eq=False)
class CalibrationFeature:
    values: np.ndarray  # (5, height, width): x, y, z, u, v
    occupancy: np.ndarray  # (height, width) bool

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def height(self):
        return self.values.shape[1]

    def tensor(self):
        """Six float32 planes: x, y, z, u, v, occupancy."""
        return np.concatenate([self.values, self.occupancy[None].astype(np.float64)]).astype(np.float32)


def build_calibration_feature(proj, cloud, width, height):
    """Scatter ``(x, y, z, u, v)`` of each interested point onto its pixel.

    When several points round to one pixel the smallest camera depth wins,
    with the lower source index breaking exact ties.
    """
    values = np.zeros((5, height, width))
    occupancy = np.zeros((height, width), dtype=bool)
    groups = [p for _, p in sorted(proj.by_class.items()) if len(p)]
    if not groups:
        return CalibrationFeature(values, occupancy)
    u = np.concatenate([p.u for p in groups])
    v = np.concatenate([p.v for p in groups])
    depth = np.concatenate([p.depth for p in groups])
    index = np.concatenate([p.index for p in groups])
    allp = Projection(u, v, depth, index)
    rows, cols, inb = _pixels(allp, width, height)
    u, v, depth, index = u[inb], v[inb], depth[inb], index[inb]
    flat = rows * width + cols
    order = np.lexsort((index, depth, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]
    r, c = rows[win], cols[win]
    xyz = cloud.xyz[index[win]]
    values[0, r, c] = xyz[:, 0]
    values[1, r, c] = xyz[:, 1]
    values[2, r, c] = xyz[:, 2]
    values[3, r, c] = u[win]
    values[4, r, c] = v[win]
    occupancy[r, c] = True
    return CalibrationFeature(values, occupancy)


# -- RCTF container -----------------------------------------------------------


def export_tensor(tensor, sink=None):
    """Encode a float32 or uint8 array as RCTF bytes, optionally writing them to ``sink``.

    Layout (little-endian): ``b"RCTF"``, u32 version, u32 ndim, u32 dims[ndim],
    u8 dtype code (0 float32, 1 uint8), then the row-major payload.
    """
    if hasattr(tensor, "tensor"):
        tensor = tensor.tensor()
    arr = np.asarray(tensor)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"RCTF stores float32 or uint8, not {arr.dtype}")
    header = MAGIC + struct.pack(f"<II{arr.ndim}IB", VERSION, arr.ndim, *arr.shape, code)
    data = header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    if sink is not None:
        sink.write(data)
    return data


def import_tensor(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise BadMagic("not an RCTF tensor")
    if len(data) < 12:
        raise LengthMismatch("RCTF header truncated")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"RCTF version {version}")
    head = 12 + 4 * ndim + 1
    if len(data) < head:
        raise LengthMismatch("RCTF header truncated")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    code = data[head - 1]
    if code not in _DTYPES:
        raise UnsupportedVersion(f"unknown RCTF dtype code {code}")
    dtype = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) - head != n * dtype.itemsize:
        raise LengthMismatch(f"payload is {len(data) - head} bytes, expected {n * dtype.itemsize}")
    arr = np.frombuffer(data, dtype=dtype, offset=head, count=n).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))
