"""Calibration objectives.

``projected_loss`` and ``bias_mse`` are the two supervised terms, combined by
``composite_loss`` under a phased weight schedule.  ``mask_chamfer_loss`` is
the unsupervised objective: distance from projected points to the nearest
same-class pixel of an image segmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .errors import EmptyLabelClass, FormMismatch
from .geometry import ADDITIVE, round_half_away

# Weights of the fast-converging phase and of the MSE-dominant phase.
PHASE_A = (10.0, 1e-3)
PHASE_B = (10.0, 1e-5)


def _as_points(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 2)


class LabelIndex:
    """Nearest-neighbour index over label projections, built once per class."""

    def __init__(self, p_l):
        self.trees = {}
        for cls, pts in p_l.items():
            pts = _as_points(pts)
            if len(pts):
                self.trees[int(cls)] = cKDTree(pts)

    def directed(self, p_c, normalized=False):
        total = 0.0
        count = 0
        for cls in sorted(p_c):
            src = _as_points(p_c[cls])
            if len(src) == 0:
                continue
            tree = self.trees.get(int(cls))
            if tree is None:
                raise EmptyLabelClass(cls)
            d, _ = tree.query(src, k=1)
            total += math.fsum(d)
            count += len(src)
        if normalized:
            return total / count if count else 0.0
        return total


def projected_loss(p_c, p_l, normalized=False):
    """Directed chamfer sum from ``p_c`` to ``p_l``, class by class.

    Both arguments map class id to an ``(n, 2)`` array of pixel positions;
    ``p_l`` may also be a prebuilt :class:`LabelIndex`.  With
    ``normalized=True`` the sum is divided by the number of ``p_c`` points,
    which makes scenes of different density comparable.
    """
    index = p_l if isinstance(p_l, LabelIndex) else LabelIndex(p_l)
    return index.directed(p_c, normalized)


def bias_mse(calib_out, calib_in, calib_label):
    """Mean squared residual over the 12 extrinsic entries of ``calib_in + calib_out``."""
    if calib_out.form != ADDITIVE:
        raise FormMismatch("bias_mse needs an additive-12 bias; convert the rigid bias first")
    corrected = calib_in.v2c + np.asarray(calib_out.values).reshape(3, 4)
    r = corrected - calib_label.v2c
    return float(np.mean(r * r))


@dataclass(frozen=True)
class LossSchedule:
    phases: tuple  # of (lambda1, lambda2, duration)

    def __post_init__(self):
        phases = tuple((float(a), float(b), int(d)) for a, b, d in self.phases)
        if not phases:
            raise ValueError("schedule needs at least one phase")
        if any(d < 1 for _, _, d in phases):
            raise ValueError("phase durations must be >= 1")
        object.__setattr__(self, "phases", phases)

    @classmethod
    def default(cls, budget, split=0.6):
        """Phase A for the first ``split`` of ``budget`` iterations, then phase B."""
        a = max(1, int(round(budget * split)))
        b = max(1, budget - a)
        return cls(((*PHASE_A, a), (*PHASE_B, b)))

    @property
    def total(self):
        return sum(d for _, _, d in self.phases)

    def phase_index(self, iteration):
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        end = 0
        for i, (_, _, d) in enumerate(self.phases):
            end += d
            if iteration < end:
                return i
        return len(self.phases) - 1

    def weights(self, iteration):
        l1, l2, _ = self.phases[self.phase_index(iteration)]
        return l1, l2

    def to_json(self):
        return {"phases": [list(p) for p in self.phases]}

    @classmethod
    def from_json(cls, doc):
        return cls(tuple(tuple(p) for p in doc["phases"]))


@dataclass(frozen=True)
class LossReport:
    projected: float
    mse: float
    total: float
    phase_index: int

    def to_json(self):
        return {
            "projected": self.projected,
            "mse": self.mse,
            "total": self.total,
            "phase_index": self.phase_index,
        }


def composite_loss(mse, projected, schedule, iteration):
    i = schedule.phase_index(iteration)
    l1, l2, _ = schedule.phases[i]
    return LossReport(projected, mse, l1 * mse + l2 * projected, i)


class ChamferField:
    """Exact Euclidean distance transforms of a mask, one per class.

    Built once per (mask, class set) and read-only afterwards.
    """

    def __init__(self, mask, interested):
        self.width = mask.width
        self.height = mask.height
        self.diagonal = math.hypot(self.width, self.height)
        self.fields = {}
        for cls in sorted(set(int(c) for c in interested)):
            hit = mask.class_ids == cls
            if hit.any():
                # edt measures distance to the nearest zero, so invert the mask
                self.fields[cls] = distance_transform_edt(~hit)

    def has_any(self):
        return bool(self.fields)

    def point_costs(self, cls, u, v):
        u = np.asarray(u, dtype=np.float64)
        if len(u) == 0:
            return np.zeros(0)
        field = self.fields.get(int(cls))
        if field is None:
            return np.full(len(u), self.diagonal)
        col = round_half_away(u)
        row = round_half_away(v)
        bad = ~(np.isfinite(col) & np.isfinite(row))
        if bad.any():
            col = np.where(bad, 1e12, col)
            row = np.where(bad, 1e12, row)
        cc = np.clip(col, 0, self.width - 1)
        rc = np.clip(row, 0, self.height - 1)
        over = np.hypot(col - cc, row - rc)
        return field[rc.astype(np.intp), cc.astype(np.intp)] + over


def mask_chamfer_loss(proj, mask, interested, field=None):
    """Sum over projected interested points of the distance to the nearest
    same-class mask pixel, in pixels.

    Points are rounded to pixels; off-image points are clamped to the border
    and pay the clamp distance on top.  A class absent from the mask costs the
    image diagonal per point.
    """
    if field is None:
        field = ChamferField(mask, interested)
    wanted = set(int(c) for c in interested)
    total = 0.0
    for cls in sorted(proj.by_class):
        if cls not in wanted:
            continue
        p = proj.by_class[cls]
        total += float(np.sum(field.point_costs(cls, p.u, p.v)))
    return total
