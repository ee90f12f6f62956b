"""Extrinsic bias recovery by derivative-free search.

``recalibrate`` minimizes the mask-chamfer objective: a coarse grid over the
translation components picks a starting cell, then downhill simplex refines
all parameters from that cell and from extra random starts.
``supervised_fit`` runs the same machinery on the scheduled composite loss
when the label calibration is known.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from . import simplex
from .errors import ConfigError, DegenerateMask, NoInterestedPoints
from .geometry import ADDITIVE, DEPTH_EPSILON, RIGID, BiasSpec, apply_bias, camera_points, rigid_to_additive
from .losses import ChamferField, LabelIndex, LossSchedule, bias_mse
from .rng import derive_seed, generator

_ROT_BOUND = math.radians(2.0)
_TRANS_BOUND = 0.3
_ENTRY_BOUND = 0.05

TRANSLATION_INDEX = {RIGID: (3, 4, 5), ADDITIVE: (3, 7, 11)}


def default_bounds(parameterization):
    if parameterization == RIGID:
        return tuple([(-_ROT_BOUND, _ROT_BOUND)] * 3 + [(-_TRANS_BOUND, _TRANS_BOUND)] * 3)
    bounds = [(-_ENTRY_BOUND, _ENTRY_BOUND)] * 12
    for i in TRANSLATION_INDEX[ADDITIVE]:
        bounds[i] = (-_TRANS_BOUND, _TRANS_BOUND)
    return tuple(bounds)


@dataclass(frozen=True)
class SearchConfig:
    parameterization: str = RIGID
    bounds: tuple = None
    coarse_grid: int = 5
    polytope_iters: int = 500
    restarts: int = 2
    tolerance: float = 1e-9
    rng_seed: int = 0
    pivot: str = "centroid"

    def __post_init__(self):
        if self.parameterization not in (RIGID, ADDITIVE):
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")
        n = 6 if self.parameterization == RIGID else 12
        bounds = self.bounds if self.bounds is not None else default_bounds(self.parameterization)
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        if len(bounds) != n:
            raise ConfigError(f"{self.parameterization} needs {n} bounds, got {len(bounds)}")
        if not all(math.isfinite(a) and math.isfinite(b) and a <= b for a, b in bounds):
            raise ConfigError("bounds must be finite with min <= max")
        if self.coarse_grid < 1:
            raise ConfigError("coarse_grid must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.polytope_iters < 1:
            raise ConfigError("polytope_iters must be >= 1")
        if self.pivot not in ("centroid", "camera"):
            raise ConfigError(f"pivot must be 'centroid' or 'camera', not {self.pivot!r}")
        object.__setattr__(self, "bounds", bounds)

    @property
    def dim(self):
        return len(self.bounds)

    def to_json(self):
        return {
            "parameterization": self.parameterization,
            "bounds": [list(b) for b in self.bounds],
            "coarse_grid": self.coarse_grid,
            "polytope_iters": self.polytope_iters,
            "restarts": self.restarts,
            "tolerance": self.tolerance,
            "rng_seed": self.rng_seed,
            "pivot": self.pivot,
        }

    @classmethod
    def from_json(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown search config keys: {sorted(extra)}")
        kw = dict(doc)
        if kw.get("bounds") is not None:
            kw["bounds"] = tuple(tuple(b) for b in kw["bounds"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class RecalibResult:
    bias: BiasSpec
    objective_initial: float
    objective_final: float
    evaluations: int
    wall_time_ms: float = field(default=0.0, compare=False)

    def to_json(self, timing=True):
        doc = {
            "bias": self.bias.to_json(),
            "objective_initial": self.objective_initial,
            "objective_final": self.objective_final,
            "evaluations": self.evaluations,
        }
        if timing:
            doc["wall_time_ms"] = self.wall_time_ms
        return doc


class _Counted:
    """Objective wrapper that counts calls and remembers the best point seen."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self.best_x = None
        self.best_f = math.inf

    def __call__(self, x):
        self.calls += 1
        f = self.fn(x)
        if not math.isfinite(f):
            f = math.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=np.float64)
        return f


def _grid_points(cfg):
    idx = TRANSLATION_INDEX[cfg.parameterization]
    axes = []
    for i in idx:
        lo, hi = cfg.bounds[i]
        if cfg.coarse_grid == 1:
            axes.append([0.5 * (lo + hi)])
        else:
            axes.append(np.linspace(lo, hi, cfg.coarse_grid))
    base = np.clip(np.zeros(cfg.dim), *np.array(cfg.bounds).T)
    for combo in itertools.product(*axes):
        x = base.copy()
        x[list(idx)] = combo
        yield x


def _steps(cfg):
    return np.array([0.25 * (hi - lo) for lo, hi in cfg.bounds])


def _refine(f, x0, steps, cfg, lo, hi, rng, budget=None, scale=1.0, ftol=None):
    """Restarted simplex: re-seed around the incumbent until the budget is spent.

    Each restart uses a randomly oriented simplex so that narrow diagonal
    valleys are not always probed along the same axes.  A restart that fails
    to improve halves the simplex size.
    """
    budget = cfg.polytope_iters if budget is None else budget
    x, fx = np.asarray(x0, dtype=np.float64), None
    basis = None
    while budget > cfg.dim + 1 and scale > 1e-6:
        sim = simplex.initial_simplex(x, steps * scale, lo, hi, basis)
        res = simplex.minimize(f, sim, budget, lo, hi, ftol=cfg.tolerance if ftol is None else ftol, xtol=1e-9)
        budget -= res.evaluations
        if fx is not None and not res.f < fx:
            scale *= 0.5
        if fx is None or res.f < fx:
            x, fx = res.x, res.f
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
    return x, fx


def _search(objective, cfg):
    """Grid + multi-start simplex; returns (best_x, best_f, evaluations)."""
    lo, hi = np.array(cfg.bounds).T
    f = _Counted(objective)
    zero = np.clip(np.zeros(cfg.dim), lo, hi)
    f(zero)
    best_cell = zero
    best_cell_f = f.best_f
    for x in _grid_points(cfg):
        fx = f(x)
        if fx < best_cell_f:
            best_cell, best_cell_f = x, fx
    rng = generator(derive_seed(cfg.rng_seed, 1))
    starts = [best_cell] + [rng.uniform(lo, hi) for _ in range(cfg.restarts - 1)]
    steps = _steps(cfg)
    for x0 in starts:
        _refine(f, x0, steps, cfg, lo, hi, rng)
    return f.best_x, f.best_f, f.calls


def to_bias(x, parameterization, pivot=None):
    """Map a search vector to a bias.

    For the rigid form with a ``pivot`` (camera-frame point), the rotation
    part of ``x`` turns about the pivot instead of the camera center, i.e.
    ``t_b = x_t + pivot - R_b·pivot``.  Turning about the middle of the scene
    decorrelates rotation from translation, which the simplex needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if parameterization == RIGID and pivot is not None:
        rot = Rotation.from_rotvec(x[:3]).as_matrix()
        t = x[3:] + pivot - rot @ pivot
        return BiasSpec(RIGID, tuple(x[:3]) + tuple(t))
    return BiasSpec(parameterization, tuple(x))


def search_pivot(cloud, calib_in, interested, cfg):
    if cfg.parameterization != RIGID or cfg.pivot == "camera":
        return None
    groups = _interested_xyz(cloud, interested)
    if not groups:
        return None
    xyz = np.vstack(list(groups.values()))
    cam = xyz @ calib_in.v2c[:, :3].T + calib_in.v2c[:, 3]
    cam = cam[cam[:, 2] > DEPTH_EPSILON]
    return cam.mean(axis=0) if len(cam) else None


def _interested_xyz(cloud, interested):
    out = {}
    for cls in sorted(set(int(c) for c in interested)):
        xyz = cloud.xyz[cloud.labels == cls]
        if len(xyz):
            out[cls] = np.ascontiguousarray(xyz)
    return out


def _projector(calib):
    """4x4 matrix taking homogeneous row points to ``[hx, hy, hz, depth]``."""
    cam = np.vstack([calib.r0 @ calib.v2c, [0.0, 0.0, 0.0, 1.0]])
    m = np.vstack([calib.p @ cam, cam[2]])
    return m.T


def _fast_uv(xyz_h, calib):
    out = xyz_h @ _projector(calib)
    keep = out[:, 3] > DEPTH_EPSILON
    if not keep.all():
        out = out[keep]
    return out[:, 0] / out[:, 2], out[:, 1] / out[:, 2]


def chamfer_objective(cloud, mask, calib_in, interested, parameterization=RIGID, pivot=None):
    """``x -> mask_chamfer_loss`` for a bias vector ``x``; raises on unusable input.

    Projection is fused into one matrix product per class; it agrees with
    :func:`geometry.project` to rounding error.
    """
    field_ = ChamferField(mask, interested)
    if not field_.has_any():
        raise DegenerateMask("mask has no pixels of any interested class")
    groups = _interested_xyz(cloud, interested)
    in_front = sum(int((camera_points(xyz, calib_in)[:, 2] > DEPTH_EPSILON).sum()) for xyz in groups.values())
    if in_front == 0:
        raise NoInterestedPoints("no interested point lies in front of the camera")
    homog = {c: np.hstack([xyz, np.ones((len(xyz), 1))]) for c, xyz in groups.items()}

    def objective(x):
        calib = apply_bias(calib_in, to_bias(x, parameterization, pivot))
        total = 0.0
        for cls, xyz_h in homog.items():
            u, v = _fast_uv(xyz_h, calib)
            total += float(np.sum(field_.point_costs(cls, u, v)))
        return total

    return objective


def recalibrate(cloud, mask, calib_in, interested, cfg=None):
    cfg = cfg or SearchConfig()
    t0 = time.perf_counter()
    pivot = search_pivot(cloud, calib_in, interested, cfg)
    objective = chamfer_objective(cloud, mask, calib_in, interested, cfg.parameterization, pivot)
    initial = objective(np.zeros(cfg.dim))
    best_x, best_f, calls = _search(objective, cfg)
    if not best_f <= initial:
        best_x, best_f = np.zeros(cfg.dim), initial
    return RecalibResult(
        to_bias(best_x, cfg.parameterization, pivot),
        initial,
        best_f,
        calls + 1,
        (time.perf_counter() - t0) * 1e3,
    )


def _label_points(homog, calib_label):
    # same arithmetic as the search path, so a perfect estimate scores exactly 0
    out = {}
    for cls, xyz_h in homog.items():
        u, v = _fast_uv(xyz_h, calib_label)
        if len(u):
            out[cls] = np.column_stack([u, v])
    return out


_WHITE_STEP = 5.0  # pixels of RMS displacement per unit of whitened coordinate


def _pixel_whitening(homog, calib_in, cfg, x0, max_points=2000, h=1e-6):
    """Linear map from whitened search coordinates to bias parameters.

    Built from the finite-difference Jacobian of the projected pixels with
    respect to the bias (geometry only, no objective values), so that one
    unit along any whitened axis moves the points by about one pixel RMS.
    """
    xyz_h = np.vstack(list(homog.values()))
    if len(xyz_h) > max_points:
        xyz_h = xyz_h[:: int(math.ceil(len(xyz_h) / max_points))]

    def pixels(x):
        u, v = _fast_uv(xyz_h, apply_bias(calib_in, to_bias(x, cfg.parameterization)))
        return np.concatenate([u, v])

    base = pixels(x0)
    cols = []
    for i in range(cfg.dim):
        step = np.zeros(cfg.dim)
        step[i] = h
        moved = pixels(x0 + step)
        if len(moved) != len(base):
            return np.diag(_steps(cfg) / _WHITE_STEP), np.zeros((0, cfg.dim))
        cols.append((moved - base) / h)
    jac = np.column_stack(cols)
    gram = jac.T @ jac / (len(base) / 2)
    w, vecs = np.linalg.eigh(gram)
    # pixels cannot see some directions (the overall scale of the extrinsic
    # is one); cap their step at the plain per-axis step
    floor = (_WHITE_STEP / float(np.min(_steps(cfg)))) ** 2
    blind = vecs[:, w < floor].T
    return vecs @ np.diag(1.0 / np.sqrt(np.maximum(w, floor))) @ vecs.T, blind


_ROUNDS = 3  # whitened rounds per phase; each re-linearizes at the incumbent


def _whitened_round(fn, x0, budget, scale, homog, calib_in, cfg, lo, hi, rng):
    """One simplex run in pixel-whitened coordinates around ``x0``, then a
    Brent line search along each direction the pixels cannot see.

    Those directions are fixed by the smooth MSE term alone, which a 1-D
    search resolves far faster than the simplex does.
    """
    precond, _ = _pixel_whitening(homog, calib_in, cfg, x0)

    def to_x(z):
        return np.clip(x0 + precond @ z, lo, hi)

    f = _Counted(lambda z: fn(to_x(z)))
    z, fx = _refine(f, np.zeros(cfg.dim), np.full(cfg.dim, _WHITE_STEP), cfg, None, None, rng,
                    budget=budget, scale=scale, ftol=0.0)
    used = f.calls
    x = to_x(z)
    if fx is None:
        fx = fn(x)
        used += 1
    for d in _pixel_whitening(homog, calib_in, cfg, x)[1]:
        line = _Counted(lambda t, d=d: fn(np.clip(x + t * d, lo, hi)))
        res = minimize_scalar(line, bracket=(-1e-4, 1e-4), tol=1e-12)
        used += line.calls
        if res.fun < fx:
            x, fx = np.clip(x + res.x * d, lo, hi), res.fun
    return x, used


def supervised_fit(cloud, calib_in, calib_label, interested, schedule=None, cfg=None, normalized=True):
    """Minimize ``λ1·bias_mse + λ2·projected_loss`` through the schedule's phases.

    Each phase spends its duration (in objective evaluations) refining the
    incumbent left by the previous phase; every restart runs the whole
    schedule.  ``normalized`` uses the per-point mean projected distance so
    the two terms keep a scene-independent ratio.
    """
    cfg = cfg or SearchConfig(parameterization=ADDITIVE)
    schedule = schedule or LossSchedule.default(cfg.polytope_iters)
    t0 = time.perf_counter()
    homog = {
        c: np.hstack([xyz, np.ones((len(xyz), 1))]) for c, xyz in _interested_xyz(cloud, interested).items()
    }
    p_l = _label_points(homog, calib_label)
    if not p_l:
        raise NoInterestedPoints("no interested point projects under the label calibration")
    index = LabelIndex(p_l)
    lo, hi = np.array(cfg.bounds).T

    def terms(x):
        bias = to_bias(x, cfg.parameterization)
        if cfg.parameterization != ADDITIVE:
            bias = rigid_to_additive(bias, calib_in)
        mse = bias_mse(bias, calib_in, calib_label)
        calib = apply_bias(calib_in, bias)
        p_c = {}
        for cls, xyz_h in homog.items():
            u, v = _fast_uv(xyz_h, calib)
            if len(u):
                p_c[cls] = np.column_stack([u, v])
        return mse, index.directed(p_c, normalized)

    def phase_objective(i):
        l1, l2, _ = schedule.phases[i]

        def fn(x):
            mse, proj = terms(x)
            return l1 * mse + l2 * proj

        return fn

    final_obj = phase_objective(len(schedule.phases) - 1)
    zero = np.zeros(cfg.dim)
    initial = final_obj(zero)
    calls = 1

    f_grid = _Counted(phase_objective(0))
    best_cell, best_cell_f = zero, f_grid(zero)
    for x in _grid_points(cfg):
        fx = f_grid(x)
        if fx < best_cell_f:
            best_cell, best_cell_f = x, fx
    calls += f_grid.calls

    rng = generator(derive_seed(cfg.rng_seed, 1))
    starts = [best_cell] + [rng.uniform(lo, hi) for _ in range(cfg.restarts - 1)]
    best_x, best_f = zero, initial
    for x0 in starts:
        x, scale = x0, 1.0
        for i, (_, _, duration) in enumerate(schedule.phases):
            for k in range(_ROUNDS):
                share = duration // _ROUNDS + (duration % _ROUNDS if k == _ROUNDS - 1 else 0)
                x, used = _whitened_round(phase_objective(i), x, share, scale, homog, calib_in, cfg, lo, hi, rng)
                calls += used
                scale = 0.1 if k == 0 else 0.01
        fx = final_obj(x)
        calls += 1
        if fx < best_f:
            best_x, best_f = x, fx
    return RecalibResult(
        to_bias(best_x, cfg.parameterization), initial, best_f, calls, (time.perf_counter() - t0) * 1e3
    )


def with_seed(cfg, seed):
    return replace(cfg, rng_seed=seed)
