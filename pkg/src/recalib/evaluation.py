"""Error metrics and corruption sweeps.

A sweep corrupts every frame at every grid level, re-calibrates, and scores
the extrinsic before and after against the exact label.  Before and after
always use the same corruption instance.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .errors import BadGrid, NotDecomposable, RecalibError
from .geometry import ADDITIVE, RigidTransform, apply_bias, nearest_rotation, rotation_angle_deg
from .losses import LossSchedule
from .perturbation import (
    NoiseSpec,
    TranslationSpec,
    corruption_manifest,
    gaussian_noise_calib,
    lidar_motion_bias,
    transform_cloud_with_label,
)
from .recalibrator import SearchConfig, chamfer_objective, recalibrate, supervised_fit
from .rng import derive_seed

SCHEMA = 1
ORTHO_TOL = 1e-3
DECOMPOSE_LIMIT = 0.1

# Published KITTI figures for the learned segmentation re-calibrator; carried
# in reports for context only, never recomputed here.
REFERENCE_ROW = {
    "label": "learned segmentation re-calibration on KITTI (published)",
    "translation_error_cm": 10.3,
    "rotation_error_deg": 0.21,
    "split": None,  # frame count and split were not published
}


@dataclass(frozen=True)
class CalibErrorReport:
    translation_error_cm: float
    rotation_error_deg: float
    frame_id: str = None
    corruption: dict = None
    procrustes_residual: float = 0.0

    def to_json(self):
        return {
            "translation_error_cm": self.translation_error_cm,
            "rotation_error_deg": self.rotation_error_deg,
        }


def _rotation(v2c):
    block = v2c[:, :3]
    if np.abs(block @ block.T - np.eye(3)).max() <= ORTHO_TOL:
        r, res = nearest_rotation(block)
        return r, res
    r, res = nearest_rotation(block)
    if res > DECOMPOSE_LIMIT:
        raise NotDecomposable(res)
    return r, res


def calib_error(estimated, label, frame_id=None, corruption=None):
    """Translation (cm) and geodesic rotation (deg) error of the extrinsic."""
    r_est, res_est = _rotation(estimated.v2c)
    r_lab, res_lab = _rotation(label.v2c)
    dt = estimated.v2c[:, 3] - label.v2c[:, 3]
    return CalibErrorReport(
        100.0 * float(np.linalg.norm(dt)),
        rotation_angle_deg(r_est, r_lab),
        frame_id,
        corruption,
        max(res_est, res_lab),
    )


# -- frames and corruption ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    cloud: object
    mask: object
    calib: object


def level_name(level):
    kind = level.get("type")
    if kind in ("none", "given"):
        return kind
    if kind == "noise":
        return f"noise(sigma={level['sigma']})"
    if kind == "translate":
        return "translate(%s,%s,%s)" % (level["a"], level["b"], level["c"])
    if kind == "rotate":
        return "rotate(%s)" % ",".join(str(x) for x in level["axis_angle"])
    raise BadGrid(f"unknown corruption type {kind!r}")


def validate_grid(grid):
    if not grid:
        raise BadGrid("corruption grid is empty")
    for level in grid:
        if not isinstance(level, dict):
            raise BadGrid(f"corruption level must be an object, got {level!r}")
        if level.get("type") == "given":
            raise BadGrid("'given' marks pre-corrupted inputs and cannot be swept")
        try:
            level_name(level)
        except KeyError as exc:
            raise BadGrid(f"corruption level {level!r} lacks {exc}") from None


def corrupt(frame, level, seed):
    """Return ``(cloud_in, calib_in, calib_label, manifest)`` for one level."""
    kind = level["type"]
    calib = frame.calib
    if kind == "none":
        zero = lidar_motion_bias(calib, RigidTransform())
        return frame.cloud, calib, calib, corruption_manifest(frame.frame_id, "none", seed, zero)
    if kind == "noise":
        noisy, bias = gaussian_noise_calib(calib, NoiseSpec(float(level["sigma"]), seed))
        man = corruption_manifest(frame.frame_id, "noise", seed, bias, sigma=float(level["sigma"]))
        return frame.cloud, noisy, calib, man
    if kind == "translate":
        t = TranslationSpec(float(level["a"]), float(level["b"]), float(level["c"]))
        motion = RigidTransform(np.eye(3), t.vector)
        extra = {"translation": t.vector}
    else:
        motion = RigidTransform.from_axis_angle(level["axis_angle"])
        extra = {"rotation": level["axis_angle"]}
    cloud_in, label = transform_cloud_with_label(frame.cloud, calib, motion)
    # the cloud moved, the calibration did not: the corruption is the inverse
    # of the correction that maps calib onto label
    correction = lidar_motion_bias(calib, motion)
    man = corruption_manifest(frame.frame_id, kind, seed, -correction, **extra)
    return cloud_in, calib, label, man


# -- sweep --------------------------------------------------------------------


def _run_one(task):
    frame, level, seed, cfg, schedule, interested, mode = task
    cloud_in, calib_in, label, man = corrupt(frame, level, seed)
    cfg = replace(cfg, rng_seed=derive_seed(seed, 1))
    t0 = time.perf_counter()
    try:
        before = calib_error(calib_in, label)
        objective = chamfer_objective(cloud_in, frame.mask, calib_in, interested, cfg.parameterization)
        chamfer_before = objective(np.zeros(cfg.dim))
        if mode == "supervised":
            res = supervised_fit(cloud_in, calib_in, label, interested, schedule, cfg)
        else:
            res = recalibrate(cloud_in, frame.mask, calib_in, interested, cfg)
        estimated = apply_bias(calib_in, res.bias)
        after = calib_error(estimated, label)
        chamfer_after = chamfer_objective(cloud_in, frame.mask, estimated, interested)(np.zeros(6))  # zero rigid bias
    except RecalibError as exc:
        return {
            "frame_id": frame.frame_id,
            "level": level_name(level),
            "error": type(exc).__name__,
            "message": str(exc),
        }, None
    row = {
        "frame_id": frame.frame_id,
        "level": level_name(level),
        "corruption": man,
        "before": {**before.to_json(), "chamfer": chamfer_before},
        "after": {
            **after.to_json(),
            "chamfer": chamfer_after,
            "bias": res.bias.to_json(),
            "evaluations": res.evaluations,
            "wall_time_ms": None,
        },
    }
    return row, (time.perf_counter() - t0) * 1e3


def _stats(values):
    if not values:
        return {"mean": None, "median": None, "p95": None}
    a = np.sort(np.asarray(values, dtype=np.float64))
    return {
        "mean": math.fsum(a) / len(a),
        "median": float(np.median(a)),
        "p95": float(np.percentile(a, 95)),
    }


def summarize(rows, failures, grid):
    """Per-level aggregates; independent of row order."""
    out = []
    for level in grid:
        name = level_name(level)
        mine = sorted((r for r in rows if r["level"] == name), key=lambda r: r["frame_id"])
        fails = sorted((f for f in failures if f["level"] == name), key=lambda f: f["frame_id"])
        reductions = []
        for r in mine:
            b, a = r["before"]["chamfer"], r["after"]["chamfer"]
            reductions.append(1.0 - a / b if b > 0 else 0.0)

        def col(side, key):
            return _stats([r[side][key] for r in mine if r[side].get(key) is not None])

        out.append(
            {
                "level": name,
                "frames_attempted": len(mine) + len(fails),
                "frames_counted": len(mine),
                "failures": [f["frame_id"] for f in fails],
                "before": {
                    "translation_error_cm": col("before", "translation_error_cm"),
                    "rotation_error_deg": col("before", "rotation_error_deg"),
                },
                "after": {
                    "translation_error_cm": col("after", "translation_error_cm"),
                    "rotation_error_deg": col("after", "rotation_error_deg"),
                },
                "objective_reduction": {**_stats(reductions), "min": min(reductions) if reductions else None},
            }
        )
    return out


@dataclass(frozen=True)
class SweepSummary:
    report: dict
    timings_ms: dict

    @property
    def levels(self):
        return self.report["summary"]

    def to_json_bytes(self):
        return dump_report(self.report)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_report(report):
    return (json.dumps(report, indent=2, sort_keys=False) + "\n").encode()


def parallel_map(fn, tasks, jobs=1):
    """``[fn(t) for t in tasks]``, spread over ``jobs`` processes; order is kept."""
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_sweep(frames, grid, cfg=None, schedule=None, master_seed=0, interested=(1,), mode="unsupervised", jobs=1, meta=None):
    """Corrupt, re-calibrate and score every (frame, level) pair.

    Per-pair seeds are split from ``master_seed``, so the report is the same
    for any ``jobs``.  Wall times go to ``timings_ms`` only, keeping the
    report byte-stable.
    """
    validate_grid(grid)
    cfg = cfg or SearchConfig(parameterization=ADDITIVE if mode == "supervised" else "rigid-6dof")
    if mode == "supervised" and schedule is None:
        schedule = LossSchedule.default(cfg.polytope_iters)
    interested = tuple(sorted(set(int(c) for c in interested)))
    tasks = [
        (frame, level, derive_seed(master_seed, i, j), cfg, schedule, interested, mode)
        for i, frame in enumerate(frames)
        for j, level in enumerate(grid)
    ]
    results = parallel_map(_run_one, tasks, jobs)
    rows, failures, timings = [], [], {}
    for (item, ms), task in zip(results, tasks):
        if ms is None:
            failures.append(item)
        else:
            rows.append(item)
            timings[f"{item['frame_id']}|{item['level']}"] = ms
    resolved = {
        "grid": grid,
        "search": cfg.to_json(),
        "schedule": schedule.to_json() if schedule else None,
        "interested": list(interested),
        "mode": mode,
    }
    report = {
        "schema": SCHEMA,
        "meta": {
            "seed": master_seed,
            "config_hash": config_hash(resolved),
            "toolkit_version": __version__,
            "config": resolved,
            "reference": REFERENCE_ROW,
            "frames": [f.frame_id for f in frames],
            **(meta or {}),
        },
        "rows": rows,
        "failures": failures,
        "summary": summarize(rows, failures, grid),
    }
    return SweepSummary(report, timings)


def resummarize(report):
    """Recompute the summary block from a report's rows; idempotent."""
    grid = report["meta"]["config"]["grid"]
    out = dict(report)
    out["summary"] = summarize(report["rows"], report.get("failures", []), grid)
    return out
