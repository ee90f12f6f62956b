"""Command-line entry point: ``recalib <command> ...``.

Frame directories hold, per frame id, ``{id}.bin``, ``{id}.label``,
``{id}.pgm`` and ``{id}.calib.txt``, plus a ``manifest.json``.  Perturbed
directories also carry the exact labels under ``labels/{id}.calib.txt``.

Outputs never contain wall-clock data; timings go to a ``run.log`` sidecar.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, InvariantViolation, MissingInput, RecalibError, SchemaError
from .evaluation import (
    Frame,
    calib_error,
    config_hash,
    dump_report,
    parallel_map,
    resummarize,
    run_sweep,
    summarize,
)
from .features import (
    build_alignment_feature,
    build_calibration_feature,
    export_tensor,
    import_tensor,
    project_labeled,
)
from .geometry import RigidTransform, apply_bias, kitti_like_calibration, parse_calibration, serialize_calibration
from .losses import ChamferField, LossSchedule, mask_chamfer_loss
from .perturbation import (
    NoiseSpec,
    TranslationSpec,
    corruption_manifest,
    gaussian_noise_calib,
    lidar_motion_bias,
    transform_cloud_with_label,
)
from .recalibrator import SearchConfig, recalibrate, supervised_fit
from .rng import derive_seed
from .sceneio import (
    KITTI_IMAGE_SIZE,
    LabeledCloud,
    SceneSpec,
    random_scene_spec,
    read_cloud_bin,
    read_labels,
    read_mask_pgm,
    synth_scene,
    write_cloud_bin,
    write_labels,
    write_mask_pgm,
)

log = logging.getLogger("recalib")

MANIFEST = "manifest.json"
LABEL_DIR = "labels"
CALIB_SUFFIX = ".calib.txt"


# -- small IO helpers -----------------------------------------------------------


def load_json(path):
    """Parse a JSON file, turning syntax errors into :class:`SchemaError` with position."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MissingInput(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc.msg}", exc.lineno, exc.colno) from None


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise MissingInput(f"cannot read {path}: {exc.strerror}") from None


def _write_json(path, doc):
    Path(path).write_bytes(dump_report(doc))


def frame_ids(in_dir):
    d = Path(in_dir)
    if not d.is_dir():
        raise MissingInput(f"{in_dir} is not a directory")
    return sorted(p.name[: -len(CALIB_SUFFIX)] for p in d.glob("*" + CALIB_SUFFIX))


def read_calib(path):
    return parse_calibration(_read_bytes(path).decode("utf-8", errors="replace"))


def read_frame(in_dir, frame_id, need_mask=True):
    d = Path(in_dir)
    cloud = read_cloud_bin(_read_bytes(d / f"{frame_id}.bin"))
    labels = read_labels(_read_bytes(d / f"{frame_id}.label"), len(cloud))
    cloud = LabeledCloud(cloud.points, labels)
    calib = read_calib(d / f"{frame_id}{CALIB_SUFFIX}")
    mask = None
    mask_path = d / f"{frame_id}.pgm"
    if mask_path.exists():
        mask = read_mask_pgm(mask_path.read_bytes())
    elif need_mask:
        raise MissingInput(f"no mask for frame {frame_id}")
    return Frame(frame_id, cloud, mask, calib)


def write_frame(out_dir, frame_id, cloud, mask, calib):
    d = Path(out_dir)
    (d / f"{frame_id}.bin").write_bytes(write_cloud_bin(cloud))
    (d / f"{frame_id}.label").write_bytes(write_labels(cloud.labels))
    if mask is not None:
        (d / f"{frame_id}.pgm").write_bytes(write_mask_pgm(mask))
    (d / f"{frame_id}{CALIB_SUFFIX}").write_text(serialize_calibration(calib))


def _out_dir(path):
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror}") from None
    return d


def _sidecar(out_dir, command, timings):
    """Append wall-clock information, kept out of every reproducible output."""
    with open(Path(out_dir) / "run.log", "a") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        for key, ms in timings.items():
            fh.write(f"{stamp} {command} {key} {ms:.1f} ms\n")


def _triple(text, flag):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"{flag} expects three comma-separated numbers, got {text!r}")
    return parts


def _classes(text):
    try:
        out = sorted({int(c) for c in text.split(",") if c.strip()})
    except ValueError:
        raise ConfigError(f"--classes expects comma-separated integers, got {text!r}") from None
    if not out:
        raise ConfigError("--classes is empty")
    return out


# -- synth ----------------------------------------------------------------------


def _synth_plan(doc, seed):
    """Resolve a synth document into ``(image_size, calib, [SceneSpec])``.

    The document may list explicit ``frames`` (scene specs) and/or ask for
    ``random`` ones: ``{"count": N, ...random_scene_spec options}``.  A seed
    given on the command line re-seeds every frame.
    """
    if not isinstance(doc, dict):
        raise ConfigError("synth spec must be a JSON object")
    unknown = set(doc) - {"image_size", "calib", "frames", "random", "seed"}
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    size = tuple(int(x) for x in doc.get("image_size", KITTI_IMAGE_SIZE))
    calib = parse_calibration(doc["calib"]) if "calib" in doc else kitti_like_calibration()
    master = int(seed if seed is not None else doc.get("seed", 0))
    specs = []
    for i, frame in enumerate(doc.get("frames", [])):
        spec = SceneSpec.from_json(frame)
        if seed is not None:
            spec = replace(spec, rng_seed=derive_seed(master, i))
        specs.append(spec)
    rand = dict(doc.get("random", {}))
    count = int(rand.pop("count", 0))
    for key in ("class_ids", "depth_range", "half_extents"):
        if key in rand:
            rand[key] = tuple(rand[key])
    for k in range(count):
        try:
            spec = random_scene_spec(
                derive_seed(master, len(specs)), calib=calib, image_size=size, **rand
            )
        except TypeError as exc:
            raise ConfigError(f"bad random scene option: {exc}") from None
        specs.append(spec)
    return size, calib, master, specs


def cmd_synth(args):
    doc = load_json(args.spec)
    size, calib, master, specs = _synth_plan(doc, args.seed)
    out = _out_dir(args.out_dir)
    ids = []
    t0 = time.perf_counter()
    for i, spec in enumerate(specs):
        frame_id = f"{i:06d}"
        cloud, mask = synth_scene(spec, calib, size)
        write_frame(out, frame_id, cloud, mask, calib)
        ids.append(frame_id)
    manifest = {
        "schema": 1,
        "command": "synth",
        "toolkit_version": __version__,
        "seed": master,
        "image_size": list(size),
        "frames": [{"frame_id": f, "scene": s.to_json()} for f, s in zip(ids, specs)],
    }
    _write_json(out / MANIFEST, manifest)
    _sidecar(out, "synth", {"total": (time.perf_counter() - t0) * 1e3})
    print(f"wrote {len(ids)} frame(s) to {out}")
    return 0


# -- perturb --------------------------------------------------------------------


def cmd_perturb(args):
    chosen = [x is not None for x in (args.sigma, args.translate, args.rotate)]
    if sum(chosen) != 1:
        raise ConfigError("choose exactly one of --sigma, --translate, --rotate")
    if args.sigma is not None and not args.sigma >= 0:
        raise ConfigError("--sigma must be >= 0")
    seed = 0 if args.seed is None else args.seed
    ids = frame_ids(args.in_dir)
    out = _out_dir(args.out_dir)
    (out / LABEL_DIR).mkdir(exist_ok=True)
    records = []
    for i, frame_id in enumerate(ids):
        frame = read_frame(args.in_dir, frame_id, need_mask=False)
        fseed = derive_seed(seed, i)
        if args.sigma is not None:
            calib_in, bias = gaussian_noise_calib(frame.calib, NoiseSpec(args.sigma, fseed))
            cloud, label = frame.cloud, frame.calib
            man = corruption_manifest(frame_id, "noise", fseed, bias, sigma=args.sigma)
        else:
            if args.translate is not None:
                vec = _triple(args.translate, "--translate")
                motion = RigidTransform(np.eye(3), TranslationSpec(*vec).vector)
                extra = {"translation": vec}
            else:
                vec = _triple(args.rotate, "--rotate")
                motion = RigidTransform.from_axis_angle(vec)
                extra = {"rotation": vec}
            cloud, label = transform_cloud_with_label(frame.cloud, frame.calib, motion)
            calib_in = frame.calib
            kind = "translate" if args.translate is not None else "rotate"
            man = corruption_manifest(frame_id, kind, fseed, -lidar_motion_bias(frame.calib, motion), **extra)
        write_frame(out, frame_id, cloud, frame.mask, calib_in)
        (out / LABEL_DIR / f"{frame_id}{CALIB_SUFFIX}").write_text(serialize_calibration(label))
        records.append(man)
    manifest = {
        "schema": 1,
        "command": "perturb",
        "toolkit_version": __version__,
        "seed": seed,
        "corruptions": records,
    }
    _write_json(out / MANIFEST, manifest)
    print(f"perturbed {len(ids)} frame(s) into {out}")
    return 0


# -- export-features ------------------------------------------------------------


def cmd_export_features(args):
    classes = _classes(args.classes)
    out = _out_dir(args.out_dir)
    written, skipped = [], []
    for frame_id in frame_ids(args.in_dir):
        try:
            frame = read_frame(args.in_dir, frame_id, need_mask=True)
        except MissingInput as exc:
            skipped.append({"frame_id": frame_id, "error": type(exc).__name__, "message": str(exc)})
            continue
        proj = project_labeled(frame.cloud, frame.calib, classes)
        align = build_alignment_feature(proj, frame.mask, classes)
        calib5 = build_calibration_feature(proj, frame.cloud, frame.mask.width, frame.mask.height)
        pairs = [("align", align.tensor()), ("calib5", calib5.tensor())]
        for name, tensor in pairs:
            blob = export_tensor(tensor)
            path = out / f"{frame_id}.{name}.rctf"
            path.write_bytes(blob)
            if args.verify:
                back = import_tensor(path.read_bytes())
                if back.dtype != tensor.dtype or not np.array_equal(back, tensor):
                    raise InvariantViolation(f"{path} does not read back identically")
        written.append(frame_id)
    manifest = {
        "schema": 1,
        "command": "export-features",
        "toolkit_version": __version__,
        "classes": classes,
        "frames": written,
        "skipped": skipped,
        "verified": bool(args.verify),
    }
    _write_json(out / MANIFEST, manifest)
    print(f"exported {len(written)} frame(s), skipped {len(skipped)}")
    return 0


# -- recalibrate ----------------------------------------------------------------

_RUN_KEYS = {"search", "schedule", "interested", "mode", "grid", "seed", "jobs"}


def resolve_run_config(doc, seed=None, jobs=None):
    """Merge a run config document with CLI flags (flags win) and defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    mode = doc.get("mode", "unsupervised")
    if mode not in ("unsupervised", "supervised"):
        raise ConfigError(f"mode must be 'unsupervised' or 'supervised', not {mode!r}")
    search = dict(doc.get("search", {}))
    if mode == "supervised":
        search.setdefault("parameterization", "additive-12")
    master = int(seed if seed is not None else doc.get("seed", 0))
    search["rng_seed"] = master
    cfg = SearchConfig.from_json(search)
    schedule = None
    if mode == "supervised":
        try:
            schedule = (
                LossSchedule.from_json(doc["schedule"]) if "schedule" in doc else LossSchedule.default(cfg.polytope_iters)
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule: {exc}") from None
    interested = doc.get("interested", [1])
    try:
        interested = sorted({int(c) for c in interested})
    except (TypeError, ValueError):
        raise ConfigError("interested must be a list of class ids") from None
    if not interested:
        raise ConfigError("interested class set is empty")
    jobs = jobs if jobs is not None else doc.get("jobs") or os.cpu_count() or 1
    return {
        "mode": mode,
        "search": cfg,
        "schedule": schedule,
        "interested": interested,
        "grid": doc.get("grid"),
        "seed": master,
        "jobs": int(jobs),
    }


def _resolved_json(run):
    return {
        "mode": run["mode"],
        "search": run["search"].to_json(),
        "schedule": run["schedule"].to_json() if run["schedule"] else None,
        "interested": run["interested"],
        "grid": run["grid"],
        "seed": run["seed"],
    }


def _recalibrate_one(task):
    in_dir, frame_id, index, run = task
    frame = read_frame(in_dir, frame_id, need_mask=run["mode"] == "unsupervised")
    label_path = Path(in_dir) / LABEL_DIR / f"{frame_id}{CALIB_SUFFIX}"
    label = read_calib(label_path) if label_path.exists() else None
    cfg = replace(run["search"], rng_seed=derive_seed(run["seed"], index))
    t0 = time.perf_counter()
    try:
        if run["mode"] == "supervised":
            if label is None:
                raise MissingInput(f"supervised mode needs {label_path}")
            res = supervised_fit(frame.cloud, frame.calib, label, run["interested"], run["schedule"], cfg)
        else:
            res = recalibrate(frame.cloud, frame.mask, frame.calib, run["interested"], cfg)
        estimated = apply_bias(frame.calib, res.bias)
        before, after = {}, {}
        if frame.mask is not None:
            field = ChamferField(frame.mask, run["interested"])
            for side, calib in ((before, frame.calib), (after, estimated)):
                proj = project_labeled(frame.cloud, calib, run["interested"])
                side["chamfer"] = mask_chamfer_loss(proj, frame.mask, run["interested"], field)
        if label is not None:
            before.update(calib_error(frame.calib, label).to_json())
            after.update(calib_error(estimated, label).to_json())
    except RecalibError as exc:
        return {"frame_id": frame_id, "level": "given", "error": type(exc).__name__, "message": str(exc)}, None, None
    after.update({"bias": res.bias.to_json(), "evaluations": res.evaluations, "wall_time_ms": None})
    before.setdefault("chamfer", res.objective_initial)
    after.setdefault("chamfer", res.objective_final)
    row = {"frame_id": frame_id, "level": "given", "corruption": None, "before": before, "after": after}
    return row, serialize_calibration(estimated), (time.perf_counter() - t0) * 1e3


def cmd_recalibrate(args):
    run = resolve_run_config(load_json(args.config), args.seed, args.jobs)
    resolved = _resolved_json(run)
    if args.dry_run:
        sys.stdout.write(dump_report(resolved).decode())
        return 0
    ids = frame_ids(args.in_dir)
    out = _out_dir(args.out_dir)
    manifests = {}
    man_path = Path(args.in_dir) / MANIFEST
    if man_path.exists():
        for rec in load_json(man_path).get("corruptions", []):
            manifests[rec.get("frame_id")] = rec
    tasks = [(str(args.in_dir), f, i, run) for i, f in enumerate(ids)]
    results = parallel_map(_recalibrate_one, tasks, run["jobs"])
    rows, failures, timings = [], [], {}
    for row, calib_text, ms in results:
        if calib_text is None:
            failures.append(row)
            continue
        row["corruption"] = manifests.get(row["frame_id"])
        rows.append(row)
        (out / f"{row['frame_id']}{CALIB_SUFFIX}").write_text(calib_text)
        timings[row["frame_id"]] = ms
    grid = [{"type": "given"}]
    resolved["grid"] = grid
    report = {
        "schema": 1,
        "meta": {
            "seed": run["seed"],
            "config_hash": config_hash(resolved),
            "toolkit_version": __version__,
            "config": resolved,
        },
        "rows": rows,
        "failures": failures,
        "summary": summarize(rows, failures, grid),
    }
    _write_json(out / "report.json", report)
    _sidecar(out, "recalibrate", timings)
    print(summary_table(report))
    return 0


# -- sweep ----------------------------------------------------------------------


def cmd_sweep(args):
    run = resolve_run_config(load_json(args.config), args.seed, args.jobs)
    if not run["grid"]:
        raise ConfigError("sweep needs a non-empty 'grid' in the run config")
    resolved = _resolved_json(run)
    if args.dry_run:
        sys.stdout.write(dump_report(resolved).decode())
        return 0
    frames = [read_frame(args.in_dir, f) for f in frame_ids(args.in_dir)]
    summary = run_sweep(
        frames,
        run["grid"],
        run["search"],
        run["schedule"],
        run["seed"],
        run["interested"],
        run["mode"],
        run["jobs"],
    )
    out_path = Path(args.out)
    _out_dir(out_path.parent if str(out_path.parent) else ".")
    out_path.write_bytes(summary.to_json_bytes())
    _sidecar(out_path.parent, "sweep", summary.timings_ms)
    print(summary_table(summary.report))
    return 0


# -- evaluate -------------------------------------------------------------------


def _fmt_stat(stats):
    if not stats or stats.get("mean") is None:
        return "      -"
    return f"{stats['mean']:7.3f}"


def summary_table(report):
    """Plain-text table, one line per corruption level."""
    lines = [
        f"{'level':<32} {'n':>4} {'fail':>4} {'t_before':>9} {'t_after':>9} {'r_before':>9} {'r_after':>9} {'reduce':>7}",
    ]
    for lvl in report["summary"]:
        red = lvl.get("objective_reduction", {}).get("median")
        lines.append(
            f"{lvl['level']:<32} {lvl['frames_counted']:>4} {len(lvl['failures']):>4} "
            f"{_fmt_stat(lvl['before']['translation_error_cm']):>9} {_fmt_stat(lvl['after']['translation_error_cm']):>9} "
            f"{_fmt_stat(lvl['before']['rotation_error_deg']):>9} {_fmt_stat(lvl['after']['rotation_error_deg']):>9} "
            f"{'-' if red is None else format(red, '7.3f'):>7}"
        )
    lines.append("errors: mean translation (cm) and rotation (deg); reduce: median chamfer reduction")
    return "\n".join(lines)


def _check_report(doc, path):
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: report must be a JSON object")
    for key in ("schema", "meta", "rows"):
        if key not in doc:
            raise SchemaError(f"{path}: report lacks {key!r}")
    if doc["schema"] != 1:
        raise SchemaError(f"{path}: unsupported report schema {doc['schema']!r}")
    if "config" not in doc["meta"] or "grid" not in doc["meta"]["config"]:
        raise SchemaError(f"{path}: report meta lacks the corruption grid")
    for i, row in enumerate(doc["rows"]):
        for key in ("frame_id", "level", "before", "after"):
            if key not in row:
                raise SchemaError(f"{path}: row {i} lacks {key!r}")


def _compare_dirs(est_dir, label_dir):
    rows = []
    ids = frame_ids(est_dir)
    for frame_id in ids:
        label_path = Path(label_dir) / f"{frame_id}{CALIB_SUFFIX}"
        if not label_path.exists():
            raise MissingInput(f"{label_dir} has no calibration for frame {frame_id}")
        err = calib_error(read_calib(Path(est_dir) / f"{frame_id}{CALIB_SUFFIX}"), read_calib(label_path))
        rows.append({"frame_id": frame_id, **err.to_json()})
    return rows


def cmd_evaluate(args):
    if args.report is not None:
        if args.estimated or args.label:
            raise ConfigError("give either a report or --estimated/--label, not both")
        doc = load_json(args.report)
        _check_report(doc, args.report)
        out = resummarize(doc)
        text = summary_table(out)
        blob = dump_report(out)
    else:
        if not (args.estimated and args.label):
            raise ConfigError("evaluate needs a report or both --estimated and --label")
        rows = _compare_dirs(args.estimated, args.label)
        t = [r["translation_error_cm"] for r in rows]
        r = [r["rotation_error_deg"] for r in rows]
        doc = {
            "schema": 1,
            "rows": rows,
            "mean_translation_error_cm": float(np.mean(t)) if t else None,
            "mean_rotation_error_deg": float(np.mean(r)) if r else None,
        }
        text = "\n".join(
            f"{x['frame_id']:<12} {x['translation_error_cm']:9.4f} cm {x['rotation_error_deg']:9.5f} deg" for x in rows
        )
        blob = dump_report(doc)
    print(text)
    if args.out:
        Path(args.out).write_bytes(blob)
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="recalib", description="LiDAR-camera extrinsic re-calibration toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic labeled frames")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("perturb", help="write corrupted copies of frames with exact labels")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--sigma", type=float, help="per-entry Gaussian noise on the extrinsic")
    s.add_argument("--translate", metavar="A,B,C", help="move the cloud by (a, b, c) m in the LiDAR frame")
    s.add_argument("--rotate", metavar="RX,RY,RZ", help="rotate the cloud by an axis-angle vector (rad)")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("export-features", help="write alignment and calibration feature tensors")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--classes", default="1")
    s.add_argument("--verify", action="store_true", help="read every tensor back and compare")
    s.add_argument("--seed", type=int, help="accepted for uniformity; export is deterministic")
    s.set_defaults(fn=cmd_export_features)

    for name, fn, helptext in (
        ("recalibrate", cmd_recalibrate, "re-calibrate every frame of a directory"),
        ("sweep", cmd_sweep, "corrupt, re-calibrate and score frames over a grid"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("in_dir")
        s.add_argument("config")
        if name == "recalibrate":
            s.add_argument("out_dir")
        else:
            s.add_argument("--out", default="report.json")
        s.add_argument("--seed", type=int)
        s.add_argument("--jobs", type=int)
        s.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        s.set_defaults(fn=fn)

    s = sub.add_parser("evaluate", help="summarize a report or compare two calibration directories")
    s.add_argument("report", nargs="?")
    s.add_argument("--estimated")
    s.add_argument("--label")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None):
    level = os.environ.get("RECALIB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
