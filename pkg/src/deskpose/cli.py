"""Command-line entry point: one executable, reproducible subcommands.

Exit codes: 0 success, 2 usage, 3 unreadable input, 4 violated invariant or
failed computation.  Every run writes its resolved configuration as
run_config.json beside its outputs, and all outputs are deterministic for a
fixed seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats, metrics, primitives, rkhs, selfsup, synth, voting
from .errors import DomainError
from .geometry import CameraIntrinsics, MeshModel, load_off
from .pnp import Correspondences, epnp
from .voting import GridSpec, KeypointSet

_OBJECT_MAKERS = {
    "cube": primitives.cube,
    "sphere": primitives.icosphere,
    "cylinder": primitives.cylinder,
}


class _InputError(Exception):
    """Wraps any failure while reading declared inputs (exit code 3)."""


def _load(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise _InputError(str(exc)) from exc


def _default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)


def _write_config(out_dir: Path, args) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    formats.dump_json(out_dir / "run_config.json", resolved)


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_csv_cell(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _scene_meshes(names):
    meshes = []
    for name in names:
        if name not in _OBJECT_MAKERS:
            raise DomainError(f"unknown object {name!r}; choose from "
                              f"{sorted(_OBJECT_MAKERS)}")
        meshes.append(_OBJECT_MAKERS[name]())
    return meshes


def _model_keypoints(meshes, n, seed):
    return {i + 1: synth.select_keypoints_fps(m, n, seed)
            for i, m in enumerate(meshes)}


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k = _default_intrinsics()
    meshes = _scene_meshes(args.objects.split(","))
    model_kps = _model_keypoints(meshes, args.keypoints, args.keypoint_seed)

    formats.dump_json(out / "intrinsics.json", formats.intrinsics_to_json(k))
    formats.dump_json(out / "model.json", {
        "diameters": {str(i + 1): m.diameter for i, m in enumerate(meshes)},
        "keypoints3d": {str(c): kp.tolist() for c, kp in model_kps.items()},
        "objects": args.objects.split(","),
    })
    for s in range(args.scenes):
        scene = synth.generate_scene(meshes, args.seed + s, k,
                                     n_keypoints=args.keypoints,
                                     keypoint_seed=args.keypoint_seed)
        d = out / f"scene_{s:04d}"
        d.mkdir(exist_ok=True)
        formats.write_rkr1(d / "depth.rkr1", scene.depth)
        formats.write_rkr1(d / "mask.rkr1", scene.labels.mask.astype(np.float32))
        formats.write_rkr1(d / "radial.rkr1", scene.radial.maps)
        formats.dump_json(d / "labels.json", {
            "poses": [formats.pose_to_json(p) for p in scene.labels.poses],
            "class_ids": list(scene.labels.class_ids),
            "keypoints3d": scene.labels.keypoints3d.tolist(),
            "keypoints2d": scene.labels.keypoints2d.tolist(),
            "radial_channels": [
                {"instance_id": int(a), "class_id": int(b), "kp_index": int(c)}
                for a, b, c in zip(scene.radial.instance_ids,
                                   scene.radial.class_ids,
                                   scene.radial.kp_index)
            ],
        })
    _write_config(out, args)
    return 0


def _cmd_vote(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = _load(formats.read_rkr1, args.radial)
    depth = _load(formats.read_rkr1, args.depth)[0]
    k = _load(lambda p: formats.intrinsics_from_json(formats.load_json(p)),
              args.intrinsics)
    if args.channel_meta:
        channels = _load(formats.load_json, args.channel_meta)
    else:
        channels = [{"class_id": 1, "kp_index": i} for i in range(len(maps))]
    if len(channels) != len(maps):
        raise DomainError("channel metadata does not match raster channels")

    from .geometry import project

    grids = voting.vote_radial(maps, depth, k, GridSpec(voxel_size=args.voxel))
    entries = []
    for i, (ch, grid) in enumerate(zip(channels, grids)):
        peaks = voting.extract_peaks(grid, max_peaks=3)
        peaks = voting.reject_free_space_peaks(peaks, depth, k,
                                               tolerance=max(0.01, 3.0 * args.voxel))
        if not peaks:
            continue
        point = voting.refine_keypoint(peaks[0].point, maps[i], depth, k)
        if point[2] <= 0:
            continue
        entries.append({
            "kp2d": project(point, k).tolist(),
            "kp3d": point.tolist(),
            "class_id": int(ch["class_id"]),
            "score": peaks[0].score,
            "kp_index": int(ch["kp_index"]),
        })
    formats.dump_json(out / "keypoints.json", {"keypoints": entries})
    _write_config(out, args)
    return 0


def _keypointset_from_json(obj) -> KeypointSet:
    rows = obj["keypoints"]
    if not rows:
        raise DomainError("keypoint file holds no keypoints")
    return KeypointSet.build(
        kp2d=[r["kp2d"] for r in rows],
        kp3d=[r["kp3d"] for r in rows],
        class_id=[r["class_id"] for r in rows],
        score=[r["score"] for r in rows],
        kp_index=[r["kp_index"] for r in rows],
    )


def _cmd_estimate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kps = _load(lambda p: _keypointset_from_json(formats.load_json(p)), args.keypoints)
    model = _load(formats.load_json, args.model_keypoints)
    k = _load(lambda p: formats.intrinsics_from_json(formats.load_json(p)),
              args.intrinsics)
    model_kps = {int(c): np.asarray(v, dtype=np.float64)
                 for c, v in model["keypoints3d"].items()}

    results = []
    for group in voting.group_instances(kps, model_kps):
        cls = int(group.class_id[0])
        order = np.argsort(group.kp_index)
        pose, rmse = epnp(Correspondences(
            model_pts=model_kps[cls][group.kp_index[order]],
            image_pts=group.kp2d[order],
            weights=group.score[order]), k)
        results.append({"class_id": cls, "pose": formats.pose_to_json(pose),
                        "rmse": rmse})
    formats.dump_json(out / "poses.json", {"instances": results})
    _write_config(out, args)
    return 0


def _load_pose_list(path):
    obj = formats.load_json(path)
    rows = obj["poses"] if isinstance(obj, dict) else obj
    return [formats.pose_from_json(m) for m in rows]


def _cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = args.metrics.split(",")
    unknown = set(wanted) - {"add", "adds", "auc", "mssd", "mspd", "vsd", "ar"}
    if unknown:
        raise DomainError(f"unknown metrics: {sorted(unknown)}")
    gt = _load(_load_pose_list, args.gt)
    est = _load(_load_pose_list, args.est)
    if len(gt) != len(est):
        raise DomainError("GT and estimate pose counts differ")
    mesh = _load(load_off, args.mesh)
    need_k = {"mspd", "vsd", "ar"} & set(wanted)
    k = (_load(lambda p: formats.intrinsics_from_json(formats.load_json(p)),
               args.intrinsics) if args.intrinsics else None)
    if need_k and k is None:
        raise DomainError(f"metrics {sorted(need_k)} need --intrinsics")

    cols: dict[str, list] = {}
    # add is cheap and feeds the AUC curve, so it is always computed
    cols["add"] = [metrics.add(mesh, g, e) for g, e in zip(gt, est)]
    if "adds" in wanted:
        cols["adds"] = [metrics.add_s(mesh, g, e) for g, e in zip(gt, est)]
    if "mssd" in wanted or "ar" in wanted:
        cols["mssd"] = [metrics.mssd(mesh, g, e) for g, e in zip(gt, est)]
    if "mspd" in wanted or "ar" in wanted:
        cols["mspd"] = [metrics.mspd(mesh, g, e, k) for g, e in zip(gt, est)]
    vsd_matrix = None
    if "vsd" in wanted or "ar" in wanted:
        vsd_matrix = []
        vsd_col = []
        for g, e in zip(gt, est):
            scene_d, _ = synth.render_scene_depth([mesh], [g], k)
            est_d, _ = synth.render_scene_depth([mesh], [e], k)
            row = [metrics.vsd(scene_d, est_d, scene_d,
                               tau=f * mesh.diameter, delta=args.vsd_delta).value
                   for f in metrics.VSD_TAU_FRACTIONS]
            vsd_matrix.append(row)
            vsd_col.append(metrics.vsd(scene_d, est_d, scene_d,
                                       tau=0.1 * mesh.diameter,
                                       delta=args.vsd_delta).value)
        cols["vsd"] = vsd_col

    summary: dict = {"n_poses": len(gt), "diameter": mesh.diameter}
    if "auc" in wanted:
        summary["add_auc"] = metrics.add_s_auc(cols["add"], args.auc_max_threshold)
        curve_t = np.linspace(0.0, args.auc_max_threshold, 101)
        errs = np.asarray(cols["add"])
        _write_csv(out / "auc_curve.csv", ["threshold", "accuracy"],
                   [(float(t), float(np.mean(errs < t))) for t in curve_t])
    if "ar" in wanted:
        diag = float(np.hypot(k.width, k.height))
        ar = metrics.ar_recall(np.asarray(vsd_matrix), cols["mssd"], cols["mspd"],
                               mesh.diameter, diag)
        summary.update({"ar": ar.ar, "ar_vsd": ar.ar_vsd, "ar_mssd": ar.ar_mssd,
                        "ar_mspd": ar.ar_mspd})
    for name in ("add", "adds", "mssd", "mspd", "vsd"):
        if name in cols and (name in wanted):
            summary[f"{name}_mean"] = float(np.mean(cols[name]))

    header = ["pose_index"] + [c for c in ("add", "adds", "mssd", "mspd", "vsd")
                               if c in cols]
    rows = [[i] + [cols[c][i] for c in header[1:]] for i in range(len(gt))]
    _write_csv(out / "per_pose.csv", header, rows)
    formats.dump_json(out / "summary.json", summary)
    _write_config(out, args)
    return 0


def _load_feature_matrix(path) -> np.ndarray:
    if str(path).endswith(".rkr1"):
        arr = formats.read_rkr1(path)
        return arr.reshape(arr.shape[0], -1).astype(np.float64)
    obj = formats.load_json(path)
    return np.asarray(obj, dtype=np.float64)


def _cmd_mmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    syn = _load(_load_feature_matrix, args.syn)
    real = _load(_load_feature_matrix, args.real)
    if args.lift > 1:
        syn = rkhs.lift_features(syn, factor=args.lift, seed=args.seed)
        real = rkhs.lift_features(real, factor=args.lift, seed=args.seed)

    if args.estimator == "offdiag":
        m = min(len(syn), len(real))
        syn_eq, real_eq = syn[:m], real[:m]
    else:
        syn_eq, real_eq = syn, real

    if args.kernel == "linear":
        kern = rkhs.LinearKernel(rkhs.KernelWeights.identity(syn.shape[1]))
    else:
        kern = rkhs.RbfKernel(args.rbf_w)

    if args.estimator == "offdiag":
        initial = rkhs.mmd_offdiag(syn_eq, real_eq, kern, args.scaling)
    elif args.estimator == "biased":
        initial = rkhs.mmd_biased(syn_eq, real_eq, kern)
    else:
        initial = rkhs.mmd_unbiased(syn_eq, real_eq, kern)

    summary = {"estimator": initial.estimator, "initial_value": initial.value,
               "clamped": initial.clamped}
    if args.epochs > 0:
        if args.kernel != "linear" or args.estimator != "offdiag":
            print("error: weight fitting needs --kernel linear --estimator offdiag",
                  file=sys.stderr)
            return 2
        fit = rkhs.fit_kernel_weights([(syn_eq, real_eq)], lr=args.lr,
                                      epochs=args.epochs, scaling=args.scaling)
        summary["final_value"] = fit.trace[-1]
        _write_csv(out / "trace.csv", ["epoch", "value"],
                   list(enumerate(fit.trace)))
        formats.dump_json(out / "weights.json", {
            "w_x": fit.weights.w_x.tolist(), "w_y": fit.weights.w_y.tolist()})
    formats.dump_json(out / "summary.json", summary)
    _write_config(out, args)
    return 0


def _cmd_pipeline(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k = _default_intrinsics()
    meshes = _scene_meshes(args.objects.split(","))
    model_kps = _model_keypoints(meshes, args.keypoints, args.keypoint_seed)
    spec = GridSpec(voxel_size=args.voxel)

    rows = []
    for s in range(args.scenes):
        scene = synth.generate_scene(meshes, args.seed + s, k,
                                     n_keypoints=args.keypoints,
                                     keypoint_seed=args.keypoint_seed)
        result = selfsup.pseudo_label_pipeline(
            scene, meshes, model_kps, k, grid_spec=spec,
            corruption_sigma=args.corruption_sigma,
            corruption_dropout=args.corruption_dropout,
            corruption_seed=args.seed + s,
            aug_seed=args.seed + s,
            batch_size=args.batch_size)
        per_scene = {"scene": s, "diagnostics": result.diagnostics,
                     "instances": []}
        for inst in result.instances:
            mesh = meshes[inst.class_id - 1]
            per_scene["instances"].append({
                "class_id": inst.class_id,
                "pose": formats.pose_to_json(inst.pseudo_pose),
                "rmse": inst.reprojection_rmse,
                "add": inst.add_to_gt,
                "n_composites": len(inst.composites),
            })
            rows.append((s, inst.class_id, inst.add_to_gt,
                         inst.reprojection_rmse,
                         int(inst.add_to_gt < 0.1 * mesh.diameter)))
        formats.dump_json(out / f"scene_{s:04d}.json", per_scene)
    _write_csv(out / "summary.csv",
               ["scene", "class_id", "add", "rmse", "pass_010d"], rows)
    n_pass = sum(r[4] for r in rows)
    formats.dump_json(out / "summary.json", {
        "scenes": args.scenes,
        "instances": len(rows),
        "pass_010d": n_pass,
        "pass_rate": n_pass / len(rows) if rows else 0.0,
    })
    _write_config(out, args)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskpose",
                                description="Desk-scale 6DoF pose toolkit")
    p.add_argument("--config", default=None,
                   help="JSON file whose keys override matching flags")
    p.add_argument("--threads", type=int, default=1,
                   help="parallelism hint, recorded in run_config")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate labeled synthetic scenes")
    g.add_argument("--scenes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", default="cube")
    g.add_argument("--keypoints", type=int, default=4)
    g.add_argument("--keypoint-seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    v = sub.add_parser("vote", help="recover keypoints from radial maps")
    v.add_argument("--radial", required=True)
    v.add_argument("--depth", required=True)
    v.add_argument("--intrinsics", required=True)
    v.add_argument("--channel-meta", default=None)
    v.add_argument("--voxel", type=float, default=0.005)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_vote)

    e = sub.add_parser("estimate", help="poses from grouped keypoints")
    e.add_argument("--keypoints", required=True)
    e.add_argument("--model-keypoints", required=True,
                   help="model.json as written by gen-data")
    e.add_argument("--intrinsics", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_estimate)

    ev = sub.add_parser("eval", help="pose-accuracy metrics")
    ev.add_argument("--gt", required=True)
    ev.add_argument("--est", required=True)
    ev.add_argument("--mesh", required=True)
    ev.add_argument("--intrinsics", default=None)
    ev.add_argument("--metrics", default="add,adds,auc")
    ev.add_argument("--auc-max-threshold", type=float, default=0.1)
    ev.add_argument("--vsd-delta", type=float, default=0.015)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    m = sub.add_parser("mmd-fit", help="domain-gap value and kernel fitting")
    m.add_argument("--syn", required=True)
    m.add_argument("--real", required=True)
    m.add_argument("--kernel", choices=["linear", "rbf"], default="linear")
    m.add_argument("--estimator", choices=list(rkhs.ESTIMATORS), default="offdiag")
    m.add_argument("--scaling", choices=list(rkhs.SCALINGS), default="m2")
    m.add_argument("--rbf-w", type=float, default=1.0)
    m.add_argument("--lift", type=int, default=0)
    m.add_argument("--epochs", type=int, default=0)
    m.add_argument("--lr", type=float, default=1e-2)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_mmd_fit)

    pl = sub.add_parser("pipeline", help="pseudo-pose self-supervision loop")
    pl.add_argument("--scenes", type=int, default=10)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--objects", default="cube")
    pl.add_argument("--keypoints", type=int, default=4)
    pl.add_argument("--keypoint-seed", type=int, default=0)
    pl.add_argument("--corruption-sigma", type=float, default=0.0)
    pl.add_argument("--corruption-dropout", type=float, default=0.0)
    pl.add_argument("--batch-size", type=int, default=8)
    pl.add_argument("--voxel", type=float, default=0.005)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if args.config:
        try:
            overrides = formats.load_json(args.config)
        except Exception as exc:
            print(f"error reading config: {exc}", file=sys.stderr)
            return 3
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if hasattr(args, dest):
                setattr(args, dest, value)
    try:
        return args.func(args)
    except _InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # invariant violations and failed computations
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
