"""Pose-accuracy metrics: ADD, ADD-S, AUC, MSSD, MSPD, VSD, and AR recall."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics, MeshModel, Pose, apply, compose, project

# recall threshold grids; fractions apply to the object diameter, the MSPD
# pixel grid is scaled by image_diagonal / 800 so a 640x480 image uses 5..50 px
VSD_TAU_FRACTIONS = tuple(np.arange(1, 11) * 0.05)
VSD_THRESHOLDS = tuple(np.arange(1, 11) * 0.05)
MSSD_FRACTIONS = tuple(np.arange(1, 11) * 0.05)
MSPD_UNITS = tuple(np.arange(1, 11) * 5.0)
MSPD_REFERENCE_DIAGONAL = 800.0


def add(mesh: MeshModel, pose_gt: Pose, pose_est: Pose) -> float:
    """Mean vertex displacement between the two posed models (meters)."""
    d = apply(pose_gt, mesh.vertices) - apply(pose_est, mesh.vertices)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def add_s(mesh: MeshModel, pose_gt: Pose, pose_est: Pose) -> float:
    """Mean over GT-posed vertices of the distance to the nearest est-posed vertex."""
    gt = apply(pose_gt, mesh.vertices)
    est = apply(pose_est, mesh.vertices)
    total = 0.0
    block = 256
    for i in range(0, len(gt), block):
        d2 = np.sum((gt[i : i + block, None, :] - est[None, :, :]) ** 2, axis=-1)
        total += float(np.sum(np.sqrt(d2.min(axis=1))))
    return total / len(gt)


def add_threshold_accuracy(add_values, add_s_values, is_symmetric, diameters,
                           fraction: float = 0.1) -> float:
    """Share of poses whose ADD (ADD-S when flagged symmetric) is below
    fraction * diameter."""
    if fraction <= 0:
        raise DomainError("threshold fraction must be positive")
    add_values = np.asarray(add_values, dtype=np.float64)
    add_s_values = np.asarray(add_s_values, dtype=np.float64)
    sym = np.asarray(is_symmetric, dtype=bool)
    dia = np.broadcast_to(np.asarray(diameters, dtype=np.float64), add_values.shape)
    err = np.where(sym, add_s_values, add_values)
    return float(np.mean(err < fraction * dia))


def add_s_auc(errors, max_threshold: float) -> float:
    """Exact area under the accuracy-vs-threshold step curve, normalized.

    accuracy(t) = share of errors < t, integrated over t in [0, max_threshold]
    and divided by max_threshold; an error e contributes the margin
    max_threshold - min(e, max_threshold).
    """
    if max_threshold <= 0:
        raise DomainError("max threshold must be positive")
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0:
        raise DomainError("empty error list")
    return float(np.mean(max_threshold - np.minimum(e, max_threshold)) / max_threshold)


def mssd(mesh: MeshModel, pose_gt: Pose, pose_est: Pose) -> float:
    """Min over mesh symmetries of the max vertex displacement (meters)."""
    est = apply(pose_est, mesh.vertices)
    best = math.inf
    for s in mesh.symmetries:
        gt = apply(compose(pose_gt, s), mesh.vertices)
        best = min(best, float(np.max(np.linalg.norm(est - gt, axis=1))))
    return best


def mspd(mesh: MeshModel, pose_gt: Pose, pose_est: Pose, k: CameraIntrinsics) -> float:
    """Min over mesh symmetries of the max projected vertex displacement (pixels)."""
    est = project(apply(pose_est, mesh.vertices), k)
    best = math.inf
    for s in mesh.symmetries:
        gt = project(apply(compose(pose_gt, s), mesh.vertices), k)
        best = min(best, float(np.max(np.linalg.norm(est - gt, axis=1))))
    return best


@dataclass(frozen=True)
class VsdResult:
    value: float
    empty_union: bool


def vsd(depth_gt_render, depth_est_render, depth_scene,
        tau: float, delta: float = 0.015) -> VsdResult:
    """Visible surface discrepancy between two renders against a scene depth.

    A render pixel is visible where it is nonzero and within delta of the
    scene depth.  Over the union of the two visibility masks, the value is
    the fraction of pixels where one render is absent or the depth
    difference exceeds tau.  An empty union reports 0 with a flag.
    """
    gt = np.asarray(depth_gt_render, dtype=np.float64)
    est = np.asarray(depth_est_render, dtype=np.float64)
    scene = np.asarray(depth_scene, dtype=np.float64)
    if gt.shape != est.shape or gt.shape != scene.shape:
        raise DomainError("depth rasters must share one shape")
    vis_gt = (gt > 0) & (np.abs(gt - scene) < delta)
    vis_est = (est > 0) & (np.abs(est - scene) < delta)
    union = vis_gt | vis_est
    n_union = int(union.sum())
    if n_union == 0:
        return VsdResult(value=0.0, empty_union=True)
    both = vis_gt & vis_est
    disagree = int((union & ~both).sum())
    disagree += int((both & (np.abs(gt - est) > tau)).sum())
    return VsdResult(value=disagree / n_union, empty_union=False)


@dataclass(frozen=True)
class ArRecall:
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float
    ar: float


def ar_recall(vsd_matrix, mssd_values, mspd_values, diameters,
              image_diagonal: float) -> ArRecall:
    """Average recall over the standard threshold grids.

    vsd_matrix is (n_poses, len(VSD_TAU_FRACTIONS)): column j holds each
    pose's VSD computed at tau = VSD_TAU_FRACTIONS[j] * diameter.  MSSD
    thresholds are fractions of each pose's diameter; MSPD thresholds are
    MSPD_UNITS pixels scaled by image_diagonal / 800.
    """
    vsd_m = np.asarray(vsd_matrix, dtype=np.float64)
    mssd_v = np.asarray(mssd_values, dtype=np.float64).reshape(-1)
    mspd_v = np.asarray(mspd_values, dtype=np.float64).reshape(-1)
    n = len(mssd_v)
    if n == 0 or vsd_m.shape != (n, len(VSD_TAU_FRACTIONS)) or len(mspd_v) != n:
        raise DomainError("per-pose metric arrays are inconsistent")
    dia = np.broadcast_to(np.asarray(diameters, dtype=np.float64), (n,))

    vsd_recalls = [np.mean(vsd_m[:, j] < th)
                   for j in range(len(VSD_TAU_FRACTIONS))
                   for th in VSD_THRESHOLDS]
    mssd_recalls = [np.mean(mssd_v < f * dia) for f in MSSD_FRACTIONS]
    px = image_diagonal / MSPD_REFERENCE_DIAGONAL
    mspd_recalls = [np.mean(mspd_v < u * px) for u in MSPD_UNITS]

    ar_vsd = float(np.mean(vsd_recalls))
    ar_mssd = float(np.mean(mssd_recalls))
    ar_mspd = float(np.mean(mspd_recalls))
    return ArRecall(ar_vsd=ar_vsd, ar_mssd=ar_mssd, ar_mspd=ar_mspd,
                    ar=(ar_vsd + ar_mssd + ar_mspd) / 3.0)
