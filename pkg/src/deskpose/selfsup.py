"""Self-supervision plumbing: loss stack, training schedule, pose
augmentation, scene compositing, and the pseudo-pose pipeline.

The trained networks are out of scope; their keypoint estimates are stood in
for by a configurable corruption of ground-truth radial maps, so pipeline
quality degrades measurably with the corruption parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics, MeshModel, Pose, apply, compose, project, rotation_zyx
from .metrics import add as metric_add
from .pnp import Correspondences, epnp
from .synth import RADIAL_BACKGROUND, SceneSample, render_scene_depth
from .voting import (GridSpec, KeypointSet, candidate_sort_order, extract_peaks,
                     group_instances, refine_keypoint, reject_free_space_peaks,
                     vote_radial)


def smooth_l1(pred, gt) -> float:
    """Mean elementwise smooth L1: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError("prediction and target shapes differ")
    e = np.abs(pred - gt)
    return float(np.mean(np.where(e < 1.0, 0.5 * e * e, e - 0.5)))


def cross_entropy(pred_probs, gt_labels, floor: float = 1e-12) -> float:
    """Mean -log p[label] over rows; probabilities floored to keep it finite."""
    p = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != len(labels):
        raise DomainError("need one probability row per label")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise DomainError("probability rows must sum to 1 within 1e-6")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise DomainError("labels out of range")
    picked = np.maximum(p[np.arange(len(labels)), labels], floor)
    return float(np.mean(-np.log(picked)))


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the loss terms: radial maps, keypoints, classification,
    visibility scores, and the domain adapter."""

    radial: float
    keypoint: float
    classify: float
    score: float
    adapter: float

    def __post_init__(self):
        for name in ("radial", "keypoint", "classify", "score", "adapter"):
            if getattr(self, name) < 0:
                raise DomainError("loss weights must be non-negative")


def total_loss(radial, keypoint, classify, score, adapter, w: LossWeights) -> float:
    for v in (radial, keypoint, classify, score, adapter):
        if not math.isfinite(v):
            raise DomainError("loss components must be finite")
    return (w.radial * radial + w.keypoint * keypoint + w.classify * classify
            + w.score * score + w.adapter * adapter)


@dataclass(frozen=True)
class ScheduleState:
    weights: LossWeights
    adapter_frozen: bool
    data_phase: str  # "syn" or "real"


def schedule_controller(epoch: int) -> ScheduleState:
    """Pure epoch -> training-phase mapping.

    Early epochs emphasize classification and score regression (0.6) over the
    regression terms (0.4); from epoch 80 the emphasis flips.  Training data
    is synthetic until epoch 120; afterwards real and synthetic epochs
    alternate starting with a real epoch at 121, and the domain adapter is
    unfrozen with unit weight exactly on the real epochs.
    """
    if epoch < 0:
        raise DomainError("epoch must be >= 0")
    if epoch < 80:
        reg, cls = 0.4, 0.6
    else:
        reg, cls = 0.6, 0.4
    real = epoch > 120 and epoch % 2 == 1
    return ScheduleState(
        weights=LossWeights(radial=reg, keypoint=reg, classify=cls, score=cls,
                            adapter=1.0 if real else 0.0),
        adapter_frozen=not real,
        data_phase="real" if real else "syn",
    )


@dataclass(frozen=True)
class AugmentationSpec:
    """Per-axis pose perturbation ranges; translations are expressed as a
    fraction of normalization_diameter (the largest object's diameter)."""

    rot_range: float = math.pi / 18.0
    trans_range: float = 0.1
    cardinality: int = 7  # batch size minus one
    normalization_diameter: float = 1.0

    def __post_init__(self):
        if self.rot_range < 0 or self.trans_range < 0:
            raise DomainError("perturbation ranges must be non-negative")
        if self.cardinality < 0:
            raise DomainError("cardinality must be >= 0")
        if self.normalization_diameter <= 0:
            raise DomainError("normalization diameter must be positive")


def augment_pose(pseudo: Pose, spec: AugmentationSpec, seed: int) -> list:
    """Draw ``cardinality`` perturbed copies of the pose.

    Each perturbation composes a per-axis uniform rotation in
    [-rot_range, rot_range] and a model-frame translation uniform in
    [-trans_range, trans_range] * normalization_diameter per axis.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(spec.cardinality):
        angles = rng.uniform(-spec.rot_range, spec.rot_range, 3)
        shift = rng.uniform(-spec.trans_range, spec.trans_range, 3)
        delta = Pose(rotation_zyx(angles), shift * spec.normalization_diameter)
        out.append(compose(pseudo, delta))
    return out


def composite_syn_over_real(real_depth, real_mask, mesh: MeshModel, pose: Pose,
                            k: CameraIntrinsics):
    """Z-buffer a rendered mesh into a real depth scene (nearer surface wins).

    The rendered object takes instance id max(real ids) + 1 wherever it wins.
    """
    render, rmask = render_scene_depth([mesh], [pose], k)
    real_depth = np.asarray(real_depth, dtype=np.float32)
    real_mask = np.asarray(real_mask, dtype=np.int32)
    new_id = int(real_mask.max()) + 1
    rendered = rmask > 0
    wins = rendered & ((real_depth == 0) | (render < real_depth))
    depth = np.where(wins, render, real_depth).astype(np.float32)
    mask = np.where(wins, np.int32(new_id), real_mask)
    return depth, mask


def corrupt_radial_maps(maps, sigma: float, dropout: float, seed: int) -> np.ndarray:
    """Simulated estimation error: Gaussian noise on foreground radii (clamped
    at 0) plus random foreground dropout to background."""
    if sigma < 0 or not 0 <= dropout < 1:
        raise DomainError("corruption parameters out of range")
    maps = np.array(maps, dtype=np.float32, copy=True)
    rng = np.random.default_rng(seed)
    for i in range(len(maps)):
        fg = maps[i] != RADIAL_BACKGROUND
        n = int(fg.sum())
        if n == 0:
            continue
        if sigma > 0:
            noisy = maps[i][fg] + rng.normal(0.0, sigma, n).astype(np.float32)
            maps[i][fg] = np.maximum(noisy, 0.0)
        if dropout > 0:
            drop = rng.random(n) < dropout
            vals = maps[i][fg]
            vals[drop] = RADIAL_BACKGROUND
            maps[i][fg] = vals
    return maps


@dataclass(frozen=True, eq=False)
class InstanceEstimate:
    class_id: int
    keypoints: KeypointSet
    pseudo_pose: Pose
    reprojection_rmse: float
    add_to_gt: float | None
    composites: tuple  # (depth, mask) pairs: pseudo pose first, then augmented


@dataclass(frozen=True, eq=False)
class PipelineResult:
    instances: tuple
    diagnostics: str


def pseudo_label_pipeline(scene: SceneSample, meshes, model_kps, k: CameraIntrinsics,
                          grid_spec: GridSpec | None = None,
                          corruption_sigma: float = 0.0,
                          corruption_dropout: float = 0.0,
                          corruption_seed: int = 0,
                          aug_spec: AugmentationSpec | None = None,
                          aug_seed: int = 0,
                          batch_size: int = 8,
                          max_rmse_px: float = 3.0) -> PipelineResult:
    """Vote keypoints from (corrupted) radial maps, group them, solve poses,
    and composite the model back over the scene at the pseudo pose plus
    batch_size - 1 augmented poses.

    model_kps maps class_id -> (n_slots, 3) model keypoints.  Groups whose
    solved pose reprojects worse than max_rmse_px are discarded: keypoint
    sets stitched together from wrong vote lobes match pairwise distances at
    best approximately and never reproject consistently.  Scenes where no
    instance survives return empty output with a diagnostic.
    """
    if batch_size < 1:
        raise DomainError("batch size must be >= 1")
    maps = corrupt_radial_maps(scene.radial.maps, corruption_sigma,
                               corruption_dropout, corruption_seed)
    grids = vote_radial(maps, scene.depth, k, grid_spec)

    voxel = grid_spec.voxel_size if grid_spec is not None else GridSpec().voxel_size
    rows_2d, rows_3d, rows_cls, rows_score, rows_slot = [], [], [], [], []
    rows_src = []
    for i, grid in enumerate(grids):
        # several near-tied peaks per map: the depth test drops lobes standing
        # in observed free space, grouping resolves what remains
        peaks = extract_peaks(grid, max_peaks=3)
        peaks = reject_free_space_peaks(peaks, scene.depth, k,
                                        tolerance=max(0.01, 3.0 * voxel))
        for peak in peaks:
            if peak.point[2] <= 0:
                continue
            point = refine_keypoint(peak.point, maps[i], scene.depth, k)
            if point[2] <= 0:
                continue
            rows_2d.append(project(point, k))
            rows_3d.append(point)
            rows_cls.append(int(scene.radial.class_ids[i]))
            rows_score.append(peak.score)
            rows_slot.append(int(scene.radial.kp_index[i]))
            rows_src.append(i)
    if not rows_3d:
        return PipelineResult(instances=(), diagnostics="no vote peaks found")

    perm = candidate_sort_order(np.array(rows_cls), np.array(rows_score))
    src = np.array(rows_src)[perm]
    candidates = KeypointSet.build(np.array(rows_2d)[perm], np.array(rows_3d)[perm],
                                   np.array(rows_cls)[perm],
                                   np.array(rows_score)[perm],
                                   np.array(rows_slot)[perm])
    # accept assignments only when pairwise distances stay within a fifth of
    # the keypoint spread; rules out mixed-lobe combos assembled from leftovers
    max_disc = 0.2 * max(float(np.max(np.linalg.norm(
        m[:, None, :] - m[None, :, :], axis=2))) for m in model_kps.values())
    groups = group_instances(candidates, model_kps, max_discrepancy=max_disc,
                             evidence_id=src)
    if not groups:
        return PipelineResult(instances=(),
                              diagnostics="no instance had all keypoint slots")

    diameter = max(m.diameter for m in meshes)
    spec = aug_spec or AugmentationSpec(cardinality=batch_size - 1,
                                        normalization_diameter=diameter)
    gt_by_class = {cid: scene.labels.poses[i]
                   for i, cid in enumerate(scene.labels.class_ids)}

    instances = []
    for g_idx, group in enumerate(groups):
        cls = int(group.class_id[0])
        mesh = meshes[cls - 1]
        slot_order = np.argsort(group.kp_index)
        model_pts = np.asarray(model_kps[cls])[group.kp_index[slot_order]]
        pose, rmse = epnp(Correspondences(model_pts=model_pts,
                                          image_pts=group.kp2d[slot_order],
                                          weights=group.score[slot_order]), k)
        if rmse > max_rmse_px:
            continue
        # adjacent vote lobes can yield a second, nearly identical solution;
        # one instance cannot occupy the same pose twice
        duplicate = False
        for prev in instances:
            if prev.class_id != cls:
                continue
            dt = float(np.linalg.norm(prev.pseudo_pose.translation - pose.translation))
            tr = np.trace(prev.pseudo_pose.rotation.T @ pose.rotation)
            ang = math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))
            if dt < 0.1 * mesh.diameter and ang < math.radians(10.0):
                duplicate = True
                break
        if duplicate:
            continue
        gt = gt_by_class.get(cls)
        err = metric_add(mesh, gt, pose) if gt is not None else None

        poses = [pose] + augment_pose(pose, spec, aug_seed + g_idx)
        composites = tuple(
            composite_syn_over_real(scene.depth, scene.labels.mask, mesh, p, k)
            for p in poses)
        instances.append(InstanceEstimate(
            class_id=cls, keypoints=group, pseudo_pose=pose,
            reprojection_rmse=rmse, add_to_gt=err, composites=composites))
    if not instances:
        return PipelineResult(instances=(),
                              diagnostics="no instance passed pose verification")
    return PipelineResult(instances=tuple(instances), diagnostics="ok")
