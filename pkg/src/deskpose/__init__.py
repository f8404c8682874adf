"""Desk-scale 6DoF pose toolkit.

Synthetic labeled-scene generation, keypoint voting over radial maps,
perspective-n-point pose recovery, kernel-based domain-gap measurement,
pseudo-pose self-supervision plumbing, and pose-accuracy metrics.
"""

from .errors import (
    CapacityError,
    DegeneracyError,
    DomainError,
    FitDivergenceError,
)
from .formats import (
    dump_json,
    intrinsics_from_json,
    intrinsics_to_json,
    load_json,
    pose_from_json,
    pose_to_json,
    read_rkr1,
    write_rkr1,
)
from .geometry import (
    CameraIntrinsics,
    MeshModel,
    Pose,
    apply,
    backproject,
    compose,
    invert,
    load_off,
    max_pairwise_distance,
    project,
    rotation_zyx,
    rotational_symmetries_z,
    save_off,
)
from .metrics import (
    ArRecall,
    VsdResult,
    add,
    add_s,
    add_s_auc,
    add_threshold_accuracy,
    ar_recall,
    mspd,
    mssd,
    vsd,
)
from .pnp import (
    Correspondences,
    GridNN,
    IcpResult,
    epnp,
    horn_align,
    icp_refine,
)
from .primitives import cube, cylinder, icosphere
from .rkhs import (
    FitResult,
    KernelWeights,
    LinearKernel,
    MMDGradient,
    MMDReport,
    RbfKernel,
    fit_kernel_weights,
    kernel_linear_trainable,
    kernel_rbf_trainable,
    kl_divergence_gaussianized,
    lift_features,
    mmd_biased,
    mmd_grad_weights,
    mmd_offdiag,
    mmd_unbiased,
    wasserstein_1d_sliced,
)
from .selfsup import (
    AugmentationSpec,
    InstanceEstimate,
    LossWeights,
    PipelineResult,
    ScheduleState,
    augment_pose,
    composite_syn_over_real,
    corrupt_radial_maps,
    cross_entropy,
    pseudo_label_pipeline,
    schedule_controller,
    smooth_l1,
    total_loss,
)
from .synth import (
    LabelSet,
    PlacementBox,
    RadialMapStack,
    SceneSample,
    generate_scene,
    make_radial_maps,
    normalize_depth_local,
    normalize_keypoints2d,
    render_depth,
    render_scene_depth,
    select_keypoints_fps,
)
from .voting import (
    GridSpec,
    KeypointSet,
    PeakEstimate,
    VoteGrid,
    candidate_sort_order,
    extract_peak,
    extract_peaks,
    group_instances,
    invert_radial_map,
    pairwise_distance_discrepancy,
    refine_keypoint,
    reject_free_space_peaks,
    vote_radial,
)

__version__ = "0.1.0"

__all__ = [
    "ArRecall",
    "AugmentationSpec",
    "CameraIntrinsics",
    "CapacityError",
    "Correspondences",
    "DegeneracyError",
    "DomainError",
    "FitDivergenceError",
    "FitResult",
    "GridNN",
    "GridSpec",
    "IcpResult",
    "InstanceEstimate",
    "KernelWeights",
    "KeypointSet",
    "LabelSet",
    "LinearKernel",
    "LossWeights",
    "MMDGradient",
    "MMDReport",
    "MeshModel",
    "PeakEstimate",
    "PipelineResult",
    "PlacementBox",
    "Pose",
    "RadialMapStack",
    "RbfKernel",
    "SceneSample",
    "ScheduleState",
    "VoteGrid",
    "VsdResult",
    "add",
    "add_s",
    "add_s_auc",
    "add_threshold_accuracy",
    "apply",
    "ar_recall",
    "augment_pose",
    "backproject",
    "candidate_sort_order",
    "compose",
    "composite_syn_over_real",
    "corrupt_radial_maps",
    "cross_entropy",
    "cube",
    "cylinder",
    "dump_json",
    "epnp",
    "extract_peak",
    "extract_peaks",
    "fit_kernel_weights",
    "generate_scene",
    "group_instances",
    "horn_align",
    "icosphere",
    "icp_refine",
    "intrinsics_from_json",
    "intrinsics_to_json",
    "invert",
    "invert_radial_map",
    "kernel_linear_trainable",
    "kernel_rbf_trainable",
    "kl_divergence_gaussianized",
    "lift_features",
    "load_json",
    "load_off",
    "make_radial_maps",
    "max_pairwise_distance",
    "mmd_biased",
    "mmd_grad_weights",
    "mmd_offdiag",
    "mmd_unbiased",
    "mspd",
    "mssd",
    "normalize_depth_local",
    "normalize_keypoints2d",
    "pairwise_distance_discrepancy",
    "pose_from_json",
    "pose_to_json",
    "project",
    "pseudo_label_pipeline",
    "read_rkr1",
    "refine_keypoint",
    "reject_free_space_peaks",
    "render_depth",
    "render_scene_depth",
    "rotation_zyx",
    "rotational_symmetries_z",
    "save_off",
    "schedule_controller",
    "select_keypoints_fps",
    "smooth_l1",
    "total_loss",
    "vote_radial",
    "vsd",
    "wasserstein_1d_sliced",
    "write_rkr1",
]
