"""Synthetic labeled-scene generation.

Raster conventions: depth maps are (H, W) float32 in meters with background
exactly 0; instance masks are (H, W) int32 with 0 = background; radial maps
are (H, W) float32 in meters with background exactly -1.  Pixel (ix, iy)
samples the continuous image point (ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import CapacityError, DomainError
from .geometry import CameraIntrinsics, MeshModel, Pose, apply, backproject, project, rotation_zyx

RADIAL_BACKGROUND = -1.0


@njit(cache=True)
def _raster_triangles(u, v, z, faces, zbuf, inst, instance_id):
    """Z-buffer the projected triangles in place (pixel-center sampling)."""
    height, width = zbuf.shape
    for t in range(faces.shape[0]):
        i0, i1, i2 = faces[t, 0], faces[t, 1], faces[t, 2]
        x0, y0, z0 = u[i0], v[i0], z[i0]
        x1, y1, z1 = u[i1], v[i1], z[i1]
        x2, y2, z2 = u[i2], v[i2], z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = min(x0, min(x1, x2))
        xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2))
        ymax = max(y0, max(y1, y2))
        ix0 = max(0, int(math.ceil(xmin - 0.5)))
        ix1 = min(width - 1, int(math.floor(xmax - 0.5)))
        iy0 = max(0, int(math.ceil(ymin - 0.5)))
        iy1 = min(height - 1, int(math.floor(ymax - 0.5)))
        if ix1 < ix0 or iy1 < iy0:
            continue
        inv_area = 1.0 / area
        for iy in range(iy0, iy1 + 1):
            py = iy + 0.5
            for ix in range(ix0, ix1 + 1):
                px = ix + 0.5
                w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) * inv_area
                w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) * inv_area
                w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) * inv_area
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # perspective-correct: 1/z is affine over the screen triangle
                inv_z = w0 / z0 + w1 / z1 + w2 / z2
                depth = 1.0 / inv_z
                if depth < zbuf[iy, ix]:
                    zbuf[iy, ix] = depth
                    inst[iy, ix] = instance_id


def _project_vertices(mesh: MeshModel, pose: Pose, k: CameraIntrinsics):
    pts = apply(pose, mesh.vertices)
    if np.any(pts[:, 2] <= 1e-9):
        raise DomainError("object must lie fully in front of the camera")
    pix = project(pts, k)
    return pix[:, 0], pix[:, 1], pts[:, 2]


def render_scene_depth(meshes, poses, k: CameraIntrinsics):
    """Render several posed meshes into one (depth, instance-mask) pair.

    Instance ids are 1-based in mesh order; an empty scene renders to zeros.
    """
    zbuf = np.full((k.height, k.width), np.inf, dtype=np.float64)
    inst = np.zeros((k.height, k.width), dtype=np.int32)
    for idx, (mesh, pose) in enumerate(zip(meshes, poses)):
        u, v, z = _project_vertices(mesh, pose, k)
        _raster_triangles(u, v, z, mesh.faces, zbuf, inst, idx + 1)
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0).astype(np.float32)
    return depth, inst


def render_depth(mesh: MeshModel, pose: Pose, k: CameraIntrinsics):
    """Render one mesh; returns (depth float32, mask int32 with ids {0,1})."""
    return render_scene_depth([mesh], [pose], k)


def select_keypoints_fps(mesh: MeshModel, n: int, seed: int = 0) -> np.ndarray:
    """Farthest-point sampling over mesh vertices.

    The first point is the vertex farthest from the centroid; each next point
    maximizes the distance to the already-chosen set.  The seed only breaks
    exact distance ties, so the result is deterministic.
    """
    if n < 1:
        raise DomainError("keypoint count must be >= 1")
    verts = mesh.vertices
    if n > len(verts):
        raise DomainError("more keypoints requested than mesh vertices")
    rng = np.random.default_rng(seed)

    def argmax_tiebreak(d2):
        ties = np.flatnonzero(d2 == d2.max())
        if len(ties) == 1:
            return int(ties[0])
        return int(ties[rng.integers(len(ties))])

    centroid = verts.mean(axis=0)
    first = argmax_tiebreak(np.sum((verts - centroid) ** 2, axis=1))
    chosen = [first]
    min_d2 = np.sum((verts - verts[first]) ** 2, axis=1)
    while len(chosen) < n:
        nxt = argmax_tiebreak(min_d2)
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, np.sum((verts - verts[nxt]) ** 2, axis=1))
    return verts[np.array(chosen, dtype=np.int64)].copy()


def make_radial_maps(depth, fg_mask, pose: Pose, keypoints3d, k: CameraIntrinsics) -> np.ndarray:
    """Per-keypoint (H, W) rasters of distances from back-projected foreground
    pixels to the posed keypoint; background pixels are exactly -1."""
    keypoints3d = np.asarray(keypoints3d, dtype=np.float64).reshape(-1, 3)
    maps = np.full((len(keypoints3d), depth.shape[0], depth.shape[1]),
                   RADIAL_BACKGROUND, dtype=np.float32)
    ys, xs = np.nonzero(fg_mask)
    if len(ys) == 0:
        return maps
    pix = np.stack([xs + 0.5, ys + 0.5], axis=1)
    pts = backproject(pix, np.asarray(depth, dtype=np.float64)[ys, xs], k)
    for j, kp in enumerate(apply(pose, keypoints3d)):
        maps[j, ys, xs] = np.linalg.norm(pts - kp, axis=1).astype(np.float32)
    return maps


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Ground-truth labels for one rendered scene.

    keypoints3d/keypoints2d are (n_instances, n_keypoints, 3|2); class ids are
    1-based per instance; the mask stores 1-based instance ids.
    """

    poses: tuple
    class_ids: tuple
    mask: np.ndarray
    keypoints3d: np.ndarray
    keypoints2d: np.ndarray


@dataclass(frozen=True, eq=False)
class RadialMapStack:
    """Stacked radial maps with the identity of each map's keypoint.

    maps[i] belongs to instance instance_ids[i] (1-based), class class_ids[i],
    and keypoint slot kp_index[i] of that class's model keypoint set.
    """

    maps: np.ndarray
    instance_ids: np.ndarray
    class_ids: np.ndarray
    kp_index: np.ndarray


@dataclass(frozen=True, eq=False)
class SceneSample:
    depth: np.ndarray
    labels: LabelSet
    radial: RadialMapStack


@dataclass(frozen=True)
class PlacementBox:
    """Axis-aligned camera-frame box for object centroid placement (meters)."""

    lo: tuple = (-0.05, -0.03, 0.45)
    hi: tuple = (0.05, 0.03, 0.60)


def _sphere_in_view(center, radius, k: CameraIntrinsics, margin=1.0) -> bool:
    cx, cy, cz = center
    if cz - radius <= 1e-3:
        return False
    u, v = project(np.array([cx, cy, cz]), k)
    ru = k.fx * radius / (cz - radius)
    rv = k.fy * radius / (cz - radius)
    return (u - ru >= margin and u + ru <= k.width - margin
            and v - rv >= margin and v + rv <= k.height - margin)


def generate_scene(meshes, rng_seed: int, k: CameraIntrinsics,
                   placement_box: PlacementBox | None = None,
                   n_keypoints: int = 4, keypoint_seed: int = 0,
                   max_retries: int = 200) -> SceneSample:
    """Place meshes at random non-overlapping poses and emit full labels.

    Placement rejects poses whose bounding spheres intersect an accepted
    object or leave the view frustum; class id of meshes[i] is i + 1.
    Deterministic given rng_seed.
    """
    if len(meshes) == 0:
        raise DomainError("scene needs at least one mesh")
    box = placement_box or PlacementBox()
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)

    poses, spheres = [], []
    for mesh in meshes:
        center_model, radius = mesh.bounding_sphere()
        for attempt in range(max_retries + 1):
            if attempt == max_retries:
                raise CapacityError(
                    f"could not place object after {max_retries} attempts")
            rot = rotation_zyx(rng.uniform(-math.pi, math.pi, 3))
            pose = Pose(rot, rng.uniform(lo, hi))
            center = apply(pose, center_model)
            if not _sphere_in_view(center, radius, k):
                continue
            if all(np.linalg.norm(center - c) > radius + r for c, r in spheres):
                poses.append(pose)
                spheres.append((center, radius))
                break

    depth, mask = render_scene_depth(meshes, poses, k)

    kp3d_per_class = [select_keypoints_fps(m, n_keypoints, keypoint_seed) for m in meshes]
    kps3d = np.stack([kp3d_per_class[i] for i in range(len(meshes))])
    kps2d = np.stack([project(apply(poses[i], kps3d[i]), k) for i in range(len(meshes))])

    maps, inst_ids, cls_ids, kp_idx = [], [], [], []
    for i, pose in enumerate(poses):
        stack = make_radial_maps(depth, mask == i + 1, pose, kps3d[i], k)
        for j in range(n_keypoints):
            maps.append(stack[j])
            inst_ids.append(i + 1)
            cls_ids.append(i + 1)
            kp_idx.append(j)

    labels = LabelSet(
        poses=tuple(poses),
        class_ids=tuple(range(1, len(meshes) + 1)),
        mask=mask,
        keypoints3d=kps3d,
        keypoints2d=kps2d,
    )
    radial = RadialMapStack(
        maps=np.stack(maps),
        instance_ids=np.array(inst_ids, dtype=np.int32),
        class_ids=np.array(cls_ids, dtype=np.int32),
        kp_index=np.array(kp_idx, dtype=np.int32),
    )
    return SceneSample(depth=depth, labels=labels, radial=radial)


def normalize_depth_local(depth) -> np.ndarray:
    """Map foreground depth into [0, 1] by its own min/max; background stays 0."""
    out = np.zeros_like(depth, dtype=np.float32)
    fg = depth > 0
    if not np.any(fg):
        return out
    lo = float(depth[fg].min())
    hi = float(depth[fg].max())
    if hi > lo:
        out[fg] = (depth[fg] - lo) / (hi - lo)
    return out


def normalize_keypoints2d(kps2d, k: CameraIntrinsics) -> np.ndarray:
    """Scale pixel coordinates by image width/height into [0, 1]^2."""
    kps = np.asarray(kps2d, dtype=np.float64)
    return np.stack([kps[..., 0] / k.width, kps[..., 1] / k.height], axis=-1)
