"""Accumulator-space keypoint voting on radial maps, plus instance grouping.

Every foreground pixel back-projects to a 3D point and votes for the shell of
voxels whose centers lie within voxel_size/2 of the sphere of its radial
value.  Keypoints are vote peaks; candidate keypoints are then grouped into
object instances by comparing pairwise distances against the model keypoints.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import CapacityError, DomainError
from .geometry import CameraIntrinsics, backproject, project
from .synth import RADIAL_BACKGROUND, RadialMapStack


@dataclass(frozen=True)
class GridSpec:
    """Voting-grid configuration.

    With origin/dims unset the grid is fitted to the back-projected
    foreground bounding box padded by the largest radius.  dims products
    beyond max_voxels raise CapacityError.
    """

    voxel_size: float = 0.005
    max_voxels: int = 20_000_000
    origin: tuple | None = None
    dims: tuple | None = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise DomainError("voxel size must be positive")
        if self.max_voxels < 1:
            raise DomainError("voxel budget must be positive")


@dataclass(frozen=True, eq=False)
class VoteGrid:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    counts: np.ndarray
    n_sources: int  # foreground pixels that cast votes; denominator of peak scores

    def voxel_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size


@njit(cache=True)
def _cast_shell_votes(centers, radii, origin, voxel, nx, ny, nz, counts):
    """Increment every voxel whose center is within voxel/2 of each sphere.

    Per (ix, iy) column the admissible z offsets satisfy
    (r - voxel/2)^2 - rho^2 <= dz^2 <= (r + voxel/2)^2 - rho^2,
    which gives at most two contiguous index runs.
    """
    half = voxel / 2.0
    ox, oy, oz = origin[0], origin[1], origin[2]
    for p in range(centers.shape[0]):
        cx, cy, cz = centers[p, 0], centers[p, 1], centers[p, 2]
        r = radii[p]
        r_out = r + half
        r_in = r - half
        ix0 = max(0, int(math.floor((cx - r_out - ox) / voxel)))
        ix1 = min(nx - 1, int(math.floor((cx + r_out - ox) / voxel)))
        for ix in range(ix0, ix1 + 1):
            dx = ox + (ix + 0.5) * voxel - cx
            rem = r_out * r_out - dx * dx
            if rem < 0.0:
                continue
            wy = math.sqrt(rem)
            iy0 = max(0, int(math.floor((cy - wy - oy) / voxel)))
            iy1 = min(ny - 1, int(math.floor((cy + wy - oy) / voxel)))
            for iy in range(iy0, iy1 + 1):
                dy = oy + (iy + 0.5) * voxel - cy
                rho2 = dx * dx + dy * dy
                hi2 = r_out * r_out - rho2
                if hi2 < 0.0:
                    continue
                dz_hi = math.sqrt(hi2)
                lo2 = r_in * r_in - rho2 if r_in > 0.0 else -1.0
                if lo2 <= 0.0:
                    za = int(math.ceil((cz - dz_hi - oz) / voxel - 0.5))
                    zb = int(math.floor((cz + dz_hi - oz) / voxel - 0.5))
                    for iz in range(max(0, za), min(nz - 1, zb) + 1):
                        counts[ix, iy, iz] += 1
                else:
                    dz_lo = math.sqrt(lo2)
                    za = int(math.ceil((cz - dz_hi - oz) / voxel - 0.5))
                    zb = int(math.floor((cz - dz_lo - oz) / voxel - 0.5))
                    for iz in range(max(0, za), min(nz - 1, zb) + 1):
                        counts[ix, iy, iz] += 1
                    za = int(math.ceil((cz + dz_lo - oz) / voxel - 0.5))
                    zb = int(math.floor((cz + dz_hi - oz) / voxel - 0.5))
                    for iz in range(max(0, za), min(nz - 1, zb) + 1):
                        counts[ix, iy, iz] += 1


def invert_radial_map(maps, v_min: float, v_max: float) -> np.ndarray:
    """Affine order-reversing normalization of foreground radial values.

    v_max maps to 0, v_min to 1 (values clamped into [v_min, v_max] first);
    background stays exactly -1.
    """
    if not v_max > v_min:
        raise DomainError("v_max must exceed v_min")
    maps = np.asarray(maps, dtype=np.float32)
    fg = maps != RADIAL_BACKGROUND
    out = np.full_like(maps, RADIAL_BACKGROUND)
    clamped = np.clip(maps[fg], v_min, v_max)
    out[fg] = ((v_max - clamped) / (v_max - v_min)).astype(np.float32)
    return out


def _fit_grid(points, r_max: float, spec: GridSpec):
    pad = r_max + spec.voxel_size
    lo = points.min(axis=0) - pad
    hi = points.max(axis=0) + pad
    dims = np.maximum(np.ceil((hi - lo) / spec.voxel_size).astype(np.int64), 1)
    return lo, tuple(int(d) for d in dims)


def vote_radial(radial_maps, depth, k: CameraIntrinsics, spec: GridSpec | None = None):
    """Build one VoteGrid per radial map.

    Accepts a RadialMapStack or a plain (n, H, W) array.  Background pixels
    (value -1) cast no votes; the grid covers the back-projected foreground
    padded by the map's largest radius unless the spec fixes origin/dims.
    """
    spec = spec or GridSpec()
    maps = radial_maps.maps if isinstance(radial_maps, RadialMapStack) else np.asarray(radial_maps)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.shape[1:] != depth.shape:
        raise DomainError("radial maps and depth map shapes differ")

    grids = []
    for m in maps:
        fg = (m != RADIAL_BACKGROUND) & (depth > 0)
        ys, xs = np.nonzero(fg)
        if len(ys) == 0:
            grids.append(VoteGrid(origin=np.zeros(3), voxel_size=spec.voxel_size,
                                  dims=(1, 1, 1),
                                  counts=np.zeros((1, 1, 1), dtype=np.int32),
                                  n_sources=0))
            continue
        radii = m[ys, xs].astype(np.float64)
        if np.any(radii < 0):
            raise DomainError("foreground radial values must be non-negative")
        pix = np.stack([xs + 0.5, ys + 0.5], axis=1)
        pts = backproject(pix, np.asarray(depth, dtype=np.float64)[ys, xs], k)
        if spec.origin is not None and spec.dims is not None:
            origin = np.asarray(spec.origin, dtype=np.float64)
            dims = tuple(int(d) for d in spec.dims)
        else:
            origin, dims = _fit_grid(pts, float(radii.max()), spec)
        if dims[0] * dims[1] * dims[2] > spec.max_voxels:
            raise CapacityError(f"vote grid {dims} exceeds {spec.max_voxels} voxels")
        counts = np.zeros(dims, dtype=np.int32)
        _cast_shell_votes(pts, radii, origin, spec.voxel_size,
                          dims[0], dims[1], dims[2], counts)
        grids.append(VoteGrid(origin=origin, voxel_size=spec.voxel_size,
                              dims=dims, counts=counts, n_sources=len(ys)))
    return grids


@dataclass(frozen=True)
class PeakEstimate:
    point: np.ndarray
    score: float


def _com_refine(grid: VoteGrid, counts, ix, iy, iz) -> np.ndarray:
    sl = tuple(slice(max(c - 1, 0), c + 2) for c in (ix, iy, iz))
    block = counts[sl].astype(np.float64)
    axes = [np.arange(s.start, min(s.stop, n)) for s, n in zip(sl, counts.shape)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    total = block.sum()
    com_index = np.array([
        (gx * block).sum() / total,
        (gy * block).sum() / total,
        (gz * block).sum() / total,
    ])
    return grid.origin + (com_index + 0.5) * grid.voxel_size


def extract_peaks(grid: VoteGrid, max_peaks: int = 4, min_separation: int = 2,
                  min_fraction: float = 0.5) -> list[PeakEstimate]:
    """Strongest vote peaks, best first, refined by 3x3x3 center of mass.

    Radial voting from a near-planar surface patch builds two symmetric
    lobes (the true keypoint and its mirror through the patch plane), so a
    single argmax is ambiguous; returning the near-tied peaks lets instance
    grouping pick the combination consistent with the model's pairwise
    distances.  Peaks within min_separation voxels (Chebyshev) of a stronger
    one are suppressed, and peaks below min_fraction of the best are dropped.
    """
    if max_peaks < 1:
        raise DomainError("max_peaks must be at least 1")
    counts = grid.counts
    if counts.size == 0 or counts.max() == 0:
        return []
    scratch = counts.copy()
    best_count = int(counts.max())
    out: list[PeakEstimate] = []
    while len(out) < max_peaks:
        ix, iy, iz = np.unravel_index(int(np.argmax(scratch)), counts.shape)
        peak = int(scratch[ix, iy, iz])
        if peak == 0 or peak < min_fraction * best_count:
            break
        point = _com_refine(grid, counts, ix, iy, iz)
        score = min(1.0, peak / grid.n_sources) if grid.n_sources > 0 else 0.0
        out.append(PeakEstimate(point=point, score=score))
        sl = tuple(slice(max(c - min_separation, 0), c + min_separation + 1)
                   for c in (ix, iy, iz))
        scratch[sl] = 0
    return out


def extract_peak(grid: VoteGrid) -> PeakEstimate | None:
    """Argmax voxel (lowest linear index on ties) refined by the center of
    mass of its 3x3x3 neighborhood; None when the grid holds no votes."""
    peaks = extract_peaks(grid, max_peaks=1)
    return peaks[0] if peaks else None


def refine_keypoint(point, radial_map, depth, k: CameraIntrinsics,
                    iters: int = 15) -> np.ndarray:
    """Sub-voxel keypoint refinement by sphere fitting.

    Minimizes sum_i (||x - s_i|| - r_i)^2 over the voting sources s_i
    (back-projected foreground pixels) with Gauss-Newton, seeded at a vote
    peak.  Voxel quantization limits the raw peak to about a voxel of error,
    and an elongated near-tie trench along the surface-patch normal can
    stretch that further; the continuous fit removes both, converging to the
    exact keypoint on exact radial maps.  The seed must already be in the
    right basin (peaks in observed free space are someone else's problem).
    """
    radial_map = np.asarray(radial_map)
    depth = np.asarray(depth)
    fg = (radial_map != RADIAL_BACKGROUND) & (depth > 0)
    if not np.any(fg):
        raise DomainError("radial map holds no voting sources")
    iy, ix = np.nonzero(fg)
    pixels = np.stack([ix + 0.5, iy + 0.5], axis=1)
    sources = backproject(pixels, depth[iy, ix], k)
    radii = radial_map[iy, ix].astype(np.float64)

    x = np.asarray(point, dtype=np.float64).copy()
    diff = x - sources
    dist = np.linalg.norm(diff, axis=1)
    best = float(np.sum((dist - radii) ** 2))
    for _ in range(iters):
        safe = np.maximum(dist, 1e-12)
        resid = dist - radii
        jac = diff / safe[:, None]
        lhs = jac.T @ jac
        rhs = jac.T @ resid
        try:
            step = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            break
        # backtrack: quantized seeds sit close, so a halved step always exists
        improved = False
        for _ in range(6):
            cand = x - step
            diff_c = cand - sources
            dist_c = np.linalg.norm(diff_c, axis=1)
            obj = float(np.sum((dist_c - radii) ** 2))
            if obj < best:
                x, diff, dist, best = cand, diff_c, dist_c, obj
                improved = True
                break
            step = 0.5 * step
        if not improved:
            break
    return x


def reject_free_space_peaks(peaks, depth, k: CameraIntrinsics,
                            tolerance: float = 0.01,
                            pixel_slack: int = 2) -> list[PeakEstimate]:
    """Drops peak candidates that float in observed free space.

    A keypoint is a point of an opaque object, so the ray from the camera
    through it must first pierce some visible surface: its pixel (or a
    pixel_slack neighborhood, allowing for estimation error near the
    silhouette) must hold a depth no more than tolerance behind the
    candidate.  The spurious second lobe that radial voting builds from a
    near-planar surface patch is the keypoint's reflection through that
    patch; it hangs in front of the surface or off the silhouette entirely,
    where the depth map proves there is nothing to vote for.
    """
    if tolerance <= 0:
        raise DomainError("tolerance must be positive")
    if pixel_slack < 0:
        raise DomainError("pixel_slack must be non-negative")
    depth = np.asarray(depth)
    kept = []
    for peak in peaks:
        if peak.point[2] <= 0:
            continue
        u, v = project(peak.point, k)
        ix = int(math.floor(u))
        iy = int(math.floor(v))
        x0 = max(ix - pixel_slack, 0)
        x1 = min(ix + pixel_slack + 1, k.width)
        y0 = max(iy - pixel_slack, 0)
        y1 = min(iy + pixel_slack + 1, k.height)
        window = depth[y0:y1, x0:x1]
        supported = (window.size > 0 and bool(
            np.any((window > 0) & (window - float(peak.point[2]) <= tolerance))))
        if supported:
            kept.append(peak)
    return kept


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Flat candidate keypoint table.

    kp_index identifies which model keypoint slot each candidate claims;
    class_id 0 marks background candidates, which pose estimation ignores.
    Rows are kept sorted by (class_id asc, score desc).
    """

    kp2d: np.ndarray
    kp3d: np.ndarray
    class_id: np.ndarray
    score: np.ndarray
    kp_index: np.ndarray

    def __len__(self):
        return len(self.score)

    @staticmethod
    def build(kp2d, kp3d, class_id, score, kp_index) -> "KeypointSet":
        kp2d = np.asarray(kp2d, dtype=np.float64).reshape(-1, 2)
        kp3d = np.asarray(kp3d, dtype=np.float64).reshape(-1, 3)
        class_id = np.asarray(class_id, dtype=np.int32).reshape(-1)
        score = np.asarray(score, dtype=np.float64).reshape(-1)
        kp_index = np.asarray(kp_index, dtype=np.int32).reshape(-1)
        if not (len(kp2d) == len(kp3d) == len(class_id) == len(score) == len(kp_index)):
            raise DomainError("keypoint field lengths differ")
        if np.any(score < 0) or np.any(score > 1):
            raise DomainError("scores must lie in [0, 1]")
        order = candidate_sort_order(class_id, score)
        return KeypointSet(kp2d[order], kp3d[order], class_id[order],
                           score[order], kp_index[order])


def candidate_sort_order(class_id, score) -> np.ndarray:
    """Row order KeypointSet keeps: class ascending, then score descending.

    Exposed so per-row side data (for example evidence tags for
    group_instances) can be permuted to match a built KeypointSet.
    """
    return np.lexsort((-np.asarray(score), np.asarray(class_id)))


def pairwise_distance_discrepancy(kps3d, model_kps3d) -> float:
    """Mean over point pairs of | ||k_i - k_j|| - ||m_i - m_j|| |."""
    k = np.asarray(kps3d, dtype=np.float64)
    m = np.asarray(model_kps3d, dtype=np.float64)
    if k.shape != m.shape or len(k) < 2:
        raise DomainError("need matching point sets with >= 2 points")
    iu = np.triu_indices(len(k), 1)
    dk = np.linalg.norm(k[iu[0]] - k[iu[1]], axis=1)
    dm = np.linalg.norm(m[iu[0]] - m[iu[1]], axis=1)
    return float(np.mean(np.abs(dk - dm)))


_MAX_HYPOTHESES = 100_000
_SLOT_CANDIDATE_CAP = 8


def _orientation_reference(model):
    """Slot quadruple with the largest |signed volume| plus its sign.

    Pairwise distances are blind to reflections, but a mirrored candidate
    set flips the signed volume of every non-degenerate slot quadruple.
    Returns (indices, sign) or None when the model keypoints are coplanar.
    """
    best = None
    for quad in itertools.combinations(range(len(model)), 4):
        p = model[list(quad)]
        vol = float(np.linalg.det(p[1:] - p[0]))
        if best is None or abs(vol) > abs(best[1]):
            best = (quad, vol)
    if best is None or abs(best[1]) < 1e-12:
        return None
    return best[0], math.copysign(1.0, best[1])


def group_instances(kps: KeypointSet, model_kps3d, max_discrepancy=None,
                    evidence_id=None):
    """Partition candidate keypoints into object instances.

    model_kps3d maps class_id -> (n_slots, 3) model keypoints.  For every
    full assignment (one candidate per slot) the mean pairwise-distance
    discrepancy against the model keypoints is computed; assignments are
    accepted greedily in ascending discrepancy order, each candidate used at
    most once.  Assignments whose keypoints form a reflection of the model
    (opposite signed volume) are rejected outright, since a mirror set
    matches all pairwise distances yet corresponds to no rigid pose.
    Instances need all slots filled (>= 4 keypoints for ePnP downstream), so
    classes with an empty slot yield nothing.

    evidence_id optionally tags each candidate row with the source it was
    extracted from (for example the accumulator it peaked in).  Alternative
    peaks of one source describe the same physical keypoint, so accepted
    assignments must draw on disjoint sources, not merely disjoint rows;
    without tags every row counts as its own source.
    """
    if evidence_id is None:
        evidence = np.arange(len(kps))
    else:
        evidence = np.asarray(evidence_id)
        if evidence.shape != (len(kps),):
            raise DomainError("evidence_id must tag every candidate row")
    instances = []
    for cls in sorted(int(c) for c in np.unique(kps.class_id)):
        if cls == 0 or cls not in model_kps3d:
            continue
        model = np.asarray(model_kps3d[cls], dtype=np.float64)
        n_slots = len(model)
        slots = []
        for s in range(n_slots):
            idx = np.flatnonzero((kps.class_id == cls) & (kps.kp_index == s))
            if len(idx) == 0:
                slots = None
                break
            # highest-score candidates first so any cap keeps the best ones
            idx = idx[np.argsort(-kps.score[idx], kind="stable")]
            slots.append(idx)
        if slots is None:
            continue
        n_hyp = math.prod(len(s) for s in slots)
        if n_hyp > _MAX_HYPOTHESES:
            slots = [s[:_SLOT_CANDIDATE_CAP] for s in slots]
        orient = _orientation_reference(model) if n_slots >= 4 else None

        scored = []
        for combo in itertools.product(*slots):
            pts = kps.kp3d[list(combo)]
            if orient is not None:
                quad, sign = orient
                p = pts[list(quad)]
                if float(np.linalg.det(p[1:] - p[0])) * sign < 0:
                    continue
            disc = pairwise_distance_discrepancy(pts, model)
            scored.append((disc, combo))
        scored.sort(key=lambda t: (t[0], t[1]))

        used = set()
        for disc, combo in scored:
            if any(evidence[i] in used for i in combo):
                continue
            if max_discrepancy is not None and disc > max_discrepancy:
                continue
            used.update(evidence[i] for i in combo)
            sel = list(combo)
            instances.append(KeypointSet.build(
                kps.kp2d[sel], kps.kp3d[sel], kps.class_id[sel],
                kps.score[sel], kps.kp_index[sel]))
    return instances
