"""Pose from 2D-3D correspondences: ePnP, Horn alignment, ICP refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, DomainError
from .geometry import CameraIntrinsics, MeshModel, Pose, apply, backproject, project

_PAIRS4 = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


@dataclass(frozen=True, eq=False)
class Correspondences:
    """2D-3D matches; weights in [0, 1] scale each match's squared residual."""

    model_pts: np.ndarray
    image_pts: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        mp = np.asarray(self.model_pts, dtype=np.float64).reshape(-1, 3)
        ip = np.asarray(self.image_pts, dtype=np.float64).reshape(-1, 2)
        w = (np.ones(len(mp)) if self.weights is None
             else np.asarray(self.weights, dtype=np.float64).reshape(-1))
        if len(mp) < 4:
            raise DomainError("need at least 4 correspondences")
        if len(ip) != len(mp) or len(w) != len(mp):
            raise DomainError("correspondence field lengths differ")
        if not (np.all(np.isfinite(mp)) and np.all(np.isfinite(ip)) and np.all(np.isfinite(w))):
            raise DomainError("correspondences must be finite")
        if np.any(w < 0) or np.any(w > 1):
            raise DomainError("weights must lie in [0, 1]")
        if not np.any(w > 0):
            raise DomainError("at least one weight must be positive")
        object.__setattr__(self, "model_pts", mp)
        object.__setattr__(self, "image_pts", ip)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)


def horn_align(src, dst, weights=None) -> Pose:
    """Closed-form weighted rigid alignment: argmin sum w ||R src + t - dst||^2.

    Rotation comes from the SVD of the weighted cross-covariance with the
    determinant corrected to +1.  Collinear sources are rejected because the
    rotation about their axis would be arbitrary.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(dst) != len(src):
        raise DomainError("need >= 3 paired points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise DomainError("weights must have positive mass")
    cs = (w[:, None] * src).sum(axis=0) / wsum
    cd = (w[:, None] * dst).sum(axis=0) / wsum
    p = src - cs
    q = dst - cd
    cov = p.T @ (w[:, None] * q)
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= 1e-12 * s[0]:
        raise DegeneracyError("point set is collinear; rotation is not unique")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cd - r @ cs)


def _control_points(model_pts):
    """Centroid plus scaled principal axes as barycentric control points.

    Near-planar sets get the degenerate axis inflated and the axes mixed
    into a tetrahedral arrangement around the centroid, so that no
    barycentric coordinate is identically zero and the null-space search
    stays well conditioned.  Returns (4, 3) control points.
    """
    centroid = model_pts.mean(axis=0)
    centered = model_pts - centroid
    cov = centered.T @ centered / len(model_pts)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]  # descending
    lengths = np.sqrt(np.maximum(evals, 0.0))
    if lengths[0] <= 0:
        raise DegeneracyError("model points coincide")
    if lengths[1] <= 1e-9 * lengths[0]:
        raise DegeneracyError("model points are collinear")
    if lengths[2] > 1e-6 * lengths[0]:
        axes = evecs * lengths
        return np.vstack([centroid + axes[:, i] for i in range(3)] + [centroid])
    lengths = np.maximum(lengths, 1e-3 * lengths[0])
    axes = evecs * lengths
    tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3.0)
    return centroid + tetra @ axes.T


def _barycentric(model_pts, ctrl):
    a = np.vstack([ctrl.T, np.ones(4)])
    b = np.vstack([model_pts.T, np.ones(len(model_pts))])
    return np.linalg.solve(a, b).T  # (n, 4)


def _build_m(alphas, image_pts, weights, k: CameraIntrinsics):
    n = len(image_pts)
    m = np.zeros((2 * n, 12))
    sw = np.sqrt(weights)
    for i in range(n):
        u, v = image_pts[i]
        for j in range(4):
            a = alphas[i, j]
            m[2 * i, 3 * j] = a * k.fx * sw[i]
            m[2 * i, 3 * j + 2] = a * (k.cx - u) * sw[i]
            m[2 * i + 1, 3 * j + 1] = a * k.fy * sw[i]
            m[2 * i + 1, 3 * j + 2] = a * (k.cy - v) * sw[i]
    return m


def _pairdists(ctrl, squared=False):
    d = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in _PAIRS4])
    return d if squared else np.sqrt(d)


def _build_l(v):
    """(6, 10) linearized distance system over beta products.

    Column order: B11, B12, B13, B14, B22, B23, B24, B33, B34, B44;
    cross columns carry the factor 2 from expanding ||sum_k beta_k dv_k||^2.
    """
    dv = np.stack([v[3 * i:3 * i + 3, :] - v[3 * j:3 * j + 3, :] for i, j in _PAIRS4])
    l = np.zeros((6, 10))
    col = 0
    for a in range(4):
        for b in range(a, 4):
            prod = np.sum(dv[:, :, a] * dv[:, :, b], axis=1)
            l[:, col] = prod if a == b else 2.0 * prod
            col += 1
    return l


def _betas_case2(l, rho):
    sub = l[:, [0, 1, 4]]
    sol, *_ = np.linalg.lstsq(sub, rho, rcond=None)
    betas = np.zeros(4)
    betas[0] = math.sqrt(abs(sol[0]))
    sign = -1.0 if (sol[0] > 0) != (sol[1] > 0) else 1.0
    betas[1] = sign * math.sqrt(abs(sol[2]))
    return betas


def _betas_case3(l, rho):
    sub = l[:, [0, 1, 2, 4, 5, 7]]
    sol, *_ = np.linalg.lstsq(sub, rho, rcond=None)
    betas = np.zeros(4)
    betas[0] = math.sqrt(abs(sol[0]))
    betas[1] = (-1.0 if (sol[0] > 0) != (sol[1] > 0) else 1.0) * math.sqrt(abs(sol[3]))
    betas[2] = (-1.0 if (sol[0] > 0) != (sol[2] > 0) else 1.0) * math.sqrt(abs(sol[5]))
    return betas


def _betas_case4(l, rho):
    # seed all four from the B1k column block; Gauss-Newton does the rest
    sub = l[:, [0, 1, 2, 3]]
    sol, *_ = np.linalg.lstsq(sub, rho, rcond=None)
    betas = np.zeros(4)
    b1 = math.sqrt(abs(sol[0]))
    betas[0] = b1
    if b1 > 0:
        betas[1:] = sol[1:] / b1
    return betas


def _scale_betas(v, betas, dist_w):
    """Rescales betas so implied control-point distances best match the model.

    Beta magnitude matters for Gauss-Newton: the distance residuals are
    quartic in beta, so a seed at the wrong scale starts outside the
    convergence basin.  Sign is immaterial here (products are quadratic).
    """
    ctrl_c = (v @ betas).reshape(4, 3)
    dist_c = _pairdists(ctrl_c)
    denom = float(dist_c @ dist_c)
    if denom <= 0 or not np.isfinite(denom):
        return betas
    return betas * float(dist_c @ dist_w) / denom


def _gauss_newton_betas(v, betas, rho_sq, iters=50):
    dv = np.stack([v[3 * i:3 * i + 3, :] - v[3 * j:3 * j + 3, :] for i, j in _PAIRS4])
    dctdc = np.einsum("pki,pkj->pij", dv, dv)  # (6, 4, 4)
    betas = betas.copy()
    for _ in range(iters):
        jhalf = np.einsum("pij,j->pi", dctdc, betas)  # (6, 4)
        resid = rho_sq - jhalf @ betas
        lhs = 4.0 * jhalf.T @ jhalf
        rhs = 2.0 * jhalf.T @ resid
        try:
            step = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        betas = betas + step
        if float(np.abs(step).max()) < 1e-14:
            break
    return betas


def _reprojection_rmse(pose, model_pts, image_pts, k):
    pts = apply(pose, model_pts)
    if np.any(pts[:, 2] <= 0):
        return math.inf
    err = project(pts, k) - image_pts
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def epnp(c: Correspondences, k: CameraIntrinsics):
    """ePnP pose solver; returns (Pose, reprojection RMSE in pixels).

    Model points are expressed through 4 control points (centroid plus
    principal axes), the 2n x 12 projection system is solved through the 4
    smallest eigenvectors of M^T M, candidate betas for the N in {1,2,3,4}
    cases come from the linearized distance constraints plus Gauss-Newton
    refinement, and every candidate is finished by Horn alignment with the
    best reprojection RMSE winning.
    """
    ctrl_w = _control_points(c.model_pts)
    alphas = _barycentric(c.model_pts, ctrl_w)
    m = _build_m(alphas, c.image_pts, c.weights, k)
    _, evecs = np.linalg.eigh(m.T @ m)
    v = evecs[:, :4]  # ascending eigenvalues: v[:, 0] is the best null direction

    rho = _pairdists(ctrl_w, squared=True)
    dist_w = np.sqrt(rho)
    l = _build_l(v)

    def finish(betas):
        ctrl_c = (v @ betas).reshape(4, 3)
        # scale so control-point distances match the model frame
        dist_c = _pairdists(ctrl_c)
        denom = float(dist_c @ dist_c)
        if denom <= 0 or not np.all(np.isfinite(dist_c)):
            return None
        ctrl_c = ctrl_c * float(dist_c @ dist_w) / denom
        pc = alphas @ ctrl_c
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        try:
            pose = horn_align(c.model_pts, pc, c.weights)
        except DegeneracyError:
            return None
        return pose, _reprojection_rmse(pose, c.model_pts, c.image_pts, k)

    seeds = [
        np.array([1.0, 0.0, 0.0, 0.0]),
        _betas_case2(l, rho),
        _betas_case3(l, rho),
        _betas_case4(l, rho),
    ]
    # fallback starts for wide null spaces (small n): remaining single
    # directions, then paired combinations with both relative signs
    extras = [np.eye(4)[i] for i in (1, 2, 3)]
    extras += [np.eye(4)[0] + s * np.eye(4)[i] for i in (1, 2, 3) for s in (1.0, -1.0)]

    best = None

    def consider(betas):
        nonlocal best
        betas = _scale_betas(v, betas, dist_w)
        for candidate in (betas, _gauss_newton_betas(v, betas, rho)):
            result = finish(candidate)
            if result is not None and (best is None or result[1] < best[1]):
                best = result

    for betas in seeds:
        consider(betas)
        if best is not None and best[1] < 1e-10:
            break
    if best is None or best[1] > 1e-10:
        for betas in extras:
            consider(betas)
            if best is not None and best[1] < 1e-10:
                break
    if best is None:
        raise DegeneracyError("ePnP found no valid pose candidate")
    return best


def _grid_key(p, cell):
    return (int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell)),
            int(math.floor(p[2] / cell)))


class GridNN:
    """Exact nearest neighbor via a uniform hash grid with expanding shells.

    The shell search stops once every unvisited cell is provably farther
    than the best hit: a cell at Chebyshev ring s only holds points at
    distance >= (s - 1) * cell.
    """

    def __init__(self, points, cell=0.01):
        if cell <= 0:
            raise DomainError("grid cell must be positive")
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        self.table = {}
        for i, p in enumerate(self.points):
            self.table.setdefault(_grid_key(p, self.cell), []).append(i)
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        self.max_ring = int(np.ceil((hi - lo).max() / self.cell)) + 2

    def query(self, q):
        """Return (index, distance) of the nearest stored point."""
        q = np.asarray(q, dtype=np.float64)
        kx, ky, kz = _grid_key(q, self.cell)
        best_i, best_d2 = -1, math.inf
        for ring in range(self.max_ring + 1):
            if best_i >= 0 and (ring - 1) * self.cell > math.sqrt(best_d2):
                break
            for cx in range(kx - ring, kx + ring + 1):
                for cy in range(ky - ring, ky + ring + 1):
                    for cz in range(kz - ring, kz + ring + 1):
                        if max(abs(cx - kx), abs(cy - ky), abs(cz - kz)) != ring:
                            continue
                        for i in self.table.get((cx, cy, cz), ()):
                            d = self.points[i] - q
                            d2 = float(d @ d)
                            if d2 < best_d2:
                                best_d2, best_i = d2, i
        if best_i < 0:
            raise DomainError("nearest-neighbor query on empty grid")
        return best_i, math.sqrt(best_d2)


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    skipped: bool
    n_iters: int
    objective: tuple = field(default=())  # mean squared NN distance per iteration


def icp_refine(pose0: Pose, mesh: MeshModel, depth, mask, k: CameraIntrinsics,
               max_iters: int = 30, tol: float = 1e-10,
               min_points: int = 100, nn_cell: float = 0.01) -> IcpResult:
    """Point-to-point ICP of back-projected masked depth against mesh vertices.

    Scenes with fewer than min_points masked pixels are not refined; the
    input pose comes back with skipped=True.  The recorded objective is
    non-increasing across iterations.
    """
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    if len(ys) < min_points:
        return IcpResult(pose=pose0, skipped=True, n_iters=0)
    pix = np.stack([xs + 0.5, ys + 0.5], axis=1)
    scene = backproject(pix, np.asarray(depth, dtype=np.float64)[ys, xs], k)

    pose = pose0
    trace = []
    for it in range(max_iters):
        moved = apply(pose, mesh.vertices)
        nn = GridNN(moved, cell=nn_cell)
        idx = np.empty(len(scene), dtype=np.int64)
        d2 = 0.0
        for i, p in enumerate(scene):
            j, dist = nn.query(p)
            idx[i] = j
            d2 += dist * dist
        trace.append(d2 / len(scene))
        try:
            new_pose = horn_align(mesh.vertices[idx], scene)
        except DegeneracyError:
            break  # matches collapsed onto a line; keep the last stable pose
        delta = max(np.max(np.abs(new_pose.rotation - pose.rotation)),
                    np.max(np.abs(new_pose.translation - pose.translation)))
        pose = new_pose
        if delta < tol:
            break
    return IcpResult(pose=pose, skipped=False, n_iters=len(trace),
                     objective=tuple(trace))
