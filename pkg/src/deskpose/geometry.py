"""Rigid-body transforms, pinhole camera model, and triangle-mesh containers.

Conventions used throughout the toolkit:

* camera frame: +z forward, +x right, +y down; all lengths in meters
* image frame: u right, v down, origin at the top-left pixel corner
* rotations are 3x3 orthonormal matrices with determinant +1
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

_ORTHO_TOL = 1e-9


def _as_readonly(a, dtype, shape):
    out = np.array(a, dtype=dtype).reshape(shape)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_readonly(self.rotation, np.float64, (3, 3))
        t = _as_readonly(self.translation, np.float64, (3,))
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DomainError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation must have determinant +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix, row-major."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise DomainError("pose matrix must be 4x4")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise DomainError("last row of a pose matrix must be (0,0,0,1)")
        return Pose(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")


def project(point3, k: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (..., 2).

    Raises
    ------
    DomainError
        If any point has non-positive depth.
    """
    p = np.asarray(point3, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise DomainError("projection requires positive depth")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def backproject(pixel, depth, k: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates (..., 2) at the given depth(s) to camera frame.

    ``depth`` broadcasts against the leading pixel dimensions.
    """
    p = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= 0):
        raise DomainError("back-projection requires positive depth")
    x = (p[..., 0] - k.cx) / k.fx * z
    y = (p[..., 1] - k.cy) / k.fy * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def compose(a: Pose, b: Pose) -> Pose:
    """Return the pose applying b first, then a: apply(compose(a,b), p) = apply(a, apply(b, p))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def apply(a: Pose, p) -> np.ndarray:
    """Transform points (..., 3) by the pose."""
    p = np.asarray(p, dtype=np.float64)
    return p @ a.rotation.T + a.translation


def rotation_zyx(angles) -> np.ndarray:
    """Rotation matrix Rz(az) @ Ry(ay) @ Rx(ax) from per-axis angles (ax, ay, az).

    Each angle must satisfy |angle| <= pi.
    """
    ax, ay, az = (float(v) for v in np.asarray(angles, dtype=np.float64).reshape(3))
    for v in (ax, ay, az):
        if abs(v) > math.pi:
            raise DomainError("per-axis rotation angles must lie in [-pi, pi]")
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def max_pairwise_distance(points) -> float:
    """Exact max Euclidean distance over all point pairs (brute force, blocked)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    best = 0.0
    block = 512
    for i in range(0, len(pts), block):
        d2 = np.sum((pts[i : i + block, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def _is_identity_pose(p: Pose) -> bool:
    return (
        np.max(np.abs(p.rotation - np.eye(3))) < 1e-12
        and np.max(np.abs(p.translation)) < 1e-12
    )


@dataclass(frozen=True, eq=False)
class MeshModel:
    """Triangle mesh in its model frame, with symmetry transforms.

    ``diameter`` is the max pairwise vertex distance and is validated at
    construction.  ``symmetries`` always contains the identity.
    """

    vertices: np.ndarray
    faces: np.ndarray
    diameter: float
    symmetries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        v = _as_readonly(self.vertices, np.float64, (-1, 3))
        f = _as_readonly(self.faces, np.int64, (-1, 3))
        if len(v) < 3:
            raise DomainError("mesh needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise DomainError("mesh vertices must be finite")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise DomainError("face indices out of range")
        d = max_pairwise_distance(v)
        if abs(d - float(self.diameter)) > 1e-9:
            raise DomainError("stored diameter does not match vertex geometry")
        syms = tuple(self.symmetries)
        if not any(_is_identity_pose(s) for s in syms):
            syms = (Pose.identity(),) + syms
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "diameter", float(d))
        object.__setattr__(self, "symmetries", syms)

    @staticmethod
    def create(vertices, faces, symmetries=()) -> "MeshModel":
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        return MeshModel(v, np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                         max_pairwise_distance(v), tuple(symmetries))

    def bounding_sphere(self):
        """(center, radius): centroid and max vertex distance from it."""
        c = self.vertices.mean(axis=0)
        r = float(np.sqrt(np.max(np.sum((self.vertices - c) ** 2, axis=1))))
        return c, r


def rotational_symmetries_z(n: int) -> tuple:
    """n-fold discrete rotational symmetry about the model z axis (identity included)."""
    if n < 1:
        raise DomainError("symmetry order must be >= 1")
    return tuple(
        Pose(rotation_zyx((0.0, 0.0, math.remainder(2.0 * math.pi * i / n,
                                                    2.0 * math.pi))), np.zeros(3))
        for i in range(n)
    )


def _symmetry_sidecar(path: Path) -> Path:
    return Path(str(path) + ".sym.json")


def save_off(path, mesh: MeshModel) -> None:
    """Write ASCII OFF; non-trivial symmetries go to a '<path>.sym.json' sidecar."""
    path = Path(path)
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    path.write_text("\n".join(lines) + "\n")
    extra = [s for s in mesh.symmetries if not _is_identity_pose(s)]
    if extra:
        mats = [s.matrix().tolist() for s in mesh.symmetries]
        _symmetry_sidecar(path).write_text(json.dumps(mats, sort_keys=True))


def load_off(path) -> MeshModel:
    """Read ASCII OFF plus the optional symmetry sidecar."""
    path = Path(path)
    tokens = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise DomainError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        cnt = int(tokens[pos])
        if cnt != 3:
            raise DomainError(f"{path}: only triangle faces are supported")
        faces.append([int(t) for t in tokens[pos + 1 : pos + 4]])
        pos += 1 + cnt
    symmetries = ()
    sidecar = _symmetry_sidecar(path)
    if sidecar.exists():
        mats = json.loads(sidecar.read_text())
        symmetries = tuple(Pose.from_matrix(np.asarray(m)) for m in mats)
    return MeshModel.create(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), symmetries)
