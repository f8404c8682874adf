"""Procedural test meshes: cuboid, icosphere, capped cylinder."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError
from .geometry import MeshModel

_CUBE_FACES = np.array(
    [
        [0, 1, 2], [0, 2, 3],  # -z
        [4, 6, 5], [4, 7, 6],  # +z
        [0, 4, 5], [0, 5, 1],  # -y
        [3, 2, 6], [3, 6, 7],  # +y
        [0, 3, 7], [0, 7, 4],  # -x
        [1, 5, 6], [1, 6, 2],  # +x
    ],
    dtype=np.int64,
)


def cube(side=0.12, symmetries=()) -> MeshModel:
    """Axis-aligned cube centered at the origin."""
    if side <= 0:
        raise DomainError("cube side must be positive")
    h = side / 2.0
    verts = np.array(
        [
            [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
            [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
        ]
    )
    return MeshModel.create(verts, _CUBE_FACES, symmetries)


def icosphere(subdivisions=2, radius=0.06, symmetries=()) -> MeshModel:
    """Icosahedron subdivided ``subdivisions`` times, vertices pushed to ``radius``."""
    if radius <= 0:
        raise DomainError("sphere radius must be positive")
    if subdivisions < 0:
        raise DomainError("subdivision count must be >= 0")
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) for v in verts]

    def midpoint(cache, i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            cache[key] = len(verts)
            verts.append((verts[i] + verts[j]) / 2.0)
        return cache[key]

    for _ in range(subdivisions):
        cache = {}
        new_faces = []
        for a, b, c in faces:
            ab = midpoint(cache, a, b)
            bc = midpoint(cache, b, c)
            ca = midpoint(cache, c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    v = np.array(verts)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return MeshModel.create(v, np.array(faces, dtype=np.int64), symmetries)


def cylinder(radius=0.04, height=0.12, segments=64, symmetries=()) -> MeshModel:
    """Closed cylinder along the model z axis, centered at the origin."""
    if radius <= 0 or height <= 0:
        raise DomainError("cylinder dimensions must be positive")
    if segments < 3:
        raise DomainError("cylinder needs at least 3 segments")
    ang = 2.0 * math.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    hz = height / 2.0
    bottom = np.concatenate([ring, np.full((segments, 1), -hz)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), hz)], axis=1)
    centers = np.array([[0.0, 0.0, -hz], [0.0, 0.0, hz]])
    verts = np.concatenate([bottom, top, centers], axis=0)
    cb, ct = 2 * segments, 2 * segments + 1

    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        # side quad split into two triangles
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
        # caps fan out from the center vertices
        faces += [(cb, j, i), (ct, segments + i, segments + j)]
    return MeshModel.create(verts, np.array(faces, dtype=np.int64), symmetries)
