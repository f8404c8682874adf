"""On-disk formats: the RKR1 raster container and JSON codecs.

RKR1 layout: magic b"RKR1", then three little-endian u32 (width, height,
channels), then channels * height * width little-endian float32 samples in
scanline order (per channel: height rows of width samples).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics, Pose

_MAGIC = b"RKR1"


def write_rkr1(path, data) -> None:
    """Write a (H, W) or (C, H, W) array as an RKR1 raster."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DomainError("raster data must be (H, W) or (C, H, W)")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_rkr1(path) -> np.ndarray:
    """Read an RKR1 raster as a (C, H, W) float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DomainError(f"{path}: not an RKR1 raster")
    w, h, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * c * h * w
    if len(raw) != expected:
        raise DomainError(f"{path}: truncated raster ({len(raw)} vs {expected} bytes)")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(c, h, w).astype(np.float32)


def dump_json(path, obj) -> None:
    """Deterministic JSON writer: sorted keys, fixed separators, trailing newline."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def pose_to_json(pose: Pose) -> list:
    return pose.matrix().tolist()


def pose_from_json(obj) -> Pose:
    return Pose.from_matrix(np.asarray(obj, dtype=np.float64))


def intrinsics_to_json(k: CameraIntrinsics) -> dict:
    return {
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        "width": k.width, "height": k.height,
    }


def intrinsics_from_json(obj) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
        )
    except KeyError as exc:
        raise DomainError(f"intrinsics JSON missing field {exc}") from exc
