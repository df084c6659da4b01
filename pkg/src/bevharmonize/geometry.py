"""Pinhole cameras, rigid poses and 3D boxes.

Conventions:
    * ego frame: x forward, y left, z up (meters).
    * camera frame: x right, y down, z along the optical axis.
    * extrinsics map ego coordinates into the camera frame,
      ``p_cam = rotation @ p_ego + translation``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import BehindCamera, GhostCameraProjection, InvalidRig, ValidationError, ZeroDimension

MIN_DEPTH = 1e-6
ORTHONORMAL_TOL = 1e-9

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx >= 0 and self.fy >= 0):
            raise ValidationError(f"focal lengths must be >= 0, got fx={self.fx}, fy={self.fy}")
        if not (self.width >= 0 and self.height >= 0):
            raise ValidationError(f"image size must be >= 0, got {self.width}x{self.height}")

    @classmethod
    def ghost(cls, width: float = 0.0, height: float = 0.0) -> "CameraIntrinsics":
        return cls(0.0, 0.0, 0.0, 0.0, width, height)

    def is_ghost(self) -> bool:
        return self.fx == 0 and self.fy == 0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _as_rotation(rotation) -> Tuple[Tuple[float, ...], ...]:
    r = np.asarray(rotation, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(r)):
        raise InvalidRig("rotation has non-finite entries")
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
        raise InvalidRig("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
        raise InvalidRig("rotation is a reflection (det != +1)")
    return tuple(tuple(float(v) for v in row) for row in r)


@dataclass(frozen=True)
class CameraExtrinsics:
    """Ego-to-camera rigid transform."""

    rotation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3 or not all(math.isfinite(v) for v in t):
            raise InvalidRig(f"translation must be 3 finite numbers, got {self.translation!r}")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraExtrinsics":
        return cls()

    @classmethod
    def from_camera_pose(cls, rotation, center) -> "CameraExtrinsics":
        """Build from an ego-to-camera rotation and the camera center in ego coordinates."""
        r = np.asarray(rotation, dtype=float)
        return cls(r, tuple(-(r @ np.asarray(center, dtype=float))))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def to_camera(self, points) -> np.ndarray:
        """Transform ``(N, 3)`` ego points into the camera frame."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.R.T + self.t


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Box3D:
    center: Vec3
    size: Vec3  # length, width, height
    yaw: float
    category: str
    velocity: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or not all(math.isfinite(v) for v in c):
            raise ValidationError(f"box center must be 3 finite numbers, got {self.center!r}")
        if len(s) != 3 or not all(math.isfinite(v) and v > 0 for v in s):
            raise ValidationError(f"box size must be 3 positive numbers, got {self.size!r}")
        if not math.isfinite(self.yaw):
            raise ValidationError(f"box yaw must be finite, got {self.yaw!r}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        if self.velocity is not None:
            v = tuple(float(x) for x in self.velocity)
            if len(v) != 2:
                raise ValidationError(f"box velocity must be 2 numbers, got {self.velocity!r}")
            object.__setattr__(self, "velocity", v)

    @property
    def length(self) -> float:
        return self.size[0]

    @property
    def width(self) -> float:
        return self.size[1]

    @property
    def height(self) -> float:
        return self.size[2]


@dataclass(frozen=True)
class Camera:
    name: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)

    def is_ghost(self) -> bool:
        return self.intrinsics.is_ghost()


@dataclass(frozen=True)
class CameraRig:
    cameras: Tuple[Camera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        names = [c.name for c in cams]
        if len(set(names)) != len(names):
            raise InvalidRig(f"duplicate camera names in rig: {names}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.cameras)

    def get(self, name: str) -> Optional[Camera]:
        for cam in self.cameras:
            if cam.name == name:
                return cam
        return None


def project_point(p, intr: CameraIntrinsics, extr: CameraExtrinsics) -> Vec3:
    """Project an ego-frame point to the 2.5D triple ``(u*d, v*d, d)``.

    Dividing the first two entries by ``d`` gives pixel coordinates.

    Raises:
        GhostCameraProjection: ``intr`` is a ghost camera.
        BehindCamera: camera-frame depth is not above ``MIN_DEPTH``.
    """
    ud, vd, d = project_points(np.asarray(p, dtype=float).reshape(1, 3), intr, extr)[0]
    if d <= MIN_DEPTH:
        raise BehindCamera(f"point depth {d} m is behind the camera")
    return float(ud), float(vd), float(d)


def project_points(points, intr: CameraIntrinsics, extr: CameraExtrinsics) -> np.ndarray:
    """Vectorized projection of ``(N, 3)`` ego points, without depth filtering."""
    if intr.is_ghost():
        raise GhostCameraProjection("cannot project through a ghost camera")
    cam = extr.to_camera(points)
    return cam @ intr.matrix.T


def box_ground_corners(b: Box3D) -> np.ndarray:
    """Return the four bottom-face corners of ``b`` as a ``(4, 3)`` array."""
    half_l, half_w = b.length / 2.0, b.width / 2.0
    local = np.array([[half_l, half_w], [half_l, -half_w], [-half_l, -half_w], [-half_l, half_w]])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s], [s, c]])
    xy = local @ rot.T + np.array(b.center[:2])
    z = np.full((4, 1), b.center[2] - b.height / 2.0)
    return np.hstack([xy, z])


def rescale_intrinsics(intr: CameraIntrinsics, target_w: float, target_h: float) -> CameraIntrinsics:
    """Resize the virtual image to ``target_w`` x ``target_h`` pixels.

    Ghost cameras keep their zero focal length and only take the new size.

    Raises:
        ZeroDimension: a real camera has zero width/height, or a target is not positive.
    """
    if not (target_w > 0 and target_h > 0):
        raise ZeroDimension(f"target size must be positive, got {target_w}x{target_h}")
    target_w, target_h = float(target_w), float(target_h)
    if intr.is_ghost():
        return replace(intr, width=target_w, height=target_h)
    if intr.width == 0 or intr.height == 0:
        raise ZeroDimension(f"camera has zero image size {intr.width}x{intr.height}")
    sx = target_w / intr.width
    sy = target_h / intr.height
    return CameraIntrinsics(
        fx=intr.fx * sx,
        fy=intr.fy * sy,
        cx=intr.cx * sx,
        cy=intr.cy * sy,
        width=target_w,
        height=target_h,
    )


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ego (x fwd, y left, z up) -> camera (x right, y down, z fwd)
EGO_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def mounted_camera(yaw: float, pitch: float, center: Sequence[float]) -> CameraExtrinsics:
    """Extrinsics for a camera at ``center`` looking along ego heading ``yaw``,
    tilted down by ``pitch`` radians."""
    cp, sp = math.cos(pitch), math.sin(pitch)
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rot = tilt @ EGO_TO_CAMERA_AXES @ rotation_z(yaw).T
    return CameraExtrinsics.from_camera_pose(rot, center)
