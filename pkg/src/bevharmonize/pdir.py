"""Pavement Depth Increasing Rate (PDIR) and training-set splits.

Box ground corners are projected into the front camera as ``(u*d, v*d, d)``
with pixel coordinates measured from the principal point, a plane
``A*ud + B*vd + C*d + D = 0`` is fitted to them, and PDIR is the number of
image rows on the principal column covered by the depth interval
``[d_min, d_min + delta_d]``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset_io import DatasetManifest, Sample
from .errors import (
    DegenerateGeometry,
    InsufficientGroundPoints,
    NoFrontCamera,
    NonPositiveDepth,
    ValidationError,
    VerticalPlane,
)
from .geometry import MIN_DEPTH, box_ground_corners, project_points
from .rng import keyed_generator

DEFAULT_FRONT_CAMERA = "CAM_FRONT"
DEFAULT_DELTA_D = 10.0
DEFAULT_D_MIN = 5.0
MIN_OBJECT_DEPTH = "min_object_depth"
COLLINEAR_TOL = 1e-9

DMinPolicy = Union[float, str]


@dataclass(frozen=True)
class GroundPlane:
    a: float
    b: float
    c: float
    d_coef: float

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def residuals(self, points) -> np.ndarray:
        """Signed orthogonal distances of ``(N, 3)`` points to the plane."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        n = self.normal
        return (pts @ n + self.d_coef) / np.linalg.norm(n)


@dataclass(frozen=True)
class PdirResult:
    sample_id: str
    pdir: float
    d_min: float
    delta_d: float
    n_ground_points: int

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "pdir": self.pdir,
            "d_min": self.d_min,
            "delta_d": self.delta_d,
            "n_ground_points": self.n_ground_points,
        }


def fit_ground_plane(points) -> GroundPlane:
    """Total-least-squares plane through ``(N, 3)`` points.

    The normal is the right singular vector of the centered points with the
    smallest singular value, scaled to unit length with ``B >= 0``.

    Raises:
        DegenerateGeometry: fewer than 3 points, or the points are collinear.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometry(f"need at least 3 points to fit a plane, got {len(pts)}")
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if s[0] == 0 or s[1] <= COLLINEAR_TOL * s[0]:
        raise DegenerateGeometry("ground points are collinear")
    normal = vt[-1] / np.linalg.norm(vt[-1])
    # sign canonicalization: first non-zero of (B, C, A) is positive
    for k in (1, 2, 0):
        if normal[k] != 0:
            if normal[k] < 0:
                normal = -normal
            break
    d_coef = -float(normal @ centroid)
    return GroundPlane(float(normal[0]), float(normal[1]), float(normal[2]), d_coef)


def pavement_row(plane: GroundPlane, d: float) -> float:
    """Principal-centered image row where the ground plane sits at depth ``d``."""
    if abs(plane.b) < 1e-12:
        raise VerticalPlane(f"plane has B={plane.b}; the pavement row is undefined")
    if not d > 0:
        raise NonPositiveDepth(f"depth must be positive, got {d}")
    return (-plane.d_coef - plane.c * d) / (plane.b * d)


def ground_points(sample: Sample, front_camera: str = DEFAULT_FRONT_CAMERA) -> np.ndarray:
    """Principal-centered ``(ud, vd, d)`` of every box ground corner in front of the camera."""
    cam = sample.rig.get(front_camera)
    if cam is None or cam.is_ghost():
        raise NoFrontCamera(f"sample {sample.sample_id} has no usable camera {front_camera!r}")
    if not sample.boxes:
        return np.zeros((0, 3))
    corners = np.vstack([box_ground_corners(b) for b in sample.boxes])
    proj = project_points(corners, cam.intrinsics, cam.extrinsics)
    proj = proj[proj[:, 2] > MIN_DEPTH]
    intr = cam.intrinsics
    proj[:, 0] -= intr.cx * proj[:, 2]
    proj[:, 1] -= intr.cy * proj[:, 2]
    return proj


def compute_pdir(
    sample: Sample,
    front_camera: str = DEFAULT_FRONT_CAMERA,
    delta_d: float = DEFAULT_DELTA_D,
    d_min: DMinPolicy = DEFAULT_D_MIN,
) -> PdirResult:
    """PDIR of one sample.

    Args:
        sample: sample with at least one box in front of ``front_camera``.
        front_camera: name of the camera to measure in.
        delta_d: depth interval in meters.
        d_min: near depth in meters, or ``"min_object_depth"`` to use the
            nearest projected ground corner.

    Raises:
        NoFrontCamera, InsufficientGroundPoints, DegenerateGeometry, VerticalPlane
    """
    if not delta_d > 0:
        raise ValidationError(f"delta_d must be positive, got {delta_d}")
    pts = ground_points(sample, front_camera)
    if len(pts) < 3:
        raise InsufficientGroundPoints(
            f"sample {sample.sample_id}: {len(pts)} ground points in front of {front_camera}"
        )
    plane = fit_ground_plane(pts)
    if d_min == MIN_OBJECT_DEPTH:
        near = float(pts[:, 2].min())
    elif isinstance(d_min, str):
        raise ValidationError(f"unknown d_min policy {d_min!r}")
    else:
        near = float(d_min)
    pdir = abs(pavement_row(plane, near) - pavement_row(plane, near + delta_d))
    return PdirResult(sample.sample_id, pdir, near, float(delta_d), int(len(pts)))


def batch_pdir(
    manifest: DatasetManifest,
    front_camera: str = DEFAULT_FRONT_CAMERA,
    delta_d: float = DEFAULT_DELTA_D,
    d_min: DMinPolicy = DEFAULT_D_MIN,
    threads: int = 1,
) -> List[Tuple[str, Union[PdirResult, ValidationError]]]:
    """PDIR for every sample, in manifest order. Failures are returned, not raised."""

    def one(sample):
        try:
            return sample.sample_id, compute_pdir(sample, front_camera, delta_d, d_min)
        except ValidationError as exc:
            return sample.sample_id, exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, manifest.samples))
    return [one(s) for s in manifest.samples]


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitStrategy:
    """``kind`` is ``"pdir"``, ``"ds"`` (one subset per source dataset) or ``"rd"`` (random)."""

    kind: str
    n_experts: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pdir", "ds", "rd"):
            raise ValidationError(f"unknown split strategy {self.kind!r}")
        if self.kind != "ds" and self.n_experts < 1:
            raise ValidationError("n_experts must be >= 1")


@dataclass
class SplitResult:
    assignments: Dict[str, int]
    n_subsets: int
    pdir: Dict[str, PdirResult] = field(default_factory=dict)
    flagged: Dict[str, str] = field(default_factory=dict)
    subset_names: Optional[List[str]] = None


def _contiguous_bins(order: Sequence[int], n_bins: int) -> Dict[int, int]:
    out = {}
    for b, chunk in enumerate(np.array_split(np.asarray(order, dtype=int), n_bins)):
        for idx in chunk:
            out[int(idx)] = b
    return out


def split_dataset(
    manifest: DatasetManifest,
    strategy: SplitStrategy,
    front_camera: str = DEFAULT_FRONT_CAMERA,
    delta_d: float = DEFAULT_DELTA_D,
    d_min: DMinPolicy = DEFAULT_D_MIN,
    threads: int = 1,
) -> SplitResult:
    """Partition ``manifest`` into expert training subsets.

    With the PDIR strategy samples are ordered by PDIR and cut into
    ``n_experts`` contiguous bins whose sizes differ by at most one. Samples
    whose PDIR cannot be computed are placed at the median PDIR and listed in
    ``flagged``.
    """
    samples = manifest.samples
    if not samples:
        raise ValidationError("cannot split an empty manifest")
    ids = [s.sample_id for s in samples]

    if strategy.kind == "ds":
        names = sorted({s.dataset_id for s in samples})
        if len(names) < 2:
            raise ValidationError(f"dataset split needs >= 2 source datasets, found {names}")
        index = {n: k for k, n in enumerate(names)}
        return SplitResult({s.sample_id: index[s.dataset_id] for s in samples}, len(names), subset_names=names)

    n = strategy.n_experts
    if strategy.kind == "rd":
        order = keyed_generator(strategy.seed, len(samples)).permutation(len(samples))
        bins = _contiguous_bins(order, n)
        return SplitResult({ids[i]: bins[i] for i in range(len(ids))}, n)

    results = batch_pdir(manifest, front_camera, delta_d, d_min, threads)
    good = {sid: r for sid, r in results if isinstance(r, PdirResult)}
    flagged = {sid: str(r) for sid, r in results if not isinstance(r, PdirResult)}
    fill = float(np.median([r.pdir for r in good.values()])) if good else 0.0
    keys = [good[sid].pdir if sid in good else fill for sid in ids]
    order = sorted(range(len(ids)), key=lambda i: (keys[i], ids[i], i))
    bins = _contiguous_bins(order, n)
    return SplitResult({ids[i]: bins[i] for i in range(len(ids))}, n, pdir=good, flagged=flagged)


def flat_ground_pdir(focal_y: float, camera_height: float, d_min: float, delta_d: float) -> float:
    """Closed form for a level camera over flat ground: ``f*h*(1/d - 1/(d+dd))``."""
    return focal_y * camera_height * (1.0 / d_min - 1.0 / (d_min + delta_d))


def histogram(values: Sequence[float], bins: Union[int, Sequence[float]] = 10) -> dict:
    vals = np.asarray([v for v in values if math.isfinite(v)], dtype=float)
    if isinstance(bins, int) and len(vals) == 0:
        return {"edges": [], "counts": []}
    value_range = None
    if isinstance(bins, int) and len(vals):
        lo, hi = float(vals.min()), float(vals.max())
        # a spread of a few ulps cannot hold finite-sized bins
        if hi - lo <= 1e-9 * max(1.0, abs(hi)):
            value_range = (lo - 0.5, hi + 0.5)
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}
