"""Deterministic synthetic scenes: rigs, ground truth, noisy detections, features.

Each random quantity comes from a generator keyed by the scene seed, the
sample index and the entity index, so samples can be produced in any order
(or in parallel) with identical output.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset_io import CATEGORIES, DatasetManifest, Sample
from .errors import ValidationError
from .experts import FeatureMap
from .geometry import Box3D, Camera, CameraIntrinsics, CameraRig, mounted_camera
from .metrics import Detection
from .rng import keyed_generator

DEFAULT_CAMERA_NAMES = (
    "CAM_FRONT",
    "CAM_FRONT_RIGHT",
    "CAM_BACK_RIGHT",
    "CAM_BACK",
    "CAM_BACK_LEFT",
    "CAM_FRONT_LEFT",
)

# mean (length, width, height) per category
SIZE_PRIORS = {
    "vehicle": (4.6, 1.95, 1.7),
    "two-wheeler": (1.9, 0.7, 1.4),
    "pedestrian": (0.7, 0.7, 1.75),
}

_GT, _DET, _FP = 1, 2, 3


@dataclass(frozen=True)
class CameraSpec:
    fx: float = 1266.0
    fy: float = 1266.0
    mount_height: float = 1.5
    pitch: float = 0.0
    heading: float = 0.0
    image_width: float = 1600.0
    image_height: float = 900.0
    name: Optional[str] = None


@dataclass(frozen=True)
class NoiseModel:
    center_sigma: float = 0.0
    size_sigma: float = 0.0
    yaw_sigma: float = 0.0
    score_low: float = 1.0
    score_high: float = 1.0
    detect_prob: float = 1.0
    fp_rate: float = 0.0


@dataclass(frozen=True)
class GroundModel:
    """``"flat"``: ground at z = ``elevation``; ``"inclined"``: z = elevation + grade * x.

    For inclined ground each sample draws its own grade from
    ``N(grade, grade_jitter)``.
    """

    kind: str = "flat"
    elevation: float = 0.0
    grade: float = 0.0
    grade_jitter: float = 0.0

    def z(self, x: float, grade: Optional[float] = None) -> float:
        if self.kind != "inclined":
            return self.elevation
        return self.elevation + (self.grade if grade is None else grade) * x


def six_camera_layout(**overrides) -> Tuple[CameraSpec, ...]:
    headings = (0.0, -55.0, -110.0, 180.0, 110.0, 55.0)
    return tuple(
        CameraSpec(heading=math.radians(h), name=n, **overrides) for h, n in zip(headings, DEFAULT_CAMERA_NAMES)
    )


def five_camera_layout(**overrides) -> Tuple[CameraSpec, ...]:
    headings = (0.0, -45.0, 45.0, -90.0, 90.0)
    names = ("CAM_FRONT", "CAM_FRONT_RIGHT", "CAM_FRONT_LEFT", "CAM_SIDE_RIGHT", "CAM_SIDE_LEFT")
    return tuple(CameraSpec(heading=math.radians(h), name=n, **overrides) for h, n in zip(headings, names))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_samples: int = 10
    cameras: Tuple[CameraSpec, ...] = field(default_factory=six_camera_layout)
    box_density: float = 8.0
    max_boxes: int = 30
    xy_range: float = 55.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    ground: GroundModel = field(default_factory=GroundModel)
    dataset_id: str = "synthetic"

    def __post_init__(self):
        n = self.noise
        if min(n.center_sigma, n.size_sigma, n.yaw_sigma) < 0:
            raise ValidationError("noise sigmas must be >= 0")
        if not 0 <= n.score_low <= n.score_high <= 1:
            raise ValidationError("score range must satisfy 0 <= low <= high <= 1")
        if not 0 <= n.detect_prob <= 1 or n.fp_rate < 0:
            raise ValidationError("detect_prob must be in [0, 1] and fp_rate >= 0")
        if self.box_density < 0 or self.max_boxes < 0 or self.n_samples < 0:
            raise ValidationError("box_density, max_boxes and n_samples must be >= 0")
        if not self.cameras:
            raise ValidationError("scene needs at least one camera")
        if self.ground.grade_jitter < 0:
            raise ValidationError("grade_jitter must be >= 0")
        if self.ground.kind not in ("flat", "inclined"):
            raise ValidationError(f"unknown ground model {self.ground.kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown scene spec keys: {sorted(unknown)}")
        kw = dict(data)
        if "cameras" in kw:
            kw["cameras"] = tuple(CameraSpec(**c) for c in kw["cameras"])
        if "noise" in kw:
            kw["noise"] = NoiseModel(**kw["noise"])
        if "ground" in kw:
            kw["ground"] = GroundModel(**kw["ground"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cameras"] = [asdict(c) for c in self.cameras]
        return d


def build_rig(spec: SceneSpec) -> CameraRig:
    cams = []
    for k, c in enumerate(spec.cameras):
        name = c.name or (DEFAULT_CAMERA_NAMES[k] if k < len(DEFAULT_CAMERA_NAMES) else f"CAM_{k}")
        intr = CameraIntrinsics(c.fx, c.fy, c.image_width / 2.0, c.image_height / 2.0, c.image_width, c.image_height)
        center = (0.0, 0.0, spec.ground.z(0.0) + c.mount_height)
        cams.append(Camera(name, intr, mounted_camera(c.heading, c.pitch, center)))
    return CameraRig(tuple(cams))


def _random_box(rng: np.random.Generator, spec: SceneSpec, grade: Optional[float] = None) -> Box3D:
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    prior = np.array(SIZE_PRIORS[category])
    size = prior * rng.uniform(0.85, 1.15, size=3)
    x, y = rng.uniform(-spec.xy_range, spec.xy_range, size=2)
    yaw = rng.uniform(-math.pi, math.pi)
    z = spec.ground.z(x, grade) + size[2] / 2.0
    return Box3D((x, y, z), tuple(size), yaw, category)


def _perturb(rng: np.random.Generator, box: Box3D, noise: NoiseModel) -> Box3D:
    center = np.array(box.center)
    if noise.center_sigma > 0:
        center[:2] += rng.normal(0.0, noise.center_sigma, size=2)
    size = np.array(box.size)
    if noise.size_sigma > 0:
        size = np.maximum(size + rng.normal(0.0, noise.size_sigma, size=3), 0.05)
    yaw = box.yaw
    if noise.yaw_sigma > 0:
        yaw = yaw + rng.normal(0.0, noise.yaw_sigma)
    return Box3D(tuple(center), tuple(size), yaw, box.category, box.velocity)


def _score(rng: np.random.Generator, noise: NoiseModel) -> float:
    if noise.score_low == noise.score_high:
        return float(noise.score_low)
    return float(rng.uniform(noise.score_low, noise.score_high))


def generate_sample(spec: SceneSpec, index: int, rig: Optional[CameraRig] = None) -> Tuple[Sample, List[Detection]]:
    rig = rig if rig is not None else build_rig(spec)
    sample_id = f"{spec.dataset_id}-{index:06d}"
    count_rng = keyed_generator(spec.seed, index, 0)
    n_boxes = min(int(count_rng.poisson(spec.box_density)), spec.max_boxes)
    grade = spec.ground.grade + spec.ground.grade_jitter * count_rng.standard_normal()
    boxes = tuple(_random_box(keyed_generator(spec.seed, index, _GT, k), spec, grade) for k in range(n_boxes))
    noise = spec.noise
    dets = []
    for k, box in enumerate(boxes):
        rng = keyed_generator(spec.seed, index, _DET, k)
        if noise.detect_prob < 1.0 and rng.uniform() >= noise.detect_prob:
            continue
        dets.append(Detection(sample_id, _perturb(rng, box, noise), _score(rng, noise)))
    if noise.fp_rate > 0:
        rng = keyed_generator(spec.seed, index, _FP)
        for _ in range(int(rng.poisson(noise.fp_rate))):
            dets.append(Detection(sample_id, _random_box(rng, spec, grade), _score(rng, noise)))
    return Sample(sample_id, spec.dataset_id, rig, boxes), dets


def generate(spec: SceneSpec) -> Tuple[DatasetManifest, List[Detection]]:
    """Build a manifest and matching detections from ``spec``.

    With all noise sigmas at zero, ``detect_prob=1`` and ``fp_rate=0`` the
    detections reproduce the ground-truth boxes exactly.
    """
    rig = build_rig(spec)
    samples, dets = [], []
    for i in range(spec.n_samples):
        s, d = generate_sample(spec, i, rig)
        samples.append(s)
        dets.extend(d)
    return DatasetManifest(spec.dataset_id, tuple(samples), len(rig)), dets


def random_feature_maps(seed: int, count: int, channels: int, height: int, width: int) -> List[FeatureMap]:
    return [
        FeatureMap(keyed_generator(seed, k).standard_normal((channels, height, width))) for k in range(count)
    ]


def flat_ground_sample(
    fy: float = 1000.0,
    camera_height: float = 1.5,
    sample_id: str = "flat",
    fx: Optional[float] = None,
    depths: Sequence[float] = (6.0, 9.0, 14.0, 22.0, 35.0),
    lateral: Sequence[float] = (-3.0, 0.0, 4.0),
) -> Sample:
    """One level front camera over flat ground with a grid of vehicles ahead of it."""
    fx = fy if fx is None else fx
    intr = CameraIntrinsics(fx, fy, 800.0, 450.0, 1600.0, 900.0)
    cam = Camera("CAM_FRONT", intr, mounted_camera(0.0, 0.0, (0.0, 0.0, camera_height)))
    boxes = [Box3D((x, y, 0.8), (4.0, 1.8, 1.6), 0.1 * k, "vehicle")
             for k, (x, y) in enumerate((x, y) for x in depths for y in lateral)]
    return Sample(sample_id, "synthetic", CameraRig((cam,)), tuple(boxes))
