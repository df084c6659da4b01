"""Canonical manifest format, category harmonization and dataset merging.

Files are JSON lines. The first line is a header record carrying
``{"format": "bevharmonize/1", ...}``; every following line is one record.
A manifest record looks like::

    {"sample_id": "s0", "dataset_id": "nuscenes",
     "cameras": [{"name": "CAM_FRONT", "fx": 1266.4, "fy": 1266.4,
                  "cx": 816.3, "cy": 491.5, "width": 1600, "height": 900,
                  "rotation": [9 row-major numbers], "translation": [x, y, z],
                  "image": "samples/CAM_FRONT/xxx.jpg"}],
     "boxes": [{"center": [x, y, z], "size": [l, w, h], "yaw": 0.1,
                "raw_category": "car", "velocity": [vx, vy]}]}

``image`` and ``velocity`` are optional. Rotations are ego-to-camera.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from .errors import InvalidRig, ParseError, TargetTooSmall, UnknownCategory, ValidationError
from .geometry import Box3D, Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, rescale_intrinsics

FORMAT = "bevharmonize/1"

VEHICLE = "vehicle"
TWO_WHEELER = "two-wheeler"
PEDESTRIAN = "pedestrian"
IGNORE = "ignore"
CATEGORIES = (VEHICLE, TWO_WHEELER, PEDESTRIAN)
HARMONIZED = CATEGORIES + (IGNORE,)

MERGED_ID = "merged"
DEFAULT_TARGET_SIZE = (704, 384)

# Applies to every dataset unless the map overrides the label for that dataset.
WILDCARD = "*"

DEFAULT_RAW_LABELS = {
    # nuScenes
    "car": VEHICLE,
    "truck": VEHICLE,
    "bus": VEHICLE,
    "trailer": VEHICLE,
    "construction_vehicle": VEHICLE,
    "motorcycle": TWO_WHEELER,
    "bicycle": TWO_WHEELER,
    "pedestrian": PEDESTRIAN,
    "barrier": IGNORE,
    "traffic_cone": IGNORE,
    "vehicle.car": VEHICLE,
    "vehicle.truck": VEHICLE,
    "vehicle.bus.bendy": VEHICLE,
    "vehicle.bus.rigid": VEHICLE,
    "vehicle.trailer": VEHICLE,
    "vehicle.construction": VEHICLE,
    "vehicle.emergency.ambulance": VEHICLE,
    "vehicle.emergency.police": VEHICLE,
    "vehicle.motorcycle": TWO_WHEELER,
    "vehicle.bicycle": TWO_WHEELER,
    "human.pedestrian.adult": PEDESTRIAN,
    "human.pedestrian.child": PEDESTRIAN,
    "human.pedestrian.construction_worker": PEDESTRIAN,
    "human.pedestrian.police_officer": PEDESTRIAN,
    "human.pedestrian.personal_mobility": PEDESTRIAN,
    "human.pedestrian.stroller": PEDESTRIAN,
    "human.pedestrian.wheelchair": PEDESTRIAN,
    "movable_object.barrier": IGNORE,
    "movable_object.trafficcone": IGNORE,
    "movable_object.pushable_pullable": IGNORE,
    "movable_object.debris": IGNORE,
    "static_object.bicycle_rack": IGNORE,
    "animal": IGNORE,
    # Waymo
    "TYPE_VEHICLE": VEHICLE,
    "TYPE_PEDESTRIAN": PEDESTRIAN,
    "TYPE_CYCLIST": TWO_WHEELER,
    "TYPE_SIGN": IGNORE,
    "TYPE_UNKNOWN": IGNORE,
    # Lyft
    "other_vehicle": VEHICLE,
    "emergency_vehicle": VEHICLE,
}


@dataclass(frozen=True)
class CategoryMap:
    """Maps ``(dataset_id, raw label)`` to a harmonized category or ``"ignore"``.

    Harmonized names always map to themselves so already-harmonized files
    can be reloaded through any map.
    """

    raw_to_harmonized: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        table = {}
        for ds, labels in self.raw_to_harmonized.items():
            inner = {}
            for raw, target in labels.items():
                if target not in HARMONIZED:
                    raise ValidationError(
                        f"category map sends {ds}/{raw!r} to {target!r}; expected one of {HARMONIZED}"
                    )
                inner[str(raw)] = target
            table[str(ds)] = inner
        object.__setattr__(self, "raw_to_harmonized", table)

    @classmethod
    def identity(cls) -> "CategoryMap":
        return cls({})

    @classmethod
    def default(cls) -> "CategoryMap":
        return cls({WILDCARD: dict(DEFAULT_RAW_LABELS)})

    @classmethod
    def load(cls, path) -> "CategoryMap":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid category map: {exc}", path=path, line=exc.lineno) from exc
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ParseError("category map must be an object of objects keyed by dataset_id", path=path)
        return cls(data)

    def lookup(self, dataset_id: str, raw: str) -> Optional[str]:
        for key in (dataset_id, WILDCARD):
            labels = self.raw_to_harmonized.get(key)
            if labels is not None and raw in labels:
                return labels[raw]
        if raw in HARMONIZED:
            return raw
        return None

    def harmonize(self, dataset_id: str, raw: str, record: Optional[int] = None) -> str:
        target = self.lookup(dataset_id, raw)
        if target is None:
            raise UnknownCategory(raw, dataset_id, record)
        return target


@dataclass(frozen=True)
class Sample:
    sample_id: str
    dataset_id: str
    rig: CameraRig
    boxes: Tuple[Box3D, ...] = ()
    image_refs: Optional[Tuple[Optional[str], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.image_refs is not None:
            refs = tuple(self.image_refs)
            if len(refs) != len(self.rig):
                raise ValidationError(
                    f"sample {self.sample_id}: {len(refs)} image refs for {len(self.rig)} cameras"
                )
            object.__setattr__(self, "image_refs", refs)
        for b in self.boxes:
            if b.category not in CATEGORIES:
                raise ValidationError(f"sample {self.sample_id}: box category {b.category!r} is not harmonized")


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    samples: Tuple[Sample, ...]
    canonical_camera_count: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.canonical_camera_count < 1:
            raise ValidationError("canonical_camera_count must be >= 1")
        if self.dataset_id != MERGED_ID:
            for s in self.samples:
                if s.dataset_id != self.dataset_id:
                    raise ValidationError(
                        f"sample {s.sample_id} has dataset_id {s.dataset_id!r}, manifest is {self.dataset_id!r}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]


# --------------------------------------------------------------------------
# JSON-lines plumbing


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_lines(path, lines: Iterable[str]) -> None:
    """Write ``lines`` to ``path`` through a temp file + rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(path, header: Mapping[str, Any], records: Iterable[Mapping[str, Any]]) -> None:
    head = {"format": FORMAT, **header}
    atomic_write_lines(path, [dumps(head)] + [dumps(r) for r in records])


def read_records(path) -> Tuple[Dict[str, Any], Iterator[Tuple[int, Dict[str, Any]]]]:
    """Read a JSON-lines file. Returns the header and ``(line_no, record)`` pairs."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    parsed = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", path=path, line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError("record is not an object", path=path, line=lineno)
        parsed.append((lineno, obj))
    if not parsed:
        raise ParseError("empty file, missing header record", path=path)
    header_line, header = parsed[0]
    if header.get("format") != FORMAT:
        raise ParseError(f"header must declare format {FORMAT!r}, got {header.get('format')!r}",
                         path=path, line=header_line)
    return header, iter(parsed[1:])


def _floats(value, n: int, what: str) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ValueError(f"{what} must be a list of {n} numbers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"{what} must contain numbers, got {v!r}")
        if not math.isfinite(v):
            raise ValueError(f"{what} contains a non-finite value")
        out.append(float(v))
    return tuple(out)


def _number(obj, key: str) -> float:
    if key not in obj:
        raise ValueError(f"missing field {key!r}")
    return _floats([obj[key]], 1, key)[0]


def camera_from_record(obj: Mapping[str, Any]) -> Tuple[Camera, Optional[str]]:
    intr = CameraIntrinsics(
        fx=_number(obj, "fx"),
        fy=_number(obj, "fy"),
        cx=_number(obj, "cx"),
        cy=_number(obj, "cy"),
        width=_number(obj, "width"),
        height=_number(obj, "height"),
    )
    rot = _floats(obj.get("rotation"), 9, "rotation")
    trans = _floats(obj.get("translation"), 3, "translation")
    extr = CameraExtrinsics((rot[0:3], rot[3:6], rot[6:9]), trans)
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise ValueError("camera name must be a non-empty string")
    image = obj.get("image")
    if image is not None and not isinstance(image, str):
        raise ValueError("camera image must be a string path")
    return Camera(name, intr, extr), image


def camera_to_record(cam: Camera, image: Optional[str] = None) -> Dict[str, Any]:
    i, e = cam.intrinsics, cam.extrinsics
    rec = {
        "name": cam.name,
        "fx": i.fx,
        "fy": i.fy,
        "cx": i.cx,
        "cy": i.cy,
        "width": i.width,
        "height": i.height,
        "rotation": [v for row in e.rotation for v in row],
        "translation": list(e.translation),
    }
    if image is not None:
        rec["image"] = image
    return rec


def box_from_record(obj: Mapping[str, Any], category: str) -> Box3D:
    velocity = obj.get("velocity")
    return Box3D(
        center=_floats(obj.get("center"), 3, "center"),
        size=_floats(obj.get("size"), 3, "size"),
        yaw=_number(obj, "yaw"),
        category=category,
        velocity=None if velocity is None else _floats(velocity, 2, "velocity"),
    )


def box_to_record(box: Box3D, category_key: str = "raw_category") -> Dict[str, Any]:
    rec = {
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        category_key: box.category,
    }
    if box.velocity is not None:
        rec["velocity"] = list(box.velocity)
    return rec


def sample_from_record(obj: Mapping[str, Any], cmap: CategoryMap, index: int) -> Sample:
    sample_id = obj.get("sample_id")
    dataset_id = obj.get("dataset_id")
    if not isinstance(sample_id, str) or not isinstance(dataset_id, str):
        raise ValueError("sample_id and dataset_id must be strings")
    cams_raw = obj.get("cameras")
    if not isinstance(cams_raw, list) or not cams_raw:
        raise ValueError("cameras must be a non-empty list")
    cams, images = zip(*(camera_from_record(c) for c in cams_raw))
    boxes = []
    for b in obj.get("boxes", []):
        raw = b.get("raw_category")
        if not isinstance(raw, str):
            raise ValueError("box raw_category must be a string")
        category = cmap.harmonize(dataset_id, raw, record=index)
        if category == IGNORE:
            continue
        boxes.append(box_from_record(b, category))
    image_refs = tuple(images) if any(im is not None for im in images) else None
    return Sample(sample_id, dataset_id, CameraRig(cams), tuple(boxes), image_refs)


def sample_to_record(s: Sample) -> Dict[str, Any]:
    images = s.image_refs or (None,) * len(s.rig)
    return {
        "sample_id": s.sample_id,
        "dataset_id": s.dataset_id,
        "cameras": [camera_to_record(c, im) for c, im in zip(s.rig, images)],
        "boxes": [box_to_record(b) for b in s.boxes],
    }


def load_manifest(path, cmap: Optional[CategoryMap] = None) -> DatasetManifest:
    """Load and validate a manifest, harmonizing categories on the way.

    Boxes whose label maps to ``"ignore"`` are dropped.

    Raises:
        ParseError: malformed file or record (message carries path and line).
        UnknownCategory: a raw label has no entry in ``cmap``.
        InvalidRig: a camera rotation is not a proper rotation.
    """
    cmap = cmap if cmap is not None else CategoryMap.default()
    header, records = read_records(path)
    samples = []
    for index, (lineno, obj) in enumerate(records):
        try:
            samples.append(sample_from_record(obj, cmap, index))
        except (UnknownCategory, InvalidRig) as exc:
            raise _relocate(exc, path, lineno)
        except (ValueError, TypeError, AttributeError) as exc:
            raise ParseError(f"record {index}: {exc}", path=path, line=lineno) from exc
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate sample_id in manifest", path=path)
    dataset_id = header.get("dataset_id")
    if dataset_id is None:
        found = {s.dataset_id for s in samples}
        if len(found) > 1:
            raise ParseError(f"header has no dataset_id and records mix {sorted(found)}", path=path)
        dataset_id = found.pop() if found else "unnamed"
    max_cams = max((len(s.rig) for s in samples), default=1)
    count = header.get("canonical_camera_count", max_cams)
    try:
        return DatasetManifest(dataset_id, tuple(samples), int(count))
    except ValidationError as exc:
        raise ParseError(str(exc), path=path) from exc


def _relocate(exc: ValidationError, path, lineno) -> ValidationError:
    exc.args = (f"{path}:{lineno}: {exc.args[0]}",) + tuple(exc.args[1:])
    return exc


def save_manifest(path, m: DatasetManifest, config: Optional[Mapping[str, Any]] = None) -> None:
    header = {"dataset_id": m.dataset_id, "canonical_camera_count": m.canonical_camera_count}
    if config is not None:
        header["config"] = dict(config)
    write_records(path, header, (sample_to_record(s) for s in m.samples))


# --------------------------------------------------------------------------
# ghost cameras and merging


def _ghost_name(existing: Sequence[str], k: int) -> str:
    name = f"GHOST_{k}"
    while name in existing:
        name += "_"
    return name


def pad_sample(s: Sample, target_count: int) -> Sample:
    n = len(s.rig)
    if n > target_count:
        raise TargetTooSmall(f"sample {s.sample_id} has {n} cameras, target is {target_count}")
    if n == target_count:
        return s
    cams = list(s.rig.cameras)
    names = [c.name for c in cams]
    for k in range(n, target_count):
        name = _ghost_name(names, k)
        names.append(name)
        cams.append(Camera(name, CameraIntrinsics.ghost(), CameraExtrinsics.identity()))
    refs = None
    if s.image_refs is not None:
        refs = s.image_refs + (None,) * (target_count - n)
    return replace(s, rig=CameraRig(tuple(cams)), image_refs=refs)


def add_ghost_cameras(m: DatasetManifest, target_count: int) -> DatasetManifest:
    """Pad every rig to ``target_count`` cameras with zero-focal placeholders.

    Existing cameras keep their order and parameters. Ghosts get identity
    extrinsics and no image reference.

    Raises:
        TargetTooSmall: some rig already has more than ``target_count`` cameras.
    """
    samples = tuple(pad_sample(s, target_count) for s in m.samples)
    return DatasetManifest(m.dataset_id, samples, target_count)


def rescale_sample(s: Sample, target_w: float, target_h: float) -> Sample:
    cams = tuple(replace(c, intrinsics=rescale_intrinsics(c.intrinsics, target_w, target_h)) for c in s.rig)
    return replace(s, rig=CameraRig(cams))


def merge_datasets(
    manifests: Sequence[DatasetManifest],
    target_w: float = DEFAULT_TARGET_SIZE[0],
    target_h: float = DEFAULT_TARGET_SIZE[1],
) -> DatasetManifest:
    """Concatenate manifests into one ``"merged"`` manifest.

    Every rig is padded to the largest camera count found and every real
    camera is rescaled to ``target_w`` x ``target_h``. Samples keep their
    original ``dataset_id``.
    """
    if not manifests:
        raise ValidationError("merge needs at least one manifest")
    target_count = max(
        [m.canonical_camera_count for m in manifests] + [len(s.rig) for m in manifests for s in m.samples]
    )
    samples = []
    seen = set()
    for m in manifests:
        for s in m.samples:
            if s.sample_id in seen:
                raise ValidationError(f"sample_id {s.sample_id!r} appears in more than one manifest")
            seen.add(s.sample_id)
            samples.append(rescale_sample(pad_sample(s, target_count), target_w, target_h))
    return DatasetManifest(MERGED_ID, tuple(samples), target_count)
