"""Weighting, distillation-loss and feature-replacement kernels for the expert models.

Only the numerical kernels live here; the networks that produce the feature
maps are somebody else's problem.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import BadK, EmptyInput, NonFinitePdir, ShapeMismatch, ValidationError, ZeroMax
from .rng import counter_uniform

ZERO_NORM = 1e-12
COSINE_MODES = ("location", "flatten")


@dataclass(frozen=True)
class ExpertWeights:
    sample_ids: Tuple[str, ...]
    w1: Tuple[float, ...]
    w2: Tuple[float, ...]
    pdir_max: float

    def records(self) -> List[dict]:
        return [{"sample_id": s, "w1": a, "w2": b} for s, a, b in zip(self.sample_ids, self.w1, self.w2)]


class FeatureMap:
    """Immutable ``C x H x W`` float64 feature tensor."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatch(f"feature map must be C x H x W, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("feature map contains non-finite values")
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self._data.shape

    channels = property(lambda self: self._data.shape[0])
    height = property(lambda self: self._data.shape[1])
    width = property(lambda self: self._data.shape[2])

    def __repr__(self):
        return f"FeatureMap(shape={self.shape})"


@dataclass(frozen=True)
class ReplacementSchedule:
    probability: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"replacement probability must be in [0, 1], got {self.probability}")


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def expert_weights(pdirs: Sequence[Tuple[str, float]]) -> ExpertWeights:
    """Per-sample distillation weights for the two experts.

    ``w1`` is a softmax over ``pdir / pdir_max`` and favours samples with large
    PDIR; ``w2`` is a softmax over ``(pdir_max - pdir) / pdir_max`` and favours
    small PDIR.
    """
    if len(pdirs) == 0:
        raise EmptyInput("expert_weights needs at least one sample")
    ids = tuple(str(s) for s, _ in pdirs)
    vals = np.array([float(v) for _, v in pdirs])
    if not np.all(np.isfinite(vals)) or np.any(vals < 0):
        raise NonFinitePdir("PDIR values must be finite and >= 0")
    pmax = float(vals.max())
    if pmax == 0:
        raise ZeroMax("all PDIR values are zero")
    w1 = _softmax(vals / pmax)
    w2 = _softmax((pmax - vals) / pmax)
    return ExpertWeights(ids, tuple(float(v) for v in w1), tuple(float(v) for v in w2), pmax)


def cosine_map(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, int]:
    """Cosine along the channel axis at each ``(h, w)``.

    Locations where either vector has norm below ``ZERO_NORM`` get cosine 0.
    Returns the ``H x W`` map and the number of such locations.
    """
    na = np.sqrt(np.einsum("chw,chw->hw", a, a))
    nb = np.sqrt(np.einsum("chw,chw->hw", b, b))
    dot = np.einsum("chw,chw->hw", a, b)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    cos = np.zeros_like(dot)
    cos[ok] = dot[ok] / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), int((~ok).sum())


def _flat_cosine(a: np.ndarray, b: np.ndarray) -> Tuple[float, int]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0, 1
    return float(np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0)), 0


def feature_cosine(a: np.ndarray, b: np.ndarray, mode: str = "location") -> Tuple[float, int]:
    if mode == "location":
        cos, zeros = cosine_map(a, b)
        return float(cos.mean()), zeros
    if mode == "flatten":
        return _flat_cosine(a, b)
    raise ValidationError(f"unknown cosine mode {mode!r}; expected one of {COSINE_MODES}")


def expert_distill_loss(
    student: Sequence[FeatureMap],
    teacher: Sequence[FeatureMap],
    weights: Sequence[float],
    mode: str = "location",
    return_zero_count: bool = False,
):
    """Weighted cosine distillation loss ``sum_i w_i * (1 - cos(student_i, teacher_i))``.

    Args:
        student: expert features, one per image.
        teacher: shared-model features, same shapes.
        weights: per-image weights (a sample's weight applies to all its images).
        mode: ``"location"`` averages per-pixel channel cosines, ``"flatten"``
            takes one cosine over the whole tensor.
        return_zero_count: also return how many zero-norm locations were seen.
    """
    if not (len(student) == len(teacher) == len(weights)):
        raise ShapeMismatch(
            f"list lengths differ: student={len(student)} teacher={len(teacher)} weights={len(weights)}"
        )
    terms = []
    zeros = 0
    for i, (s, t, w) in enumerate(zip(student, teacher, weights)):
        if s.shape != t.shape:
            raise ShapeMismatch(f"pair {i}: student {s.shape} vs teacher {t.shape}")
        cos, z = feature_cosine(s.data, t.data, mode)
        zeros += z
        terms.append(float(w) * (1.0 - cos))
    loss = math.fsum(terms)
    return (loss, zeros) if return_zero_count else loss


def semantic_distill_loss(
    teacher_projected: Sequence[FeatureMap],
    student: Sequence[FeatureMap],
    k_channels: int,
    mode: str = "location",
    return_zero_count: bool = False,
):
    """Cosine loss between projected teacher features and the first
    ``k_channels`` channels of the student features, summed over images."""
    if len(teacher_projected) != len(student):
        raise ShapeMismatch(f"list lengths differ: {len(teacher_projected)} vs {len(student)}")
    if k_channels < 1:
        raise BadK(f"k_channels must be >= 1, got {k_channels}")
    terms = []
    zeros = 0
    for i, (t, s) in enumerate(zip(teacher_projected, student)):
        if k_channels > s.channels:
            raise BadK(f"pair {i}: k_channels={k_channels} exceeds student channels {s.channels}")
        if t.channels != k_channels or t.shape[1:] != s.shape[1:]:
            raise ShapeMismatch(f"pair {i}: teacher {t.shape} vs masked student {(k_channels,) + s.shape[1:]}")
        cos, z = feature_cosine(t.data, s.data[:k_channels], mode)
        zeros += z
        terms.append(1.0 - cos)
    loss = math.fsum(terms)
    return (loss, zeros) if return_zero_count else loss


def replacement_mask(schedule: ReplacementSchedule, sample_ids: Sequence[str], n_cameras: int) -> np.ndarray:
    """Boolean ``(n_samples, n_cameras)`` mask of image features to swap for expert features.

    Entry ``(i, j)`` is true with probability ``schedule.probability``, drawn
    from a counter-based hash of ``(seed, i, j)``.
    """
    if n_cameras < 0:
        raise ValidationError("n_cameras must be >= 0")
    rows = np.arange(len(sample_ids), dtype=np.int64)[:, None]
    cols = np.arange(n_cameras, dtype=np.int64)[None, :]
    u = counter_uniform(schedule.seed, rows, cols)
    return u < schedule.probability


# --------------------------------------------------------------------------
# binary feature-map files: 4 little-endian uint32 (C, H, W, count), then
# count * C*H*W little-endian float32, row-major, one image after another.

_HEADER = struct.Struct("<4I")


def write_feature_maps(path, maps: Sequence[FeatureMap]) -> None:
    if not maps:
        raise EmptyInput("no feature maps to write")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ShapeMismatch(f"all maps in one file must share a shape, got {m.shape} vs {shape}")
    payload = np.stack([m.data for m in maps]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*shape, len(maps)))
        fh.write(payload.tobytes(order="C"))


def read_feature_maps(path) -> List[FeatureMap]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated feature-map header")
    c, h, w, count = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * c * h * w * count
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes for {count}x{c}x{h}x{w}, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, c, h, w)
    return [FeatureMap(a) for a in arr]
