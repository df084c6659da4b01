"""BEV detection metrics: AP over center-distance thresholds, TP errors and NDS+.

AP follows the nuScenes devkit: greedy matching by descending score to the
nearest unmatched ground truth, precision interpolated on 101 recall points,
and the 10% recall/precision floors removed before averaging.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset_io import CATEGORIES, DatasetManifest, box_from_record, box_to_record, read_records, write_records
from .errors import EmptyGroundTruth, ParseError, UnknownSampleId, ValidationError
from .geometry import Box3D

EVAL_RANGE = 50.0
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
N_RECALL_POINTS = 101
TP_METRICS = ("ate", "ase", "aoe")


@dataclass(frozen=True)
class Detection:
    sample_id: str
    box: Box3D
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class EvalConfig:
    dist_thresholds: Tuple[float, ...] = DIST_THRESHOLDS
    tp_threshold: float = TP_THRESHOLD
    eval_range: float = EVAL_RANGE
    min_recall: float = MIN_RECALL
    min_precision: float = MIN_PRECISION
    raw_ap: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dist_thresholds"] = list(self.dist_thresholds)
        return d


@dataclass(frozen=True)
class ClassMetrics:
    category: str
    n_gt: int
    ap: Optional[float] = None
    ate: Optional[float] = None
    ase: Optional[float] = None
    aoe: Optional[float] = None
    nds_plus: Optional[float] = None
    ap_per_threshold: Dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap_per_threshold"] = {str(k): v for k, v in self.ap_per_threshold.items()}
        return d


@dataclass(frozen=True)
class EvalReport:
    per_class: Dict[str, ClassMetrics]
    map: float
    mnds_plus: float
    config: EvalConfig
    excluded: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "map": self.map,
            "mnds_plus": self.mnds_plus,
            "excluded_categories": list(self.excluded),
            "config": self.config.to_dict(),
        }

    def table(self) -> str:
        def fmt(v):
            return "    -" if v is None else f"{v:.4f}"

        lines = [f"{'category':<12} {'n_gt':>6} {'AP':>7} {'ATE':>7} {'ASE':>7} {'AOE':>7} {'NDS+':>7}"]
        for name, cm in self.per_class.items():
            lines.append(
                f"{name:<12} {cm.n_gt:>6} {fmt(cm.ap):>7} {fmt(cm.ate):>7} {fmt(cm.ase):>7} "
                f"{fmt(cm.aoe):>7} {fmt(cm.nds_plus):>7}"
            )
        lines.append(f"mAP   {self.map:.4f}")
        lines.append(f"mNDS+ {self.mnds_plus:.4f}")
        return "\n".join(lines)


@dataclass
class MatchResult:
    """Outcome of greedy matching.

    ``scores`` and ``tp`` follow descending-score order; ``pairs`` holds
    ``(detection, gt_box)`` for every true positive in that order.
    """

    scores: np.ndarray
    tp: np.ndarray
    pairs: List[Tuple[Detection, Box3D]]


def in_range(box: Box3D, limit: float = EVAL_RANGE) -> bool:
    x, y = box.center[0], box.center[1]
    return -limit <= x <= limit and -limit <= y <= limit


def filter_range(items: Iterable, limit: float = EVAL_RANGE) -> list:
    """Keep boxes (or detections) whose center x and y lie in ``[-limit, limit]``."""
    return [it for it in items if in_range(it.box if isinstance(it, Detection) else it, limit)]


def center_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def _score_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].sample_id, i))


def match_detections(
    gts: Mapping[str, Sequence[Box3D]], dets: Sequence[Detection], threshold: float
) -> MatchResult:
    """Greedy BEV center-distance matching of one category.

    Detections are taken by descending score (ties: sample_id, then input
    order). Each claims the nearest still-unmatched ground truth of its own
    sample and is a true positive when that distance is strictly below
    ``threshold``.
    """
    order = _score_order(dets)
    taken = {sid: np.zeros(len(boxes), dtype=bool) for sid, boxes in gts.items()}
    centers = {sid: np.array([b.center[:2] for b in boxes]).reshape(-1, 2) for sid, boxes in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    pairs = []
    for rank, i in enumerate(order):
        det = dets[i]
        gt_xy = centers.get(det.sample_id)
        if gt_xy is None or len(gt_xy) == 0:
            continue
        dist = np.hypot(gt_xy[:, 0] - det.box.center[0], gt_xy[:, 1] - det.box.center[1])
        dist[taken[det.sample_id]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] < threshold:
            taken[det.sample_id][j] = True
            tp[rank] = True
            pairs.append((det, gts[det.sample_id][j]))
    scores = np.array([dets[i].score for i in order], dtype=float)
    return MatchResult(scores, tp, pairs)


def recall_grid() -> np.ndarray:
    return np.arange(N_RECALL_POINTS, dtype=float) / (N_RECALL_POINTS - 1)


def interpolated_precision(match: MatchResult, n_gt: int) -> np.ndarray:
    """Precision sampled at 101 evenly spaced recall levels (0 past max recall)."""
    if n_gt == 0 or len(match.tp) == 0:
        return np.zeros(N_RECALL_POINTS)
    tp = np.cumsum(match.tp).astype(float)
    fp = np.cumsum(~match.tp).astype(float)
    prec = tp / (tp + fp)
    rec = tp / float(n_gt)
    return np.interp(recall_grid(), rec, prec, right=0.0)


def average_precision(
    match: MatchResult,
    n_gt: int,
    min_recall: float = MIN_RECALL,
    min_precision: float = MIN_PRECISION,
    raw: bool = False,
) -> float:
    """AP of one category at one threshold.

    Returns ``nan`` when ``n_gt == 0``. With ``raw=True`` the mean of the
    interpolated precision is returned without the recall/precision floors.
    """
    if n_gt == 0:
        return float("nan")
    prec = interpolated_precision(match, n_gt)
    if raw:
        return math.fsum(prec) / len(prec)
    prec = prec[round((N_RECALL_POINTS - 1) * min_recall) + 1:] - min_precision
    prec[prec < 0] = 0.0
    return min(1.0, max(0.0, math.fsum(prec) / len(prec) / (1.0 - min_precision)))


def scale_iou(a: Box3D, b: Box3D) -> float:
    inter = 1.0
    for x, y in zip(a.size, b.size):
        inter *= min(x, y)
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def yaw_difference(a: float, b: float) -> float:
    """Smallest absolute angle between two headings, in [0, pi]."""
    d = abs(math.remainder(a - b, 2.0 * math.pi))
    return min(d, math.pi)


def tp_errors(pairs: Sequence[Tuple[Detection, Box3D]]) -> Tuple[float, float, float]:
    """Mean (ATE, ASE, AOE) over matched pairs; (1, 1, 1) when there are none."""
    if not pairs:
        return 1.0, 1.0, 1.0
    ate = math.fsum(center_distance(d.box, g) for d, g in pairs) / len(pairs)
    ase = math.fsum(1.0 - scale_iou(d.box, g) for d, g in pairs) / len(pairs)
    aoe = math.fsum(yaw_difference(d.box.yaw, g.yaw) for d, g in pairs) / len(pairs)
    return ate, ase, aoe


def nds_plus(ap: float, ate: float, ase: float, aoe: float) -> float:
    """``(3*AP + sum(1 - min(1, err))) / 6`` over ATE, ASE and AOE."""
    return (3.0 * ap + sum(1.0 - min(1.0, e) for e in (ate, ase, aoe))) / 6.0


def evaluate_category(
    category: str,
    gts: Mapping[str, Sequence[Box3D]],
    dets: Sequence[Detection],
    config: EvalConfig = EvalConfig(),
) -> ClassMetrics:
    gt_cat = {sid: [b for b in filter_range(boxes, config.eval_range) if b.category == category]
              for sid, boxes in gts.items()}
    det_cat = [d for d in filter_range(dets, config.eval_range) if d.box.category == category]
    n_gt = sum(len(v) for v in gt_cat.values())
    if n_gt == 0:
        return ClassMetrics(category, 0)
    aps = {}
    for th in config.dist_thresholds:
        m = match_detections(gt_cat, det_cat, th)
        aps[th] = average_precision(m, n_gt, config.min_recall, config.min_precision, raw=config.raw_ap)
    ap = math.fsum(aps[th] for th in config.dist_thresholds) / len(config.dist_thresholds)
    ate, ase, aoe = tp_errors(match_detections(gt_cat, det_cat, config.tp_threshold).pairs)
    return ClassMetrics(category, n_gt, ap, ate, ase, aoe, nds_plus(ap, ate, ase, aoe), aps)


def evaluate(
    gt: DatasetManifest,
    detections: Sequence[Detection],
    config: EvalConfig = EvalConfig(),
    threads: int = 1,
) -> EvalReport:
    """Score ``detections`` against the boxes of ``gt``.

    Raises:
        UnknownSampleId: a detection refers to a sample not in ``gt``.
        EmptyGroundTruth: no category has ground truth inside the range.
    """
    gts = {s.sample_id: list(s.boxes) for s in gt.samples}
    for d in detections:
        if d.sample_id not in gts:
            raise UnknownSampleId(f"detection refers to unknown sample {d.sample_id!r}")

    def run(cat):
        return evaluate_category(cat, gts, detections, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, CATEGORIES))
    else:
        results = [run(c) for c in CATEGORIES]
    per_class = {cm.category: cm for cm in results}
    scored = [cm for cm in results if cm.n_gt > 0]
    if not scored:
        raise EmptyGroundTruth("no ground-truth boxes inside the evaluation range")
    excluded = tuple(cm.category for cm in results if cm.n_gt == 0)
    m_ap = math.fsum(cm.ap for cm in scored) / len(scored)
    m_nds = math.fsum(cm.nds_plus for cm in scored) / len(scored)
    return EvalReport(per_class, m_ap, m_nds, config, excluded)


# --------------------------------------------------------------------------
# detections files: header {"format": "bevharmonize/1", "kind": "detections"},
# then one record per detection:
# {"sample_id", "center", "size", "yaw", "category", "score", "velocity"?}


def detection_to_record(d: Detection) -> dict:
    rec = box_to_record(d.box, category_key="category")
    rec["sample_id"] = d.sample_id
    rec["score"] = d.score
    return rec


def save_detections(path, dets: Sequence[Detection], config: Optional[dict] = None) -> None:
    header = {"kind": "detections"}
    if config is not None:
        header["config"] = dict(config)
    write_records(path, header, (detection_to_record(d) for d in dets))


def load_detections(path) -> List[Detection]:
    _, records = read_records(path)
    out = []
    for index, (lineno, obj) in enumerate(records):
        try:
            category = obj.get("category")
            if category not in CATEGORIES:
                raise ValueError(f"detection category {category!r} is not one of {CATEGORIES}")
            sid = obj.get("sample_id")
            if not isinstance(sid, str):
                raise ValueError("sample_id must be a string")
            score = obj.get("score")
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise ValueError("score must be a number")
            out.append(Detection(sid, box_from_record(obj, category), float(score)))
        except (ValueError, TypeError, AttributeError) as exc:
            raise ParseError(f"record {index}: {exc}", path=path, line=lineno) from exc
    return out


def gt_as_detections(gt: DatasetManifest, score: float = 1.0) -> List[Detection]:
    return [Detection(s.sample_id, b, score) for s in gt.samples for b in s.boxes]
