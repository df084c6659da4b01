import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevharmonize.dataset_io import CATEGORIES, DatasetManifest
from bevharmonize.errors import EmptyGroundTruth, ParseError, UnknownSampleId
from bevharmonize.geometry import Box3D
from bevharmonize.metrics import (
    Detection,
    EvalConfig,
    average_precision,
    evaluate,
    filter_range,
    gt_as_detections,
    load_detections,
    match_detections,
    nds_plus,
    save_detections,
    scale_iou,
    tp_errors,
)
from bevharmonize.synth import NoiseModel, SceneSpec, flat_ground_sample, generate

from oracles import best_assignment_tp, brute_force_ap, voxel_iou


def car(x, y, yaw=0.0, size=(4.0, 2.0, 1.6), category="vehicle"):
    return Box3D((x, y, 0.8), size, yaw, category)


def det(sid, x, y, score, **kw):
    return Detection(sid, car(x, y, **kw), score)


def oracle_inputs(gt, dets, category, limit=50.0):
    gts = {s.sample_id: [(b.center[0], b.center[1]) for b in filter_range(s.boxes, limit) if b.category == category]
           for s in gt.samples}
    flat = [(d.score, d.sample_id, d.box.center[0], d.box.center[1])
            for d in filter_range(dets, limit) if d.box.category == category]
    return gts, flat


def oracle_ap(gts, flat, threshold):
    return brute_force_ap(gts, flat, threshold)


def impl_ap(gts, flat, threshold):
    gt_boxes = {sid: [car(x, y) for x, y in v] for sid, v in gts.items()}
    dets = [det(sid, x, y, s) for s, sid, x, y in flat]
    n_gt = sum(len(v) for v in gts.values())
    return average_precision(match_detections(gt_boxes, dets, threshold), n_gt)


def test_filter_range_examples():
    kept = filter_range([car(0, 0), car(51, 0), car(-50, 50), car(0, -50.0001)])
    assert [b.center[:2] for b in kept] == [(0.0, 0.0), (-50.0, 50.0)]
    assert filter_range([det("a", 51, 0, 0.5), det("a", 3, 3, 0.5)])[0].box.center[0] == 3.0


def test_single_match():
    m = match_detections({"a": [car(0, 0)]}, [det("a", 0.3, 0, 0.9)], 0.5)
    assert m.tp.tolist() == [True]
    assert len(m.pairs) == 1


def test_second_detection_on_same_gt_is_fp():
    dets = [det("a", 0.2, 0, 0.8), det("a", 0.1, 0, 0.9)]
    m = match_detections({"a": [car(0, 0)]}, dets, 0.5)
    assert m.scores.tolist() == [0.9, 0.8]
    assert m.tp.tolist() == [True, False]
    assert m.pairs[0][0] is dets[1]
    assert best_assignment_tp([(0, 0)], [(0.2, 0), (0.1, 0)], 0.5) == 1


def test_exact_threshold_is_fp():
    m = match_detections({"a": [car(0, 0)]}, [det("a", 0.5, 0, 0.9)], 0.5)
    assert m.tp.tolist() == [False]


def test_detection_only_matches_its_own_sample():
    m = match_detections({"a": [car(0, 0)], "b": []}, [det("b", 0, 0, 0.9)], 0.5)
    assert m.tp.tolist() == [False]


def test_ap_perfect_and_empty():
    gts = {"a": [car(0, 0), car(10, 0)]}
    perfect = match_detections(gts, [det("a", 0, 0, 0.9), det("a", 10, 0, 0.8)], 0.5)
    assert average_precision(perfect, 2) == 1.0
    assert average_precision(match_detections(gts, [], 0.5), 2) == 0.0
    assert math.isnan(average_precision(match_detections({}, [], 0.5), 0))


def test_ap_three_gt_four_dets():
    gts = {"a": [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]}
    flat = [(0.9, "a", 0.1, 0.0), (0.8, "a", 30.0, 0.0), (0.7, "a", 10.2, 0.0), (0.6, "a", 20.3, 0.0)]
    got = impl_ap(gts, flat, 0.5)
    assert got == oracle_ap(gts, flat, 0.5)
    # precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1
    assert 0.5 < got < 1.0


def test_raw_ap_is_plain_mean():
    gts = {"a": [car(0, 0)]}
    m = match_detections(gts, [det("a", 0, 0, 0.9)], 0.5)
    assert average_precision(m, 1, raw=True) == 1.0


def test_scale_iou_against_voxels():
    a = car(0, 0, size=(4.0, 2.0, 2.0))
    b = car(0, 0, size=(2.0, 4.0, 2.0))
    assert scale_iou(a, b) == pytest.approx(1.0 / 3.0)
    assert scale_iou(a, b) == pytest.approx(voxel_iou(a.size, b.size), abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(sa=st.tuples(*[st.floats(0.5, 3.0)] * 3), sb=st.tuples(*[st.floats(0.5, 3.0)] * 3))
def test_scale_iou_voxel_property(sa, sb):
    step = 0.02
    # each axis can gain or lose up to one voxel layer
    tol = 3 * step / min(sa + sb)
    assert scale_iou(car(0, 0, size=sa), car(0, 0, size=sb)) == pytest.approx(voxel_iou(sa, sb, step), abs=tol)


def test_tp_errors_examples():
    g = car(0, 0)
    assert tp_errors([(Detection("a", g, 1.0), g)]) == (0.0, 0.0, 0.0)
    ate, ase, aoe = tp_errors([(Detection("a", car(0.3, 0.4, yaw=math.pi), 1.0), g)])
    assert ate == pytest.approx(0.5)
    assert ase == 0.0
    assert aoe == pytest.approx(math.pi)
    assert tp_errors([]) == (1.0, 1.0, 1.0)
    _, _, wrap = tp_errors([(Detection("a", car(0, 0, yaw=3.0), 1.0), car(0, 0, yaw=-3.0))])
    assert wrap == pytest.approx(2 * math.pi - 6.0)


def test_nds_plus_examples():
    assert nds_plus(0.5, 0.5, 0.25, 2.0) == pytest.approx((1.5 + 0.5 + 0.75 + 0.0) / 6, abs=1e-12)
    assert nds_plus(1.0, 0.0, 0.0, 0.0) == 1.0
    assert nds_plus(0.0, 1.0, 3.0, 1.5) == 0.0


@settings(max_examples=200, deadline=None)
@given(ap=st.floats(0, 1), errs=st.tuples(*[st.floats(0, 5)] * 3), k=st.integers(0, 2), h=st.floats(1e-6, 0.5))
def test_nds_plus_monotone_and_clamped(ap, errs, k, h):
    base = nds_plus(ap, *errs)
    assert nds_plus(min(1.0, ap + h), *errs) >= base
    bumped = list(errs)
    bumped[k] += h
    assert nds_plus(ap, *bumped) <= base
    if errs[k] >= 1.0:
        assert nds_plus(ap, *bumped) == base


def identity_report(gt):
    return evaluate(gt, gt_as_detections(gt))


def test_evaluate_identity_is_perfect():
    gt, _ = generate(SceneSpec(seed=3, n_samples=5))
    rep = identity_report(gt)
    assert rep.map == 1.0 and rep.mnds_plus == 1.0
    for cm in rep.per_class.values():
        if cm.n_gt:
            assert (cm.ap, cm.ate, cm.ase, cm.aoe, cm.nds_plus) == (1.0, 0.0, 0.0, 0.0, 1.0)


def test_evaluate_empty_detections():
    gt, _ = generate(SceneSpec(seed=3, n_samples=5))
    rep = evaluate(gt, [])
    assert rep.map == 0.0 and rep.mnds_plus == 0.0


def test_evaluate_excludes_empty_categories():
    s = flat_ground_sample()
    gt = DatasetManifest("synthetic", (s,), 1)
    rep = identity_report(gt)
    assert set(rep.excluded) == set(CATEGORIES) - {"vehicle"}
    assert rep.per_class["pedestrian"].ap is None
    assert rep.map == 1.0


def test_evaluate_errors():
    gt, _ = generate(SceneSpec(seed=3, n_samples=2))
    with pytest.raises(UnknownSampleId):
        evaluate(gt, [det("nope", 0, 0, 0.5)])
    empty, _ = generate(SceneSpec(seed=3, n_samples=2, box_density=0))
    with pytest.raises(EmptyGroundTruth):
        evaluate(empty, [])


def test_noisy_scene_matches_oracle():
    spec = SceneSpec(seed=17, n_samples=200, box_density=4, noise=NoiseModel(center_sigma=0.2, score_low=0.1))
    gt, dets = generate(spec)
    rep = evaluate(gt, dets)
    for cat, cm in rep.per_class.items():
        if not cm.n_gt:
            continue
        gts, flat = oracle_inputs(gt, dets, cat)
        assert cm.ap_per_threshold[0.5] == oracle_ap(gts, flat, 0.5)
        expected = (3 * cm.ap + sum(1 - min(1, e) for e in (cm.ate, cm.ase, cm.aoe))) / 6
        assert cm.nds_plus == pytest.approx(expected, abs=1e-12)


def test_permutation_invariance():
    spec = SceneSpec(seed=5, n_samples=20, noise=NoiseModel(center_sigma=0.4, score_low=0.2, fp_rate=2,
                                                            detect_prob=0.8))
    gt, dets = generate(spec)
    shuffled = list(dets)
    random.Random(0).shuffle(shuffled)
    assert evaluate(gt, shuffled).to_dict() == evaluate(gt, dets).to_dict()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), score=st.floats(0.0, 1.0), x=st.floats(-50, 50), y=st.floats(-50, 50))
def test_adding_false_positive_never_raises_ap(seed, score, x, y):
    gt, dets = generate(SceneSpec(seed=seed, n_samples=3, noise=NoiseModel(center_sigma=0.3, score_low=0.3)))
    gts = {s.sample_id: [b for b in s.boxes if b.category == "vehicle"] for s in gt.samples}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return
    vdets = [d for d in dets if d.box.category == "vehicle"]
    sid = gt.samples[0].sample_id
    # keep the extra detection away from every ground truth so it can only be an FP
    if any(math.hypot(b.center[0] - x, b.center[1] - y) < 4.5 for b in gts[sid]):
        return
    extra = vdets + [det(sid, x, y, score)]
    for th in (0.5, 1.0, 2.0, 4.0):
        before = average_precision(match_detections(gts, vdets, th), n_gt)
        after = average_precision(match_detections(gts, extra, th), n_gt)
        assert after <= before


@settings(max_examples=50, deadline=None)
@given(dx=st.floats(-0.4, 0.4), dy=st.floats(-0.4, 0.4), seed=st.integers(0, 1000))
def test_small_offset_keeps_tp_set(dx, dy, seed):
    if math.hypot(dx, dy) > 0.4:
        return
    rng = np.random.default_rng(seed)
    grid = [(3.0 * i, 3.0 * j) for i in range(-4, 5) for j in range(-4, 5)]
    gts = {"a": [car(x, y) for x, y in grid]}
    scores = rng.uniform(0.1, 1.0, len(grid))
    base = [det("a", x, y, float(s)) for (x, y), s in zip(grid, scores)]
    moved = [det("a", x + dx, y + dy, float(s)) for (x, y), s in zip(grid, scores)]
    a = match_detections(gts, base, 0.5)
    b = match_detections(gts, moved, 0.5)
    assert a.tp.tolist() == b.tp.tolist()
    assert [g for _, g in a.pairs] == [g for _, g in b.pairs]


def test_thread_count_does_not_change_report():
    gt, dets = generate(SceneSpec(seed=8, n_samples=30, noise=NoiseModel(center_sigma=0.5, score_low=0.1)))
    assert evaluate(gt, dets, threads=4).to_dict() == evaluate(gt, dets, threads=1).to_dict()


def test_config_thresholds_override():
    gt, dets = generate(SceneSpec(seed=8, n_samples=10, xy_range=45, noise=NoiseModel(center_sigma=0.3)))
    rep = evaluate(gt, dets, EvalConfig(dist_thresholds=(4.0,)))
    assert all(cm.ap == 1.0 for cm in rep.per_class.values() if cm.n_gt)


def test_detections_roundtrip(tmp_path):
    _, dets = generate(SceneSpec(seed=2, n_samples=4, noise=NoiseModel(center_sigma=0.3, score_low=0.2)))
    path = tmp_path / "d.bhz"
    save_detections(path, dets)
    assert load_detections(path) == dets


def test_detections_bad_category(tmp_path):
    path = tmp_path / "d.bhz"
    path.write_text('{"format": "bevharmonize/1", "kind": "detections"}\n'
                    '{"sample_id": "a", "center": [0, 0, 0], "size": [1, 1, 1], "yaw": 0, '
                    '"category": "truck", "score": 0.5}\n')
    with pytest.raises(ParseError) as info:
        load_detections(path)
    assert info.value.line == 2


def test_score_out_of_range():
    with pytest.raises(ValueError):
        det("a", 0, 0, 1.5)
