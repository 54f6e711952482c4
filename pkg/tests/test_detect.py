import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scopenet.config import InferConfig, ModelConfig
from scopenet.detect import (
    Detections,
    decode_level,
    decode_location,
    detect,
    fuse_scores,
    nms,
    read_detections,
    top_k,
    write_detections,
)
from scopenet.geometry import Box, Point, iou
from scopenet.model import ScopeNet, output_channels


def brute_force_nms(boxes, scores, classes, thr):
    """Quadratic reference: walk boxes best-first, keep one unless a kept same-class box overlaps it."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    kept = []
    for i in order:
        if all(classes[j] != classes[i] or iou(Box(*boxes[i]), Box(*boxes[j])) <= thr for j in kept):
            kept.append(i)
    return kept


def random_instance(rng, n=50, num_classes=3):
    xy = rng.uniform(0, 100, size=(n, 2))
    wh = rng.uniform(5, 40, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1), rng.permutation(n) / n + rng.uniform(0, 1e-3), rng.integers(1, num_classes + 1, n)


@pytest.mark.parametrize("thr", [0.5, 0.6])
def test_nms_matches_brute_force_on_100_instances(thr):
    rng = np.random.default_rng(int(thr * 10))
    for _ in range(100):
        boxes, scores, classes = random_instance(rng)
        assert nms(boxes, scores, classes, thr).tolist() == brute_force_nms(boxes, scores, classes, thr)


def test_nms_two_box_example():
    boxes = np.array([[0.0, 0, 10, 10], [0.0, 0, 10, 16.6666667]])  # IoU 0.6
    assert iou(Box(*boxes[0]), Box(*boxes[1])) == pytest.approx(0.6, abs=1e-6)
    assert nms(boxes, np.array([0.9, 0.8]), np.array([1, 1]), 0.5).tolist() == [0]
    assert nms(boxes, np.array([0.9, 0.8]), np.array([1, 2]), 0.5).tolist() == [0, 1]


def test_nms_empty():
    assert nms(np.zeros((0, 4)), np.zeros(0), np.zeros(0, int)).size == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nms_independent_of_input_order(seed):
    rng = np.random.default_rng(seed)
    boxes, _, classes = random_instance(rng, n=20, num_classes=2)
    scores = rng.choice([0.3, 0.5, 0.9], size=20)  # heavy ties
    perm = rng.permutation(20)
    a = nms(boxes, scores, classes)
    b = perm[nms(boxes[perm], scores[perm], classes[perm])]
    assert a.tolist() == b.tolist()


def test_top_k():
    s = np.array([0.2, 0.9, 0.5, 0.9])
    assert top_k(s, 10).tolist() == [1, 3, 2, 0]
    assert top_k(s, 1).tolist() == [1]  # tie goes to the lower index


def test_fuse_examples():
    p_loc, p_box = fuse_scores(np.array(0.8), np.array([1.0, 1, 1, 1]))
    assert (p_loc, p_box) == (1.0, 0.8)
    p_loc, p_box = fuse_scores(np.array(1.0), np.array([0.8, 0.6, 0.4, 0.2]))
    assert p_box == pytest.approx(0.5)
    _, p_box = fuse_scores(np.array(0.7), np.array([0.8, 0.6, 0.4, 0.2]), "cls_only")
    assert p_box == 0.7


def test_decode_location_single_bin_fused_equals_cls():
    logits = np.array([2.0, -1.0])
    raw = np.array([[0.3, 1.0]] * 4)
    reg = np.zeros((4, 1))
    dets = decode_location(logits, raw, reg, np.full((4, 1), 3.0), Point(20, 20))
    assert len(dets) == 2
    assert dets[0].p_box == pytest.approx(dets[0].p_cls) and dets[0].p_loc == 1.0
    assert dets[0].box == Box(12, 12, 28, 28)


def test_decode_location_picks_argmax_bin():
    raw = np.array([[0.0, 2.0, 1.0, 0.0]] * 4)  # 3 bins + temperature
    reg = np.zeros((4, 3))
    reg[:, 1] = math.log(1.5)
    dets = decode_location(np.array([5.0]), raw, reg, np.array([1.0, 2.0, 3.0]), Point(10, 10))
    assert dets[0].bins == (2, 2, 2, 2)
    assert dets[0].box.as_tuple() == pytest.approx((4, 4, 16, 16))


def test_decode_location_degenerate_dropped():
    raw = np.zeros((4, 2))
    reg = np.full((4, 1), -800.0)  # borders underflow to zero
    assert decode_location(np.array([5.0]), raw, reg, np.zeros((4, 1)), Point(5, 5)) == []


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20))
def test_temperature_scaling_keeps_bin_choice_and_bounds_score(seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=3)
    raw = rng.normal(size=(4, 6))
    reg = rng.normal(0, 0.2, size=(4, 5))
    scales = rng.uniform(1, 5, size=5)
    a = decode_location(logits, raw, reg, scales, Point(32, 32), score_threshold=0.0)
    scaled = raw.copy()
    scaled[:, :5] *= scale
    b = decode_location(logits, scaled, reg, scales, Point(32, 32), score_threshold=0.0)
    assert [d.bins for d in a] == [d.bins for d in b]
    assert all(d.p_box <= d.p_cls for d in a)


def test_decode_level_agrees_with_decode_location():
    rng = np.random.default_rng(3)
    c, n = 2, 3
    out = rng.normal(0, 1, size=(1, output_channels(c, n), 2, 3))
    scales = rng.uniform(1, 4, size=(4, n))
    cfg = InferConfig(score_threshold=0.0, top_k=1000)
    dets = decode_level(out, scales, 3, c, n, cfg)[0]
    k = 0
    for loc in range(6):
        j, i = divmod(loc, 3)
        col = out[0, :, j, i]
        ref = decode_location(
            col[:c], col[c : c + 4 * (n + 1)].reshape(4, n + 1), col[c + 4 * (n + 1) :].reshape(4, n), scales,
            Point((i + 0.5) * 8, (j + 0.5) * 8), score_threshold=0.0,
        )
        for r in ref:
            hit = np.flatnonzero((dets.location == loc) & (dets.classes == r.class_id))
            assert hit.size == 1
            np.testing.assert_allclose(dets.boxes[hit[0]], r.box.as_tuple())
            assert dets.p_box[hit[0]] == pytest.approx(r.p_box)
            k += 1
    assert k == len(dets)


def test_detect_caps_and_roundtrips(tmp_path):
    model = ScopeNet(ModelConfig(backbone_channels=[4, 4, 4], head_channels=4, trunk_depth=1))
    images = np.random.default_rng(0).uniform(size=(2, 64, 64))
    cfg = InferConfig(score_threshold=0.0, max_detections=7)
    dets = detect(model, images, cfg)
    assert [len(d) for d in dets] == [7, 7]
    assert np.all(np.diff(dets[0].p_box) <= 0)
    path = tmp_path / "dets.jsonl"
    write_detections(path, [10, 11], dets)
    back = read_detections(path)
    np.testing.assert_array_equal(back[11].boxes, dets[1].boxes)
    np.testing.assert_array_equal(back[10].p_box, dets[0].p_box)


def test_detections_concat_empty():
    assert len(Detections.concat([])) == 0
    assert len(Detections.concat([Detections.empty(), Detections.empty()])) == 0
