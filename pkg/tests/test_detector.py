import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netnet.boxes import Detection, GroundTruthBox, iou, iou_matrix
from netnet.detector import (AnchorConfig, Detector, ModelConfig, TrainConfig, Variant, center_to_corner, decode,
                             encode, generate_anchors, match_anchors, mine_negatives, multibox_loss, nms,
                             postprocess, predict, train)
from netnet.nnops import ConfigError
from netnet.scenes import SceneConfig, generate_dataset
from netnet.tensor import ShapeError, Tensor

from oracles import brute_match, brute_nms

box = st.tuples(st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.01, 0.2), st.floats(0.01, 0.2)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


def test_single_cell_anchor():
    anchors, levels = generate_anchors(AnchorConfig([1], [[0.3]], (1.0,)))
    assert anchors.tolist() == [[0.5, 0.5, 0.3, 0.3]] and levels.tolist() == [0]


def test_anchor_count_and_invariants():
    cfg = ModelConfig().anchor_config()
    anchors, levels = generate_anchors(cfg)
    assert len(anchors) == sum(s * s * p for s, p in zip(cfg.sizes, cfg.per_cell))
    assert len(anchors) == 2970
    assert np.all(anchors[:, 2:] > 0)
    assert np.all((anchors[:, :2] > 0) & (anchors[:, :2] < 1))
    assert levels.tolist() == sorted(levels.tolist())


def test_anchor_ramp():
    cfg = AnchorConfig.ramp([19, 10, 5, 3], 0.1, 0.9)
    assert [round(s[0], 12) for s in cfg.scales] == [0.1, round(0.1 + 0.8 / 3, 12), round(0.1 + 1.6 / 3, 12), 0.9]
    assert cfg.scales[-1][1] == pytest.approx(math.sqrt(0.9))
    assert cfg.per_cell == [6, 6, 6, 6]


def test_iou_examples():
    a = GroundTruthBox(0, 0, 2, 2, 1)
    assert iou(a, GroundTruthBox(1, 1, 3, 3, 1)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou(a, a) == 1.0
    assert iou(a, GroundTruthBox(3, 3, 4, 4, 1)) == 0.0


@settings(max_examples=60, deadline=None)
@given(box, box)
def test_iou_properties(a, b):
    ga, gb = GroundTruthBox(*a, 1), GroundTruthBox(*b, 1)
    v = iou(ga, gb)
    assert 0.0 <= v <= 1.0
    assert v == iou(gb, ga)
    assert iou(ga, ga) == pytest.approx(1.0, abs=1e-12)
    m = iou_matrix(np.array([a]), np.array([b]))
    assert m[0, 0] == pytest.approx(v, abs=1e-15)


def test_matching_edge_cases():
    anchors = np.array([[0.25, 0.25, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5]])
    a = match_anchors(anchors, [])
    assert np.all(a.labels == 0) and np.all(a.matched == -1)
    a = match_anchors(anchors, [GroundTruthBox(0.0, 0.0, 0.5, 0.5, 2)])
    assert a.labels.tolist() == [2, 0]
    np.testing.assert_allclose(a.targets[0], 0.0, atol=1e-15)


def test_matching_crafted_fixture():
    anchors = np.array([[0.3, 0.3, 0.4, 0.4], [0.35, 0.35, 0.4, 0.4], [0.7, 0.7, 0.3, 0.3]])
    gts = [GroundTruthBox(0.1, 0.1, 0.5, 0.5, 1), GroundTruthBox(0.15, 0.15, 0.55, 0.55, 2)]
    a = match_anchors(anchors, gts)
    want = brute_match(center_to_corner(anchors).tolist(), [g.coords for g in gts], 0.5)
    assert a.matched.tolist() == want
    assert a.labels.tolist() == [gts[g].class_id if g >= 0 else 0 for g in want]


@settings(max_examples=80, deadline=None)
@given(st.lists(box, min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_matching_vs_brute_force(gt_boxes, seed):
    rng = np.random.default_rng(seed)
    anchors = np.column_stack([rng.uniform(0.1, 0.9, (12, 2)), rng.uniform(0.05, 0.4, (12, 2))])
    gts = [GroundTruthBox(*b, 1 + i % 3) for i, b in enumerate(gt_boxes)]
    a = match_anchors(anchors, gts)
    want = brute_match(center_to_corner(anchors).tolist(), [g.coords for g in gts], 0.5)
    assert a.matched.tolist() == want


def test_encode_examples():
    anchor = np.array([0.5, 0.5, 0.2, 0.4])
    np.testing.assert_allclose(encode(center_to_corner(anchor), anchor), [0, 0, 0, 0], atol=1e-14)
    # displaced by (0.02, -0.04), width doubled: (0.02/(0.2*0.1), -0.04/(0.4*0.1), log 2/0.2, 0)
    gt = center_to_corner(np.array([0.52, 0.46, 0.4, 0.4]))
    np.testing.assert_allclose(encode(gt, anchor), [1.0, -1.0, math.log(2) / 0.2, 0.0], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(box, st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(1e-3, 0.9), st.floats(1e-3, 0.9)))
def test_encode_decode_round_trip(b, a):
    anchor = np.array(a)
    np.testing.assert_allclose(decode(encode(np.array(b), anchor), anchor), b, atol=1e-10)


def test_decode_clamps_size():
    out = decode(np.array([0.0, 0.0, -1e4, -1e4]), np.array([0.5, 0.5, 0.1, 0.1]))
    assert out[2] - out[0] > 0


def one_hot_logits(labels, k, mag=40.0):
    x = np.full(labels.shape + (k,), -mag)
    np.put_along_axis(x, labels[..., None], mag, axis=-1)
    return x


def test_loss_perfect_prediction():
    labels = np.array([1, 0, 2, 0, 0, 0, 0, 0])
    targets = np.random.default_rng(0).standard_normal((8, 4)) * (labels > 0)[:, None]
    loss = multibox_loss(Tensor(one_hot_logits(labels, 3)), Tensor(targets), labels, targets)
    assert 0 <= loss.item() <= 1e-10


def test_loss_uniform_logits_no_positives():
    a, k = 10, 4
    labels = np.zeros(a, dtype=np.int64)
    loss = multibox_loss(Tensor(np.zeros((a, k))), Tensor(np.zeros((a, 4))), labels, np.zeros((a, 4)))
    # 3 mined negatives, normalized by max(pos, 1) = 1
    assert loss.item() == pytest.approx(3 * math.log(k), abs=1e-12)


def test_loss_hard_negative_count():
    labels = np.array([[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]])
    ce = np.arange(10.0)[None]
    mask = mine_negatives(ce, labels, 3)
    assert mask[0].tolist() == [False] * 7 + [True] * 3
    ties = mine_negatives(np.zeros((1, 10)), labels, 3)
    assert np.flatnonzero(ties[0]).tolist() == [1, 2, 3]


def test_loss_shape_error():
    with pytest.raises(ShapeError):
        multibox_loss(Tensor(np.zeros((5, 3))), Tensor(np.zeros((4, 4))), np.zeros(5, int), np.zeros((5, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (2, 9)) * (rng.uniform(size=(2, 9)) < 0.4)
    loss = multibox_loss(Tensor(rng.standard_normal((2, 9, 3)) * 5), Tensor(rng.standard_normal((2, 9, 4))),
                         labels, rng.standard_normal((2, 9, 4)))
    assert loss.item() >= 0


def det(b, score, cls=1):
    return Detection(*b, class_id=cls, score=score)


def test_nms_examples():
    a = det((0.1, 0.1, 0.4, 0.4), 0.9)
    assert nms([det(a.coords, 0.5), a], 0.45) == [a]
    far = [det((0.0, 0.0, 0.1, 0.1), 0.3), det((0.5, 0.5, 0.6, 0.6), 0.4)]
    assert len(nms(far, 0.45)) == 2


def test_nms_five_box_fixture():
    boxes = [(0.1, 0.1, 0.5, 0.5), (0.12, 0.1, 0.52, 0.5), (0.3, 0.3, 0.7, 0.7), (0.6, 0.6, 0.9, 0.9),
             (0.11, 0.12, 0.5, 0.49)]
    scores = [0.8, 0.9, 0.7, 0.6, 0.9]
    dets = [det(b, s) for b, s in zip(boxes, scores)]
    kept = nms(dets, 0.45)
    assert [dets.index(k) for k in kept] == brute_nms(boxes, scores, 0.45)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(box, st.sampled_from([0.1, 0.2, 0.5, 0.9])), min_size=1, max_size=8),
       st.sampled_from([0.3, 0.45, 0.7]))
def test_nms_vs_brute_force(items, thresh):
    dets = [det(b, s) for b, s in items]
    kept = nms(dets, thresh)
    ids = [next(i for i, d in enumerate(dets) if d is k) for k in kept]
    assert ids == brute_nms([b for b, _ in items], [s for _, s in items], thresh)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou(a, b) < thresh


def test_postprocess_uniform_logits():
    anchors, _ = generate_anchors(AnchorConfig([3], [[0.3]], (1.0,)))
    logits = np.zeros((len(anchors), 4))
    offsets = np.zeros((len(anchors), 4))
    assert postprocess(logits, offsets, anchors, score_thresh=0.3) == []
    out = postprocess(logits, offsets, anchors, score_thresh=0.2)
    assert out and all(d.score == pytest.approx(0.25) for d in out)


def small_model(variant="netm", seed=0):
    return Detector(ModelConfig(variant=variant), seed=seed)


def test_predict_sorted_and_nms_consistent():
    m = small_model()
    rng = np.random.default_rng(0)
    for p in m.parameters():
        if p.name.startswith("head"):
            p.data = rng.standard_normal(p.shape) * 0.3
    dets = predict(Tensor(rng.uniform(size=(1, 75, 75))), m, score_thresh=0.05)
    assert dets and len(dets) <= 100
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    for c in {d.class_id for d in dets}:
        same = [d for d in dets if d.class_id == c]
        for i, a in enumerate(same):
            assert all(iou(a, b) < 0.45 for b in same[i + 1:])


@pytest.mark.parametrize("variant", [v.value for v in Variant])
def test_all_variants_forward(variant):
    m = small_model(variant)
    logits, offsets = m.forward(Tensor(np.zeros((2, 1, 75, 75))))
    assert logits.shape == (2, 2970, 4) and offsets.shape == (2, 2970, 4)
    names = list(m.named_parameters())
    assert len(names) == len(set(names))


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="nnem", topology="skipped")
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")


def test_train_config_schedule():
    cfg = TrainConfig(lr0=0.002, warmup_epochs=5, milestones=(10, 12))
    assert cfg.learning_rate(0, 0, 10) == pytest.approx(0.0002)
    assert cfg.learning_rate(5, 0, 10) == pytest.approx(0.002)
    assert cfg.learning_rate(10, 0, 10) == pytest.approx(0.0002)
    assert cfg.learning_rate(12, 3, 10) == pytest.approx(0.00002)
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(5, 3))


@pytest.fixture(scope="module")
def tiny_scenes():
    return generate_dataset(SceneConfig(), 0, 4, "train")


def test_zero_lr_leaves_parameters(tiny_scenes):
    m = small_model()
    before = [p.data.copy() for p in m.parameters()]
    train(m, tiny_scenes, TrainConfig(lr0=0.0, epochs=2, batch_size=2, warmup_epochs=0, milestones=()))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_training_is_deterministic(tiny_scenes):
    cfg = TrainConfig(epochs=2, batch_size=2, warmup_epochs=1, milestones=(1,))
    h1 = train(small_model(seed=4), tiny_scenes, cfg)
    h2 = train(small_model(seed=4), tiny_scenes, cfg)
    assert h1 == h2 and all(math.isfinite(x) for x in h1)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(small_model(), [], TrainConfig(epochs=1))
