import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantdet.boxes import STRIDES, AnchorSet, box_iou, decode_box, iou_xyxy
from plantdet.errors import ContractError, DataError
from plantdet.gradcheck import check_gradients
from plantdet.loss import LossWeights, assign_targets, bce_with_logits, ciou, detection_loss
from plantdet.model import BackboneConfig, build_model
from plantdet.tensor import Tensor

from oracles import random_boxes, rowwise_iou

ANCHORS = AnchorSet()
IMG = 128
SHAPES = [(IMG // s, IMG // s) for s in STRIDES]


# -- IoU / CIoU --------------------------------------------------------------------

def test_iou_examples():
    a = (0, 0, 2, 2)
    assert iou_xyxy(a, a) == 1.0
    assert iou_xyxy(a, (3, 3, 4, 4)) == 0.0
    assert iou_xyxy(a, (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou_xyxy((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0
    with pytest.raises(ContractError):
        iou_xyxy((2, 0, 0, 2), a)


def test_ciou_identity_and_concentric():
    assert ciou([1.0, 2.0, 4.5, 3.25], [1.0, 2.0, 4.5, 3.25]) == 1.0
    a, b = (0.0, 0.0, 4.0, 2.0), (1.0, 0.5, 3.0, 1.5)
    assert ciou(a, b) == iou_xyxy(a, b)


def test_ciou_degenerate():
    with pytest.raises(ContractError):
        ciou((0, 0, 0, 1), (0, 0, 1, 1))


def test_ciou_property_sweep():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 100_000), random_boxes(rng, 100_000)
    c = ciou(a, b)
    iou_all = rowwise_iou(a, b)
    np.testing.assert_allclose(iou_all[:500], [box_iou(p, q)[0, 0] for p, q in zip(a, b[:500])],
                               atol=1e-15)
    assert np.all(c <= iou_all + 1e-12)
    loss = 1.0 - c
    assert loss.min() >= 0.0 and loss.max() < 2.5
    np.testing.assert_allclose(c, ciou(b, a), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.1, 5.0), min_size=4, max_size=4), st.floats(-2, 2), st.floats(-2, 2))
def test_one_minus_ciou_zero_iff_equal(box, dx, dy):
    x, y, w, h = box
    a = (x, y, x + w, y + h)
    assert 1.0 - ciou(a, a) <= 1e-7
    b = (x + dx, y + dy, x + w + dx, y + h + dy)
    if abs(dx) > 1e-3 or abs(dy) > 1e-3:
        assert 1.0 - ciou(a, b) > 1e-7


# -- decode -----------------------------------------------------------------------

def test_decode_box_examples():
    # sigma(0) = 0.5: centre offset 0.5 cell, size (2 * 0.5)^2 * anchor.
    np.testing.assert_allclose(decode_box((0, 0, 0, 0), (0, 0), (8, 8), 8), (0, 0, 8, 8))
    np.testing.assert_allclose(decode_box((0, 0, 0, 0), (2, 1), (4, 6), 16), (38, 21, 42, 27))
    sat = decode_box((60, -60, 60, -60), (0, 0), (8, 8), 8)
    cx, w = (sat[0] + sat[2]) / 2, sat[2] - sat[0]
    assert -0.5 * 8 < cx <= 1.5 * 8 and 0 < w <= 32
    ws = [decode_box((0, 0, t, 0), (0, 0), (8, 8), 8)[2] for t in np.linspace(-5, 5, 21)]
    assert np.all(np.diff(ws) > 0)


# -- BCE --------------------------------------------------------------------------------

def test_bce_examples(fp64):
    assert float(bce_with_logits(Tensor(0.0), 0.5).data) == pytest.approx(math.log(2), abs=1e-12)
    z = Tensor(np.array([1.3, -0.7]), requires_grad=True)
    t = 1 / (1 + np.exp(-z.data))
    bce_with_logits(z, t).backward()
    assert np.abs(z.grad).max() < 1e-6
    big = bce_with_logits(Tensor(np.array([50.0, -50.0])), np.array([0.0, 1.0]))
    assert float(big.data) == pytest.approx(50.0, rel=1e-12)
    with pytest.raises(ContractError):
        bce_with_logits(Tensor(np.zeros(2)), np.array([0.5, 1.5]))


def test_bce_matches_naive(fp64):
    rng = np.random.default_rng(3)
    z = rng.uniform(-10, 10, 5000)
    t = rng.uniform(0, 1, 5000)
    s = 1 / (1 + np.exp(-z))
    naive = -(t * np.log(s) + (1 - t) * np.log(1 - s))
    got = bce_with_logits(Tensor(z), t)
    assert abs(float(got.data) - naive.mean()) < 1e-6
    w = 2.5
    naive_w = -(w * t * np.log(s) + (1 - t) * np.log(1 - s))
    assert abs(float(bce_with_logits(Tensor(z), t, w).data) - naive_w.mean()) < 1e-6


# -- assignment --------------------------------------------------------------------

def brute_force_assign(annotations, anchors, shapes, strides):
    """Rule oracle: rank 4-neighbour cells by distance to the box centre."""
    levels = []
    for lvl, ((h, w), s) in enumerate(zip(shapes, strides)):
        out = []
        for b, ann in enumerate(annotations):
            for c, cx, cy, bw, bh in ann:
                px, py, pw, ph = cx * w * s, cy * h * s, bw * w * s, bh * h * s
                for a, (aw, ah) in enumerate(anchors.per_level[lvl]):
                    if max(pw / aw, aw / pw, ph / ah, ah / ph) >= 4.0:
                        continue
                    gx, gy = px / s, py / s
                    home = (min(int(math.floor(gx)), w - 1), min(int(math.floor(gy)), h - 1))
                    chosen = [home]
                    for axis in (0, 1):
                        cands = []
                        for d in (-1, 1):
                            cell = list(home)
                            cell[axis] += d
                            centre = cell[axis] + 0.5
                            cands.append((abs((gx, gy)[axis] - centre), tuple(cell)))
                        cell = min(cands)[1]
                        if 0 <= cell[0] < w and 0 <= cell[1] < h:
                            chosen.append(cell)
                    for ix, iy in chosen:
                        out.append((b, a, iy, ix, int(c)))
        levels.append(out)
    return levels


def random_annotations(rng, batch, max_boxes=5, nc=3):
    anns = []
    for _ in range(batch):
        n = rng.integers(0, max_boxes + 1)
        wh = rng.uniform(0.02, 0.9, (n, 2))
        cxy = rng.uniform(0.0, 1.0, (n, 2))
        anns.append(np.column_stack([rng.integers(0, nc, n), cxy, wh]))
    return anns


def test_assignment_equals_bruteforce():
    rng = np.random.default_rng(11)
    for _ in range(30):
        anns = random_annotations(rng, 3)
        got = assign_targets(anns, ANCHORS, SHAPES)
        ref = brute_force_assign(anns, ANCHORS, SHAPES, STRIDES)
        for lv, r in zip(got.levels, ref):
            pairs = sorted(zip(lv.batch.tolist(), lv.anchor.tolist(), lv.gy.tolist(),
                               lv.gx.tolist(), lv.cls.tolist()))
            assert pairs == sorted(r)
            h, w = lv.grid
            assert np.all((lv.gx >= 0) & (lv.gx < w) & (lv.gy >= 0) & (lv.gy < h))


def test_center_box_equal_to_anchor():
    aw, ah = ANCHORS.per_level[0][1]
    ann = [np.array([[0, 0.5, 0.5, aw / IMG, ah / IMG]])]
    lv = assign_targets(ann, ANCHORS, SHAPES).levels[0]
    mine = lv.anchor == 1
    assert mine.sum() == 3
    cells = set(zip(lv.gx[mine].tolist(), lv.gy[mine].tolist()))
    assert cells == {(8, 8), (7, 8), (8, 7)}


def test_too_wide_box_has_no_positives():
    small = ANCHORS.scaled(0.1)
    widest = max(w for w, _ in small.sizes)
    ann = [np.array([[0, 0.5, 0.5, 5 * widest / 640, 20 / 640]])]
    shapes = [(640 // s, 640 // s) for s in STRIDES]
    assert assign_targets(ann, small, shapes).num_positives == 0


def test_out_of_range_annotation():
    with pytest.raises(DataError, match="labels/b.txt"):
        assign_targets([np.zeros((0, 5)), np.array([[0, 1.2, 0.5, 0.1, 0.1]])], ANCHORS, SHAPES,
                       sources=["labels/a.txt", "labels/b.txt"])


# -- detection loss --------------------------------------------------------------------

def raw_preds(rng, batch, nc, scale=1.0):
    return [Tensor(rng.standard_normal((batch, 3, h, w, 5 + nc)) * scale, requires_grad=True)
            for h, w in SHAPES]


def logit(p):
    return math.log(p / (1 - p))


def test_empty_image_is_background_only(fp64, rng):
    preds = raw_preds(rng, 2, 2)
    asg = assign_targets([np.zeros((0, 5))] * 2, ANCHORS, SHAPES)
    weights = LossWeights()
    total, comp = detection_loss(preds, asg, weights, ANCHORS)
    assert comp["box"] == 0.0 and comp["cls"] == 0.0
    z = [p.data[..., 4] for p in preds]
    bg = sum(bal * np.mean(np.logaddexp(0, zz)) for bal, zz in zip(weights.balance, z))
    assert float(total.data) == pytest.approx(2 * weights.obj * bg, rel=1e-12)


def test_constructed_optimum(fp64):
    nc = 2
    anns = [np.array([[0, 0.27, 0.31, 0.2, 0.25], [1, 0.71, 0.66, 0.35, 0.3]]),
            np.array([[1, 0.52, 0.43, 0.12, 0.18]])]
    asg = assign_targets(anns, ANCHORS, SHAPES)
    assert asg.num_positives > 0
    preds = []
    for lvl, lv in enumerate(asg.levels):
        h, w = lv.grid
        raw = np.full((2, 3, h, w, 5 + nc), -20.0)
        for i in range(len(lv)):
            b, a, gy, gx = lv.batch[i], lv.anchor[i], lv.gy[i], lv.gx[i]
            ox, oy, gw, gh = lv.gt[i]
            aw, ah = ANCHORS.per_level[lvl][a] / STRIDES[lvl]
            raw[b, a, gy, gx, :4] = [logit((ox + 0.5) / 2), logit((oy + 0.5) / 2),
                                     logit(math.sqrt(gw / aw) / 2), logit(math.sqrt(gh / ah) / 2)]
            raw[b, a, gy, gx, 4] = 20.0
            raw[b, a, gy, gx, 5 + lv.cls[i]] = 20.0
        preds.append(Tensor(raw))
    total, comp = detection_loss(preds, asg, LossWeights(), ANCHORS)
    assert float(total.data) < 1e-3
    assert comp["ciou"] == pytest.approx(1.0, abs=1e-9)


def test_permutation_invariance(fp64):
    rng = np.random.default_rng(5)
    anns = random_annotations(rng, 2, max_boxes=6)
    preds = raw_preds(rng, 2, 3)
    base, _ = detection_loss(preds, assign_targets(anns, ANCHORS, SHAPES), LossWeights(), ANCHORS)
    for _ in range(5):
        shuffled = [a[rng.permutation(len(a))] for a in anns]
        other, _ = detection_loss(preds, assign_targets(shuffled, ANCHORS, SHAPES), LossWeights(),
                                  ANCHORS)
        assert float(other.data) == float(base.data)


def _grads(preds, asg, weights):
    for p in preds:
        p.grad = None
    total, _ = detection_loss(preds, asg, weights, ANCHORS)
    total.backward()
    return float(total.data), np.concatenate([p.grad.ravel() for p in preds])


def test_lambda_scaling(fp64):
    rng = np.random.default_rng(9)
    anns = random_annotations(rng, 2)
    asg = assign_targets(anns, ANCHORS, SHAPES)
    preds = raw_preds(rng, 2, 3)
    w = LossWeights(cls=0.3)
    t1, g1 = _grads(preds, asg, w)
    t2, g2 = _grads(preds, asg, w.scaled(3.7))
    assert t2 == pytest.approx(3.7 * t1, rel=1e-12)
    cos = g1 @ g2 / (np.linalg.norm(g1) * np.linalg.norm(g2))
    assert abs(cos - 1.0) < 1e-6


@pytest.mark.parametrize("obj_target", ["iou", "ciou"])
def test_loss_gradient_wrt_head(fp64, obj_target):
    rng = np.random.default_rng(21)
    cfg = BackboneConfig(4, 0, width=8)
    model = build_model(cfg, nc=2, seed=3)
    x = Tensor(rng.standard_normal((2, 3, 64, 64)))
    anns = [np.array([[0, 0.3, 0.4, 0.3, 0.35]]), np.array([[1, 0.6, 0.55, 0.5, 0.3]])]
    shapes = [(64 // s, 64 // s) for s in STRIDES]
    asg = assign_targets(anns, ANCHORS.scaled(0.2), shapes)
    weights = LossWeights(obj_target=obj_target)
    feats = model.neck_forward(model.backbone_forward(x))
    fp = type(feats)(*(Tensor(t.data) for t in feats.levels()))
    _, comp = detection_loss(model.head_forward(fp), asg, weights, ANCHORS.scaled(0.2))
    frozen = comp["frozen"]

    def f():
        return detection_loss(model.head_forward(fp), asg, weights, ANCHORS.scaled(0.2),
                              frozen=frozen)[0]

    head = [t for n, t in model.param_store().items() if n.startswith("head")]
    assert check_gradients(f, head, coords=40) < 1e-3


def test_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(box=-1.0)
    with pytest.raises(ContractError):
        LossWeights(obj_target="giou")
    assert LossWeights().cls_weight(80) == 0.5
