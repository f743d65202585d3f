import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from larvseg import numcore as nc
from larvseg.errors import ContractError, DimensionError
from larvseg.evaluation import (
    PALETTE,
    ConfusionMatrix,
    ReportError,
    accumulate,
    miou,
    pixel_grouping_eval,
    render_mask,
    response_map,
    write_report,
)


def brute_miou(pred, gt, C, ids, ignore=255):
    """Set-based IoU straight from the pixel lists."""
    pix = [(p, g) for p, g in zip(np.ravel(pred), np.ravel(gt)) if g != ignore]
    ious = {}
    for c in range(C):
        P = {i for i, (p, _) in enumerate(pix) if p == c}
        G = {i for i, (_, g) in enumerate(pix) if g == c}
        if G:
            ious[c] = len(P & G) / len(P | G)
    vals = [ious[c] for c in ids if c in ious]
    return sum(vals) / len(vals) if vals else float("nan")


class FeatureModel:
    """Stand-in segmenter whose features are the raw image channels."""

    def __init__(self, C):
        self.classifier = SimpleNamespace(num_classes=C)

    def forward(self, images):
        return nc.as_tensor(images), None


# -- confusion matrix -----------------------------------------------------------------

def test_accumulate_perfect_is_diagonal():
    gt = np.array([[0, 1], [2, 2]])
    cm = accumulate(ConfusionMatrix(3), gt, gt)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))


def test_accumulate_all_ignored():
    cm = accumulate(ConfusionMatrix(3), np.zeros((2, 2), int), np.full((2, 2), 255))
    assert cm.total == 0


def test_accumulate_enumeration_oracle():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 0], [1, 255]])
    cm = accumulate(ConfusionMatrix(2), pred, gt)
    expected = np.zeros((2, 2), int)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != 255:
            expected[g, p] += 1
    np.testing.assert_array_equal(cm.counts, expected)


def test_accumulate_errors():
    with pytest.raises(DimensionError):
        accumulate(ConfusionMatrix(2), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ContractError):
        accumulate(ConfusionMatrix(2), np.full((2, 2), 2), np.zeros((2, 2), int))


def test_merge_is_sum():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 3, (2, 4, 4)), rng.integers(0, 3, (2, 4, 4))
    joint = ConfusionMatrix(3).accumulate(a, b)
    parts = ConfusionMatrix(3).accumulate(a[0], b[0]).merge(ConfusionMatrix(3).accumulate(a[1], b[1]))
    np.testing.assert_array_equal(joint.counts, parts.counts)


# -- mIoU ---------------------------------------------------------------------------------

def test_miou_hand_case():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[2, 1], [1, 2]]
    rep = miou(cm, [0], [1])
    np.testing.assert_allclose(rep.iou, [0.5, 0.5])
    assert rep.all == 0.5 and rep.base == 0.5 and rep.novel == 0.5


def test_miou_perfect_and_disjoint():
    gt = np.array([[0, 0, 1, 1]])
    perfect = miou(ConfusionMatrix(2).accumulate(gt, gt), [0], [1])
    assert perfect.all == perfect.base == perfect.novel == 1.0
    swapped = miou(ConfusionMatrix(2).accumulate(1 - gt, gt), [0], [1])
    assert swapped.all == 0.0


def test_miou_excludes_absent_categories():
    gt = np.array([[0, 0, 1, 1]])
    rep = miou(ConfusionMatrix(4).accumulate(gt, gt), [0, 2], [1, 3])
    assert math.isnan(rep.iou[2]) and rep.base == 1.0 and rep.novel == 1.0


def test_miou_empty():
    with pytest.raises(ReportError):
        miou(ConfusionMatrix(3), [0], [1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8))
def test_miou_matches_set_oracle(seed, H, W):
    rng = np.random.default_rng(seed)
    C = 5
    gt = rng.integers(0, C, (H, W))
    gt[rng.random((H, W)) < 0.1] = 255
    if (gt == 255).all():
        gt[0, 0] = 0
    pred = rng.integers(0, C, (H, W))
    rep = miou(ConfusionMatrix(C).accumulate(pred, gt), [0, 1, 2], [3, 4])
    for got, ids in ((rep.all, range(C)), (rep.base, [0, 1, 2]), (rep.novel, [3, 4])):
        ref = brute_miou(pred, gt, C, ids)
        assert (math.isnan(got) and math.isnan(ref)) or abs(got - ref) <= 1e-12


def test_write_report(tmp_path):
    gt = np.array([[0, 1]])
    rep = miou(ConfusionMatrix(2).accumulate(gt, gt), [0], [1])
    write_report(tmp_path / "r.csv", rep, {"mode": "baseline"})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:3] == ["key,value", "mode,baseline", "miou_all,1.0000000000"]


# -- response maps -------------------------------------------------------------------------------

def test_response_at_anchor_is_one():
    fm = np.random.default_rng(1).normal(size=(4, 4, 3))
    assert response_map(fm, 2, 1)[2, 1] == pytest.approx(1.0, abs=1e-15)


def test_response_constant_map():
    fm = np.broadcast_to(np.array([0.2, -1.0, 3.0]), (3, 5, 3))
    np.testing.assert_allclose(response_map(fm, 0, 0), 1.0, atol=1e-15)


def test_response_cosine_oracle():
    fm = np.random.default_rng(2).normal(size=(3, 3, 4))
    got = response_map(fm, 1, 2)
    a = fm[1, 2]
    for h in range(3):
        for w in range(3):
            v = fm[h, w]
            ref = sum(x * y for x, y in zip(a, v)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in v)))
            assert abs(got[h, w] - ref) <= 1e-12


def test_response_anchor_bounds():
    with pytest.raises(ContractError):
        response_map(np.ones((2, 2, 2)), 2, 0)


# -- grouping probe ---------------------------------------------------------------------------------

def test_grouping_single_category_image():
    rng = np.random.default_rng(3)
    imgs = rng.normal(size=(2, 4, 4, 3))
    masks = np.zeros((2, 4, 4), int)
    masks[1] = 2
    res = pixel_grouping_eval(FeatureModel(3), imgs, masks, [0, 1], [2], seed=0)
    assert res.base_acc == 1.0 and res.novel_acc == 1.0


def test_grouping_noise_free_features():
    means = np.eye(4)
    rng = np.random.default_rng(4)
    masks = rng.integers(0, 4, size=(5, 6, 6))
    imgs = means[masks]
    res = pixel_grouping_eval(FeatureModel(4), imgs, masks, [0, 1], [2, 3], seed=1)
    assert res.base_acc == 1.0 and res.novel_acc == 1.0


def test_grouping_deterministic_given_seed():
    rng = np.random.default_rng(5)
    masks = rng.integers(0, 3, size=(4, 5, 5))
    imgs = np.eye(3)[masks] + rng.normal(scale=0.8, size=(4, 5, 5, 3))
    a = pixel_grouping_eval(FeatureModel(3), imgs, masks, [0], [1, 2], seed=7)
    b = pixel_grouping_eval(FeatureModel(3), imgs, masks, [0], [1, 2], seed=7)
    np.testing.assert_array_equal(a.cm.counts, b.cm.counts)
    assert a.cm.total == masks.size


# -- rendering --------------------------------------------------------------------------------------

def test_render_single_pixel():
    blob = render_mask(np.zeros((1, 1), int))
    assert blob == b"P6\n1 1\n255\n" + bytes(PALETTE[0])


def test_palette_distinct():
    assert len({tuple(c) for c in PALETTE}) == 32


def test_render_deterministic(tmp_path):
    m = np.random.default_rng(6).integers(0, 12, (7, 5))
    a = render_mask(m, tmp_path / "a.ppm")
    b = render_mask(m, tmp_path / "b.ppm")
    assert a == b == (tmp_path / "a.ppm").read_bytes()
    assert a.startswith(b"P6\n5 7\n255\n") and len(a) == len(b"P6\n5 7\n255\n") + 7 * 5 * 3


def test_gray_ramp():
    v = np.array([[-1.0, 0.0, 1.0]])
    body = render_mask(v, kind="map")[len(b"P6\n3 1\n255\n"):]
    assert list(body) == [0, 0, 0, 128, 128, 128, 255, 255, 255]
