import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from knowmvg.boxes import MIN_SIZE, Box, corners_to_cxcywh, cxcywh_to_corners, logits_to_box
from knowmvg.losses import box_loss, ce_phrase_loss, iou_giou, smooth_l1, total_loss
from knowmvg.metrics import EvalReport, evaluate, giou, iou
from knowmvg.numerics import ContractError, check_gradients

from oracles import bce_mean, raster_iou_giou


@st.composite
def boxes(draw, min_side=1e-3):
    def span():
        w = draw(st.floats(min_side, 1.0))
        x = draw(st.floats(0.0, 1.0 - w))
        return x, min(x + w, 1.0)

    (x1, x2), (y1, y2) = span(), span()
    return Box(x1, y1, x2, y2)


def pixel_box(rng, n=256):
    (x1, x2), (y1, y2) = (sorted(rng.choice(n + 1, 2, replace=False)) for _ in range(2))
    return Box(x1 / n, y1 / n, x2 / n, y2 / n)


# -- Box ----------------------------------------------------------------------

@pytest.mark.parametrize("coords", [(0.5, 0.1, 0.5, 0.2), (0.1, 0.1, 0.2, 1.01), (-0.1, 0, 0.2, 0.2), (0.3, 0.1, 0.2, 0.2)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(ValueError):
        Box(*coords)


def test_to_pixels_rounds_half_up():
    assert Box(0.5 / 128, 1.5 / 128, 2.5 / 128, 3.49 / 128).to_pixels(128, 128) == (1, 2, 3, 3)


def test_zero_logits_give_centre_box():
    assert logits_to_box(torch.zeros(4, dtype=torch.float64)).tolist() == [0.25, 0.25, 0.75, 0.75]


def test_extreme_negative_logits_still_valid():
    b = logits_to_box(torch.full((4,), -200.0, dtype=torch.float64))
    box = Box.from_tensor(b)
    assert box.x2 - box.x1 == pytest.approx(MIN_SIZE / 2)  # centre at 0 clips half the floor away


@given(st.lists(st.floats(-1e4, 1e4), min_size=4, max_size=4))
def test_any_logits_give_valid_box(raw):
    Box.from_tensor(logits_to_box(torch.tensor(raw, dtype=torch.float64)))


@given(st.integers(0, 2**32 - 1))
def test_corner_round_trip(seed):
    h = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    corners = logits_to_box(h)
    assert torch.allclose(cxcywh_to_corners(corners_to_cxcywh(corners)), corners, atol=1e-9, rtol=0)


# -- IoU / GIoU -----------------------------------------------------------------

def test_identical_boxes():
    b = Box(0.1, 0.2, 0.6, 0.9)
    assert iou(b, b) == 1.0 and giou(b, b) == 1.0


def test_half_overlap_example():
    a, b = Box(0, 0, 0.5, 0.5), Box(0.25, 0, 0.75, 0.5)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert giou(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_disjoint_corners_example():
    a, b = Box(0, 0, 0.1, 0.1), Box(0.9, 0.9, 1, 1)
    assert iou(a, b) == 0.0
    assert abs(giou(a, b) - (-0.98)) < 1e-9


@given(boxes(), boxes())
def test_iou_giou_properties(a, b):
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 < giou(a, b) <= iou(a, b) + 1e-15
    assert iou(a, b) == iou(b, a) and giou(a, b) == giou(b, a)


@given(boxes(), boxes(), st.sampled_from([0.5, 0.25, 0.125]), st.floats(0, 0.5), st.floats(0, 0.5))
def test_invariant_under_shared_affine_map(a, b, s, tx, ty):
    f = lambda bx: Box(bx.x1 * s + tx, bx.y1 * s + ty, bx.x2 * s + tx, bx.y2 * s + ty)  # noqa: E731
    assert iou(f(a), f(b)) == pytest.approx(iou(a, b), abs=1e-9)
    assert giou(f(a), f(b)) == pytest.approx(giou(a, b), abs=1e-9)


def test_giou_equals_iou_iff_enclosure_is_union():
    nested = Box(0.1, 0.1, 0.9, 0.9), Box(0.3, 0.3, 0.5, 0.5)
    assert giou(*nested) == iou(*nested)
    diagonal = Box(0.1, 0.1, 0.5, 0.5), Box(0.3, 0.3, 0.7, 0.7)
    assert giou(*diagonal) < iou(*diagonal)


def test_pixel_aligned_boxes_match_raster_exactly():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = pixel_box(rng), pixel_box(rng)
        ri, rg = raster_iou_giou(a.as_list(), b.as_list())
        assert iou(a, b) == pytest.approx(ri, abs=1e-12)
        assert giou(a, b) == pytest.approx(rg, abs=1e-12)


def test_continuous_boxes_within_raster_resolution():
    # every edge is resolved to within one pixel, so errors scale like 1 / (256 * side)
    rng = np.random.default_rng(12)
    for _ in range(50):
        spans = []
        for _ in range(4):
            w = rng.uniform(0.25, 1.0)
            x = rng.uniform(0, 1 - w)
            spans.append((x, x + w))
        a = Box(spans[0][0], spans[1][0], spans[0][1], spans[1][1])
        b = Box(spans[2][0], spans[3][0], spans[2][1], spans[3][1])
        ri, rg = raster_iou_giou(a.as_list(), b.as_list())
        bound = 4 / (256 * 0.25)
        assert abs(iou(a, b) - ri) < bound and abs(giou(a, b) - rg) < bound


def test_tensor_iou_matches_box_iou():
    rng = np.random.default_rng(0)
    pairs = [(pixel_box(rng), pixel_box(rng)) for _ in range(20)]
    t_iou, t_giou = iou_giou(torch.tensor([a.as_list() for a, _ in pairs], dtype=torch.float64),
                             torch.tensor([b.as_list() for _, b in pairs], dtype=torch.float64))
    for i, (a, b) in enumerate(pairs):
        assert t_iou[i].item() == pytest.approx(iou(a, b), abs=1e-12)
        assert t_giou[i].item() == pytest.approx(giou(a, b), abs=1e-12)


# -- losses -----------------------------------------------------------------------

def test_confident_correct_phrase_loss_vanishes():
    labels = torch.tensor([1.0, 0.0, 1.0])
    assert ce_phrase_loss(10 * (2 * labels - 1), labels) < 1e-3


def test_zero_logits_give_ln2():
    assert ce_phrase_loss(torch.zeros(5, dtype=torch.float64), torch.tensor([0, 1, 1, 0, 1.0])).item() == \
        pytest.approx(math.log(2), abs=1e-15)


def test_phrase_loss_matches_oracle():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=9) * 3
    labels = rng.integers(0, 2, size=9).astype(float)
    got = ce_phrase_loss(torch.tensor(logits), torch.tensor(labels)).item()
    assert abs(got - bce_mean(logits, labels)) < 1e-10


def test_phrase_loss_mask_ignores_padding():
    logits = torch.tensor([[2.0, -1.0, 50.0]], dtype=torch.float64)
    labels = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    mask = torch.tensor([[True, True, False]])
    assert ce_phrase_loss(logits, labels, mask).item() == pytest.approx(bce_mean([2.0, -1.0], [1, 0]), abs=1e-12)


def test_phrase_loss_length_mismatch():
    with pytest.raises(ContractError):
        ce_phrase_loss(torch.zeros(3), torch.zeros(4))


def test_box_loss_zero_for_exact_prediction():
    b = torch.tensor([[0.1, 0.2, 0.5, 0.7]], dtype=torch.float64)
    l1, g = box_loss(b, b)
    assert l1.item() == 0.0 and g.item() == 0.0


def test_smooth_l1_quadratic_branch():
    pred = torch.tensor([[0.5, 0.5, 1.0, 1.0]], dtype=torch.float64)
    gold = torch.tensor([[0.0, 0.0, 0.5, 0.5]], dtype=torch.float64)
    assert box_loss(pred, gold)[0].item() == 0.125
    assert smooth_l1(torch.tensor(3.0), torch.tensor(0.0)).item() == 2.5


def test_box_loss_gradient_at_generic_point():
    pred = torch.tensor([[0.12, 0.21, 0.53, 0.74]], dtype=torch.float64, requires_grad=True)
    gold = torch.tensor([[0.2, 0.1, 0.6, 0.66]], dtype=torch.float64)
    (rep,) = check_gradients(lambda: sum(box_loss(pred, gold)), {"pred": pred}, step=1e-5, tol=1e-4)
    assert rep.passed, rep


@given(boxes(), boxes())
def test_loss_ranges(a, b):
    l1, g = box_loss(torch.tensor([a.as_list()], dtype=torch.float64), torch.tensor([b.as_list()], dtype=torch.float64))
    assert l1.item() >= 0 and 0 <= g.item() < 2


def test_total_loss_examples():
    br = total_loss(torch.tensor(0.3), torch.tensor(0.1), torch.tensor(0.2))
    assert br.box.item() == pytest.approx(0.3) and br.total.item() == pytest.approx(0.6)
    zero = total_loss(*(torch.tensor(0.0) for _ in range(3)))
    assert zero.total.item() == 0.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 2))
def test_unit_weights_bit_exact(txt, l1, g):
    args = [torch.tensor(v, dtype=torch.float64) for v in (txt, l1, g)]
    a, b = total_loss(*args), total_loss(*args, weights=(1.0, 1.0, 1.0))
    assert torch.equal(a.total, b.total) and torch.equal(a.box, b.box)
    assert torch.equal(a.box, a.l1 + a.giou_loss) and torch.equal(a.total, a.txt + a.box)


# -- evaluation -----------------------------------------------------------------

GOLD = Box(0.0, 0.0, 1.0, 1.0)


def width_box(w):  # IoU with GOLD equals w
    return Box(0.0, 0.0, w, 1.0)


def test_evaluate_example():
    rep = evaluate([width_box(0.6), width_box(0.4), width_box(0.05)], [GOLD] * 3)
    assert rep.ap50 == pytest.approx(1 / 3) and rep.ap30 == pytest.approx(2 / 3) and rep.ap10 == pytest.approx(2 / 3)
    assert rep.miou == pytest.approx(0.35)


def test_perfect_predictions():
    rep = evaluate([GOLD, Box(0.1, 0.1, 0.2, 0.2)], [GOLD, Box(0.1, 0.1, 0.2, 0.2)])
    assert (rep.miou, rep.ap10, rep.ap30, rep.ap50) == (1.0, 1.0, 1.0, 1.0)


def test_threshold_is_strict():
    rep = evaluate([width_box(0.5)], [GOLD])
    assert rep.per_sample_iou == [0.5] and rep.ap50 == 0.0 and rep.ap30 == 1.0


def test_evaluate_contract_errors():
    with pytest.raises(ContractError):
        evaluate([], [])
    with pytest.raises(ContractError):
        evaluate([GOLD], [GOLD, GOLD])


@given(st.lists(st.tuples(boxes(), boxes()), min_size=1, max_size=20))
def test_ap_monotone(pairs):
    rep = evaluate([a for a, _ in pairs], [b for _, b in pairs])
    assert rep.ap10 >= rep.ap30 >= rep.ap50
    assert 0 <= rep.miou <= 1


def test_report_json_keys():
    rep = evaluate([width_box(0.6)], [GOLD])
    assert set(json.loads(rep.to_json())) == {"miou", "ap10", "ap30", "ap50", "per_sample_iou"}
    assert EvalReport(**json.loads(rep.to_json())) == rep
