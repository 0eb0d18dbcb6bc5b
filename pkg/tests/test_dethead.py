import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from cft.dethead import (GAUSSIAN_SIGMA, KERNEL_SIZE, N_REG, DetectionBox, DetectionHead, HeadConfig, HeadOutput,
                         decode, dump_detections, encode_box, focal_loss, gaussian_kernel, make_targets,
                         normalize_yaw, reg_l1_loss, scale_nms)
from cft.encodings import BevConfig

pytestmark = pytest.mark.usefixtures("float64")

BEV = BevConfig()
HEAD = HeadConfig()


def targets_as_output(t) -> HeadOutput:
    return HeadOutput(t.heatmap[None], t.regression[None])


def test_gaussian_kernel():
    k = gaussian_kernel()
    assert k.shape == (KERNEL_SIZE, KERNEL_SIZE)
    assert k[4, 4] == 1.0
    assert k[4, 0] == pytest.approx(0.05, rel=1e-9)
    assert np.allclose(k, k.T) and np.allclose(k, k[::-1])
    assert GAUSSIAN_SIGMA == pytest.approx(1.634, abs=1e-3)


@given(st.floats(-50, 50))
def test_normalize_yaw_range(yaw):
    y = normalize_yaw(yaw)
    assert -math.pi < y <= math.pi
    assert math.cos(y) == pytest.approx(math.cos(yaw), abs=1e-9)


def test_box_validation():
    with pytest.raises(ValueError):
        DetectionBox((0, 0, 0), (1, 0, 1), 0.0)
    with pytest.raises(ValueError):
        DetectionBox((0, 0, 0), (1, 1, 1), 0.0, score=1.5)
    b = DetectionBox((1, 2, 3), (4, 5, 6), 7.0, (3.0, 4.0), 2, 0.5)
    assert b.speed == 5.0
    assert DetectionBox.from_dict(b.to_dict()) == b


box_strategy = st.builds(
    lambda x, y, z, l, w, h, yaw, c: DetectionBox((x, y, z), (l, w, h), yaw, (0.0, 0.0), c),
    st.floats(-25.0, 25.0), st.floats(-25.0, 25.0), st.floats(-2.0, 3.0),
    st.floats(0.5, 9.0), st.floats(0.5, 3.0), st.floats(0.5, 3.5), st.floats(-3.1, 3.1), st.integers(0, 2),
)


@given(box_strategy)
def test_single_box_round_trip(box):
    t = make_targets([box], BEV, HEAD)
    assert t.skipped == 0 and int(t.mask.sum()) == 1
    (out,) = decode(targets_as_output(t), BEV, HEAD)
    assert len(out) == 1
    d = out[0]
    assert d.class_id == box.class_id and d.score == 1.0
    assert np.allclose(d.center, box.center, atol=1e-9)
    assert np.allclose(d.size, box.size, atol=1e-9)
    assert math.cos(d.yaw - box.yaw) == pytest.approx(1.0, abs=1e-9)


def test_box_outside_range_is_skipped():
    t = make_targets([DetectionBox((30.0, 0.0, 0.0), (1, 1, 1), 0.0)], BEV, HEAD)
    assert t.skipped == 1 and not t.mask.any() and t.heatmap.max() == 0


def test_overlapping_gaussians_take_elementwise_max():
    a = DetectionBox((0.1, 0.1, 0.0), (1, 1, 1), 0.0)
    b = DetectionBox((1.7, 0.1, 0.0), (1, 1, 1), 0.0)
    hm = make_targets([a, b], BEV, HEAD).heatmap[0]
    assert hm.max() == 1.0
    assert int((hm == 1.0).sum()) == 2
    assert hm[32, 33] == pytest.approx(float(gaussian_kernel()[4, 5]))


def test_encode_box_offsets():
    cell, reg = encode_box(DetectionBox((0.05, -0.05, 1.0), (2.0, 1.0, 1.0), 0.5), BEV, 4)
    assert cell == (32, 31)
    assert reg[0] == pytest.approx(0.05 / 0.8 - 0.5) and reg[1] == pytest.approx(0.5 - 0.05 / 0.8)
    assert reg[3] == pytest.approx(math.log(2.0))
    assert reg.shape == (N_REG,)


def test_focal_loss_closed_form():
    pred = torch.tensor([[0.7, 0.2], [0.4, 0.1]])
    gt = torch.tensor([[1.0, 0.5], [0.0, 1.0]])
    pos = math.log(0.7) * 0.3**2 + math.log(0.1) * 0.9**2
    neg = math.log(0.8) * 0.2**2 * 0.5**4 + math.log(0.6) * 0.4**2
    assert focal_loss(pred, gt).item() == pytest.approx(-(pos + neg) / 2, rel=1e-9)


def test_focal_loss_perfect_binary_prediction_is_zero():
    gt = torch.zeros(3, 8, 8)
    gt[1, 2, 3] = 1.0
    assert focal_loss(gt.clone(), gt).item() == pytest.approx(0.0, abs=1e-9)
    assert focal_loss(torch.full_like(gt, 0.5), gt).item() > 0
    with pytest.raises(ValueError):
        focal_loss(gt, gt[0])


def test_reg_l1_loss_masks():
    pred, gt = torch.zeros(2, N_REG, 4, 4), torch.zeros(2, N_REG, 4, 4)
    mask = torch.zeros(2, 4, 4, dtype=torch.bool)
    assert reg_l1_loss(pred, gt, mask).item() == 0.0
    gt[0, :, 1, 1] = 2.0
    gt[1, :, 2, 2] = 5.0    # unmasked, ignored
    mask[0, 1, 1] = True
    assert reg_l1_loss(pred, gt, mask).item() == 2.0


def test_scale_nms_class_wise():
    boxes = [DetectionBox((0, 0, 0), (1, 1, 1), 0, class_id=0, score=0.9),
             DetectionBox((1.0, 0, 0), (1, 1, 1), 0, class_id=0, score=0.8),   # suppressed, within 1.5 m
             DetectionBox((1.0, 0, 0), (1, 1, 1), 0, class_id=2, score=0.7),   # other class survives
             DetectionBox((3.0, 0, 0), (1, 1, 1), 0, class_id=0, score=0.95)]
    kept = scale_nms(boxes, HEAD)
    assert [b.score for b in kept] == [0.95, 0.9, 0.7]
    wide = HeadConfig(nms_scale=(3.0, 1.0, 1.0))
    assert [b.score for b in scale_nms(boxes, wide)] == [0.95, 0.7]


def test_decode_threshold_and_top_k():
    hm = torch.zeros(1, 3, 64, 64)
    hm[0, 0, 10, 10] = 0.9
    hm[0, 1, 40, 20] = 0.5
    hm[0, 2, 50, 50] = 0.05
    out = HeadOutput(hm, torch.zeros(1, N_REG, 64, 64))
    (boxes,) = decode(out, BEV, HEAD)
    assert [b.class_id for b in boxes] == [0, 1]
    (boxes,) = decode(out, BEV, HEAD, top_k=1)
    assert len(boxes) == 1
    assert decode(out, BEV, HEAD, top_k=0) == [[]]


def test_head_shapes(gen):
    head = DetectionHead(32, HEAD, gen)
    with torch.no_grad():
        out = head(torch.randn(2, 16, 16, 32))
    assert out.heatmap.shape == (2, 3, 64, 64) and out.regression.shape == (2, N_REG, 64, 64)
    assert 0.0 < float(out.heatmap.min()) and float(out.heatmap.max()) < 1.0
    with pytest.raises(ValueError):
        head(torch.randn(2, 16, 16, 8))


def test_dump_detections(tmp_path):
    import json
    path = tmp_path / "d.json"
    dump_detections(path, [[DetectionBox((1, 2, 3), (1, 1, 1), 0.0)], []], seeds=[7, 8])
    doc = json.loads(path.read_text())
    assert [r["sample"] for r in doc] == [7, 8] and len(doc[0]["boxes"]) == 1
