import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eesrdet.detector import (IGNORE, NEGATIVE, POSITIVE, AnchorConfig, DetectorConfig, build_detector,
                              decode_boxes, detect, detector_loss, encode_boxes, generate_anchors, match_anchors,
                              nms, read_detections, sample_negatives, smooth_l1, write_detections, zero_heads)
from eesrdet.synthdata import BoundingBox


def py_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def test_anchor_counts_and_lattice():
    a = generate_anchors((64, 64), AnchorConfig(stride=16, sizes=(8.0,), ratios=(1.0,)))
    assert a.shape == (16, 4)
    centers = sorted({((r[0] + r[2]) / 2, (r[1] + r[3]) / 2) for r in a.tolist()})
    assert centers == sorted((8.0 + 16 * i, 8.0 + 16 * j) for i in range(4) for j in range(4))
    b = generate_anchors((64, 64), AnchorConfig(stride=16, sizes=(8.0, 12.0), ratios=(0.5, 2.0)))
    assert b.shape[0] == 4 * a.shape[0]
    big = generate_anchors((20, 20), AnchorConfig(stride=4, sizes=(30.0,), ratios=(1.0,)))
    assert big.min() >= 0 and big[:, 2].max() <= 20 and big[:, 3].max() <= 20
    assert torch.equal(big, generate_anchors((20, 20), AnchorConfig(stride=4, sizes=(30.0,), ratios=(1.0,))))


def test_match_readouts():
    anchor = torch.tensor([[10.0, 10.0, 20.0, 20.0]])
    m = match_anchors(anchor, anchor.clone())
    assert m.labels.tolist() == [POSITIVE] and m.targets.abs().max() == 0
    m = match_anchors(anchor, torch.tensor([[5.0, 5.0, 25.0, 25.0]]))
    assert torch.allclose(m.targets[0], torch.tensor([0, 0, math.log(2), math.log(2)]))
    with pytest.raises(ValueError):
        match_anchors(anchor, anchor, pos_iou=0.3, neg_iou=0.5)


def brute_force_labels(anchors, gts, pos, neg):
    table = [[py_iou(a, g) for g in gts] for a in anchors]
    labels, matched = [], []
    for row in table:
        best = max(row)
        labels.append(POSITIVE if best >= pos else NEGATIVE if best < neg else IGNORE)
        matched.append(row.index(best) if best >= pos else -1)
    claimed = set()
    for g in range(len(gts)):
        col = [-1.0 if a in claimed else table[a][g] for a in range(len(anchors))]
        a = col.index(max(col))
        if col[a] > 0:
            claimed.add(a)
            labels[a], matched[a] = POSITIVE, g
    return labels, matched


@st.composite
def box_list(draw, n_min, n_max):
    out = []
    for _ in range(draw(st.integers(n_min, n_max))):
        x, y = draw(st.integers(0, 20)), draw(st.integers(0, 20))
        out.append([float(x), float(y), float(x + draw(st.integers(2, 12))), float(y + draw(st.integers(2, 12)))])
    return out


@settings(max_examples=200, deadline=None)
@given(box_list(10, 10), box_list(2, 2))
def test_match_equals_brute_force(anchors, gts):
    m = match_anchors(torch.tensor(anchors, dtype=torch.float64), torch.tensor(gts, dtype=torch.float64), 0.5, 0.3)
    labels, matched = brute_force_labels(anchors, gts, 0.5, 0.3)
    assert m.labels.tolist() == labels
    assert m.matched_gt.tolist() == matched
    # every GT that overlaps at least as many anchors as there are GTs keeps a positive
    for g in range(2):
        if sum(py_iou(a, gts[g]) > 0 for a in anchors) >= len(gts):
            assert g in m.matched_gt.tolist()


def test_codec_round_trip():
    gen = torch.Generator().manual_seed(0)
    xy = torch.rand(100, 2, generator=gen) * 50
    anchors = torch.cat([xy, xy + 1 + torch.rand(100, 2, generator=gen) * 20], 1)
    xy = torch.rand(100, 2, generator=gen) * 50
    gt = torch.cat([xy, xy + 1 + torch.rand(100, 2, generator=gen) * 20], 1)
    assert torch.allclose(decode_boxes(encode_boxes(gt, anchors), anchors), gt, atol=1e-4)


def test_negative_sampling_cap():
    anchors = generate_anchors((32, 32), AnchorConfig(4, (6.0,), (1.0,)))
    m = match_anchors(anchors, torch.tensor([[4.0, 4.0, 10.0, 10.0]]))
    s = sample_negatives(m, 3.0, 8, torch.Generator().manual_seed(0))
    assert (s.labels == NEGATIVE).sum() == max(3 * m.n_positive, 8)
    assert s.n_positive == m.n_positive


def test_loss_readouts():
    # two anchors: one positive, one negative; margin 10 on both
    from eesrdet.detector import MatchResult
    match = MatchResult(torch.tensor([POSITIVE, NEGATIVE]), torch.tensor([0, -1]),
                        torch.tensor([[0.1, -0.2, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]]))
    logits = torch.tensor([[-5.0, 5.0], [5.0, -5.0]])
    reg = match.targets.clone()
    out = detector_loss(logits, reg, match)
    assert out.l_cls < 1e-4 and out.l_reg == 0
    reg[0, 2] += 0.5
    assert detector_loss(logits, reg, match).l_reg.item() == pytest.approx(0.125 / 4)
    none = MatchResult(torch.tensor([NEGATIVE, NEGATIVE]), torch.tensor([-1, -1]), torch.zeros(2, 4))
    res = detector_loss(logits, reg, none)
    assert res.no_positive and res.l_reg == 0


def test_smooth_l1_values_and_gradient():
    x = torch.tensor([-2.0, -0.5, 0.0, 0.3, 1.5], dtype=torch.float64)
    assert smooth_l1(x).tolist() == pytest.approx([1.5, 0.125, 0.0, 0.045, 1.0])
    pts = torch.tensor([-3.0, -1.2, -0.7, -0.1, 0.4, 0.95, 1.05, 2.5], dtype=torch.float64, requires_grad=True)
    smooth_l1(pts).sum().backward()
    h = 1e-6
    fd = (smooth_l1(pts.detach() + h) - smooth_l1(pts.detach() - h)) / (2 * h)
    assert torch.allclose(pts.grad, fd, atol=1e-4)


def test_nms_duplicates_and_permutation():
    box = torch.tensor([[1.0, 1.0, 9.0, 9.0]])
    assert nms(box.repeat(3, 1), torch.tensor([0.9, 0.9, 0.9]), 0.5).tolist() == [0]
    gen = torch.Generator().manual_seed(1)
    for _ in range(50):
        xy = torch.rand(12, 2, generator=gen) * 20
        boxes = torch.cat([xy, xy + 2 + torch.rand(12, 2, generator=gen) * 8], 1)
        scores = torch.rand(12, generator=gen)
        kept = {tuple(boxes[i].tolist()) for i in nms(boxes, scores, 0.4).tolist()}
        perm = torch.randperm(12, generator=gen)
        kept_p = {tuple(boxes[perm][i].tolist()) for i in nms(boxes[perm], scores[perm], 0.4).tolist()}
        assert kept == kept_p


@pytest.mark.parametrize("backend", ["single_stage", "two_stage"])
def test_backends_share_contract(backend):
    cfg = DetectorConfig(backend=backend, channels=8)
    model = build_detector(cfg, 0)
    x = torch.rand(2, 3, 32, 32, requires_grad=True)
    gts = [torch.tensor([[4.0, 4.0, 12.0, 12.0]]), torch.tensor([[16.0, 10.0, 24.0, 20.0], [2, 20, 9, 30.0]])]
    loss = model.loss(x, gts, torch.Generator().manual_seed(0))
    assert loss.l_cls.dim() == 0 and loss.l_reg.dim() == 0
    (loss.l_cls + loss.l_reg).backward()
    assert x.grad.abs().sum() > 0
    dets = detect(model, x.detach(), score_thresh=0.0)
    assert len(dets) == 2
    for d in dets:
        confs = [b.confidence for b in d]
        assert confs == sorted(confs, reverse=True) and all(0 <= c <= 1 for c in confs)


@pytest.mark.parametrize("backend", ["single_stage", "two_stage"])
def test_zero_heads_at_chance(backend):
    model = build_detector(DetectorConfig(backend=backend, channels=8), 0)
    zero_heads(model)
    x = torch.rand(1, 3, 32, 32)
    for _, scores in model.predict(x):
        assert torch.allclose(scores, torch.full_like(scores, 0.5))
    assert detect(model, x[0], score_thresh=0.6) == []


def test_build_deterministic():
    a = build_detector(DetectorConfig(channels=8), 4)
    b = build_detector(DetectorConfig(channels=8), 4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("suffix", [".txt", ".csv"])
def test_detection_export_round_trip(tmp_path, suffix):
    dets = {"tile_00001": [BoundingBox(1.5, 2, 8, 9.25, 0, 0.875), BoundingBox(0, 0, 3, 3, 0, 0.1)],
            "tile_00002": [BoundingBox(4, 4, 5, 6, 0, 1.0)]}
    path = tmp_path / f"d{suffix}"
    write_detections(path, dets)
    assert read_detections(path) == dets
    if suffix == ".txt":
        assert path.read_text().splitlines()[0] == "tile_00001 0 0.875 1.5 2.0 8.0 9.25"
