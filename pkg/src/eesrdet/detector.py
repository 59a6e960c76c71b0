"""Anchor-based detectors (two-stage and single-stage) sharing one loss contract."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .sr_generator import ConfigError
from .synthdata import BoundingBox

BACKENDS = ("two_stage", "single_stage")
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
_MAX_LOG_RATIO = math.log(1000.0 / 16)


# --------------------------------------------------------------------------- anchors & boxes

@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 4
    sizes: tuple[float, ...] = (8.0,)
    ratios: tuple[float, ...] = (1.0,)

    @property
    def per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)


def generate_anchors(img_dims: tuple[int, int], cfg: AnchorConfig) -> torch.Tensor:
    """Anchors ``[cells * per_cell, 4]`` ordered by cell row, cell column, then (size, ratio)."""
    h, w = img_dims
    gh, gw = math.ceil(h / cfg.stride), math.ceil(w / cfg.stride)
    shapes = torch.tensor([(s * math.sqrt(r), s / math.sqrt(r)) for s in cfg.sizes for r in cfg.ratios],
                          dtype=torch.float32)
    cy = (torch.arange(gh, dtype=torch.float32) + 0.5) * cfg.stride
    cx = (torch.arange(gw, dtype=torch.float32) + 0.5) * cfg.stride
    cy, cx = torch.meshgrid(cy, cx, indexing="ij")
    centers = torch.stack([cx, cy], -1).reshape(-1, 1, 2)
    half = shapes.reshape(1, -1, 2) / 2
    anchors = torch.cat([centers - half, centers + half], -1).reshape(-1, 4)
    return clip_boxes(anchors, (h, w))


def clip_boxes(boxes: torch.Tensor, img_dims: tuple[int, int]) -> torch.Tensor:
    h, w = img_dims
    x = boxes[..., 0::2].clamp(0, w)
    y = boxes[..., 1::2].clamp(0, h)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], -1)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def _center_size(boxes: torch.Tensor) -> tuple[torch.Tensor, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_boxes(gt: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Regression targets ``(dx, dy, log dw, log dh)`` of ``gt`` relative to ``anchors``."""
    gx, gy, gw, gh = _center_size(gt)
    ax, ay, aw, ah = _center_size(anchors)
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], -1)


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    ax, ay, aw, ah = _center_size(anchors)
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * torch.exp(deltas[..., 2].clamp(max=_MAX_LOG_RATIO))
    h = ah * torch.exp(deltas[..., 3].clamp(max=_MAX_LOG_RATIO))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


# --------------------------------------------------------------------------- matching

@dataclass
class MatchResult:
    labels: torch.Tensor      # [A] POSITIVE / NEGATIVE / IGNORE
    matched_gt: torch.Tensor  # [A] index into gt, -1 where unmatched
    targets: torch.Tensor     # [A, 4], zeros where not positive

    @property
    def n_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())

    @staticmethod
    def concat(matches: Sequence["MatchResult"]) -> "MatchResult":
        return MatchResult(torch.cat([m.labels for m in matches]), torch.cat([m.matched_gt for m in matches]),
                           torch.cat([m.targets for m in matches]))


def match_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, pos_iou: float = 0.5,
                  neg_iou: float = 0.3) -> MatchResult:
    """Label anchors against ground truth.

    Positive when the best IoU reaches ``pos_iou`` or the anchor is the best
    unclaimed anchor of some GT (GTs in order, lowest index on ties); negative when the best IoU is
    below ``neg_iou``; ignored otherwise.
    """
    if not pos_iou > neg_iou:
        raise ValueError(f"pos_iou ({pos_iou}) must exceed neg_iou ({neg_iou})")
    n = anchors.shape[0]
    if gt_boxes.numel() == 0:
        return MatchResult(torch.full((n,), NEGATIVE, dtype=torch.long), torch.full((n,), -1, dtype=torch.long),
                           anchors.new_zeros((n, 4)))
    iou = box_iou(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    labels = torch.full((n,), IGNORE, dtype=torch.long)
    labels[best_iou < neg_iou] = NEGATIVE
    labels[best_iou >= pos_iou] = POSITIVE
    matched = best_gt.clone()
    # each GT claims its best still-unclaimed anchor, so GTs sharing a best anchor each keep a positive
    claimed = torch.zeros(n, dtype=torch.bool)
    for g in range(gt_boxes.shape[0]):
        col = iou[:, g].masked_fill(claimed, -1.0)
        a = int(col.argmax())
        if col[a] > 0:
            claimed[a] = True
            labels[a] = POSITIVE
            matched[a] = g
    matched[labels != POSITIVE] = -1
    targets = anchors.new_zeros((n, 4))
    pos = labels == POSITIVE
    if pos.any():
        targets[pos] = encode_boxes(gt_boxes[matched[pos]], anchors[pos])
    return MatchResult(labels, matched, targets)


def sample_negatives(match: MatchResult, ratio: float = 3.0, min_negatives: int = 8,
                     generator: torch.Generator | None = None) -> MatchResult:
    """Keep at most ``ratio`` negatives per positive (at least ``min_negatives``); the rest become ignored."""
    neg = torch.nonzero(match.labels == NEGATIVE).flatten()
    cap = max(int(ratio * match.n_positive), min_negatives)
    if neg.numel() <= cap:
        return match
    keep = neg[torch.randperm(neg.numel(), generator=generator)[:cap]]
    labels = match.labels.clone()
    labels[neg] = IGNORE
    labels[keep] = NEGATIVE
    return replace(match, labels=labels)


# --------------------------------------------------------------------------- losses

def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


@dataclass
class DetectorLoss:
    l_cls: torch.Tensor
    l_reg: torch.Tensor
    no_positive: bool = False

    def __add__(self, other: "DetectorLoss") -> "DetectorLoss":
        return DetectorLoss(self.l_cls + other.l_cls, self.l_reg + other.l_reg,
                            self.no_positive or other.no_positive)


def detector_loss(cls_logits: torch.Tensor, reg: torch.Tensor, match: MatchResult) -> DetectorLoss:
    """Softmax cross-entropy over sampled anchors plus smooth-L1 over positive anchors.

    ``cls_logits`` is ``[A, 2]`` (background, object) and ``reg`` is ``[A, 4]``.
    With no positives the regression term is zero and the flag is set.
    """
    sampled = match.labels != IGNORE
    if sampled.any():
        l_cls = F.cross_entropy(cls_logits[sampled], match.labels[sampled])
    else:
        l_cls = cls_logits.sum() * 0.0
    pos = match.labels == POSITIVE
    if pos.any():
        l_reg = smooth_l1(reg[pos] - match.targets[pos]).mean()
    else:
        l_reg = reg.sum() * 0.0
    return DetectorLoss(l_cls, l_reg, no_positive=not bool(pos.any()))


# --------------------------------------------------------------------------- NMS

def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; indices of kept boxes in descending score order (stable for ties)."""
    order = torch.sort(scores, descending=True, stable=True).indices
    if order.numel() == 0:
        return order
    iou = box_iou(boxes[order], boxes[order])
    suppressed = torch.zeros(order.numel(), dtype=torch.bool)
    keep = []
    for i in range(order.numel()):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return order[torch.tensor(keep, dtype=torch.long)]


# --------------------------------------------------------------------------- networks

@dataclass(frozen=True)
class DetectorConfig:
    backend: str = "single_stage"
    channels: int = 32
    in_channels: int = 3
    # single-stage: one anchor level per entry, strides doubling from 4
    ssd_sizes: tuple[tuple[float, ...], ...] = ((6.0, 10.0), (16.0,))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    # two-stage
    rpn_sizes: tuple[float, ...] = (6.0, 10.0, 16.0)
    pre_nms_top_n: int = 300
    post_nms_top_n: int = 64
    proposal_nms_iou: float = 0.7
    roi_size: int = 4
    roi_hidden: int = 128
    # assignment
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    neg_ratio: float = 3.0
    min_negatives: int = 8

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"detector backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.channels < 1:
            raise ConfigError("detector channels must be positive")


class Backbone(nn.Module):
    """Small conv stack producing feature maps at strides 4 (and 8 when ``levels == 2``)."""

    def __init__(self, in_channels: int, c: int, levels: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(c, c, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, 1, 1), nn.ReLU(),
        )
        self.extra = nn.ModuleList(
            nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, 2, 1), nn.ReLU(), nn.Conv2d(2 * c, 2 * c, 3, 1, 1), nn.ReLU())
            for _ in range(levels - 1))
        self.out_channels = 2 * c

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [self.stem(x - 0.5)]
        for block in self.extra:
            feats.append(block(feats[-1]))
        return feats


def _flatten_head(t: torch.Tensor, k: int) -> torch.Tensor:
    n, _, h, w = t.shape
    return t.permute(0, 2, 3, 1).reshape(n, h * w * (t.shape[1] // k), k)


class SingleStageDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.anchor_cfgs = [AnchorConfig(stride=4 * 2 ** i, sizes=tuple(sizes), ratios=cfg.ratios)
                            for i, sizes in enumerate(cfg.ssd_sizes)]
        self.backbone = Backbone(cfg.in_channels, cfg.channels, len(self.anchor_cfgs))
        c = self.backbone.out_channels
        self.cls_heads = nn.ModuleList(nn.Conv2d(c, a.per_cell * 2, 3, 1, 1) for a in self.anchor_cfgs)
        self.reg_heads = nn.ModuleList(nn.Conv2d(c, a.per_cell * 4, 3, 1, 1) for a in self.anchor_cfgs)

    def anchors(self, img_dims: tuple[int, int]) -> torch.Tensor:
        return torch.cat([generate_anchors(img_dims, a) for a in self.anchor_cfgs])

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.backbone(x)
        cls = torch.cat([_flatten_head(h(f), 2) for h, f in zip(self.cls_heads, feats)], 1)
        reg = torch.cat([_flatten_head(h(f), 4) for h, f in zip(self.reg_heads, feats)], 1)
        return {"cls": cls, "reg": reg, "anchors": self.anchors(tuple(x.shape[-2:])).to(x)}

    def loss(self, x: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
             generator: torch.Generator | None = None) -> DetectorLoss:
        out = self(x)
        matches = [sample_negatives(match_anchors(out["anchors"], g.to(x), self.cfg.pos_iou, self.cfg.neg_iou),
                                    self.cfg.neg_ratio, self.cfg.min_negatives, generator)
                   for g in gt_boxes]
        match = MatchResult.concat(matches)
        return detector_loss(out["cls"].reshape(-1, 2), out["reg"].reshape(-1, 4), match)

    def predict(self, x: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        out = self(x)
        scores = out["cls"].softmax(-1)[..., 1]
        boxes = decode_boxes(out["reg"], out["anchors"].unsqueeze(0))
        return list(zip(boxes, scores))


class TwoStageDetector(nn.Module):
    """RPN over the stride-4 map plus one RoI refinement head on pooled proposals."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.anchor_cfg = AnchorConfig(stride=4, sizes=cfg.rpn_sizes, ratios=cfg.ratios)
        self.backbone = Backbone(cfg.in_channels, cfg.channels, 1)
        c = self.backbone.out_channels
        a = self.anchor_cfg.per_cell
        self.rpn_conv = nn.Sequential(nn.Conv2d(c, c, 3, 1, 1), nn.ReLU())
        self.rpn_cls = nn.Conv2d(c, a * 2, 1)
        self.rpn_reg = nn.Conv2d(c, a * 4, 1)
        self.roi_fc = nn.Sequential(nn.Flatten(), nn.Linear(c * cfg.roi_size ** 2, cfg.roi_hidden), nn.ReLU())
        self.roi_cls = nn.Linear(cfg.roi_hidden, 2)
        self.roi_reg = nn.Linear(cfg.roi_hidden, 4)

    def _rpn(self, x: torch.Tensor):
        feat = self.backbone(x)[0]
        h = self.rpn_conv(feat)
        anchors = generate_anchors(tuple(x.shape[-2:]), self.anchor_cfg).to(x)
        return feat, _flatten_head(self.rpn_cls(h), 2), _flatten_head(self.rpn_reg(h), 4), anchors

    def _proposals(self, cls: torch.Tensor, reg: torch.Tensor, anchors: torch.Tensor,
                   img_dims: tuple[int, int]) -> list[torch.Tensor]:
        props = []
        with torch.no_grad():
            for c, r in zip(cls, reg):
                scores = c.softmax(-1)[:, 1]
                boxes = clip_boxes(decode_boxes(r, anchors), img_dims)
                valid = ((boxes[:, 2] - boxes[:, 0]) > 1e-3) & ((boxes[:, 3] - boxes[:, 1]) > 1e-3)
                boxes, scores = boxes[valid], scores[valid]
                top = torch.sort(scores, descending=True, stable=True).indices[:self.cfg.pre_nms_top_n]
                boxes, scores = boxes[top], scores[top]
                keep = nms(boxes, scores, self.cfg.proposal_nms_iou)[:self.cfg.post_nms_top_n]
                props.append(boxes[keep])
        return props

    def _roi_head(self, feat: torch.Tensor, proposals: list[torch.Tensor]):
        pooled = roi_align(feat, [p.to(feat) for p in proposals], output_size=self.cfg.roi_size,
                           spatial_scale=0.25, sampling_ratio=2, aligned=True)
        h = self.roi_fc(pooled)
        return self.roi_cls(h), self.roi_reg(h)

    def loss(self, x: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
             generator: torch.Generator | None = None) -> DetectorLoss:
        cfg = self.cfg
        img_dims = tuple(x.shape[-2:])
        feat, cls, reg, anchors = self._rpn(x)
        rpn_matches = [sample_negatives(match_anchors(anchors, g.to(x), cfg.pos_iou, cfg.neg_iou),
                                        cfg.neg_ratio, cfg.min_negatives, generator) for g in gt_boxes]
        rpn = detector_loss(cls.reshape(-1, 2), reg.reshape(-1, 4), MatchResult.concat(rpn_matches))
        proposals = self._proposals(cls, reg, anchors, img_dims)
        proposals = [torch.cat([p, g.to(p)]) for p, g in zip(proposals, gt_boxes)]
        roi_matches = [sample_negatives(match_anchors(p, g.to(x), cfg.roi_pos_iou, cfg.roi_pos_iou - 1e-6),
                                        cfg.neg_ratio, cfg.min_negatives, generator)
                       for p, g in zip(proposals, gt_boxes)]
        roi_cls, roi_reg = self._roi_head(feat, proposals)
        return rpn + detector_loss(roi_cls, roi_reg, MatchResult.concat(roi_matches))

    def predict(self, x: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        img_dims = tuple(x.shape[-2:])
        feat, cls, reg, anchors = self._rpn(x)
        proposals = self._proposals(cls, reg, anchors, img_dims)
        roi_cls, roi_reg = self._roi_head(feat, proposals)
        scores = roi_cls.softmax(-1)[:, 1].split([p.shape[0] for p in proposals])
        deltas = roi_reg.split([p.shape[0] for p in proposals])
        return [(decode_boxes(d, p), s) for d, p, s in zip(deltas, proposals, scores)]


def build_detector(cfg: DetectorConfig, init_seed: int = 0) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = TwoStageDetector(cfg) if cfg.backend == "two_stage" else SingleStageDetector(cfg)
    return model


def zero_heads(model: nn.Module) -> None:
    heads = ([model.roi_cls, model.roi_reg] if isinstance(model, TwoStageDetector)
             else list(model.cls_heads) + list(model.reg_heads))
    with torch.no_grad():
        for h in heads:
            h.weight.zero_()
            h.bias.zero_()


# --------------------------------------------------------------------------- inference

def detect(model: nn.Module, sr: torch.Tensor, score_thresh: float = 0.5, nms_iou: float = 0.5,
           max_detections: int = 100) -> list[BoundingBox] | list[list[BoundingBox]]:
    """Scored, NMS-filtered boxes sorted by confidence; one list per image for batched input."""
    single = sr.dim() == 3
    x = sr.unsqueeze(0) if single else sr
    img_dims = tuple(x.shape[-2:])
    with torch.no_grad():
        raw = model.predict(x)
    results = []
    for boxes, scores in raw:
        boxes = clip_boxes(boxes, img_dims)
        ok = (scores > score_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores = boxes[ok], scores[ok]
        keep = nms(boxes, scores, nms_iou)[:max_detections]
        results.append([BoundingBox(*map(float, boxes[i].tolist()), class_id=0,
                                    confidence=min(max(float(scores[i]), 0.0), 1.0)) for i in keep.tolist()])
    return results[0] if single else results


# --------------------------------------------------------------------------- export format

DETECTION_FIELDS = ("id", "class", "confidence", "x_min", "y_min", "x_max", "y_max")


def write_detections(path: str | Path, detections: dict[str, Iterable[BoundingBox]]) -> None:
    """One detection per line: ``id class confidence x_min y_min x_max y_max``.

    A ``.csv`` suffix writes comma-separated values with a header row.
    """
    path = Path(path)
    rows = [(tid, b.class_id, b.confidence if b.confidence is not None else 1.0, *b.as_tuple())
            for tid, boxes in detections.items() for b in boxes]
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DETECTION_FIELDS)
            w.writerows([r[0], r[1], *map(repr, map(float, r[2:]))] for r in rows)
    else:
        path.write_text("".join(f"{r[0]} {r[1]} " + " ".join(repr(float(v)) for v in r[2:]) + "\n"
                                for r in rows))


def read_detections(path: str | Path) -> dict[str, list[BoundingBox]]:
    path = Path(path)
    out: dict[str, list[BoundingBox]] = {}
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
    else:
        rows = [line.split() for line in path.read_text().splitlines() if line.strip()]
    for lineno, r in enumerate(rows, start=1):
        if len(r) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(r)}")
        tid, cls, conf, *coords = r
        out.setdefault(tid, []).append(BoundingBox(*map(float, coords), class_id=int(cls), confidence=float(conf)))
    return out
