"""Detection metrics: IoU, confidence-ordered matching, precision/recall and interpolated AP."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .synthdata import BoundingBox

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def confidence_order(dets: Sequence[BoundingBox]) -> list[int]:
    """Indices by descending confidence; equal confidences keep input order."""
    return sorted(range(len(dets)), key=lambda i: -(dets[i].confidence or 0.0))


@dataclass
class MatchOutcome:
    tp: list[int]            # detection indices
    fp: list[int]
    fn: list[int]            # GT indices
    assignment: dict[int, int] = field(default_factory=dict)   # det -> gt


def match_detections(dets: Sequence[BoundingBox], gts: Sequence[BoundingBox], tau: float) -> MatchOutcome:
    """One-to-one matching in confidence order.

    Each detection takes the unmatched GT with the highest IoU (lowest index
    on ties) provided that IoU reaches ``tau``.  When every eligible GT is
    already taken, earlier detections may move to another eligible GT along an
    augmenting path so the new detection still counts; earlier true positives
    are never lost.  The TP count is therefore the largest achievable for every
    confidence prefix.  GTs left unmatched are false negatives.
    """
    cand = [[g for g in sorted(range(len(gts)), key=lambda g: -iou(d, gts[g])) if iou(d, gts[g]) >= tau]
            for d in dets]
    owner: dict[int, int] = {}   # gt -> det

    def augment(d: int, seen: set[int]) -> bool:
        for g in cand[d]:
            if g in seen:
                continue
            seen.add(g)
            if g not in owner or augment(owner[g], seen):
                owner[g] = d
                return True
        return False

    out = MatchOutcome([], [], [])
    for d in confidence_order(dets):
        free = [g for g in cand[d] if g not in owner]
        if free:
            owner[free[0]] = d
            out.tp.append(d)
        elif cand[d] and augment(d, set()):
            out.tp.append(d)
        else:
            out.fp.append(d)
    out.assignment = {d: g for g, d in owner.items()}
    out.fn = [g for g in range(len(gts)) if g not in owner]
    return out


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


Detections = Mapping[str, Sequence[BoundingBox]]


def _as_images(dets, gts) -> tuple[dict, dict]:
    if isinstance(gts, Mapping):
        return dict(dets), dict(gts)
    return {"_": list(dets)}, {"_": list(gts)}


def ranked_hits(dets, gts, tau: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Pool detections over images; return (confidences, TP flags) in rank order and GT count."""
    dets, gts = _as_images(dets, gts)
    conf, hit, order_key = [], [], []
    n_gt = sum(len(v) for v in gts.values())
    for img_idx, key in enumerate(sorted(set(dets) | set(gts))):
        d, g = list(dets.get(key, [])), list(gts.get(key, []))
        m = match_detections(d, g, tau)
        tp = set(m.tp)
        for i, box in enumerate(d):
            conf.append(box.confidence or 0.0)
            hit.append(i in tp)
            order_key.append((img_idx, i))
    conf_arr = np.asarray(conf, dtype=np.float64)
    # stable descending sort: ties resolved by (image, detection index)
    order = np.lexsort((np.arange(len(conf)), -conf_arr)) if conf else np.zeros(0, dtype=int)
    return conf_arr[order], np.asarray(hit, dtype=bool)[order], n_gt


def pr_points(dets, gts, tau: float) -> list[tuple[float, float, float]]:
    """(confidence, recall, precision) after each ranked detection."""
    conf, hit, n_gt = ranked_hits(dets, gts, tau)
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    out = []
    for c, t, f in zip(conf, tp, fp):
        p, r = precision_recall(int(t), int(f), n_gt - int(t))
        out.append((float(c), r, p))
    return out


def average_precision(dets, gts, tau: float) -> float:
    """All-points interpolated AP: area under the precision envelope.

    ``dets``/``gts`` are either lists for one image or mappings from image id
    to lists.
    """
    conf, hit, n_gt = ranked_hits(dets, gts, tau)
    if n_gt == 0 or hit.size == 0:
        return 0.0
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / np.maximum(tp + fp, 1), [0.0]])
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


@dataclass
class EvalReport:
    thresholds: list[float]
    ap: list[float]
    ap_mean: float
    counts: list[dict]
    pr_tau: float
    pr_curve: list[tuple[float, float, float]]
    n_gt: int
    label: str = ""
    extra: dict = field(default_factory=dict)

    def ap_at(self, tau: float) -> float:
        return self.ap[[round(t, 2) for t in self.thresholds].index(round(tau, 2))]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        data = dict(data)
        data["pr_curve"] = [tuple(p) for p in data["pr_curve"]]
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _counts(dets, gts, tau: float) -> dict:
    dets, gts = _as_images(dets, gts)
    tp = fp = fn = 0
    for key in set(dets) | set(gts):
        m = match_detections(list(dets.get(key, [])), list(gts.get(key, [])), tau)
        tp, fp, fn = tp + len(m.tp), fp + len(m.fp), fn + len(m.fn)
    p, r = precision_recall(tp, fp, fn)
    return {"tau": tau, "tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r}


def ap_iou_curve(dets, gts, thresholds: Sequence[float] = IOU_THRESHOLDS, pr_tau: float = 0.5,
                 label: str = "") -> EvalReport:
    aps = [average_precision(dets, gts, t) for t in thresholds]
    _, g = _as_images(dets, gts)
    return EvalReport(
        thresholds=list(thresholds), ap=aps, ap_mean=float(np.mean(aps)),
        counts=[_counts(dets, gts, t) for t in thresholds], pr_tau=pr_tau,
        pr_curve=pr_points(dets, gts, pr_tau), n_gt=sum(len(v) for v in g.values()), label=label)


def pr_curve(dets, gts, tau: float = 0.5) -> list[tuple[float, float]]:
    return [(r, p) for _, r, p in pr_points(dets, gts, tau)]


def write_curve_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def dataset_size_sweep(sizes: Sequence[int], run: Callable[[int], EvalReport]) -> list[tuple[int, float]]:
    """Train/evaluate once per training-set size; rows ``(size, AP@[.5:.95])`` sorted by size.

    ``run(size)`` must train on the first ``size`` training tiles and evaluate
    on the fixed test split.
    """
    return [(int(s), float(run(int(s)).ap_mean)) for s in sorted(set(sizes))]
