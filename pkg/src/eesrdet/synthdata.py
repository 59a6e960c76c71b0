"""Synthetic small-object tiles, annotation files and dataset I/O."""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .imaging import bicubic_downsample, bicubic_resize, quantize, read_png, write_png

AUGMENT_OPS = ("identity", "hflip", "rot90", "rot180", "rot270")


class AnnotationError(ValueError):
    pass


class PackingError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    confidence: float | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class AnnotatedTile:
    hr: torch.Tensor
    lr: torch.Tensor
    boxes: list[BoundingBox]
    id: str

    @property
    def scale(self) -> int:
        return self.hr.shape[-1] // self.lr.shape[-1]

    def boxes_tensor(self) -> torch.Tensor:
        if not self.boxes:
            return torch.zeros((0, 4))
        return torch.tensor([b.as_tuple() for b in self.boxes], dtype=torch.float32)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    fractions: tuple[float, ...] = field(default=())

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed,
                "fractions": list(self.fractions)}

    @classmethod
    def from_json(cls, data: dict) -> "DatasetSplit":
        return cls(list(data["train"]), list(data.get("val", [])), list(data["test"]), int(data["seed"]),
                   tuple(data.get("fractions", ())))


# --------------------------------------------------------------------------- generation

def _background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    coarse = max(2, size // 16)
    base = rng.uniform(0.25, 0.75)
    field_ = base + rng.normal(0.0, 0.08, size=(channels, coarse, coarse))
    smooth = bicubic_resize(torch.from_numpy(field_.clip(0, 1)).float(), size, size).numpy()
    bg = smooth + rng.normal(0.0, 0.02, size=(channels, size, size))
    # sparse thin lines act as road-like distractors
    for _ in range(rng.integers(0, 3)):
        shade = rng.uniform(-0.12, 0.12)
        pos = rng.integers(0, size)
        if rng.random() < 0.5:
            bg[:, pos:pos + 2, :] += shade
        else:
            bg[:, :, pos:pos + 2] += shade
    return bg.clip(0.05, 0.95)


def _object_mask(size: int, cx: float, cy: float, length: float, width: float, angle: float,
                 radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    u = np.abs(dx * math.cos(angle) + dy * math.sin(angle))
    v = np.abs(-dx * math.sin(angle) + dy * math.cos(angle))
    # rounded rectangle as a signed distance test
    qu = np.maximum(u - (length / 2 - radius), 0.0)
    qv = np.maximum(v - (width / 2 - radius), 0.0)
    inside_core = (u <= length / 2) & (v <= width / 2)
    return inside_core & (qu * qu + qv * qv <= radius * radius + 1e-9)


def _overlap_fraction(a: tuple, b: tuple) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def _render_tile(rng: np.random.Generator, hr_size: int, n_objects: int, object_size: tuple[int, int],
                 channels: int, min_contrast: float, max_overlap: float, attempts: int):
    img = _background(rng, hr_size, channels)
    boxes: list[tuple[int, int, int, int]] = []
    lo, hi = object_size
    for _ in range(n_objects):
        for _ in range(attempts):
            sides = sorted(rng.uniform(lo, hi, size=2))
            width, length = float(sides[0]), float(sides[1])
            angle = float(rng.uniform(0.0, math.pi))
            radius = float(rng.uniform(0.0, 0.3 * width))
            cx, cy = rng.uniform(1.0, hr_size - 1.0, size=2)
            mask = _object_mask(hr_size, cx, cy, length, width, angle, radius)
            rows, cols = np.nonzero(mask)
            if rows.size == 0:
                continue
            box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
            if box[0] == 0 or box[1] == 0 or box[2] == hr_size or box[3] == hr_size:
                continue
            # keep a one pixel gap so neighbouring objects stay separable
            grown = (box[0] - 1, box[1] - 1, box[2] + 1, box[3] + 1)
            if any(_overlap_fraction(grown, other) > max_overlap for other in boxes):
                continue
            break
        else:
            raise PackingError(
                f"could not place {n_objects} objects of size {object_size} in a {hr_size}px tile")
        local = img[:, box[1]:box[3], box[0]:box[2]].mean()
        if local < 0.5:
            level = rng.uniform(min(local + min_contrast, 1.0), 1.0)
        else:
            level = rng.uniform(0.0, max(local - min_contrast, 0.0))
        color = np.clip(level + rng.uniform(-0.08, 0.08, size=channels), 0.0, 1.0)
        img[:, mask] = color[:, None]
        boxes.append(box)
    return img, boxes


def generate_synthetic(n_tiles: int, hr_size: int = 64, objects_per_tile: tuple[int, int] = (1, 4),
                       object_size: tuple[int, int] = (5, 12), seed: int = 0, scale: int = 4,
                       channels: int = 3, min_contrast: float = 0.3, max_overlap: float = 0.0,
                       attempts: int = 200) -> list[AnnotatedTile]:
    """Generate ``n_tiles`` deterministic tiles with crisp convex objects.

    Objects are rotated rounded rectangles whose side lengths are drawn from
    ``object_size`` (HR pixels).  Boxes are the tight pixel bounds of each
    rendered object.  HR images are stored 8-bit exact and the LR image is
    the bicubic downsample of the HR image.
    """
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} not divisible by scale {scale}")
    lo, hi = object_size
    if not 1 <= lo <= hi or hi > hr_size // 2:
        raise PackingError(f"object size range {object_size} does not fit a {hr_size}px tile")
    if objects_per_tile[0] < 0 or objects_per_tile[0] > objects_per_tile[1]:
        raise ValueError(f"bad object count range {objects_per_tile}")
    rng = np.random.default_rng(seed)
    tiles = []
    for i in range(n_tiles):
        n_obj = int(rng.integers(objects_per_tile[0], objects_per_tile[1] + 1))
        img, boxes = _render_tile(rng, hr_size, n_obj, (lo, hi), channels, min_contrast, max_overlap,
                                  attempts)
        hr = quantize(torch.from_numpy(img).float())
        tiles.append(AnnotatedTile(
            hr=hr,
            lr=bicubic_downsample(hr, scale),
            boxes=[BoundingBox(*map(float, b), class_id=0) for b in boxes],
            id=f"tile_{i:05d}",
        ))
    return tiles


# --------------------------------------------------------------------------- annotations

def format_annotations(boxes: Iterable[BoundingBox]) -> str:
    return "".join(f"{b.class_id} {float(b.x_min)!r} {float(b.y_min)!r} {float(b.x_max)!r} {float(b.y_max)!r}\n"
                   for b in boxes)


def parse_annotations(text: str, source: str = "<string>") -> list[BoundingBox]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationError(f"{source}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            coords = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise AnnotationError(f"{source}:{lineno}: {exc}") from None
        if not all(math.isfinite(c) for c in coords):
            raise AnnotationError(f"{source}:{lineno}: non-finite coordinate")
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise AnnotationError(f"{source}:{lineno}: x_min < x_max and y_min < y_max violated")
        boxes.append(BoundingBox(*coords, class_id=cls))
    return boxes


def write_annotations(tile_or_boxes: AnnotatedTile | Sequence[BoundingBox], path: str | Path) -> None:
    boxes = tile_or_boxes.boxes if isinstance(tile_or_boxes, AnnotatedTile) else tile_or_boxes
    Path(path).write_text(format_annotations(boxes))


def read_annotations(path: str | Path) -> list[BoundingBox]:
    return parse_annotations(Path(path).read_text(), str(path))


# --------------------------------------------------------------------------- augmentation

def _rot90_box(b: BoundingBox, width: float) -> BoundingBox:
    # counter-clockwise rotation, matching torch.rot90(k=1, dims=(-2, -1))
    return replace(b, x_min=b.y_min, y_min=width - b.x_max, x_max=b.y_max, y_max=width - b.x_min)


def augment(tile: AnnotatedTile, op: str) -> AnnotatedTile:
    if op not in AUGMENT_OPS:
        raise ValueError(f"unknown augmentation {op!r}")
    hr, lr, boxes = tile.hr, tile.lr, list(tile.boxes)
    if op == "hflip":
        w = hr.shape[-1]
        hr, lr = hr.flip(-1), lr.flip(-1)
        boxes = [replace(b, x_min=w - b.x_max, x_max=w - b.x_min) for b in boxes]
    elif op != "identity":
        for _ in range({"rot90": 1, "rot180": 2, "rot270": 3}[op]):
            w = hr.shape[-1]
            boxes = [_rot90_box(b, w) for b in boxes]
            hr, lr = torch.rot90(hr, 1, dims=(-2, -1)), torch.rot90(lr, 1, dims=(-2, -1))
    return AnnotatedTile(hr=hr.contiguous(), lr=lr.contiguous(), boxes=boxes, id=tile.id)


# --------------------------------------------------------------------------- splits

def split_dataset(tiles: Sequence[AnnotatedTile] | Sequence[str], fractions: Sequence[float] = (0.8, 0.2),
                  seed: int = 0) -> DatasetSplit:
    """Shuffle ids by ``seed`` and cut them into train/(val/)test parts.

    ``fractions`` is ``(train, test)`` or ``(train, val, test)``.  Non-train
    parts are floored so that rounding always favours the train part.
    """
    ids = [t.id if isinstance(t, AnnotatedTile) else str(t) for t in tiles]
    if len(fractions) not in (2, 3) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-6:
        raise ValueError(f"fractions must be 2 or 3 non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    others = [math.floor(round(f * n, 6)) for f in fractions[1:]]
    n_train = n - sum(others)
    if len(others) == 1:
        n_val, n_test = 0, others[0]
    else:
        n_val, n_test = others
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:n_train + n_val + n_test],
        seed=seed,
        fractions=tuple(fractions),
    )


# --------------------------------------------------------------------------- directory layout

def save_dataset(tiles: Sequence[AnnotatedTile], split: DatasetSplit, root: str | Path,
                 force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"{root} already exists and is not empty (use force to overwrite)")
        shutil.rmtree(root)
    for sub in ("hr", "lr", "ann"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for t in tiles:
        write_png(root / "hr" / f"{t.id}.png", t.hr)
        write_png(root / "lr" / f"{t.id}.png", t.lr)
        write_annotations(t, root / "ann" / f"{t.id}.txt")
    (root / "split.json").write_text(json.dumps(split.to_json(), indent=1))
    return root


def load_dataset(root: str | Path) -> tuple[dict[str, AnnotatedTile], DatasetSplit]:
    root = Path(root)
    split_path = root / "split.json"
    if not split_path.exists():
        raise DatasetError(f"no split.json under {root}")
    split = DatasetSplit.from_json(json.loads(split_path.read_text()))
    tiles = {}
    for tid in split.train + split.val + split.test:
        try:
            tiles[tid] = AnnotatedTile(
                hr=read_png(root / "hr" / f"{tid}.png"),
                lr=read_png(root / "lr" / f"{tid}.png"),
                boxes=read_annotations(root / "ann" / f"{tid}.txt"),
                id=tid,
            )
        except FileNotFoundError as exc:
            raise DatasetError(f"missing file for tile {tid}: {exc.filename}") from None
    return tiles, split
