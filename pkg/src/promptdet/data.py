"""Synthetic long-tailed shape corpus: generation, COCO-compatible IO, and
category bookkeeping.

Categories are (texture, color, shape) combinations rendered as filled
polygons on a noisy gray background; ground-truth boxes are the exact shape
extents. Category frequencies follow a Zipf law so the corpus has a genuine
frequent/common/rare split. Everything is driven by one numpy Generator, so
a fixed seed reproduces the dataset byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch import Tensor

from .config import DataConfig
from .geometry import NormalizedBox, iou

DATASET_FORMAT = "promptdet-dataset"
DATASET_VERSION = 1

SHAPES = ("circle", "square", "triangle", "star")
COLORS = {
    "red": (220, 40, 40),
    "blue": (50, 90, 220),
    "green": (60, 180, 75),
    "yellow": (240, 210, 50),
    "magenta": (210, 60, 200),
    "cyan": (70, 200, 220),
    "orange": (245, 130, 40),
    "white": (240, 240, 240),
}
# First eight combinations keep every (shape, color) pairing unique.
_BASE_ORDER = [
    ("circle", "red"),
    ("square", "green"),
    ("triangle", "magenta"),
    ("star", "orange"),
    ("circle", "blue"),
    ("square", "yellow"),
    ("triangle", "cyan"),
    ("star", "white"),
]


def category_palette(num_categories: int) -> list[dict]:
    """Deterministic list of category definitions for a corpus size."""
    combos = []
    for texture in ("solid", "striped"):
        seen = set(_BASE_ORDER) if texture == "solid" else set()
        order = list(_BASE_ORDER) if texture == "solid" else []
        for color in COLORS:
            for shape in SHAPES:
                if (shape, color) not in seen:
                    order.append((shape, color))
                    seen.add((shape, color))
        combos.extend((texture, color, shape) for shape, color in order)
    if num_categories > len(combos):
        raise ValueError(f"at most {len(combos)} categories supported")
    out = []
    for i, (texture, color, shape) in enumerate(combos[:num_categories]):
        name = f"{color} {shape}" if texture == "solid" else f"striped {color} {shape}"
        out.append({"id": i, "name": name, "shape": shape, "color": color, "texture": texture})
    return out


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    bucket: str = "common"


class CategoryTable:
    """id -> category with a frequency bucket partition."""

    def __init__(self, categories: list[Category]):
        self.by_id = {c.id: c for c in categories}
        if len(self.by_id) != len(categories):
            raise ValueError("duplicate category ids")

    def __len__(self) -> int:
        return len(self.by_id)

    def __contains__(self, cid: int) -> bool:
        return cid in self.by_id

    def name(self, cid: int) -> str:
        return self.by_id[cid].name

    def names(self) -> list[str]:
        return [self.by_id[cid].name for cid in sorted(self.by_id)]

    def ids(self) -> list[int]:
        return sorted(self.by_id)

    def id_for(self, name: str) -> int:
        for cid, cat in self.by_id.items():
            if cat.name == name:
                return cid
        raise KeyError(name)

    def bucket_members(self, bucket: str) -> list[int]:
        return [cid for cid in sorted(self.by_id) if self.by_id[cid].bucket == bucket]


@dataclass
class Annotation:
    category_id: int
    box: NormalizedBox


@dataclass
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int
    annotations: list[Annotation] = field(default_factory=list)

    def category_ids(self) -> list[int]:
        return sorted({a.category_id for a in self.annotations})


class Dataset:
    def __init__(self, records: list[ImageRecord], categories: CategoryTable, root: Path):
        self.records = records
        self.categories = categories
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.records)

    def load_image(self, record: ImageRecord) -> Tensor:
        """(3, H, W) float tensor in [0, 1]."""
        with Image.open(self.root / record.file_name) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1)

    def category_counts(self) -> dict[int, int]:
        counts = dict.fromkeys(self.categories.ids(), 0)
        for rec in self.records:
            for ann in rec.annotations:
                counts[ann.category_id] += 1
        return counts


# --- rendering ---------------------------------------------------------------


def _star_vertices(cx: float, cy: float, radius: float, rotation: float) -> list[tuple[float, float]]:
    pts = []
    for k in range(10):
        r = radius if k % 2 == 0 else 0.42 * radius
        ang = rotation - math.pi / 2 + k * math.pi / 5
        pts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
    return pts


def _triangle_vertices(cx: float, cy: float, half: float, rotation: float) -> list[tuple[float, float]]:
    base = [(0.0, -half), (-half, half), (half, half)]
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    return [(cx + x * cos_r - y * sin_r, cy + x * sin_r + y * cos_r) for x, y in base]


def _draw_shape(draw: ImageDraw.ImageDraw, spec: dict, color: tuple) -> tuple[float, float, float, float]:
    """Draw one instance; returns its exact pixel-space bbox (x0, y0, x1, y1)."""
    kind, cx, cy, half, rot = spec["shape"], spec["cx"], spec["cy"], spec["half"], spec["rot"]
    if kind == "circle":
        bbox = (cx - half, cy - half, cx + half, cy + half)
        draw.ellipse(bbox, fill=color)
        return bbox
    if kind == "square":
        bbox = (cx - half, cy - half, cx + half, cy + half)
        draw.rectangle(bbox, fill=color)
        return bbox
    if kind == "triangle":
        pts = _triangle_vertices(cx, cy, half, rot)
    elif kind == "star":
        pts = _star_vertices(cx, cy, half, rot)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    draw.polygon(pts, fill=color)
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    return (min(xs), min(ys), max(xs), max(ys))


def _apply_stripes(img: Image.Image, bbox: tuple, spec: dict, color: tuple) -> None:
    """Darken every other diagonal band inside the shape region."""
    x0, y0, x1, y1 = (int(v) for v in bbox)
    mask = Image.new("L", img.size, 0)
    _draw_shape(ImageDraw.Draw(mask), spec, 255)
    stripes = Image.new("RGB", img.size, (0, 0, 0))
    sd = ImageDraw.Draw(stripes)
    dark = tuple(int(c * 0.45) for c in color)
    step = max(3, (x1 - x0) // 4)
    for off in range(x0 - (y1 - y0), x1 + (y1 - y0), 2 * step):
        sd.line([(off, y1 + 1), (off + (y1 - y0) + 2, y0 - 1)], fill=dark, width=step)
    band = Image.new("L", img.size, 0)
    bd = ImageDraw.Draw(band)
    for off in range(x0 - (y1 - y0), x1 + (y1 - y0), 2 * step):
        bd.line([(off, y1 + 1), (off + (y1 - y0) + 2, y0 - 1)], fill=255, width=step)
    final_mask = Image.composite(band, Image.new("L", img.size, 0), mask)
    img.paste(stripes, (0, 0), final_mask)


def _place_instances(
    rng: np.random.Generator,
    count: int,
    size_range: tuple[float, float],
    overlap_cap: float,
    max_attempts: int = 200,
) -> list[dict]:
    """Sample (cx, cy, half) in normalized coordinates honoring overlap_cap."""
    placed: list[dict] = []
    for _ in range(count):
        ok = False
        for _ in range(max_attempts):
            size = rng.uniform(*size_range)
            half = size / 2
            cx = rng.uniform(half + 0.01, 0.99 - half)
            cy = rng.uniform(half + 0.01, 0.99 - half)
            candidate = NormalizedBox(cx, cy, size, size)
            if all(iou(candidate, p["bound"]) <= overlap_cap for p in placed):
                placed.append({"cx": cx, "cy": cy, "half": half, "bound": candidate})
                ok = True
                break
        if not ok:
            raise ValueError(
                f"unsatisfiable density: could not place {count} instances of size "
                f"{size_range} with overlap cap {overlap_cap}"
            )
    return placed


def render_image(
    rng: np.random.Generator,
    size: int,
    instances: list[dict],
    palette: list[dict],
) -> tuple[Image.Image, list[tuple[int, NormalizedBox]]]:
    """Render placed instances; returns the image and exact annotations."""
    bg = int(rng.uniform(58, 112))
    arr = np.full((size, size, 3), bg, dtype=np.float32)
    arr += rng.normal(0.0, 4.0, arr.shape)
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    annotations = []
    for inst in instances:
        cat = palette[inst["category"]]
        spec = {
            "shape": cat["shape"],
            "cx": inst["cx"] * size,
            "cy": inst["cy"] * size,
            "half": inst["half"] * size,
            "rot": inst["rot"],
        }
        color = COLORS[cat["color"]]
        bbox = _draw_shape(draw, spec, color)
        if cat["texture"] == "striped":
            _apply_stripes(img, bbox, spec, color)
        x0, y0, x1, y1 = (max(0.0, bbox[0]), max(0.0, bbox[1]), min(size, bbox[2]), min(size, bbox[3]))
        box = NormalizedBox(
            (x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size
        )
        annotations.append((cat["id"], box))
    return img, annotations


def generate_split(
    cfg: DataConfig,
    out_dir: str | Path,
    split: str,
    num_images: int,
    seed: int,
) -> Dataset:
    """Generate one split to ``out_dir/{split}.json`` + ``images/``."""
    if cfg.num_categories < 2:
        raise ValueError("need at least 2 categories")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    palette = category_palette(cfg.num_categories)
    rng = np.random.default_rng(seed)
    probs = (1.0 + np.arange(cfg.num_categories)) ** -cfg.zipf_exponent
    probs /= probs.sum()
    overlap_cap = 0.3 if cfg.allow_overlap else 0.02

    records = []
    lo, hi = cfg.density
    single = cfg.single_category
    for idx in range(num_images):
        count = int(rng.integers(lo, hi + 1))
        placed = _place_instances(rng, count, cfg.size_range, overlap_cap)
        if single:
            cat = int(rng.choice(cfg.num_categories, p=probs))
            cats = [cat] * count
        else:
            cats = [int(c) for c in rng.choice(cfg.num_categories, size=count, p=probs)]
        for inst, cat in zip(placed, cats):
            inst["category"] = cat
            inst["rot"] = float(rng.uniform(-0.35, 0.35))
        img, anns = render_image(rng, cfg.image_size, placed, palette)
        file_name = f"images/{split}_{idx:06d}.png"
        img.save(out_dir / file_name, format="PNG", optimize=False)
        records.append(
            ImageRecord(
                image_id=idx,
                file_name=file_name,
                width=cfg.image_size,
                height=cfg.image_size,
                annotations=[Annotation(cid, box) for cid, box in anns],
            )
        )

    table = _bucketize(palette, records)
    ds = Dataset(records, table, out_dir)
    save_dataset(ds, out_dir / f"{split}.json", generator={"seed": seed, "split": split})
    return ds


def generate_corpus(cfg: DataConfig, out_dir: str | Path) -> tuple[Dataset, Dataset]:
    """Train + test splits sharing one palette; test uses seed+1."""
    train = generate_split(cfg, out_dir, "train", cfg.num_images, cfg.seed)
    test = generate_split(cfg, out_dir, "test", cfg.num_test_images, cfg.seed + 1)
    return train, test


def _bucketize(palette: list[dict], records: list[ImageRecord]) -> CategoryTable:
    """Assign frequent/common/rare by terciles of realized frequency."""
    counts = dict.fromkeys(range(len(palette)), 0)
    for rec in records:
        for ann in rec.annotations:
            counts[ann.category_id] += 1
    order = sorted(counts, key=lambda cid: (-counts[cid], cid))
    thirds = np.array_split(np.array(order), 3)
    buckets = {}
    for name, chunk in zip(("frequent", "common", "rare"), thirds):
        for cid in chunk.tolist():
            buckets[cid] = name
    cats = [Category(p["id"], p["name"], buckets.get(p["id"], "rare")) for p in palette]
    return CategoryTable(cats)


# --- IO ----------------------------------------------------------------------


class DatasetError(ValueError):
    pass


def save_dataset(ds: Dataset, path: str | Path, generator: dict | None = None) -> None:
    """COCO-compatible document: images/annotations/categories arrays."""
    path = Path(path)
    images = [
        {"id": r.image_id, "file_name": r.file_name, "width": r.width, "height": r.height}
        for r in ds.records
    ]
    annotations = []
    aid = 0
    for r in ds.records:
        for ann in r.annotations:
            x0, y0, x1, y1 = ann.box.corners()
            annotations.append(
                {
                    "id": aid,
                    "image_id": r.image_id,
                    "category_id": ann.category_id,
                    "bbox": [x0 * r.width, y0 * r.height, (x1 - x0) * r.width, (y1 - y0) * r.height],
                    # exact center-format copy so save/load round-trips bit-for-bit
                    "box_cxcywh_norm": list(ann.box.as_tuple()),
                    "area": (x1 - x0) * r.width * (y1 - y0) * r.height,
                    "iscrowd": 0,
                }
            )
            aid += 1
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "info": {"generator": generator or {}},
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": c.id, "name": c.name, "frequency_bucket": c.bucket}
            for c in (ds.categories.by_id[cid] for cid in ds.categories.ids())
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetError(f"missing top-level array {key!r}")
    cats = []
    for i, c in enumerate(doc["categories"]):
        try:
            cats.append(Category(int(c["id"]), str(c["name"]), c.get("frequency_bucket", "common")))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"bad category at index {i}: {exc}") from exc
    table = CategoryTable(cats)

    records: dict[int, ImageRecord] = {}
    for i, im in enumerate(doc["images"]):
        try:
            rec = ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"bad image at index {i}: {exc}") from exc
        if rec.image_id in records:
            raise DatasetError(f"duplicate image id {rec.image_id} at index {i}")
        records[rec.image_id] = rec

    for i, ann in enumerate(doc["annotations"]):
        try:
            cid = int(ann["category_id"])
            image_id = int(ann["image_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad annotation at index {i}: {exc}") from exc
        if cid not in table:
            raise DatasetError(f"annotation {i} references unknown category id {cid}")
        if image_id not in records:
            raise DatasetError(f"annotation {i} references unknown image id {image_id}")
        rec = records[image_id]
        if "box_cxcywh_norm" in ann:
            box = NormalizedBox(*(float(v) for v in ann["box_cxcywh_norm"]))
        else:  # plain COCO file
            box = NormalizedBox(
                (x + w / 2) / rec.width, (y + h / 2) / rec.height, w / rec.width, h / rec.height
            )
        rec.annotations.append(Annotation(cid, box))

    ordered = [records[k] for k in sorted(records)]
    return Dataset(ordered, table, path.parent)
