"""Dataset index, class folds and the synthetic shapes dataset."""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .image_encoder import load_image, load_mask
from .nn import ConfigError

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar", "ellipse", "diamond")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    path: str
    width: int
    height: int
    split: str = "train"


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    class_id: int
    mask_path: str


@dataclass
class DatasetIndex:
    """Images, per-instance annotations and the seen/unseen class split.

    Pixel data is loaded lazily from ``root`` and cached; generated datasets
    carry their arrays in the caches directly.
    """

    images: dict[int, ImageRecord]
    annotations: list[Annotation]
    classes: list[str]
    seen: list[int] = field(default_factory=list)
    unseen: list[int] = field(default_factory=list)
    fold: int | None = None
    root: Path | None = None
    _pixels: dict = field(default_factory=dict, repr=False)
    _masks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ConfigError("seen and unseen classes overlap")
        known = set(range(len(self.classes)))
        self.by_image: dict[int, list[Annotation]] = {i: [] for i in self.images}
        for ann in self.annotations:
            if ann.class_id not in known:
                raise ConfigError(f"annotation {ann.id} has unknown class {ann.class_id}")
            self.by_image[ann.image_id].append(ann)
        if self.seen or self.unseen:
            if set(self.seen) | set(self.unseen) != known:
                raise ConfigError("every class must belong to exactly one split")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def image(self, image_id: int, size: int | None = None) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]."""
        key = (image_id, size)
        if key not in self._pixels:
            base = self._pixels.get((image_id, None))
            rec = self.images[image_id]
            if base is not None and size in (None, rec.width) and rec.width == rec.height:
                self._pixels[key] = base
            else:
                self._pixels[key] = load_image(self._resolve(rec.path), size or max(rec.width, rec.height))
        return self._pixels[key]

    def mask(self, ann: Annotation, size: int | None = None) -> np.ndarray:
        key = (ann.id, size)
        if key not in self._masks:
            base = self._masks.get((ann.id, None))
            rec = self.images[ann.image_id]
            if base is not None and size in (None, rec.width) and rec.width == rec.height:
                self._masks[key] = base
            else:
                self._masks[key] = load_mask(self._resolve(ann.mask_path), size or max(rec.width, rec.height))
        return self._masks[key]

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def with_split(self, seen, unseen, fold: int | None = None) -> "DatasetIndex":
        """Same data (shared caches) under a different class split."""
        out = dataclasses.replace(self, seen=sorted(seen), unseen=sorted(unseen), fold=fold)
        out._pixels, out._masks = self._pixels, self._masks
        return out

    def to_json(self) -> dict:
        return {
            "images": [dataclasses.asdict(r) for r in sorted(self.images.values(), key=lambda r: r.id)],
            "annotations": [dataclasses.asdict(a) for a in self.annotations],
            "classes": list(self.classes),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        path = Path(path)
        if path.is_dir():
            path = path / "index.json"
        raw = json.loads(path.read_text())
        images = {r["id"]: ImageRecord(**r) for r in raw["images"]}
        anns = [Annotation(**a) for a in raw["annotations"]]
        return cls(images, anns, raw["classes"], root=path.parent)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def build_folds(index: DatasetIndex, num_folds: int = 4) -> list[DatasetIndex]:
    """Round-robin class folds; fold ``f`` holds out classes ``c`` with ``c % num_folds == f``."""
    n = index.num_classes
    if num_folds < 1 or n % num_folds:
        raise ConfigError(f"{n} classes cannot be split evenly into {num_folds} folds")
    folds = []
    for f in range(num_folds):
        unseen = [c for c in range(n) if c % num_folds == f]
        seen = [c for c in range(n) if c % num_folds != f]
        folds.append(index.with_split(seen, unseen, fold=f))
    return folds


# -- synthetic shapes ------------------------------------------------------------------------


@dataclass
class SynthSpec:
    num_classes: int = 8
    num_images: int = 400
    size: int = 64
    min_classes: int = 1
    max_classes: int = 3
    test_fraction: float = 0.25
    second_instance_prob: float = 0.15
    radius: tuple[float, float] = (0.12, 0.24)

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in 1..{len(SHAPES)}")
        if self.num_images < 1 or self.size < 8:
            raise ConfigError("need at least one image of at least 8px")
        if not 1 <= self.min_classes <= self.max_classes <= self.num_classes:
            raise ConfigError("invalid per-image class count range")


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Filled, non-anti-aliased shape sampled at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / r
    v = (-s * dx + c * dy) / r
    rad = np.hypot(u, v)
    if kind == "disk":
        return rad <= 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if kind == "triangle":
        out = np.ones_like(u, dtype=bool)
        for theta in (np.pi / 6, 5 * np.pi / 6, 3 * np.pi / 2):
            out &= u * np.cos(theta) + v * np.sin(theta) <= 0.5
        return out
    if kind == "ring":
        return (rad <= 1.0) & (rad >= 0.55)
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    if kind == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ConfigError(f"unknown shape {kind}")


def _background(rng, size) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.75)))
    tilt = rng.normal(0, 0.12, size=(2, 3))
    ys, xs = np.mgrid[0:size, 0:size] / size - 0.5
    img = base[:, None, None] + tilt[0][:, None, None] * xs + tilt[1][:, None, None] * ys
    img = img + rng.normal(0, 0.04, size=(3, size, size))
    # unlabelled grey distractor strokes and specks
    for _ in range(rng.integers(2, 6)):
        val = rng.uniform(0.1, 0.9)
        tint = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.2), val))
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size, 2)
            w, h = rng.integers(1, max(2, size // 16), 2)
            img[:, y0 : y0 + h, x0 : x0 + w] = tint[:, None, None]
        else:
            t = np.linspace(0, 1, size * 2)
            p0, p1 = rng.uniform(0, size, 2), rng.uniform(0, size, 2)
            px = np.clip((p0[0] + t * (p1[0] - p0[0])).astype(int), 0, size - 1)
            py = np.clip((p0[1] + t * (p1[1] - p0[1])).astype(int), 0, size - 1)
            img[:, py, px] = tint[:, None]
    return img


def _class_colour(rng, cls: int, num_classes: int) -> np.ndarray:
    hue = (cls / num_classes + rng.uniform(-0.03, 0.03)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)))


def render_image(spec: SynthSpec, rng) -> tuple[np.ndarray, list[tuple[int, np.ndarray]]]:
    """One image and its visible instance masks ``[(class, mask), ...]`` (z-order resolved)."""
    size = spec.size
    while True:
        img = _background(rng, size)
        k = int(rng.integers(spec.min_classes, spec.max_classes + 1))
        chosen = rng.choice(spec.num_classes, size=k, replace=False)
        instances = []
        for cls in chosen:
            count = 2 if rng.random() < spec.second_instance_prob else 1
            instances += [int(cls)] * count
        drawn: list[tuple[int, np.ndarray]] = []
        for cls in instances:
            r = rng.uniform(*spec.radius) * size
            cx, cy = rng.uniform(0.6 * r, size - 0.6 * r, 2)
            full = shape_mask(SHAPES[cls], size, cx, cy, r, rng.uniform(0, 2 * np.pi))
            if full.sum() < 12:
                continue
            occluded = [(c, m & ~full) for c, m in drawn]
            if any(m.sum() < 0.4 * m0.sum() or m.sum() < 12 for (c, m), (_, m0) in zip(occluded, drawn)):
                continue  # would hide an earlier instance too much
            colour = _class_colour(rng, cls, spec.num_classes)
            img[:, full] = colour[:, None] + rng.normal(0, 0.03, size=(3, int(full.sum())))
            drawn = occluded + [(cls, full)]
        if drawn:
            return np.clip(img, 0, 1).astype(np.float32), drawn


def synthesize_dataset(spec: SynthSpec, rng: np.random.Generator, out_dir=None) -> DatasetIndex:
    """Generate shapes images; optionally write PNGs and ``index.json`` under ``out_dir``."""
    images: dict[int, ImageRecord] = {}
    anns: list[Annotation] = []
    pixels, masks = {}, {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(spec.num_images):
        img, inst = render_image(spec, rng)
        split = "test" if rng.random() < spec.test_fraction else "train"
        rec = ImageRecord(i, f"images/{i:05d}.png", spec.size, spec.size, split)
        images[i] = rec
        if out is not None:
            Image.fromarray((img.transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)).save(out / rec.path)
        # stored images are 8-bit; keep the cache identical to what a reload would see
        pixels[(i, None)] = (np.round(img * 255) / 255).astype(np.float32)
        for cls, m in inst:
            ann = Annotation(len(anns), i, cls, f"masks/{len(anns):06d}.png")
            anns.append(ann)
            masks[(ann.id, None)] = m
            if out is not None:
                Image.fromarray(m.astype(np.uint8) * 255).save(out / ann.mask_path)
    index = DatasetIndex(images, anns, list(SHAPES[: spec.num_classes]), root=out, _pixels=pixels, _masks=masks)
    if out is not None:
        index.save(out / "index.json")
    return index
