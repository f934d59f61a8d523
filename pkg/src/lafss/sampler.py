"""Episode construction: class draws, query composition, supports, prompts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Annotation, DatasetIndex
from .model import EpisodeBatch
from .nn import ConfigError
from .prompt_encoder import PromptAnnotation, collate_prompts

log = logging.getLogger(__name__)

PROMPT_MODES = ("random", "masks_only", "boxes_only", "points_only", "boxes_and_points")
PROMPT_TYPES = ("mask", "box", "points")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BatchConfig:
    B: int
    N: int
    K: int

    def __post_init__(self):
        if min(self.B, self.N, self.K) < 1:
            raise ConfigError(f"batch config {tuple(self)} must be positive")

    def __iter__(self):
        return iter((self.B, self.N, self.K))

    @property
    def max_images(self) -> int:
        return self.B * self.N * self.K + self.B


PAPER_BATCH_CONFIGS = (
    BatchConfig(4, 1, 4),
    BatchConfig(2, 4, 2),
    BatchConfig(8, 1, 2),
    BatchConfig(4, 2, 2),
    BatchConfig(4, 4, 1),
    BatchConfig(16, 1, 1),
)


@dataclass
class Episode:
    query_id: int
    classes: list[int]
    support_ids: list[int]
    # per support image: episode class -> instance annotations
    support_anns: list[dict[int, list[Annotation]]]
    query_mode: str
    requested_n: int
    prompts: list[list[PromptAnnotation]] | None = None
    prompt_types: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.classes)

    @property
    def L(self) -> int:
        return len(self.support_ids)


class EpisodeSampler:
    """Draws episodes from the images of ``split`` restricted to ``classes``.

    Images that contain any class in ``exclude`` are dropped entirely, so held
    out classes never appear, not even as background.
    """

    def __init__(
        self,
        index: DatasetIndex,
        classes,
        split: str | None = None,
        exclude=(),
        max_retries: int = 100,
        all_prob: float = 0.5,
    ):
        self.index = index
        self.classes = sorted(int(c) for c in classes)
        self.max_retries = max_retries
        self.all_prob = all_prob
        exclude = set(exclude)
        self.class_images: dict[int, list[int]] = {c: [] for c in self.classes}
        self.image_classes: dict[int, set[int]] = {}
        for img_id in sorted(index.images):
            if split is not None and index.images[img_id].split != split:
                continue
            present = {a.class_id for a in index.by_image[img_id]}
            if present & exclude:
                continue
            self.image_classes[img_id] = present
            for c in sorted(present):
                if c in self.class_images:
                    self.class_images[c].append(img_id)
        self.class_sets = {c: set(v) for c, v in self.class_images.items()}

    def eligible(self, k: int) -> list[int]:
        return [c for c in self.classes if len(self.class_images[c]) >= k + 1]

    def sample_episode(self, n: int, k: int, rng: np.random.Generator, must_include=()) -> Episode:
        """``must_include`` classes are always drawn (first) and the query must
        contain at least one of them; the rest are filled from ``classes``."""
        fixed = [int(c) for c in must_include]
        eligible = [c for c in self.eligible(k) if c not in fixed]
        if any(len(self.class_images.get(c, ())) < k + 1 for c in fixed):
            raise SamplingError(f"a required class has fewer than {k + 1} images")
        if len(eligible) + len(fixed) < n:
            raise SamplingError(f"need {n} classes with at least {k + 1} images, found {len(eligible) + len(fixed)}")
        want_all = bool(rng.random() < self.all_prob)
        cur = n
        while True:
            cands = []
            for _ in range(self.max_retries):
                extra = max(0, cur - len(fixed))
                chosen = fixed[:cur] + [eligible[i] for i in rng.choice(len(eligible), size=extra, replace=False)]
                sets = [self.class_sets[c] for c in chosen]
                pool = set.intersection(*sets) if want_all else set.union(*sets)
                if fixed:
                    pool &= set.union(*(self.class_sets[c] for c in fixed))
                # the query must leave at least k other images for every class
                cands = sorted(
                    q for q in pool if all(len(self.class_images[c]) - (q in self.class_sets[c]) >= k for c in chosen)
                )
                if cands:
                    break
            if cands:
                break
            if want_all and cur > 1:
                cur -= 1
                continue
            raise SamplingError(f"no query satisfies (N={n}, K={k}) after {self.max_retries} retries")
        query = cands[int(rng.integers(len(cands)))]
        support: list[int] = []
        for c in chosen:
            pool = [i for i in self.class_images[c] if i != query]
            for j in rng.choice(len(pool), size=k, replace=False):
                if pool[j] not in support:
                    support.append(pool[j])
        anns = []
        for img in support:
            by_cls: dict[int, list[Annotation]] = {}
            for a in self.index.by_image[img]:
                if a.class_id in chosen:
                    by_cls.setdefault(a.class_id, []).append(a)
            anns.append(by_cls)
        return Episode(query, chosen, support, anns, "all" if want_all else "any", n)


def sample_episode(index: DatasetIndex, n: int, k: int, rng, classes=None, split=None, exclude=()) -> Episode:
    classes = index.seen if classes is None else classes
    return EpisodeSampler(index, classes, split=split, exclude=exclude).sample_episode(n, k, rng)


def sample_episode_batch(sampler: EpisodeSampler, configs, rng) -> tuple[BatchConfig, list[Episode]]:
    if not configs:
        raise ConfigError("no batch configs given")
    cfg = configs[int(rng.integers(len(configs)))]
    try:
        return cfg, [sampler.sample_episode(cfg.N, cfg.K, rng) for _ in range(cfg.B)]
    except SamplingError as e:
        raise SamplingError(f"config {tuple(cfg)}: {e}") from e


# -- prompts ---------------------------------------------------------------------------------


def mask_box(mask: np.ndarray) -> tuple[tuple[float, float], tuple[float, float]]:
    """Tight normalised bounds ``((x1, y1), (x2, y2))`` covering whole pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (cols[0] / w, rows[0] / h), ((cols[-1] + 1) / w, (rows[-1] + 1) / h)


def point_count(area: int, image_area: int, max_points: int = 10) -> int:
    reference = image_area / 16
    return int(np.clip(round(max_points * area / reference), 1, max_points))


def sample_points(mask: np.ndarray, rng, max_points: int = 10) -> list[tuple[float, float]]:
    """Area-proportional number of distinct interior pixels, as normalised pixel centres."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("cannot sample points from an empty mask")
    count = min(point_count(len(ys), mask.size, max_points), len(ys))
    pick = rng.choice(len(ys), size=count, replace=False)
    h, w = mask.shape
    return [((xs[i] + 0.5) / w, (ys[i] + 0.5) / h) for i in pick]


def upsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a square boolean grid."""
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask.astype(bool)
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return mask[rows[:, None], cols[None, :]]


def _draw_type(mode: str, rng) -> str:
    if mode == "random":
        return PROMPT_TYPES[int(rng.integers(3))]
    if mode == "masks_only":
        return "mask"
    if mode == "boxes_only":
        return "box"
    if mode == "points_only":
        return "points"
    if mode == "boxes_and_points":
        return ("box", "points")[int(rng.integers(2))]
    raise ConfigError(f"unknown prompt mode '{mode}'; expected one of {PROMPT_MODES}")


def randomize_prompt_types(
    episode: Episode,
    index: DatasetIndex,
    mode: str,
    rng,
    mask_size: int = 256,
    max_points: int = 10,
) -> Episode:
    """Materialise ``episode.prompts[l][n]`` with one prompt type per instance."""
    if mode not in PROMPT_MODES:
        raise ConfigError(f"unknown prompt mode '{mode}'; expected one of {PROMPT_MODES}")
    prompts, types = [], []
    for anns in episode.support_anns:
        row = []
        for c in episode.classes:
            mask, points, boxes = None, [], []
            for ann in anns.get(c, []):
                m = index.mask(ann)
                if not m.any():
                    log.warning("skipping empty instance mask %s", ann.mask_path)
                    continue
                kind = _draw_type(mode, rng)
                types.append(kind)
                if kind == "mask":
                    up = upsample_mask(m, mask_size)
                    mask = up if mask is None else mask | up
                elif kind == "box":
                    boxes.append(mask_box(m))
                else:
                    points += sample_points(m, rng, max_points)
            present = mask is not None or bool(points) or bool(boxes)
            row.append(PromptAnnotation(mask, points, boxes, class_present=present))
        prompts.append(row)
    episode.prompts = prompts
    episode.prompt_types = types
    return episode


def query_labels(episode: Episode, index: DatasetIndex) -> np.ndarray:
    """Ground-truth grid: 0 background, ``n + 1`` for episode class n."""
    rec = index.images[episode.query_id]
    out = np.zeros((rec.height, rec.width), dtype=np.int64)
    pos = {c: i + 1 for i, c in enumerate(episode.classes)}
    for ann in index.by_image[episode.query_id]:
        if ann.class_id in pos:
            out[index.mask(ann)] = pos[ann.class_id]
    return out


def collate_episodes(
    episodes: list[Episode],
    index: DatasetIndex,
    pool_rows: list[list[int]],
    mask_size: int = 256,
    config: BatchConfig | None = None,
) -> EpisodeBatch:
    """Stack materialised episodes into padded arrays."""
    if any(ep.prompts is None for ep in episodes):
        raise ValueError("episode prompts must be materialised first")
    B = len(episodes)
    L = max(ep.L for ep in episodes)
    q = np.stack([index.image(ep.query_id) for ep in episodes])
    support = np.zeros((B, L, *q.shape[1:]), dtype=np.float32)
    for b, ep in enumerate(episodes):
        for l, img in enumerate(ep.support_ids):
            support[b, l] = index.image(img)
    prompts = collate_prompts([ep.prompts for ep in episodes], pool_rows, mask_size)
    labels = np.stack([query_labels(ep, index) for ep in episodes])
    return EpisodeBatch(q, support, prompts, labels, [list(ep.classes) for ep in episodes], config)


def draw_pool_rows(n: int, pool_size: int, rng) -> list[int]:
    if n > pool_size:
        raise ConfigError(f"{n} classes exceed token pool size {pool_size}")
    return [int(r) for r in rng.choice(pool_size, size=n, replace=False)]


def make_batch(
    episodes: list[Episode],
    index: DatasetIndex,
    mode: str,
    rng,
    mask_size: int,
    pool_size: int,
    max_points: int = 10,
    config: BatchConfig | None = None,
) -> EpisodeBatch:
    for ep in episodes:
        randomize_prompt_types(ep, index, mode, rng, mask_size, max_points)
    rows = [draw_pool_rows(ep.n, pool_size, rng) for ep in episodes]
    return collate_episodes(episodes, index, rows, mask_size, config)
