"""mIoU benchmarking over random episode suites."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import DatasetIndex
from .model import EpisodeBatch, PromptSegModel
from .nn import ConfigError
from .sampler import PROMPT_MODES, EpisodeSampler, SamplingError, collate_episodes, draw_pool_rows, randomize_prompt_types
from .tensor import Tensor, no_grad

Predictor = Callable[[EpisodeBatch], np.ndarray]


def compute_iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float | None:
    """IoU of one label; ``None`` when the class is in neither grid."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred == cls
    g = gt == cls
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return None
    return int(np.count_nonzero(p & g)) / union


def episode_miou(pred: np.ndarray, gt: np.ndarray, scored) -> float | None:
    vals = [v for c in scored if (v := compute_iou(pred, gt, c)) is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalProtocol:
    episodes: int = 200
    seeds: tuple = (0, 1, 2)
    n: int = 1
    k: int = 1
    prompt_mode: str = "masks_only"
    batch_size: int = 8
    control: str = "none"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be distinct and non-empty")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode '{self.prompt_mode}'")
        if self.control not in ("none", "shuffled"):
            raise ConfigError(f"unknown control '{self.control}'")
        if min(self.n, self.k, self.batch_size) < 1:
            raise ConfigError("n, k and batch_size must be positive")


@dataclass
class BenchmarkReport:
    protocol: EvalProtocol
    fold: int | None
    per_seed: list[float]
    per_class: dict[str, float]
    episodes_scored: list[int]
    runtime_s: float = field(default=0.0, compare=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "n", "k", "prompts", "control", "seed", "episodes", "miou"])
        for s, v, cnt in zip(self.protocol.seeds, self.per_seed, self.episodes_scored):
            w.writerow([self.fold, self.protocol.n, self.protocol.k, self.protocol.prompt_mode,
                        self.protocol.control, s, cnt, f"{v:.6f}"])
        w.writerow([self.fold, self.protocol.n, self.protocol.k, self.protocol.prompt_mode,
                    self.protocol.control, "mean", sum(self.episodes_scored), f"{self.mean:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        p = self.protocol
        lines = [f"{p.n}-way {p.k}-shot, prompts={p.prompt_mode}, control={p.control}, fold={self.fold}"]
        lines += [f"  seed {s}: mIoU {v * 100:6.2f}" for s, v in zip(p.seeds, self.per_seed)]
        lines.append(f"  mean  : mIoU {self.mean * 100:6.2f}")
        if self.per_class:
            lines.append("  per class: " + ", ".join(f"{k} {v * 100:.1f}" for k, v in self.per_class.items()))
        return "\n".join(lines) + "\n"


def eval_sampler(index: DatasetIndex, n: int) -> tuple[EpisodeSampler, list[int]]:
    """Sampler over test images; returns it with the classes that must be drawn.

    When ``n`` exceeds the unseen pool every unseen class is drawn and the
    remaining ways are filled with seen classes acting as distractors.
    """
    unseen = list(index.unseen)
    if not unseen:
        raise ConfigError("dataset split has no unseen classes")
    if n <= len(unseen):
        return EpisodeSampler(index, unseen, split="test"), []
    return EpisodeSampler(index, range(index.num_classes), split="test"), unseen


def model_predictor(model: PromptSegModel) -> Predictor:
    return model.predict


def oracle_predictor(batch: EpisodeBatch) -> np.ndarray:
    return batch.labels.copy()


def background_predictor(batch: EpisodeBatch) -> np.ndarray:
    return np.zeros_like(batch.labels)


def _shuffled_prototypes(model: PromptSegModel, batches: list[EpisodeBatch], rng) -> list[Tensor]:
    """Replace every class prototype with one computed for a different class elsewhere in the run."""
    with no_grad():
        protos = [model.prototypes(b).data for b in batches]
    entries = [(i, b, n) for i, batch in enumerate(batches) for b in range(batch.size)
               for n in range(len(batch.classes[b]))]
    by_class: dict[int, list] = {}
    for i, b, n in entries:
        by_class.setdefault(batches[i].classes[b][n], []).append((i, b, n))
    out = [p.copy() for p in protos]
    for i, b, n in entries:
        cls = batches[i].classes[b][n]
        donors = [e for c, lst in sorted(by_class.items()) if c != cls for e in lst]
        if not donors:
            raise ConfigError("shuffled control needs at least two classes in the run")
        j, bb, nn = donors[int(rng.integers(len(donors)))]
        out[i][b, n] = protos[j][bb, nn]
    return [Tensor(p, dtype=p.dtype) for p in out]


def build_eval_batches(index: DatasetIndex, protocol: EvalProtocol, seed: int, mask_size=256, pool_size=64,
                       max_points=10) -> list[EpisodeBatch]:
    sampler, fixed = eval_sampler(index, protocol.n)
    ep_rng = np.random.default_rng([seed, 0])
    prompt_rng = np.random.default_rng([seed, 1])
    try:
        episodes = [sampler.sample_episode(protocol.n, protocol.k, ep_rng, must_include=fixed)
                    for _ in range(protocol.episodes)]
    except SamplingError as e:
        raise ConfigError(f"protocol cannot be satisfied: {e}") from e
    batches = []
    for s in range(0, len(episodes), protocol.batch_size):
        chunk = episodes[s : s + protocol.batch_size]
        for ep in chunk:
            randomize_prompt_types(ep, index, protocol.prompt_mode, prompt_rng, mask_size, max_points)
        rows = [draw_pool_rows(ep.n, pool_size, prompt_rng) for ep in chunk]
        batches.append(collate_episodes(chunk, index, rows, mask_size))
    return batches


def run_benchmark(predictor, index: DatasetIndex, protocol: EvalProtocol, workers: int = 1) -> BenchmarkReport:
    """Evaluate ``predictor`` (a model or a batch -> labels callable) on unseen-class episodes.

    Only unseen classes are scored; background never enters the mean. Each
    episode's score is the mean IoU over its scored classes with a non-empty
    union, and a seed's score is the mean over episodes. The per-class table
    accumulates intersections and unions over all seeds.
    """
    t0 = time.perf_counter()
    model = predictor if isinstance(predictor, PromptSegModel) else None
    if protocol.control == "shuffled" and model is None:
        raise ConfigError("the shuffled control needs a model")
    kw = {}
    if model is not None:
        kw = dict(mask_size=model.cfg.mask_size, pool_size=model.cfg.pool_size, max_points=model.cfg.max_points)
    unseen = set(index.unseen)
    inter: dict[int, int] = {c: 0 for c in sorted(unseen)}
    union: dict[int, int] = {c: 0 for c in sorted(unseen)}
    per_seed, counts = [], []
    for seed in protocol.seeds:
        batches = build_eval_batches(index, protocol, seed, **kw)
        overrides = [None] * len(batches)
        if protocol.control == "shuffled":
            overrides = _shuffled_prototypes(model, batches, np.random.default_rng([seed, 2]))

        def run(i):
            if model is not None:
                return model.predict(batches[i], overrides[i])
            return np.asarray(predictor(batches[i]))

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                preds = list(pool.map(run, range(len(batches))))
        else:
            preds = [run(i) for i in range(len(batches))]

        scores = []
        for batch, pred in zip(batches, preds):
            for b in range(batch.size):
                scored = [n + 1 for n, c in enumerate(batch.classes[b]) if c in unseen]
                v = episode_miou(pred[b], batch.labels[b], scored)
                if v is not None:
                    scores.append(v)
                for n, c in enumerate(batch.classes[b]):
                    if c in unseen:
                        p, g = pred[b] == n + 1, batch.labels[b] == n + 1
                        inter[c] += int(np.count_nonzero(p & g))
                        union[c] += int(np.count_nonzero(p | g))
        per_seed.append(float(np.mean(scores)) if scores else 0.0)
        counts.append(len(scores))
    per_class = {index.classes[c]: inter[c] / union[c] for c in inter if union[c]}
    return BenchmarkReport(protocol, index.fold, per_seed, per_class, counts, time.perf_counter() - t0)


# -- cross-validation and sweeps ---------------------------------------------------------------


@dataclass
class CrossValReport:
    reports: list[BenchmarkReport]

    @property
    def fold_means(self) -> list[float]:
        return [r.mean for r in self.reports]

    @property
    def grand_mean(self) -> float:
        return float(np.mean(self.fold_means))

    def to_text(self, label: str = "model") -> str:
        head = ["Method"] + [f"fold-{r.fold}" for r in self.reports] + ["mean"]
        row = [label] + [f"{m * 100:.1f}" for m in self.fold_means] + [f"{self.grand_mean * 100:.1f}"]
        return format_table([head, row])

    def to_csv(self) -> str:
        return "".join(r.to_csv() for r in self.reports)


def cross_validate(factory, folds: list[DatasetIndex], protocol: EvalProtocol, workers: int = 1) -> CrossValReport:
    """``factory(fold_index)`` returns a trained model or predictor for that fold."""
    reports = []
    for f_index in folds:
        predictor = factory(f_index)
        if predictor is None:
            raise FileNotFoundError(f"no model available for fold {f_index.fold}")
        reports.append(run_benchmark(predictor, f_index, protocol, workers))
    return CrossValReport(reports)


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    out = []
    for j, r in enumerate(rows):
        out.append(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)))
        if j == 0:
            out.append("-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def way_sweep(model, index: DatasetIndex, protocol: EvalProtocol, ways=(1, 2, 3, 5), workers: int = 1) -> tuple[dict, str]:
    """Mean mIoU for several N; the table has one column per N."""
    results = {n: run_benchmark(model, index, replace(protocol, n=n), workers) for n in ways}
    head = ["Method"] + [f"{n}-way" for n in ways]
    row = ["model"] + [f"{results[n].mean * 100:.1f}" for n in ways]
    return results, format_table([head, row])


MODEL_AXES = ("spatial_convs", "class_example_mixer", "token_pool")
AXES = MODEL_AXES + ("prompt_mode",)


def ablation_sweep(train_fn, base_cfg, index: DatasetIndex, protocol: EvalProtocol, axes, workers: int = 1):
    """Train/evaluate one variant per switch in ``axes``.

    ``train_fn(model_cfg)`` returns a trained model. Model switches are turned
    off one at a time against the full model; ``prompt_mode`` evaluates the
    full model under every prompt mode. Returns ``(rows, text_table)``.
    """
    for a in axes:
        if a not in AXES:
            raise ConfigError(f"unknown ablation axis '{a}'; expected one of {AXES}")
    full = train_fn(base_cfg)
    rows = [("full", full.num_parameters(), run_benchmark(full, index, protocol, workers).mean)]
    for a in axes:
        if a == "prompt_mode":
            for mode in PROMPT_MODES[1:]:
                rows.append((f"only {mode.replace('_only', '')}", full.num_parameters(),
                             run_benchmark(full, index, replace(protocol, prompt_mode=mode), workers).mean))
            continue
        variant = replace(base_cfg, **{a: False})
        m = train_fn(variant)
        rows.append((f"w/o {a.replace('_', ' ')}", m.num_parameters(), run_benchmark(m, index, protocol, workers).mean))
    table = format_table([["Variant", "params", f"fold-{index.fold}"]] +
                         [[n, str(p), f"{v * 100:.1f}"] for n, p, v in rows])
    return rows, table

