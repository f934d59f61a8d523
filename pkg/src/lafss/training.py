"""Focal loss, AdamW, warmup+cosine schedule and the episodic training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .config import ModelConfig, config_hash
from .data import DatasetIndex
from .model import PromptSegModel
from .nn import ConfigError, Parameter
from .sampler import PAPER_BATCH_CONFIGS, BatchConfig, EpisodeSampler, make_batch, sample_episode_batch
from .tensor import Tensor, log_softmax, precision, where

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "epoch", "config", "loss", "lr", "grad_norm", "wall_ms")


class NumericError(FloatingPointError):
    pass


# -- loss ------------------------------------------------------------------------------------


def class_pixel_counts(labels: np.ndarray, num_channels: int) -> np.ndarray:
    """(B, H, W) labels -> (B, C) pixel counts."""
    B = labels.shape[0]
    out = np.zeros((B, num_channels), dtype=np.int64)
    for b in range(B):
        out[b] = np.bincount(labels[b].ravel(), minlength=num_channels)[:num_channels]
    return out


def inverse_frequency_weights(labels: np.ndarray, num_channels: int) -> np.ndarray:
    counts = class_pixel_counts(labels, num_channels).astype(np.float64)
    present = counts > 0
    total = counts.sum(axis=1, keepdims=True)
    w = np.where(present, total / np.maximum(counts, 1) / np.maximum(present.sum(axis=1, keepdims=True), 1), 0.0)
    return w


def focal_loss(logits: Tensor, labels: np.ndarray, weights=None, gamma: float = 2.0) -> Tensor:
    """Class-balanced focal loss over per-class mean cross-entropies.

    ``logits`` (B, C, H, W) or (C, H, W); ``labels`` integer grid in [0, C).
    For each class n present in the target, ``l_n`` is the mean of
    ``-log p_n`` over that class's pixels and contributes
    ``w_n (1 - exp(-l_n))**gamma * l_n``. Each sample is normalised by the
    summed weight of its present classes; the batch is averaged.
    ``weights`` may be None (uniform), ``"inverse_frequency"``, a (C,) or a
    (B, C) array.
    """
    if logits.ndim == 3:
        return focal_loss(logits.reshape(1, *logits.shape), labels[None], weights, gamma)
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    B, C = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (B, *logits.shape[2:]):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("labels out of range")
    counts = class_pixel_counts(labels, C)
    present = counts > 0
    if isinstance(weights, str):
        if weights != "inverse_frequency":
            raise ConfigError(f"unknown class weighting '{weights}'")
        w = inverse_frequency_weights(labels, C)
    elif weights is None:
        w = np.ones((B, C))
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (B, C))
    w = np.where(present, w, 0.0).astype(logits.dtype)

    onehot = (labels[:, None] == np.arange(C)[None, :, None, None]).astype(logits.dtype)
    logp = log_softmax(logits, axis=1)
    picked = (logp * onehot).sum(axis=(2, 3))  # B, C
    ce = picked * (-1.0 / np.maximum(counts, 1).astype(logits.dtype))
    ce = where(present, ce, 1.0)  # keeps the modulation gradient finite for absent classes
    term = ((1.0 - (-ce).exp()) ** gamma) * ce if gamma else ce
    norm = np.maximum(w.sum(axis=1, keepdims=True), np.finfo(logits.dtype).tiny)
    per_sample = (term * (w / norm)).sum(axis=1)
    return per_sample.mean()


def per_class_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Reference: mean over present classes of the mean -log p over that class's pixels."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=0, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=0, keepdims=True))
    vals = [-logp[c][labels == c].mean() for c in range(x.shape[0]) if (labels == c).any()]
    return float(np.mean(vals))


# -- optimiser -------------------------------------------------------------------------------


class AdamW:
    """Adam with bias correction and decoupled (multiplicative) weight decay."""

    def __init__(self, named_params, lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.names = [n for n, _ in named_params]
        self.params: list[Parameter] = [p for _, p in named_params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter '{name}'")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"adam_m/{name}"] = m
            out[f"adam_v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for i, name in enumerate(self.names):
            self.m[i] = arrays[f"adam_m/{name}"].astype(self.m[i].dtype).reshape(self.m[i].shape)
            self.v[i] = arrays[f"adam_v/{name}"].astype(self.v[i].dtype).reshape(self.v[i].shape)
        self.t = t


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def lr_schedule(t: int, lr_peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``lr_peak`` then per-step cosine decay reaching 0 at ``total - 1``."""
    if warmup < 1:
        raise ConfigError("warmup must be at least 1 iteration")
    if t < warmup:
        return lr_peak * (t + 1) / warmup
    span = total - 1 - warmup
    if span <= 0:
        return lr_peak
    progress = min(1.0, (t - warmup) / span)
    return 0.5 * lr_peak * (1.0 + math.cos(math.pi * progress))


# -- configuration ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    gamma: float = 2.0
    class_weights: str = "uniform"
    lr: float = 1e-5
    warmup_iters: int = 1000
    epochs: int = 50
    iters_per_epoch: int | None = None
    max_iters: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    precision: str = "float32"
    prompt_mode: str = "random"
    hue_jitter: float = 0.0
    batch_configs: list = field(default_factory=lambda: [list(c) for c in PAPER_BATCH_CONFIGS])
    fold: int = 0
    num_folds: int = 4

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.warmup_iters < 1:
            raise ConfigError("warmup_iters must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.class_weights not in ("uniform", "inverse_frequency"):
            raise ConfigError(f"unknown class_weights '{self.class_weights}'")
        if not 0.0 <= self.hue_jitter <= 0.5:
            raise ConfigError("hue_jitter must lie in [0, 0.5]")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if not self.batch_configs:
            raise ConfigError("batch_configs must not be empty")
        self.batch_configs = [list(c) for c in self.batch_configs]
        for c in self.batch_configs:
            BatchConfig(*c)

    def configs(self) -> list[BatchConfig]:
        return [BatchConfig(*c) for c in self.batch_configs]


# -- checkpoints -----------------------------------------------------------------------------


def _rng_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": format(st["state"]["state"], "x"),
        "inc": format(st["state"]["inc"], "x"),
        "has_uint32": st["has_uint32"],
        "uinteger": format(st["uinteger"], "x"),
    }


def _rng_from_json(raw: dict) -> np.random.Generator:
    if raw["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported generator {raw['bit_generator']}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(raw["state"], 16), "inc": int(raw["inc"], 16)},
        "has_uint32": raw["has_uint32"],
        "uinteger": int(raw["uinteger"], 16),
    }
    return rng


def save_checkpoint(path, model: PromptSegModel, opt: AdamW, iteration: int, rng, train_cfg: TrainConfig) -> Path:
    """Blob at ``path`` plus a ``.json`` sidecar; returns the blob path."""
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update(opt.state_arrays())
    serialize.save(path, arrays)
    meta = {
        "iteration": iteration,
        "adam_t": opt.t,
        "rng": _rng_to_json(rng),
        "config_hash": config_hash({"model": asdict(model.cfg), "train": asdict(train_cfg)}),
        "model_config": asdict(model.cfg),
        "train_config": asdict(train_cfg),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def read_checkpoint_meta(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_model(path) -> PromptSegModel:
    """Rebuild a model from a checkpoint blob and its sidecar."""
    meta = read_checkpoint_meta(path)
    model = PromptSegModel(ModelConfig(**meta["model_config"]))
    arrays = serialize.load(path)
    model.load_state_dict({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
    return model


# -- loop ------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]
    checkpoint: Path | None
    iterations: int


def rotate_hue(images: np.ndarray, turns: float) -> np.ndarray:
    """Rotate RGB values (..., 3, H, W) about the grey axis by ``turns`` of a full hue circle."""
    a = 2.0 * math.pi * turns
    u = np.full(3, 1.0 / math.sqrt(3.0))
    k = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    r = math.cos(a) * np.eye(3) + math.sin(a) * k + (1.0 - math.cos(a)) * np.outer(u, u)
    out = np.einsum("ij,...jhw->...ihw", r, images)
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


def _batches(sampler, index, cfg: TrainConfig, model_cfg: ModelConfig, rng, start: int, stop: int):
    for _ in range(start, stop):
        bc, eps = sample_episode_batch(sampler, cfg.configs(), rng)
        batch = make_batch(eps, index, cfg.prompt_mode, rng, model_cfg.mask_size, model_cfg.pool_size,
                           model_cfg.max_points, bc)
        if cfg.hue_jitter:
            # one shift per episode, shared by its query and supports, so class colour is never a fixed cue
            for b, t in enumerate(rng.uniform(-cfg.hue_jitter, cfg.hue_jitter, batch.size)):
                batch.query[b] = rotate_hue(batch.query[b], t)
                batch.support[b] = rotate_hue(batch.support[b], t)
        yield batch, _rng_to_json(rng)


def _prefetch(gen, depth: int):
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in gen:
                q.put(item)
        except BaseException as e:  # surfaced in the consumer
            q.put(e)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def train_sampler(index: DatasetIndex) -> EpisodeSampler:
    return EpisodeSampler(index, index.seen, split="train", exclude=index.unseen)


def train_loop(
    model: PromptSegModel,
    index: DatasetIndex,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    workers: int = 1,
    progress=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run (or continue) episodic training on ``index.seen``.

    ``stop_at`` interrupts the run after that many iterations (checkpointing
    there) without changing the schedule, so a later ``resume`` continues the
    same trajectory. Writes ``metrics.csv`` and per-epoch checkpoints under ``out_dir`` when
    given. A non-finite loss stops the run with :class:`NumericError`.
    """
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with precision(dtype):
        model.to(dtype)
        sampler = train_sampler(index)
        per_epoch = cfg.iters_per_epoch or len(sampler.image_classes)
        total = cfg.epochs * per_epoch if cfg.max_iters is None else cfg.max_iters
        opt = AdamW(
            [(n, p) for n, p in model.named_parameters() if any(p is q for q in model.trainable_parameters())],
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            weight_decay=cfg.weight_decay,
        )
        rng = np.random.default_rng(cfg.seed)
        start = 0
        if resume is not None:
            meta = read_checkpoint_meta(resume)
            arrays = serialize.load(resume)
            model.load_state_dict({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
            model.to(dtype)
            opt.load_state_arrays(arrays, meta["adam_t"])
            rng = _rng_from_json(meta["rng"])
            start = meta["iteration"]

        metrics_file = None
        writer = None
        if out is not None:
            path = out / "metrics.csv"
            fresh = not path.exists() or start == 0
            metrics_file = open(path, "w" if fresh else "a", newline="")
            writer = csv.writer(metrics_file)
            if fresh:
                writer.writerow(METRIC_COLUMNS)

        stop = total if stop_at is None else min(stop_at, total)
        gen = _batches(sampler, index, cfg, model.cfg, rng, start, stop)
        if workers > 1:
            gen = _prefetch(gen, depth=2 * workers)
        history: list[dict] = []
        last_ckpt: Path | None = Path(resume) if resume is not None else None
        params = opt.params
        try:
            for it, (batch, rng_after) in zip(range(start, stop), gen):
                t0 = time.perf_counter()
                lr = lr_schedule(it, cfg.lr, cfg.warmup_iters, total)
                opt.zero_grad()
                logits = model.full_logits(batch)
                weights = "inverse_frequency" if cfg.class_weights == "inverse_frequency" else None
                loss = focal_loss(logits, batch.labels, weights, cfg.gamma)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss became {value} at iteration {it}; last good checkpoint: {last_ckpt}")
                loss.backward()
                gnorm = clip_grad_norm(params, cfg.grad_clip)
                opt.step(lr)
                row = {
                    "iteration": it,
                    "epoch": it // per_epoch,
                    "config": "({},{},{})".format(*batch.config),
                    "loss": value,
                    "lr": lr,
                    "grad_norm": gnorm,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
                history.append(row)
                if writer is not None:
                    writer.writerow([row[c] if c != "loss" else repr(value) for c in METRIC_COLUMNS])
                if progress is not None:
                    progress(row)
                end_of_epoch = (it + 1) % per_epoch == 0 or it + 1 == stop
                if out is not None and end_of_epoch:
                    rng_state = _rng_from_json(rng_after)
                    last_ckpt = save_checkpoint(out / "checkpoint.latn", model, opt, it + 1, rng_state, cfg)
                    metrics_file.flush()
        finally:
            if metrics_file is not None:
                metrics_file.close()
    return TrainResult(history, last_ckpt, total)
