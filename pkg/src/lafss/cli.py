"""``la`` command line: datasets, training, evaluation, gradient checks, reports."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .config import EncoderConfig, ModelConfig, apply_overrides, check_keys, config_hash
from .data import DatasetIndex, SynthSpec, build_folds, synthesize_dataset
from .evaluation import AXES, EvalProtocol, ablation_sweep, cross_validate, format_table, oracle_predictor
from .model import PromptSegModel
from .nn import ConfigError
from .prompt_encoder import PromptError
from .sampler import PROMPT_MODES, SamplingError
from .serialize import BlobFormatError
from .training import NumericError, TrainConfig, load_model, read_checkpoint_meta, train_loop

log = logging.getLogger("lafss")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MANIFEST = "manifest.json"
PROMPT_ALIASES = {"masks": "masks_only", "points": "points_only", "boxes": "boxes_only", "mixed": "boxes_and_points"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifests -------------------------------------------------------------------------------


def source_revision() -> str:
    """Content hash of the package sources, standing in for a VCS revision."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return "src-" + h.hexdigest()[:12]


def write_manifest(out: Path, command: str, argv, config: dict | None, dataset: DatasetIndex | None, seed,
                   started: float, outputs, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash(config) if config is not None else None,
        "config": config,
        "dataset_hash": dataset.content_hash() if dataset is not None else None,
        "dataset_path": str(dataset.root) if dataset is not None and dataset.root is not None else None,
        "revision": source_revision(),
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "outputs": sorted(str(p) for p in outputs),
    }
    manifest.update(extra or {})
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def verify_manifest(run_dir) -> dict:
    """Recompute the hashes recorded in a manifest; raise ConfigError on mismatch."""
    m = json.loads((Path(run_dir) / MANIFEST).read_text())
    if m.get("config") is not None and config_hash(m["config"]) != m["config_hash"]:
        raise ConfigError("manifest config hash does not match its config")
    if m.get("dataset_path") and m.get("dataset_hash"):
        if DatasetIndex.load(m["dataset_path"]).content_hash() != m["dataset_hash"]:
            raise ConfigError("dataset changed since the manifest was written")
    return m


# -- helpers ---------------------------------------------------------------------------------


def env_seed(default: int) -> int:
    raw = os.environ.get("LA_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LA_SEED must be an integer, got '{raw}'") from None


def default_run_config() -> dict:
    return {
        "model": dataclasses.asdict(ModelConfig()),
        "train": dataclasses.asdict(TrainConfig()),
        "dataset": {"path": None, "synth": dataclasses.asdict(SynthSpec()) | {"seed": 0}},
    }


def load_run_config(path, overrides) -> dict:
    template = default_run_config()
    data = default_run_config()
    if path is not None:
        raw = json.loads(Path(path).read_text())
        check_keys(raw, template)
        for key, value in raw.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                _merge(data[key], value)
            else:
                data[key] = value
    apply_overrides(data, overrides or [], template)
    return data


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def build_model_config(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["encoder"] = EncoderConfig(**raw.get("encoder", {}))
    return ModelConfig(**raw)


def resolve_dataset(cfg: dict, base: Path | None = None) -> DatasetIndex:
    ds = cfg.get("dataset", {})
    if ds.get("path"):
        p = Path(ds["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        return DatasetIndex.load(p)
    synth = dict(ds.get("synth", {}))
    seed = synth.pop("seed", 0)
    synth["radius"] = tuple(synth.get("radius", SynthSpec().radius))
    return synthesize_dataset(SynthSpec(**synth), np.random.default_rng(seed))


def workers_for(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    return args.workers if args.workers else (os.cpu_count() or 1)


# -- commands --------------------------------------------------------------------------------


def cmd_dataset_synth(args) -> int:
    started = time.time()
    if args.classes is None or args.classes < 1:
        raise ConfigError("--classes must be a positive integer")
    spec = SynthSpec(num_classes=args.classes, num_images=args.images, size=args.size,
                     min_classes=min(args.min_classes, args.classes), max_classes=min(args.max_classes, args.classes),
                     test_fraction=args.test_fraction)
    seed = env_seed(args.seed)
    out = Path(args.out)
    index = synthesize_dataset(spec, np.random.default_rng(seed), out)
    outputs = ["index.json", "images/", "masks/"]
    write_manifest(out, "dataset synth", sys.argv[1:], {"synth": dataclasses.asdict(spec), "seed": seed}, index,
                   seed, started, outputs)
    print(f"wrote {len(index.images)} images and {len(index.annotations)} instance masks to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_run_config(args.config, args.set)
    seed = env_seed(cfg["train"]["seed"])
    cfg["train"]["seed"] = seed
    cfg["model"]["seed"] = env_seed(cfg["model"]["seed"])
    model_cfg = build_model_config(cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    base = Path(args.config).parent if args.config else None
    index = resolve_dataset(cfg, base)
    fold = build_folds(index, train_cfg.num_folds)[train_cfg.fold]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = PromptSegModel(model_cfg)
    resume = args.resume
    if resume is not None:
        meta = read_checkpoint_meta(resume)
        if meta["model_config"] != dataclasses.asdict(model_cfg):
            raise ConfigError("checkpoint model config differs from the run config")

    def progress(row):
        if args.verbose or row["iteration"] % max(1, args.log_every) == 0:
            print(f"iter {row['iteration']:6d}  loss {row['loss']:.5f}  lr {row['lr']:.3e}  |g| {row['grad_norm']:.3f}")

    result = train_loop(model, fold, train_cfg, out, resume=resume, workers=workers_for(args),
                        progress=progress, stop_at=args.stop_at)
    write_manifest(out, "train", sys.argv[1:], cfg, index, seed, started,
                   ["metrics.csv", "checkpoint.latn", "checkpoint.json"],
                   {"fold": train_cfg.fold, "iterations_done": (result.history[-1]["iteration"] + 1)
                    if result.history else None})
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _dataset_for_eval(args) -> DatasetIndex:
    if args.dataset:
        return DatasetIndex.load(args.dataset)
    if args.ckpt:
        manifest = Path(args.ckpt).parent / MANIFEST
        if manifest.exists():
            m = json.loads(manifest.read_text())
            if m.get("dataset_path"):
                return DatasetIndex.load(m["dataset_path"])
            if m.get("config"):
                return resolve_dataset(m["config"])
    raise ConfigError("no dataset given (--dataset) and none recorded next to the checkpoint")


def _palette() -> list[int]:
    rng = np.random.default_rng(7)
    colours = [(0, 0, 0)] + [tuple(int(c) for c in rng.integers(64, 256, 3)) for _ in range(255)]
    return [v for c in colours for v in c]


def _dump_masks(model, index, protocol, out: Path) -> None:
    from .evaluation import build_eval_batches

    out.mkdir(parents=True, exist_ok=True)
    kw = dict(mask_size=model.cfg.mask_size, pool_size=model.cfg.pool_size, max_points=model.cfg.max_points)
    for seed in protocol.seeds:
        count = 0
        for batch in build_eval_batches(index, protocol, seed, **kw):
            for pred in model.predict(batch):
                im = Image.fromarray(pred.astype(np.uint8), mode="P")
                im.putpalette(_palette())
                im.save(out / f"seed{seed}_ep{count:05d}.png")
                count += 1


def cmd_eval(args) -> int:
    started = time.time()
    mode = PROMPT_ALIASES.get(args.prompts, args.prompts)
    if mode not in PROMPT_MODES:
        raise ConfigError(f"unknown prompt mode '{args.prompts}'")
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    base_seed = env_seed(args.seed)
    seeds = tuple(range(base_seed, base_seed + args.seeds))
    protocol = EvalProtocol(episodes=args.episodes, seeds=seeds, n=args.n, k=args.k, prompt_mode=mode,
                            control=args.control, batch_size=args.batch_size)
    index = _dataset_for_eval(args)
    folds = build_folds(index, args.num_folds)
    fold_ids = range(args.num_folds) if args.fold == "all" else [int(args.fold)]
    workers = workers_for(args)
    if args.ablation:
        return _eval_ablation(args, protocol, folds[fold_ids[0]], workers, started, index)
    per_fold_ckpt = bool(args.ckpt) and "{fold}" in args.ckpt
    if args.oracle:
        predictor = oracle_predictor
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required unless --oracle is given")
        if len(fold_ids) > 1 and not per_fold_ckpt:
            raise ConfigError("--fold all needs one checkpoint per fold: put '{fold}' in the --ckpt path")
        predictor = None if per_fold_ckpt else load_model(args.ckpt)

    def factory(f_index):
        if predictor is not None:
            return predictor
        path = Path(args.ckpt.format(fold=f_index.fold))
        return load_model(path) if path.exists() else None

    ways = [int(w) for w in args.ways.split(",")] if args.ways else [protocol.n]
    reports = []
    for n in ways:
        cv = cross_validate(factory, [folds[f] for f in fold_ids], dataclasses.replace(protocol, n=n), workers)
        reports.extend(cv.reports)
    # fold-major order for the CSV and tables
    reports = [reports[w * len(fold_ids) + i] for i in range(len(fold_ids)) for w in range(len(ways))]
    csv_text = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))
    if len(ways) > 1:
        head = ["Method"] + [f"{n}-way" for n in ways]
        rows = [[f"fold-{f}"] + [f"{r.mean * 100:.1f}" for r in reports[i * len(ways):(i + 1) * len(ways)]]
                for i, f in enumerate(fold_ids)]
        text = format_table([head] + rows)
    elif len(fold_ids) > 1:
        head = ["Method"] + [f"fold-{f}" for f in fold_ids] + ["mean"]
        means = [r.mean for r in reports]
        text = format_table([head, ["model"] + [f"{m * 100:.1f}" for m in means] + [f"{np.mean(means) * 100:.1f}"]])
    else:
        text = reports[0].to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(csv_text)
        (out / "report.txt").write_text(text)
        outputs = ["report.csv", "report.txt"]
        if args.dump_masks and not args.oracle:
            _dump_masks(predictor, folds[fold_ids[0]], protocol, out / "masks")
            outputs.append("masks/")
        write_manifest(out, "eval", sys.argv[1:], dataclasses.asdict(protocol) | {"ways": ways, "folds": list(fold_ids)},
                       index, base_seed, started, outputs,
                       {"runtime_s": round(sum(r.runtime_s for r in reports), 3)})
    return EXIT_OK


def _eval_ablation(args, protocol, fold: DatasetIndex, workers: int, started: float, index: DatasetIndex) -> int:
    """Train one variant per axis with the run config and evaluate each on ``fold``."""
    axes = args.ablation.split(",")
    cfg = load_run_config(args.config, args.set)
    model_cfg = build_model_config(cfg["model"])
    train_cfg = dataclasses.replace(TrainConfig(**cfg["train"]), fold=fold.fold)

    def train_fn(mcfg):
        model = PromptSegModel(mcfg)
        train_loop(model, fold, train_cfg, workers=workers)
        return model

    _, text = ablation_sweep(train_fn, model_cfg, fold, protocol, axes, workers)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
        write_manifest(out, "eval", sys.argv[1:], cfg, index, protocol.seeds[0], started, ["ablation.txt"],
                       {"ablation": axes})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import BLOCKS, inject_wrong_sign, run_gradchecks

    names = args.blocks.split(",") if args.blocks else list(BLOCKS)
    unknown = [n for n in names if n not in BLOCKS]
    if unknown:
        raise ConfigError(f"unknown block(s): {', '.join(unknown)}")
    started = time.time()
    if args.inject_wrong_sign:
        with inject_wrong_sign():
            results = run_gradchecks(names, tol=args.tol, max_entries=args.max_entries)
    else:
        results = run_gradchecks(names, tol=args.tol, max_entries=args.max_entries)
    lines = [r.line for r in results]
    ok = all(r.report.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILED'} ({time.time() - started:.1f}s, tol {args.tol:g})")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        write_manifest(out, "gradcheck", sys.argv[1:], {"blocks": names, "tol": args.tol}, None, None, started,
                       ["gradcheck.txt"])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.exists():
        raise FileNotFoundError(run)
    lines = []
    if (run / MANIFEST).exists():
        m = verify_manifest(run)
        lines.append(f"command: {m['command']}  revision: {m['revision']}  config: {m['config_hash']}")
    metrics = run / "metrics.csv"
    if metrics.exists():
        with open(metrics) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            loss = np.array([float(r["loss"]) for r in rows])
            w = min(50, len(loss))
            lines.append(f"iterations: {len(rows)} (last {rows[-1]['iteration']})")
            lines.append(f"loss: first-{w} mean {loss[:w].mean():.4f}, last-{w} mean {loss[-w:].mean():.4f}")
            lines.append(f"wall: {sum(float(r['wall_ms']) for r in rows) / 1000:.1f}s")
    for rep in sorted(run.rglob("report.csv")):
        with open(rep) as fh:
            rows = [r for r in csv.DictReader(fh) if r["seed"] == "mean"]
        table = [["report", "fold", "n", "k", "prompts", "control", "mIoU"]]
        table += [[str(rep.parent.relative_to(run)) or ".", r["fold"], r["n"], r["k"], r["prompts"], r["control"],
                   f"{float(r['miou']) * 100:.1f}"] for r in rows]
        lines.append(format_table(table).rstrip())
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="la", description="Multi-prompt few-shot segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_command", parser_class=_Parser)
    syn = ds_sub.add_parser("synth", help="generate the synthetic shapes dataset")
    syn.add_argument("--classes", type=int, default=8)
    syn.add_argument("--images", type=int, default=400)
    syn.add_argument("--size", type=int, default=64)
    syn.add_argument("--min-classes", type=int, default=1)
    syn.add_argument("--max-classes", type=int, default=3)
    syn.add_argument("--test-fraction", type=float, default=0.25)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True)
    syn.set_defaults(func=cmd_dataset_synth)

    tr = sub.add_parser("train", help="episodic training on one fold's seen classes")
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume")
    tr.add_argument("--deterministic", action="store_true")
    tr.add_argument("--workers", type=int, default=0)
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tr.add_argument("--stop-at", type=int, help="stop (and checkpoint) after this many iterations")
    tr.add_argument("--log-every", type=int, default=50)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="mIoU benchmark on unseen classes")
    ev.add_argument("--ckpt")
    ev.add_argument("--dataset")
    ev.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    ev.add_argument("--n", type=int, default=1)
    ev.add_argument("--k", type=int, default=1)
    ev.add_argument("--ways", help="comma-separated N values for a way sweep")
    ev.add_argument("--prompts", default="masks")
    ev.add_argument("--episodes", type=int, default=200)
    ev.add_argument("--seeds", type=int, default=3)
    ev.add_argument("--seed", type=int, default=0, help="first seed")
    ev.add_argument("--fold", default="0", help="fold id or 'all'")
    ev.add_argument("--num-folds", type=int, default=4)
    ev.add_argument("--control", default="none", choices=["none", "shuffled"])
    ev.add_argument("--batch-size", type=int, default=8)
    ev.add_argument("--out")
    ev.add_argument("--dump-masks", action="store_true")
    ev.add_argument("--deterministic", action="store_true")
    ev.add_argument("--workers", type=int, default=0)
    ev.add_argument("--ablation", help=f"comma-separated axes to ablate (trains variants): {','.join(AXES)}")
    ev.add_argument("--config", help="run config used to train ablation variants")
    ev.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every composite block")
    gc.add_argument("--blocks")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--max-entries", type=int, default=8)
    gc.add_argument("--inject-wrong-sign", action="store_true", help="negate GELU backward (mutation test)")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    rp = sub.add_parser("report", help="summarise a run directory")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except (ConfigError, PromptError, SamplingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, BlobFormatError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
