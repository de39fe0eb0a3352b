"""Command-line entry point: prepare, train, eval, baselines and forecast.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import NumericalError
from .data import (
    DataError,
    DatasetSplit,
    MotionSequence,
    cache_paths,
    discover_files,
    file_digest,
    load_cached_dataset,
    load_sequence,
    parse_expmap_file,
    preprocess,
    save_sequence,
)
from .evaluation import EvalConfig, RunningAverage, ZeroVelocity, default_baselines, run_protocol
from .model import GraphWaveNet, ModelConfig, ModelUsageError, load_checkpoint
from .skeleton import Skeleton, SkeletonError, h36m_skeleton, load_skeleton
from .training import TrainConfig, TrainingAborted, fit, load_training_state, write_history

log = logging.getLogger("skelforecast")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

PREPROCESS_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Fully resolved settings of one command, written next to its outputs."""

    command: str = ""
    data_root: str | None = None
    cache_dir: str = "cache"
    out_dir: str | None = None
    checkpoint: str | None = None
    skeleton: str | None = None
    seed: int = 0
    threads: int | None = None
    split: dict = field(default_factory=lambda: asdict(DatasetSplit()))
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    eval: dict = field(default_factory=lambda: _eval_dict(EvalConfig()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "run_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def split_config(self) -> DatasetSplit:
        return DatasetSplit(**{k: tuple(v) for k, v in self.split.items()})

    def model_config(self) -> ModelConfig:
        d = dict(self.model)
        d["dilations"] = tuple(d.get("dilations", ModelConfig().dilations))
        return ModelConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def eval_config(self) -> EvalConfig:
        d = dict(self.eval)
        for key in ("horizons_ms", "exclude_joints"):
            if key in d:
                d[key] = tuple(d[key])
        return EvalConfig(**d)


def _eval_dict(cfg: EvalConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _merge_section(base: dict, updates: dict, section: str) -> dict:
    unknown = set(updates) - set(base)
    if unknown:
        raise UsageError(f"unknown {section} settings in config: {', '.join(sorted(unknown))}")
    return {**base, **updates}


def load_run_config(path) -> RunConfig:
    """Read a JSON config; sections ``model``, ``train``, ``eval`` and ``split`` are merged over the defaults."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        if key in ("split", "model", "train", "eval"):
            setattr(cfg, key, _merge_section(getattr(cfg, key), value, key))
        else:
            setattr(cfg, key, value)
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg.command = args.command
    if os.environ.get("SF_CACHE_DIR"):
        cfg.cache_dir = os.environ["SF_CACHE_DIR"]
    for name in ("data_root", "cache_dir", "out_dir", "checkpoint", "skeleton", "threads", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.train["rng_seed"] = cfg.seed
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    if getattr(args, "no_mirror", False):
        overrides["mirror"] = False
    cfg.train.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "output_mode", None):
        cfg.model["output_mode"] = args.output_mode
    for key, value in cfg.train.items():
        if key in ("epochs", "batch_size", "samples_per_sequence") and (not isinstance(value, int) or value < 1):
            raise UsageError(f"train.{key} must be a positive integer, got {value!r}")
    try:
        cfg.model_config(), cfg.train_config(), cfg.eval_config(), cfg.split_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def _skeleton(cfg: RunConfig) -> Skeleton:
    return load_skeleton(cfg.skeleton) if cfg.skeleton else h36m_skeleton()


# ------------------------------------------------------------------ commands


def cmd_prepare(cfg: RunConfig) -> int:
    if not cfg.data_root:
        raise UsageError("prepare needs --data-root")
    skeleton = _skeleton(cfg)
    files = discover_files(cfg.data_root)
    cache = Path(cfg.cache_dir)
    settings = {"fps_in": 50.0, "factor": 2, "version": PREPROCESS_VERSION, "num_joints": skeleton.num_joints}
    counts = {"prepared": 0, "skipped": 0, "failed": 0}
    for (subject, action, trial), path in sorted(files.items()):
        digest = file_digest(path)
        _, meta_path = cache_paths(cache, subject, action, trial)
        if meta_path.is_file():
            try:
                meta = json.loads(meta_path.read_text())
            except json.JSONDecodeError:
                meta = {}
            if meta.get("source_sha256") == digest and meta.get("preprocess") == settings:
                counts["skipped"] += 1
                continue
        try:
            seq = preprocess(
                parse_expmap_file(path),
                skeleton,
                fps_in=settings["fps_in"],
                factor=settings["factor"],
                subject=subject,
                action=action,
                trial=trial,
            )
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            counts["failed"] += 1
            continue
        save_sequence(cache, seq, {"source": str(path), "source_sha256": digest, "preprocess": settings})
        counts["prepared"] += 1
    cfg.write(cache)
    print(f"prepared {counts['prepared']}, skipped {counts['skipped']} (cache up to date), failed {counts['failed']}")
    return EXIT_DATA if counts["failed"] else EXIT_OK


def _out_dir(cfg: RunConfig, default: str) -> Path:
    out = Path(cfg.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    skeleton = _skeleton(cfg)
    dataset = load_cached_dataset(cfg.cache_dir, skeleton, cfg.split_config())
    tcfg = cfg.train_config()
    out = _out_dir(cfg, "runs/train")
    ckpt = out / "checkpoints"
    latest = ckpt / "latest"
    if resume:
        if not latest.is_dir():
            raise UsageError(f"nothing to resume: {latest} does not exist")
        model, opt, start, history = load_training_state(latest)
        if model.num_joints != skeleton.num_joints:
            raise UsageError(f"checkpoint has {model.num_joints} joints, data has {skeleton.num_joints}")
        log.info("resuming after epoch %d", start)
    else:
        model = GraphWaveNet(cfg.model_config(), skeleton, seed=cfg.seed)
        opt, start, history = None, 0, []
    cfg.checkpoint = str(latest)
    cfg.write(out)

    def on_epoch(row):
        history_rows.append(row)
        write_history(out / "history.csv", history_rows)

    history_rows = list(history)
    fit(
        dataset.train,
        model,
        tcfg,
        val_sequences=dataset.val,
        checkpoint_dir=ckpt,
        opt=opt,
        start_epoch=start,
        history=history,
        on_epoch=on_epoch,
    )
    write_history(out / "history.csv", history_rows)
    last = history_rows[-1] if history_rows else None
    if last:
        print(f"epoch {last['epoch']}: train loss {last['train_loss']:.6f}")
    print(f"checkpoint: {latest}")
    return EXIT_OK


def _check_model_data(model: GraphWaveNet, sequences: list[MotionSequence]) -> None:
    for seq in sequences:
        if seq.num_joints != model.num_joints or seq.frames.shape[-1] != model.config.joint_dim:
            raise UsageError(
                f"checkpoint expects (J={model.num_joints}, d_j={model.config.joint_dim}) but "
                f"{seq.key} has (J={seq.num_joints}, d_j={seq.frames.shape[-1]})"
            )


def cmd_eval(cfg: RunConfig, with_baselines: bool, models_required: bool = True) -> int:
    forecasters = []
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint)
        model.name = "model"
        forecasters.append(model)
    elif models_required and not with_baselines:
        raise UsageError("eval needs --checkpoint, --with-baselines, or both")
    if with_baselines:
        forecasters.extend(default_baselines())
    dataset = load_cached_dataset(cfg.cache_dir, _skeleton(cfg), cfg.split_config())
    if cfg.checkpoint:
        _check_model_data(forecasters[0], dataset.test)
    ecfg = cfg.eval_config()
    report = None
    for f in forecasters:
        part = run_protocol(f, dataset.test, ecfg)
        report = part if report is None else report.merge(part)
    out = _out_dir(cfg, "runs/eval")
    cfg.write(out)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_table())
    print(report.to_table())
    print(f"report: {out / 'report.csv'}")
    return EXIT_OK


def _load_forecast_sequence(path: Path, skeleton: Skeleton) -> np.ndarray:
    if path.suffix == ".sftn":
        return load_sequence(path).frames
    return preprocess(parse_expmap_file(path), skeleton).frames


def cmd_forecast(cfg: RunConfig, sequence: str, horizon: int, start: int | None, out_path: str | None, baseline: str | None) -> int:
    if horizon < 1:
        raise UsageError("--horizon must be at least 1")
    if cfg.checkpoint:
        model = load_checkpoint(cfg.checkpoint)
        skeleton, seed_len, forecaster = model.skeleton, model.config.receptive_field, model
    elif baseline:
        skeleton, seed_len = _skeleton(cfg), cfg.eval_config().seed_len
        forecaster = ZeroVelocity() if baseline == "zero-velocity" else RunningAverage(int(baseline.rsplit("-", 1)[1]))
    else:
        raise UsageError("forecast needs --checkpoint or --baseline")
    path = Path(sequence)
    if not path.is_file():
        raise DataError(f"sequence file {path} does not exist")
    frames = _load_forecast_sequence(path, skeleton)
    if frames.shape[1] != skeleton.num_joints:
        raise UsageError(f"sequence has {frames.shape[1]} joints, model expects {skeleton.num_joints}")
    if frames.shape[0] < seed_len:
        raise UsageError(f"sequence has {frames.shape[0]} frames; the seed window needs {seed_len}")
    start = seed_len if start is None else start
    if start < seed_len or start > frames.shape[0]:
        raise UsageError(f"--start must lie in [{seed_len}, {frames.shape[0]}]")
    seed = frames[start - seed_len : start]
    pred = np.asarray(forecaster(seed[None], horizon))[0]

    out = Path(out_path or (Path(cfg.out_dir or ".") / "forecast.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "joint", "component", "ground_truth", "prediction"])
        for j in range(skeleton.num_joints):
            for c, comp in enumerate("wxyz"):
                for t in range(seed_len + horizon):
                    abs_t = start - seed_len + t
                    gt = repr(float(frames[abs_t, j, c])) if abs_t < frames.shape[0] else ""
                    pr = repr(float(pred[t - seed_len, j, c])) if t >= seed_len else ""
                    writer.writerow([abs_t, skeleton.joint_names[j], comp, gt, pr])
    cfg.write(out.parent)
    print(f"forecast: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelforecast", description="Skeleton motion forecasting with a graph WaveNet.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="seed for initialization and window sampling")
    parser.add_argument("--threads", type=int, help="cap on BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="parse, downsample and cache exponential-map files")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--skeleton", help="skeleton file (default: bundled 32-joint skeleton)")

    p = sub.add_parser("train", help="train a model on the cached training split")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--out", dest="out_dir", help="run directory for history, checkpoints and config")
    p.add_argument("--skeleton")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--output-mode", dest="output_mode", choices=("velocity", "absolute"))
    p.add_argument("--no-mirror", dest="no_mirror", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/latest")

    for name, text in (("eval", "run the evaluation protocol on the test split"), ("baselines", "evaluate the baselines only")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--skeleton")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--with-baselines", dest="with_baselines", action="store_true")

    p = sub.add_parser("forecast", help="write seed, ground truth and forecast of one sequence as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("zero-velocity", "running-average-2", "running-average-4"))
    p.add_argument("--sequence", required=True, help="cached .sftn or raw exponential-map .txt file")
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--start", type=int, help="first forecast frame (default: right after the first seed window)")
    p.add_argument("--out", dest="out_path")
    p.add_argument("--skeleton")
    return parser


def _dispatch(args, cfg: RunConfig) -> int:
    if args.command == "prepare":
        return cmd_prepare(cfg)
    if args.command == "train":
        return cmd_train(cfg, resume=args.resume)
    if args.command == "eval":
        return cmd_eval(cfg, args.with_baselines)
    if args.command == "baselines":
        cfg.checkpoint = None
        return cmd_eval(cfg, with_baselines=True, models_required=False)
    return cmd_forecast(cfg, args.sequence, args.horizon, args.start, args.out_path, args.baseline)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            return _dispatch(args, cfg)
    except (UsageError, ModelUsageError, SkeletonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
