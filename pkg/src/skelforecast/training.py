"""Autoregressive training with Adam and an exponentially decaying learning rate."""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericalError, Tensor
from .data import MotionSequence
from .model import GraphWaveNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 3000
    lr: float = 1e-3
    lr_decay: float = 0.999
    samples_per_sequence: int = 5
    seed_len: int = 32
    target_len: int = 10
    rng_seed: int = 0
    mirror: bool = True
    teacher_forcing: bool = False
    max_grad_norm: float | None = None
    val_every: int = 10
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @property
    def window_len(self) -> int:
        return self.seed_len + self.target_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used during 0-based ``epoch``."""
    return cfg.lr * cfg.lr_decay**epoch


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied in place to ``params[*].data``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -------------------------------------------------------------------- windows


@dataclass
class Window:
    seed: np.ndarray
    target: np.ndarray
    sequence: str
    start: int
    variant: str


def sample_epoch(sequences: Sequence[MotionSequence], cfg: TrainConfig, rng: np.random.Generator) -> list[Window]:
    """Draw ``samples_per_sequence`` random windows from every long-enough sequence.

    Each window comes from either the plain or the mirrored variant with equal
    probability (plain only when ``cfg.mirror`` is off).
    """
    n = cfg.window_len
    windows = []
    for seq in sequences:
        if seq.num_frames < n:
            log.warning("skipping %s: %d frames, need %d", seq.key, seq.num_frames, n)
            continue
        for _ in range(cfg.samples_per_sequence):
            start = int(rng.integers(0, seq.num_frames - n + 1))
            source = seq.mirrored() if cfg.mirror and rng.random() < 0.5 else seq
            chunk = source.frames[start : start + n]
            windows.append(Window(chunk[: cfg.seed_len], chunk[cfg.seed_len :], seq.key, start, source.variant))
    return windows


def train_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error in quaternion space."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return ad.mean_abs_error(pred, target)


def _stack(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([w.seed for w in windows]), np.stack([w.target for w in windows])


def batch_loss(model: GraphWaveNet, seeds: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> Tensor:
    preds = model.autoregress(
        Tensor(seeds),
        targets.shape[1],
        normalize_output=False,
        targets=targets if cfg.teacher_forcing else None,
    )
    return train_loss(preds, targets)


def evaluate_loss(model: GraphWaveNet, windows: Sequence[Window], cfg: TrainConfig) -> float:
    """Autoregressive loss over ``windows`` without recording gradients."""
    if not windows:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(windows), cfg.batch_size):
            chunk = windows[i : i + cfg.batch_size]
            seeds, targets = _stack(chunk)
            total += batch_loss(model, seeds, targets, cfg).item() * len(chunk)
    return total / len(windows)


def validation_windows(sequences: Sequence[MotionSequence], cfg: TrainConfig) -> list[Window]:
    plain = TrainConfig.from_dict({**cfg.to_dict(), "mirror": False})
    return sample_epoch(sequences, plain, np.random.default_rng([cfg.rng_seed, 0x5EED]))


# ----------------------------------------------------------------- checkpoint


def save_training_state(directory, model: GraphWaveNet, opt: OptimizerState, cfg: TrainConfig, epoch: int, history: list[dict]) -> Path:
    """Write model and optimizer state to ``directory`` (replaced atomically)."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_checkpoint(tmp, model)
    for kind, buffers in (("m", opt.m), ("v", opt.v)):
        (tmp / "optimizer" / kind).mkdir(parents=True, exist_ok=True)
        for name, arr in buffers.items():
            ad.save_tensor(tmp / "optimizer" / kind / f"{name}.sftn", arr)
    state = {"epoch": epoch, "step": opt.step, "train_config": cfg.to_dict(), "history": history}
    (tmp / "train_state.json").write_text(json.dumps(state, indent=2) + "\n")
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def load_training_state(directory) -> tuple[GraphWaveNet, OptimizerState, int, list[dict]]:
    directory = Path(directory)
    model = load_checkpoint(directory)
    state = json.loads((directory / "train_state.json").read_text())
    opt = OptimizerState(step=state["step"])
    for name in model.params:
        m_path = directory / "optimizer" / "m" / f"{name}.sftn"
        if m_path.exists():
            opt.m[name] = ad.load_tensor(m_path).data
            opt.v[name] = ad.load_tensor(directory / "optimizer" / "v" / f"{name}.sftn").data
    return model, opt, state["epoch"], state["history"]


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in history:
            val = row["val_loss"]
            writer.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), "" if val is None else repr(val)])


# ------------------------------------------------------------------------ fit


def fit(
    sequences: Sequence[MotionSequence],
    model: GraphWaveNet,
    cfg: TrainConfig,
    val_sequences: Sequence[MotionSequence] = (),
    checkpoint_dir=None,
    opt: OptimizerState | None = None,
    start_epoch: int = 0,
    history: list[dict] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[GraphWaveNet, list[dict]]:
    """Train ``model`` in place for epochs ``start_epoch .. cfg.epochs - 1``.

    Every batch rolls the model forward ``target_len`` frames on its own
    predictions and takes the mean absolute error over the rollout. Window
    sampling for epoch ``e`` uses a generator seeded with ``(rng_seed, e)``,
    so resumed runs draw the same windows as uninterrupted ones.

    With ``checkpoint_dir`` set, ``<checkpoint_dir>/latest`` holds the most
    recent good state; it is left untouched if training aborts.
    """
    opt = opt if opt is not None else OptimizerState()
    history = list(history or [])
    val_windows = validation_windows(val_sequences, cfg) if val_sequences else []
    latest = Path(checkpoint_dir) / "latest" if checkpoint_dir is not None else None

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.rng_seed, epoch])
        windows = sample_epoch(sequences, cfg, rng)
        if not windows:
            raise TrainingAborted("no training windows: every sequence is too short")
        order = rng.permutation(len(windows))
        lr = learning_rate(cfg, epoch)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [windows[k] for k in order[i : i + cfg.batch_size]]
            seeds, targets = _stack(chunk)
            model.zero_grad()
            try:
                with ad.new_tape():
                    loss = batch_loss(model, seeds, targets, cfg)
                    loss.backward()
                if cfg.max_grad_norm is not None:
                    clip_grad_norm(model.params, cfg.max_grad_norm)
                adam_step(model.params, opt, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NumericalError as exc:
                raise TrainingAborted(f"epoch {epoch + 1}: {exc}") from exc
            total += loss.item() * len(chunk)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / len(windows), "val_loss": None}
        last = epoch + 1 == cfg.epochs
        if val_windows and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or last):
            row["val_loss"] = evaluate_loss(model, val_windows, cfg)
        history.append(row)
        log.info("epoch %d lr %.3g train %.5f val %s", row["epoch"], lr, row["train_loss"], row["val_loss"])
        if latest is not None and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            save_training_state(latest, model, opt, cfg, epoch + 1, history)
        if on_epoch is not None:
            on_epoch(row)
    model.zero_grad()
    return model, history
