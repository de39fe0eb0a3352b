"""Euler-angle error metric, the fixed-seed evaluation protocol and simple baselines."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import quaternion as quat
from .autodiff import DimensionError
from .data import MotionSequence

Forecaster = Callable[[np.ndarray, int], np.ndarray]


class ProtocolError(ValueError):
    """A test sequence cannot supply the windows the protocol needs."""


# ------------------------------------------------------------------- MT19937


class MT19937:
    """32-bit Mersenne Twister with the legacy bounded-integer sampler.

    Seeding an integer uses the reference ``init_genrand`` routine, which is
    what numpy's ``RandomState(int)`` does, so draws line up with that
    generator.
    """

    N = 624
    M = 397

    def __init__(self, seed: int):
        if not 0 <= seed <= 0xFFFFFFFF:
            raise ValueError("seed must fit in 32 bits")
        mt = [0] * self.N
        mt[0] = seed
        for i in range(1, self.N):
            mt[i] = (1812433253 * (mt[i - 1] ^ (mt[i - 1] >> 30)) + i) & 0xFFFFFFFF
        self.state = mt
        self.index = self.N

    def _twist(self) -> None:
        mt = self.state
        for i in range(self.N):
            y = (mt[i] & 0x80000000) | (mt[(i + 1) % self.N] & 0x7FFFFFFF)
            v = mt[(i + self.M) % self.N] ^ (y >> 1)
            if y & 1:
                v ^= 0x9908B0DF
            mt[i] = v
        self.index = 0

    def next_uint32(self) -> int:
        if self.index >= self.N:
            self._twist()
        y = self.state[self.index]
        self.index += 1
        y ^= y >> 11
        y ^= (y << 7) & 0x9D2C5680
        y ^= (y << 15) & 0xEFC60000
        y ^= y >> 18
        return y

    def next_uint64(self) -> int:
        hi = self.next_uint32()
        return (hi << 32) | self.next_uint32()

    def randint(self, low: int, high: int) -> int:
        return mt19937_randint(self, low, high)


def mt19937_randint(stream: MT19937, low: int, high: int) -> int:
    """Integer in ``[low, high)`` by masked rejection sampling."""
    if high <= low:
        raise ValueError(f"empty range [{low}, {high})")
    span = high - low - 1
    if span == 0:
        return low
    mask = (1 << span.bit_length()) - 1
    if span <= 0xFFFFFFFF:
        draw = stream.next_uint32
    else:
        draw = stream.next_uint64
    while True:
        v = draw() & mask
        if v <= span:
            return low + v


# -------------------------------------------------------------------- metric


def _euler(q: np.ndarray, order: str) -> np.ndarray:
    return quat.quat_to_euler(q, order)


def frame_errors(
    pred,
    target,
    order: str = "xyz",
    exclude_joints: Sequence[int] = (),
    std_threshold: float | None = None,
) -> np.ndarray:
    """Per-frame Euclidean distance between Euler-angle poses.

    Args:
        pred, target: quaternions of shape ``(T, J, 4)``.
        exclude_joints: joints whose angles are zeroed in both poses.
        std_threshold: when set, only angle channels whose target standard
            deviation over the ``T`` frames exceeds it are compared.

    Returns:
        Array of shape ``(T,)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3 or pred.shape[-1] != 4:
        raise DimensionError(f"pred {pred.shape} and target {target.shape} must both be (T, J, 4)")
    e_pred = _euler(pred, order)
    e_true = _euler(target, order)
    if len(exclude_joints):
        e_pred[:, list(exclude_joints)] = 0.0
        e_true[:, list(exclude_joints)] = 0.0
    T = pred.shape[0]
    e_pred = e_pred.reshape(T, -1)
    e_true = e_true.reshape(T, -1)
    if std_threshold is not None:
        used = np.std(e_true, axis=0) > std_threshold
        e_pred, e_true = e_pred[:, used], e_true[:, used]
    return np.sqrt(np.sum((e_pred - e_true) ** 2, axis=1))


def euler_distance(pred, target, order: str = "xyz", exclude_joints: Sequence[int] = (), std_threshold=None) -> float:
    """Frame-averaged Euclidean distance between Euler-angle poses."""
    return float(np.mean(frame_errors(pred, target, order, exclude_joints, std_threshold)))


# ----------------------------------------------------------------- baselines


class ZeroVelocity:
    """Repeat a reference seed frame: the last one by default, or the first."""

    def __init__(self, reference: str = "last"):
        if reference not in ("last", "first"):
            raise ValueError("reference must be 'last' or 'first'")
        self.reference = reference
        self.name = "zero-velocity"

    def __call__(self, seed: np.ndarray, horizon: int) -> np.ndarray:
        return baseline_zero_velocity(seed, horizon, self.reference)


class RunningAverage:
    def __init__(self, k: int):
        self.k = k
        self.name = f"running-average-{k}"

    def __call__(self, seed: np.ndarray, horizon: int) -> np.ndarray:
        return baseline_running_average(seed, horizon, self.k)


def baseline_zero_velocity(seed, horizon: int = 10, reference: str = "last") -> np.ndarray:
    """Constant forecast of one seed frame; ``seed`` is ``(..., T, J, 4)``."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape[-3] == 0:
        raise ValueError("seed window is empty")
    frame = seed[..., -1 if reference == "last" else 0, :, :]
    return np.repeat(frame[..., None, :, :], horizon, axis=-3)


def baseline_running_average(seed, horizon: int = 10, k: int = 2) -> np.ndarray:
    """Constant forecast of the renormalized mean of the last ``k`` seed frames."""
    seed = np.asarray(seed, dtype=np.float64)
    if k < 1 or k > seed.shape[-3]:
        raise ValueError(f"cannot average {k} frames of a {seed.shape[-3]}-frame seed")
    mean = quat.normalize(seed[..., -k:, :, :].mean(axis=-3))
    return np.repeat(mean[..., None, :, :], horizon, axis=-3)


# ------------------------------------------------------------------ protocol


@dataclass(frozen=True)
class EvalConfig:
    horizons_ms: tuple[int, ...] = (80, 160, 320, 400)
    samples_per_sequence: int = 4
    rng_seed: int = 1234567890
    euler_order: str = "xyz"
    fps: float = 25.0
    seed_len: int = 32
    draw_low: int = 16
    prefix: int = 50
    suffix: int = 100
    std_threshold: float | None = 1e-4
    exclude_joints: tuple[int, ...] = (0,)

    @property
    def horizon_frames(self) -> tuple[int, ...]:
        frames = []
        for ms in self.horizons_ms:
            f = ms * self.fps / 1000.0
            if abs(f - round(f)) > 1e-9:
                raise ValueError(f"horizon {ms} ms is not a whole number of frames at {self.fps} fps")
            frames.append(int(round(f)))
        return tuple(frames)

    @property
    def max_horizon(self) -> int:
        return max(self.horizon_frames)


@dataclass
class EvalSample:
    sequence: str
    action: str
    target_start: int
    seed: np.ndarray
    target: np.ndarray


def draw_samples(test_set: Sequence[MotionSequence], cfg: EvalConfig) -> dict[str, list[EvalSample]]:
    """Fixed-seed evaluation windows per action.

    For every action the generator is reseeded; draws alternate between the
    action's trials (sorted) until each trial has ``samples_per_sequence``
    windows. A draw ``i`` in ``[draw_low, T - prefix - suffix)`` puts the
    forecast start at ``i + prefix``.
    """
    if cfg.seed_len > cfg.prefix or cfg.max_horizon > cfg.suffix:
        raise ProtocolError("prefix must cover the seed and suffix the longest horizon")
    by_action: dict[str, list[MotionSequence]] = defaultdict(list)
    for seq in test_set:
        by_action[seq.action].append(seq)
    samples = {}
    for action in sorted(by_action):
        trials = sorted(by_action[action], key=lambda s: (s.trial, s.subject))
        for seq in trials:
            if seq.num_frames - cfg.prefix - cfg.suffix <= cfg.draw_low:
                raise ProtocolError(
                    f"{seq.key}: {seq.num_frames} frames is too short for the protocol "
                    f"(needs more than {cfg.draw_low + cfg.prefix + cfg.suffix})"
                )
        stream = MT19937(cfg.rng_seed)
        drawn = []
        for i in range(cfg.samples_per_sequence * len(trials)):
            seq = trials[i % len(trials)]
            start = mt19937_randint(stream, cfg.draw_low, seq.num_frames - cfg.prefix - cfg.suffix) + cfg.prefix
            drawn.append(
                EvalSample(
                    sequence=seq.key,
                    action=action,
                    target_start=start,
                    seed=seq.frames[start - cfg.seed_len : start],
                    target=seq.frames[start : start + cfg.max_horizon],
                )
            )
        samples[action] = drawn
    return samples


@dataclass
class EvalReport:
    horizons_ms: tuple[int, ...]
    rows: list[tuple[str, int, str, float]] = field(default_factory=list)

    def value(self, action: str, horizon_ms: int, model: str) -> float:
        for a, h, m, v in self.rows:
            if (a, h, m) == (action, horizon_ms, model):
                return v
        raise KeyError((action, horizon_ms, model))

    @property
    def actions(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r[2] for r in self.rows))

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.horizons_ms, self.rows + other.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["action", "horizon_ms", "model", "value"])
        for a, h, m, v in self.rows:
            writer.writerow([a, h, m, repr(float(v))])
        return buf.getvalue()

    def to_table(self) -> str:
        """Text table: one block per action, one row per model, one column per horizon."""
        width = max([len(m) for m in self.models] + [12])
        lines = []
        for action in self.actions:
            lines.append(f"{action:<{width}}  " + "  ".join(f"{h:>6}" for h in self.horizons_ms))
            for model in self.models:
                vals = [self.value(action, h, model) for h in self.horizons_ms]
                lines.append(f"{model:<{width}}  " + "  ".join(f"{v:6.2f}" for v in vals))
            lines.append("")
        return "\n".join(lines)


def run_protocol(forecaster: Forecaster, test_set: Sequence[MotionSequence], cfg: EvalConfig = EvalConfig(), name: str | None = None) -> EvalReport:
    """Forecast every protocol window and report the per-horizon error averaged over windows.

    The value at a horizon of ``h`` frames is the error of forecast frame
    ``h`` (1-based), matching the per-frame reporting of the standard tables.
    """
    name = name or getattr(forecaster, "name", type(forecaster).__name__)
    samples = draw_samples(test_set, cfg)
    report = EvalReport(tuple(cfg.horizons_ms))
    for action, drawn in samples.items():
        seeds = np.stack([s.seed for s in drawn])
        preds = np.asarray(forecaster(seeds, cfg.max_horizon))
        if preds.shape != (len(drawn), cfg.max_horizon) + seeds.shape[2:]:
            raise DimensionError(f"{name} returned {preds.shape} for {len(drawn)} windows")
        errors = np.stack(
            [
                frame_errors(p, s.target, cfg.euler_order, cfg.exclude_joints, cfg.std_threshold)
                for p, s in zip(preds, drawn)
            ]
        )
        mean = errors.mean(axis=0)
        for ms, h in zip(cfg.horizons_ms, cfg.horizon_frames):
            report.rows.append((action, ms, name, float(mean[h - 1])))
    return report


def default_baselines() -> list[Forecaster]:
    return [RunningAverage(4), RunningAverage(2), ZeroVelocity()]
