"""Synthetic motion for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import quaternion as quat
from .data import MotionSequence
from .skeleton import Skeleton


def sinusoid_expmaps(num_frames: int, num_joints: int, rng: np.random.Generator, fps: float = 25.0,
                     period_s: tuple[float, float] = (0.8, 1.6), amplitude: tuple[float, float] = (0.3, 0.8)) -> np.ndarray:
    """Axis-angle tracks where each joint swings about a fixed random axis.

    Returns ``(num_frames, num_joints, 3)``.
    """
    axes = rng.normal(size=(num_joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    periods = rng.uniform(*period_s, size=num_joints)
    amps = rng.uniform(*amplitude, size=num_joints)
    phases = rng.uniform(0, 2 * np.pi, size=num_joints)
    t = np.arange(num_frames)[:, None] / fps
    angles = amps * np.sin(2 * np.pi * t / periods + phases)
    return angles[:, :, None] * axes


def sinusoid_sequence(skeleton: Skeleton, num_frames: int = 200, seed: int = 0, fps: float = 25.0, **kw) -> MotionSequence:
    rng = np.random.default_rng(seed)
    frames = quat.sign_align(quat.expmap_to_quat(sinusoid_expmaps(num_frames, skeleton.num_joints, rng, fps, **kw)))
    return MotionSequence(subject=0, action="sinusoid", trial=seed, fps=fps, frames=frames, mirror_map=skeleton.mirror)


def write_expmap_corpus(root, skeleton: Skeleton, subjects, actions, trials=(1, 2), num_frames: int = 400, seed: int = 0) -> list[Path]:
    """Write ``<root>/S<subject>/<action>_<trial>.txt`` files at 50 fps with zero root translation."""
    rng = np.random.default_rng(seed)
    written = []
    for subject in subjects:
        for action in actions:
            for trial in trials:
                expmaps = sinusoid_expmaps(num_frames, skeleton.num_joints, rng, fps=50.0)
                rows = np.concatenate([np.zeros((num_frames, 3)), expmaps.reshape(num_frames, -1)], axis=1)
                path = Path(root) / f"S{subject}" / f"{action}_{trial}.txt"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in rows) + "\n")
                written.append(path)
    return written
