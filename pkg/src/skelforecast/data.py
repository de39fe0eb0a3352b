"""Human3.6M exponential-map ingestion, preprocessing and subject splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quaternion as quat
from .skeleton import Skeleton

log = logging.getLogger(__name__)

ACTIONS = (
    "walking",
    "eating",
    "smoking",
    "discussion",
    "directions",
    "greeting",
    "phoning",
    "posing",
    "purchases",
    "sitting",
    "sittingdown",
    "takingphoto",
    "waiting",
    "walkingdog",
    "walkingtogether",
)

TRANSLATION_COLUMNS = 3
_FILE_RE = re.compile(r"^(?P<action>[A-Za-z]+)_(?P<trial>\d+)\.txt$")
_SUBJECT_RE = re.compile(r"^S(?P<subject>\d+)$")


class DataError(ValueError):
    """Malformed, missing or inconsistent motion data."""


class ParseError(DataError):
    pass


@dataclass
class RawMotion:
    """Rows of an exponential-map file: root translation then one axis-angle triple per joint."""

    values: np.ndarray
    translation_columns: int = TRANSLATION_COLUMNS
    source: str = ""

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def parse_expmap_file(path) -> RawMotion:
    path = Path(path)
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            try:
                row = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})") from None
            if not all(math.isfinite(v) for v in row):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: file contains no frames")
    return RawMotion(np.array(rows, dtype=np.float64), source=str(path))


@dataclass
class MotionSequence:
    subject: int
    action: str
    trial: int
    fps: float
    frames: np.ndarray
    """Unit quaternions of shape ``(T, J, 4)``, sign-aligned over time."""
    variant: str = "plain"
    mirror_map: tuple[int, ...] | None = None
    _mirror_cache: "MotionSequence | None" = field(default=None, repr=False, compare=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def key(self) -> str:
        return f"S{self.subject}/{self.action}_{self.trial}"

    def mirrored(self) -> "MotionSequence":
        """The y-z plane reflection of this sequence, built on first use."""
        if self.mirror_map is None:
            raise DataError(f"{self.key}: no mirror map attached")
        if self._mirror_cache is None:
            self._mirror_cache = MotionSequence(
                subject=self.subject,
                action=self.action,
                trial=self.trial,
                fps=self.fps,
                frames=quat.mirror_yz(self.frames, self.mirror_map),
                variant="mirrored" if self.variant == "plain" else "plain",
                mirror_map=self.mirror_map,
            )
        return self._mirror_cache

    def metadata(self) -> dict:
        return {
            "subject": self.subject,
            "action": self.action,
            "trial": self.trial,
            "fps": self.fps,
            "variant": self.variant,
            "num_frames": self.num_frames,
            "num_joints": self.num_joints,
        }


def preprocess(
    raw: RawMotion,
    skeleton: Skeleton,
    fps_in: float = 50.0,
    factor: int = 2,
    offset: int = 0,
    subject: int = 0,
    action: str = "",
    trial: int = 0,
) -> MotionSequence:
    """Downsample, convert axis-angle joints to quaternions and sign-align in time.

    Every ``factor``-th frame starting at ``offset`` is kept. The root
    translation columns are dropped (the sequence carries rotations only).
    """
    J = skeleton.num_joints
    expected = raw.translation_columns + 3 * J
    if raw.values.shape[1] != expected:
        raise DataError(
            f"{raw.source or 'motion'}: {raw.values.shape[1]} columns, skeleton needs {expected}"
        )
    kept = raw.values[offset::factor]
    if kept.shape[0] == 0:
        raise DataError(f"{raw.source or 'motion'}: no frames left after downsampling")
    expmaps = kept[:, raw.translation_columns :].reshape(-1, J, 3)
    frames = quat.sign_align(quat.expmap_to_quat(expmaps))
    return MotionSequence(
        subject=subject,
        action=action,
        trial=trial,
        fps=fps_in / factor,
        frames=frames,
        mirror_map=skeleton.mirror,
    )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...] = (1, 7, 8, 9, 11)
    val: tuple[int, ...] = (6,)
    test: tuple[int, ...] = (5,)

    def __post_init__(self):
        groups = [set(self.train), set(self.val), set(self.test)]
        if any(a & b for i, a in enumerate(groups) for b in groups[i + 1 :]):
            raise DataError("train/val/test subjects must be disjoint")

    @property
    def subjects(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.train) | set(self.val) | set(self.test)))


@dataclass
class Dataset:
    train: list[MotionSequence]
    val: list[MotionSequence]
    test: list[MotionSequence]

    def training_variants(self) -> list[MotionSequence]:
        """Plain and mirrored training sequences; mirrored copies exist for training only."""
        return [v for s in self.train for v in (s, s.mirrored())]


def discover_files(root_dir) -> dict[tuple[int, str, int], Path]:
    """Map ``(subject, action, trial)`` to files under ``<root>/S<subject>/<action>_<trial>.txt``."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"data root {root} is not a directory")
    found = {}
    for subject_dir in sorted(root.iterdir()):
        m = _SUBJECT_RE.match(subject_dir.name)
        if not m or not subject_dir.is_dir():
            continue
        for f in sorted(subject_dir.iterdir()):
            fm = _FILE_RE.match(f.name)
            if fm:
                key = (int(m["subject"]), fm["action"].lower(), int(fm["trial"]))
                found[key] = f
    if not found:
        raise DataError(f"no motion files found under {root}")
    return found


def _assign(sequences: list[MotionSequence], split: DatasetSplit) -> Dataset:
    present = {s.subject for s in sequences}
    missing = [s for s in split.subjects if s not in present]
    if missing:
        raise DataError(f"missing subjects: {', '.join(f'S{s}' for s in missing)}")
    sequences = sorted(sequences, key=lambda s: (s.subject, s.action, s.trial))
    return Dataset(
        train=[s for s in sequences if s.subject in split.train],
        val=[s for s in sequences if s.subject in split.val],
        test=[s for s in sequences if s.subject in split.test],
    )


def build_dataset(root_dir, skeleton: Skeleton, split: DatasetSplit = DatasetSplit(), **preprocess_kw) -> Dataset:
    files = discover_files(root_dir)
    sequences = []
    for (subject, action, trial), path in files.items():
        if subject not in split.subjects:
            continue
        raw = parse_expmap_file(path)
        sequences.append(
            preprocess(raw, skeleton, subject=subject, action=action, trial=trial, **preprocess_kw)
        )
    return _assign(sequences, split)


# --------------------------------------------------------------------- cache


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_paths(cache_dir, subject: int, action: str, trial: int) -> tuple[Path, Path]:
    base = Path(cache_dir) / f"S{subject}" / f"{action}_{trial}"
    return base.with_suffix(".sftn"), base.with_suffix(".json")


def save_sequence(cache_dir, seq: MotionSequence, extra: dict | None = None) -> Path:
    tensor_path, meta_path = cache_paths(cache_dir, seq.subject, seq.action, seq.trial)
    tensor_path.parent.mkdir(parents=True, exist_ok=True)
    ad.save_tensor(tensor_path, seq.frames)
    meta = seq.metadata()
    if extra:
        meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return tensor_path


def load_sequence(tensor_path, mirror_map=None) -> MotionSequence:
    tensor_path = Path(tensor_path)
    meta = json.loads(tensor_path.with_suffix(".json").read_text())
    frames = ad.load_tensor(tensor_path).data
    return MotionSequence(
        subject=meta["subject"],
        action=meta["action"],
        trial=meta["trial"],
        fps=meta["fps"],
        frames=frames,
        variant=meta.get("variant", "plain"),
        mirror_map=tuple(mirror_map) if mirror_map is not None else None,
    )


def load_cached_dataset(cache_dir, skeleton: Skeleton, split: DatasetSplit = DatasetSplit()) -> Dataset:
    cache = Path(cache_dir)
    if not cache.is_dir():
        raise DataError(f"cache directory {cache} does not exist; run prepare first")
    sequences = []
    for tensor_path in sorted(cache.glob("S*/*.sftn")):
        seq = load_sequence(tensor_path, mirror_map=skeleton.mirror)
        if seq.num_joints != skeleton.num_joints:
            raise DataError(f"{tensor_path}: {seq.num_joints} joints, skeleton has {skeleton.num_joints}")
        if seq.subject in split.subjects:
            sequences.append(seq)
    if not sequences:
        raise DataError(f"no cached sequences under {cache}")
    return _assign(sequences, split)
