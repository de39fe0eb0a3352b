"""Kinematic trees and the graph artifacts derived from them.

Skeleton files are plain text with one joint per line::

    index name parent_index mirror_index

The root has parent ``-1``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


class SkeletonError(ValueError):
    """Malformed skeleton description or invalid kinematic tree."""


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    """Parent index per joint; the root is its own parent."""
    mirror: tuple[int, ...]
    """Left/right pairing used for mirroring; midline joints map to themselves."""

    def __post_init__(self):
        n = len(self.joint_names)
        if n == 0:
            raise SkeletonError("skeleton has no joints")
        if len(self.parents) != n or len(self.mirror) != n:
            raise SkeletonError("joint_names, parents and mirror must have equal length")
        if len(set(self.joint_names)) != n:
            raise SkeletonError("joint names must be unique")
        for j, p in enumerate(self.parents):
            if not 0 <= p < n:
                raise SkeletonError(f"joint {j}: parent index {p} out of range")
        roots = [j for j, p in enumerate(self.parents) if p == j]
        if len(roots) != 1:
            raise SkeletonError(f"expected exactly one root, found {len(roots)}")
        for j in range(n):
            seen = {j}
            k = j
            while self.parents[k] != k:
                k = self.parents[k]
                if k in seen:
                    raise SkeletonError(f"joint {j} is on a cycle of the parent map")
                seen.add(k)
        m = self.mirror
        if any(not 0 <= m[j] < n or m[m[j]] != j for j in range(n)):
            raise SkeletonError("mirror map must be an involution over joint indices")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return next(j for j, p in enumerate(self.parents) if p == j)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def relabel(self, perm) -> "Skeleton":
        """Skeleton whose joint ``i`` is joint ``perm[i]`` of this one."""
        perm = [int(p) for p in perm]
        inv = np.argsort(perm)
        return Skeleton(
            joint_names=tuple(self.joint_names[p] for p in perm),
            parents=tuple(int(inv[self.parents[p]]) for p in perm),
            mirror=tuple(int(inv[self.mirror[p]]) for p in perm),
        )

    def to_text(self) -> str:
        lines = ["# index name parent_index mirror_index"]
        for j, name in enumerate(self.joint_names):
            parent = -1 if self.parents[j] == j else self.parents[j]
            lines.append(f"{j} {name} {parent} {self.mirror[j]}")
        return "\n".join(lines) + "\n"


def parse_skeleton(text: str) -> Skeleton:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise SkeletonError(f"line {lineno}: expected 'index name parent mirror', got {line!r}")
        try:
            index, parent, mirror = int(parts[0]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise SkeletonError(f"line {lineno}: non-integer index field") from exc
        rows.append((index, parts[1], parent, mirror, lineno))
    if not rows:
        raise SkeletonError("skeleton description is empty")
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise SkeletonError("joint indices must be exactly 0..J-1")
    n = len(rows)
    parents = []
    for index, _, parent, _, lineno in rows:
        if parent == index:
            raise SkeletonError(f"line {lineno}: joint {index} lists itself as parent")
        if parent == -1:
            parents.append(index)
        elif 0 <= parent < n:
            parents.append(parent)
        else:
            raise SkeletonError(f"line {lineno}: parent index {parent} out of range")
    return Skeleton(
        joint_names=tuple(r[1] for r in rows),
        parents=tuple(parents),
        mirror=tuple(r[3] for r in rows),
    )


def load_skeleton(path) -> Skeleton:
    return parse_skeleton(Path(path).read_text())


def h36m_skeleton() -> Skeleton:
    """The bundled 32-joint Human3.6M skeleton, rooted at the hip."""
    text = resources.files("skelforecast").joinpath("assets/h36m_skeleton.txt").read_text()
    return parse_skeleton(text)


def chain_skeleton(n: int) -> Skeleton:
    """A single chain ``0 -> 1 -> ... -> n-1`` with no mirror pairs."""
    return Skeleton(
        joint_names=tuple(f"j{i}" for i in range(n)),
        parents=(0,) + tuple(range(n - 1)),
        mirror=tuple(range(n)),
    )


@dataclass(frozen=True)
class SubgraphSet:
    """Directed subgraph adjacencies and their degrees.

    ``adjacency[0]`` links each joint to its children (row = parent),
    ``adjacency[1]`` is its transpose (row = child, column = parent) and
    ``adjacency[2]`` holds the self-loops.
    """

    adjacency: np.ndarray
    degree: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        """``D_i^{-1} A_i`` for each subgraph; zero-degree rows stay zero."""
        deg = self.degree
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return inv[:, :, None] * self.adjacency

    def degree_matrix(self, i: int) -> np.ndarray:
        return np.diag(self.degree[i])


def build_subgraphs(skeleton: Skeleton, swap_directions: bool = False) -> SubgraphSet:
    """Split the kinematic tree into parent->child, child->parent and self-loop graphs.

    ``swap_directions`` exchanges the first two subgraphs.
    """
    n = skeleton.num_joints
    down = np.zeros((n, n))
    for u, p in enumerate(skeleton.parents):
        if p != u:
            down[p, u] = 1.0
    up = down.T.copy()
    if swap_directions:
        down, up = up, down
    adjacency = np.stack([down, up, np.eye(n)])
    return SubgraphSet(adjacency=adjacency, degree=adjacency.sum(axis=2))


def build_chain_table(skeleton: Skeleton) -> np.ndarray:
    """Rows ``(grandparent, parent, joint)`` per joint; the root pads with itself."""
    parents = np.asarray(skeleton.parents, dtype=np.intp)
    joints = np.arange(skeleton.num_joints)
    return np.stack([parents[parents[joints]], parents[joints], joints], axis=1)
