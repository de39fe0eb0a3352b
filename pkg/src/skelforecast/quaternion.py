"""Rotation utilities on numpy arrays.

Conventions:

- quaternions are scalar-first ``(w, x, y, z)`` in the trailing axis;
- every function accepts arbitrary leading batch dimensions;
- rotation matrices act on column vectors (``v' = R @ v``);
- Euler orders are intrinsic: order ``"zyx"`` means ``R = Rz(a) @ Ry(b) @ Rx(c)``
  and the returned angles are ``(a, b, c)``.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12
GIMBAL_TOLERANCE = 1e-7
TAYLOR_THRESHOLD = 1e-6

_AXIS = {"x": 0, "y": 1, "z": 2}


class DegenerateRotationError(ValueError):
    """A quaternion with (near-)zero norm cannot be normalized."""


class ConfigurationError(ValueError):
    """An invalid rotation setting, such as a non-involutive joint pairing."""


def identity(shape=()) -> np.ndarray:
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= EPS):
        raise DegenerateRotationError("cannot normalize a quaternion with norm <= 1e-12")
    return q / norm


def conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def hamilton(a, b) -> np.ndarray:
    """Raw Hamilton product without renormalization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` renormalized to unit length."""
    return normalize(hamilton(a, b))


def expmap_to_quat(r) -> np.ndarray:
    """Axis-angle vectors (angle = norm, radians) to unit quaternions."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    small = theta < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, with its Taylor expansion near zero
    scale = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * safe) / safe)
    return np.concatenate([np.cos(0.5 * theta), r * scale], axis=-1)


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def _parse_order(order: str) -> tuple[int, int, int, float]:
    order = order.lower()
    if len(order) != 3 or set(order) != set("xyz"):
        raise ConfigurationError(f"unsupported Euler order {order!r}; use a permutation of 'xyz'")
    i, j, k = (_AXIS[c] for c in order)
    parity = 1.0 if (j - i) % 3 == 1 else -1.0
    return i, j, k, parity


def axis_angle_quat(axis: int, angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    q = np.zeros(angle.shape + (4,))
    q[..., 0] = np.cos(0.5 * angle)
    q[..., 1 + axis] = np.sin(0.5 * angle)
    return q


def euler_to_quat(angles, order: str = "zyx") -> np.ndarray:
    i, j, k, _ = _parse_order(order)
    angles = np.asarray(angles, dtype=np.float64)
    q = hamilton(axis_angle_quat(i, angles[..., 0]), axis_angle_quat(j, angles[..., 1]))
    return hamilton(q, axis_angle_quat(k, angles[..., 2]))


def euler_to_matrix(angles, order: str = "zyx") -> np.ndarray:
    return quat_to_matrix(euler_to_quat(angles, order))


def matrix_to_euler(m, order: str = "zyx", return_flags: bool = False):
    """Decompose rotation matrices into intrinsic Euler angles.

    Near gimbal lock (``|sin(middle)| > 1 - 1e-7``) the middle angle is
    clamped to +-pi/2, the last angle is set to zero and the corresponding
    entry of the returned flag array is True.
    """
    i, j, k, s = _parse_order(order)
    m = np.asarray(m, dtype=np.float64)
    sin_mid = np.clip(s * m[..., i, k], -1.0, 1.0)
    locked = np.abs(sin_mid) > 1.0 - GIMBAL_TOLERANCE
    mid = np.where(locked, np.sign(sin_mid) * (np.pi / 2), np.arcsin(sin_mid))
    first = np.where(
        locked,
        np.arctan2(s * m[..., k, j], m[..., j, j]),
        np.arctan2(-s * m[..., j, k], m[..., k, k]),
    )
    last = np.where(locked, 0.0, np.arctan2(-s * m[..., i, j], m[..., i, i]))
    angles = np.stack([first, mid, last], axis=-1)
    return (angles, locked) if return_flags else angles


def quat_to_euler(q, order: str = "zyx", return_flags: bool = False):
    return matrix_to_euler(quat_to_matrix(q), order, return_flags)


def sign_align(seq) -> np.ndarray:
    """Flip signs along axis 0 so consecutive quaternions have dot >= 0.

    Works on ``(T, ..., 4)`` arrays; every trailing quaternion track is
    aligned independently and the first frame is never flipped.
    """
    seq = np.array(seq, dtype=np.float64)
    if seq.shape[0] == 0:
        raise ValueError("sign_align needs at least one frame")
    dots = np.sum(seq[1:] * seq[:-1], axis=-1)
    flips = np.where(dots < 0, -1.0, 1.0)
    signs = np.concatenate([np.ones((1,) + dots.shape[1:]), np.cumprod(flips, axis=0)])
    return seq * signs[..., None]


_MIRROR = np.array([1.0, 1.0, -1.0, -1.0])


def check_involution(pairing) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.intp)
    n = len(pairing)
    if pairing.ndim != 1 or np.any(pairing < 0) or np.any(pairing >= n):
        raise ConfigurationError("joint pairing must index joints")
    if not np.array_equal(pairing[pairing], np.arange(n)):
        raise ConfigurationError("joint pairing is not an involution")
    return pairing


def mirror_yz(frames, left_right_map) -> np.ndarray:
    """Reflect a pose sequence across the y-z plane.

    Args:
        frames: quaternions of shape ``(..., J, 4)``.
        left_right_map: involution over joints; midline joints map to themselves.

    Each rotation is conjugated by ``diag(-1, 1, 1)``, i.e. ``(w, x, y, z)`` becomes
    ``(w, x, -y, -z)``, and joint ``j`` takes the data of ``left_right_map[j]``.
    """
    pairing = check_involution(left_right_map)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2] != len(pairing):
        raise ConfigurationError(f"pairing covers {len(pairing)} joints, frames have {frames.shape[-2]}")
    return frames[..., pairing, :] * _MIRROR
