"""Rotation algebra for pose sequences.

Quaternions are stored (w, x, y, z) and kept canonical: unit norm with
w >= 0 (ties broken toward a positive first nonzero component, so the
double cover never leaks into distances). Euler conversion is intrinsic
z-y-x, the convention used by the motion-prediction evaluation this
feeds. A pose is a (J, 4) array; a Motion holds (T, J, 4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError

GIMBAL_EPS = 1e-7


def expmap_to_rotmat(v) -> np.ndarray:
    """Rodrigues rotation about v/|v| by angle |v|; identity for |v| < 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        return np.eye(3)
    axis = v / theta
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Canonical quaternion of a rotation matrix (Shepperd branch selection)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"rotmat_to_quat: expected 3x3, got {R.shape}")
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-4 or np.linalg.det(R) < 0.5:
        raise ValidationError("rotmat_to_quat: input is not a rotation matrix")
    # pick the numerically largest of (trace, R00, R11, R22)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= max(R[1, 1], R[2, 2]):
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_canonicalize(q)


def quat_canonicalize(raw) -> np.ndarray:
    """Normalize and flip onto the w >= 0 hemisphere."""
    q = np.asarray(raw, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n <= 1e-8:
        raise ValidationError("quat_canonicalize: near-zero norm")
    if abs(n - 1.0) > 1e-12:  # keep already-unit input bitwise stable (idempotency)
        q = q / n
    for c in q:
        if c > 0:
            break
        if c < 0:
            q = -q
            break
    return q


def canonicalize_frames(frames) -> np.ndarray:
    """Vectorized quat_canonicalize over a (..., 4) array."""
    q = np.asarray(frames, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-8):
        raise ValidationError("canonicalize_frames: near-zero quaternion norm")
    q = q / np.where(np.abs(n - 1.0) > 1e-12, n, 1.0)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    flip = (w < 0) | ((w == 0) & ((x < 0) | ((x == 0) & ((y < 0) | ((y == 0) & (z < 0))))))
    return np.where(flip[..., None], -q, q)


def euler_to_rotmat(alpha, beta, gamma) -> np.ndarray:
    """Intrinsic z-y-x composition Rz(alpha) @ Ry(beta) @ Rx(gamma)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cg, -sg], [0, sg, cg]])
    return rz @ ry @ rx


def quat_to_euler_array(q) -> np.ndarray:
    """Intrinsic z-y-x Euler angles for a (..., 4) quaternion array.

    Near gimbal lock (|sin beta| > 1 - 1e-7) gamma is set to 0 and alpha
    absorbs the remaining free rotation.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r00 = 1 - 2 * (y * y + z * z)
    r10 = 2 * (x * y + w * z)
    r20 = 2 * (x * z - w * y)
    r21 = 2 * (y * z + w * x)
    r22 = 1 - 2 * (x * x + y * y)
    r11 = 1 - 2 * (x * x + z * z)
    r12 = 2 * (y * z - w * x)
    beta = np.arcsin(np.clip(-r20, -1.0, 1.0))
    alpha = np.arctan2(r10, r00)
    gamma = np.arctan2(r21, r22)
    locked = np.abs(r20) > 1.0 - GIMBAL_EPS
    if np.any(locked):
        # sign of beta decides which of alpha-gamma / alpha+gamma survives
        a_lock = np.arctan2(np.sign(-r20) * r12, r11)
        alpha = np.where(locked, a_lock, alpha)
        gamma = np.where(locked, 0.0, gamma)
    return np.stack([alpha, beta, gamma], axis=-1)


def quat_to_euler(q) -> tuple:
    e = quat_to_euler_array(np.asarray(q, dtype=np.float64))
    return float(e[0]), float(e[1]), float(e[2])


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return quat_canonicalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def rest_pose(joints: int) -> np.ndarray:
    p = np.zeros((joints, 4))
    p[:, 0] = 1.0
    return p


@dataclass
class Motion:
    """T frames of J joint quaternions at a fixed frame rate."""

    frames: np.ndarray  # (T, J, 4), canonical
    fps: int = 25
    label: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 4 or self.frames.shape[0] < 1:
            raise ContractError(f"Motion: bad frame array shape {self.frames.shape}")
        if self.fps <= 0:
            raise ContractError("Motion: fps must be positive")

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def j(self) -> int:
        return self.frames.shape[1]

    def flat(self) -> np.ndarray:
        """(T, 4J) view used as the recurrent input representation."""
        return self.frames.reshape(self.t, self.j * 4)

    def slice(self, start: int, stop: int) -> "Motion":
        return Motion(self.frames[start:stop].copy(), fps=self.fps, label=self.label)
