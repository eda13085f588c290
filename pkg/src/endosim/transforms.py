"""Rigid transforms (4x4 homogeneous matrices) and primitive builders.

Every pose in the simulator is a RigidTransform: rotation orthonormal and
proper, translation in mm. Construction validates the invariants so any
transform obtained from the public API is safe to compose and invert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid transform; `matrix` is 4x4 with last row (0,0,0,1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform contains non-finite entries")
        if np.any(m[3] != np.array([0.0, 0.0, 0.0, 1.0])):
            raise ValueError("last row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation block is not proper (det != +1)")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def inverse(self) -> "RigidTransform":
        r = self.rotation.T
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = -r @ self.translation
        return RigidTransform(m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map one 3-vector or an (n, 3) array through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


def identity() -> RigidTransform:
    return RigidTransform(np.eye(4))


def rot_x(angle: float) -> RigidTransform:
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(4)
    m[1, 1], m[1, 2] = c, -s
    m[2, 1], m[2, 2] = s, c
    return RigidTransform(m)


def rot_y(angle: float) -> RigidTransform:
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(4)
    m[0, 0], m[0, 2] = c, s
    m[2, 0], m[2, 2] = -s, c
    return RigidTransform(m)


def rot_z(angle: float) -> RigidTransform:
    c, s = np.cos(angle), np.sin(angle)
    m = np.eye(4)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    return RigidTransform(m)


def trans(x: float, y: float, z: float) -> RigidTransform:
    m = np.eye(4)
    m[:3, 3] = (x, y, z)
    return RigidTransform(m)


def trans_z(d: float) -> RigidTransform:
    return trans(0.0, 0.0, d)


def from_rotation_translation(r: np.ndarray, t: np.ndarray) -> RigidTransform:
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return RigidTransform(m)


def random_transform(rng: np.random.Generator, translation_scale: float = 100.0) -> RigidTransform:
    """Uniform random rotation (QR of a Gaussian matrix) plus random translation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    t = rng.uniform(-translation_scale, translation_scale, 3)
    return from_rotation_translation(q, t)
