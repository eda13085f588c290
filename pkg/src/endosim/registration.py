"""Marker-based rigid registration and the frame chain between the C-arm,
phantom, endoscope, and robot base frames.

Marker observations are synthesized in simulation (ground-truth transforms
generate the destination sets, optionally noised), so recovery can be tested
exactly. Correspondences are matched by marker label, never by proximity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, MarkerCountError, MarkerLabelError
from .transforms import RigidTransform, from_rotation_translation


@dataclass(frozen=True)
class MarkerSet:
    """Labeled marker positions (mm) in the frame named by frame_tag."""

    frame_tag: str
    markers: dict[str, np.ndarray]

    def __post_init__(self):
        fixed = {}
        for label, p in self.markers.items():
            v = np.asarray(p, dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"marker {label!r} must be a finite 3-vector")
            fixed[str(label)] = v
        if len(fixed) < 3:
            raise MarkerCountError(f"need at least 3 markers, got {len(fixed)}")
        object.__setattr__(self, "markers", fixed)
        if _collinear(self.as_array()):
            raise DegenerateGeometryError("markers are collinear")

    def labels(self) -> list[str]:
        return sorted(self.markers)

    def as_array(self, labels: list[str] | None = None) -> np.ndarray:
        labels = self.labels() if labels is None else labels
        return np.array([self.markers[l] for l in labels])

    def transformed(self, t: RigidTransform, frame_tag: str) -> "MarkerSet":
        return MarkerSet(frame_tag, {l: t.apply(p) for l, p in self.markers.items()})


def _collinear(points: np.ndarray, tol: float = 1e-9) -> bool:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[1] <= tol * max(s[0], 1.0))


def load_markers(path: str | Path) -> MarkerSet:
    data = json.loads(Path(path).read_text())
    return MarkerSet(frame_tag=data["frame"], markers={
        label: np.array(p, dtype=float) for label, p in data["markers"].items()
    })


def save_markers(ms: MarkerSet, path: str | Path) -> None:
    payload = {
        "frame": ms.frame_tag,
        "markers": {l: list(ms.markers[l]) for l in ms.labels()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def estimate_rigid(src: MarkerSet, dst: MarkerSet) -> tuple[RigidTransform, float]:
    """Least-squares rigid alignment: returns (T, rms) with dst ~= T . src.

    SVD of the cross-covariance with a determinant sign correction keeps the
    rotation proper even when noise would favor a reflection.
    """
    if src.labels() != dst.labels():
        raise MarkerLabelError(
            f"marker labels differ: {src.labels()} vs {dst.labels()}"
        )
    labels = src.labels()
    a = src.as_array(labels)
    b = dst.as_array(labels)

    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    t = cb - r @ ca

    transform = from_rotation_translation(r, t)
    residuals = transform.apply(a) - b
    rms = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
    return transform, rms


@dataclass(frozen=True)
class RegistrationSet:
    """The estimated chain: C-arm -> phantom (t_a_p), phantom -> endoscope
    (t_p_e), endoscope -> base (t_e_b, from forward kinematics). Derived
    transforms are recomputed on access."""

    t_a_p: RigidTransform
    t_p_e: RigidTransform
    t_e_b: RigidTransform

    @property
    def t_p_b(self) -> RigidTransform:
        return self.t_e_b @ self.t_p_e

    @property
    def t_a_b(self) -> RigidTransform:
        return self.t_e_b @ self.t_p_e @ self.t_a_p


def compose_chain(
    t_a_p: RigidTransform, t_p_e: RigidTransform, t_e_b: RigidTransform
) -> RegistrationSet:
    return RegistrationSet(t_a_p=t_a_p, t_p_e=t_p_e, t_e_b=t_e_b)


def to_base(reg: RegistrationSet, p_p: np.ndarray) -> np.ndarray:
    """Map a phantom-frame point into the robot base frame."""
    return reg.t_p_b.apply(np.asarray(p_p, dtype=float))
