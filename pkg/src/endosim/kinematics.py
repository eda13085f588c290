"""Kinematics of the 7-DOF arm plus 2+2-DOF flexible endoscope.

The arm follows a standard DH chain. The endoscope distal end is a notched
flexible section (N orthogonal notch pairs, yaw/pitch) followed by a rigid
two-joint wrist. Empirically calibrated compensation is applied to raw
endoscope joint values before forward kinematics: a per-joint linear gain and
a fixed z-rotation at the tip for assembly offset.

Angles are radians internally; lengths are mm. Configuration files and the
built-in arm table carry degree-valued entries that are converted at load.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transforms import RigidTransform, rot_x, rot_y, rot_z, trans_z

# Arm DH table rows: (a mm, alpha deg, d mm, theta offset deg).
ARM_DH_DEG = (
    (0.0, 0.0, 345.0, 0.0),
    (0.0, 90.0, 65.0, 0.0),
    (0.0, -90.0, 395.0, 180.0),
    (20.0, -90.0, -55.0, 180.0),
    (20.0, 90.0, 385.0, 180.0),
    (0.0, 90.0, 100.0, 90.0),
    (110.0, 90.0, 55.0, 0.0),
)

JACOBIAN_STEP = 1e-6  # rad, central differences


@dataclass(frozen=True)
class DHRow:
    """One arm joint: link length a (mm), twist alpha (rad), offset d (mm),
    joint-angle offset theta_offset (rad)."""

    a: float
    alpha: float
    d: float
    theta_offset: float


def default_dh_rows() -> tuple[DHRow, ...]:
    return tuple(
        DHRow(a=a, alpha=np.deg2rad(al), d=d, theta_offset=np.deg2rad(th))
        for a, al, d, th in ARM_DH_DEG
    )


@dataclass(frozen=True)
class EndoGeometry:
    """Structural parameters of the flexible endoscope.

    notch_pairs: orthogonal yaw/pitch notch pairs along the flexible section
    flexible_length: arc length of the flexible section (mm)
    wrist_proximal / wrist_distal: rigid wrist link lengths (mm)
    mount: transform from the arm flange to the flexible-section base
    """

    notch_pairs: int = 10
    flexible_length: float = 20.0
    wrist_proximal: float = 5.0
    wrist_distal: float = 5.0
    mount: RigidTransform = field(default_factory=lambda: trans_z(30.0))

    def __post_init__(self):
        if self.notch_pairs < 1:
            raise ValueError("notch_pairs must be >= 1")
        if min(self.flexible_length, self.wrist_proximal, self.wrist_distal) <= 0:
            raise ValueError("section lengths must be positive")


@dataclass(frozen=True)
class CalibrationTerms:
    """Empirical compensation: tip z-rotation (rad) and per-joint linear gains."""

    theta_rz: float = 0.0597
    k_c: np.ndarray = field(
        default_factory=lambda: np.array([0.7255, 0.7255, 0.3435, 0.7793])
    )

    def __post_init__(self):
        k = np.asarray(self.k_c, dtype=float)
        if k.shape != (4,):
            raise ValueError("k_c must have 4 entries")
        object.__setattr__(self, "k_c", k)


@dataclass(frozen=True)
class JointLimits:
    """Symmetric box limits; arm +-pi, flexible and wrist +-pi/2 by default."""

    arm_lower: np.ndarray = field(default_factory=lambda: np.full(7, -np.pi))
    arm_upper: np.ndarray = field(default_factory=lambda: np.full(7, np.pi))
    endo_lower: np.ndarray = field(default_factory=lambda: np.full(4, -np.pi / 2))
    endo_upper: np.ndarray = field(default_factory=lambda: np.full(4, np.pi / 2))

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.arm_lower, self.endo_lower])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.arm_upper, self.endo_upper])

    def contains(self, q_r: np.ndarray, q_e: np.ndarray) -> bool:
        q = np.concatenate([q_r, q_e])
        return bool(np.all(q >= self.lower) and np.all(q <= self.upper))


@dataclass(frozen=True)
class KinematicParams:
    """Everything forward kinematics needs, bundled."""

    dh: tuple[DHRow, ...] = field(default_factory=default_dh_rows)
    geom: EndoGeometry = field(default_factory=EndoGeometry)
    cal: CalibrationTerms = field(default_factory=CalibrationTerms)
    limits: JointLimits = field(default_factory=JointLimits)


def _dh_matrix(row: DHRow, theta: float) -> RigidTransform:
    c, s = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    return RigidTransform(np.array([
        [c, -s * ca, s * sa, row.a * c],
        [s, c * ca, -c * sa, row.a * s],
        [0.0, sa, ca, row.d],
        [0.0, 0.0, 0.0, 1.0],
    ]))


def arm_fk(dh: tuple[DHRow, ...], q_r: np.ndarray) -> RigidTransform:
    """Flange pose in the arm base frame for joint angles q_r (rad)."""
    q = np.asarray(q_r, dtype=float)
    if q.shape != (len(dh),):
        raise ValueError(f"expected {len(dh)} joint angles, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("joint angles must be finite")
    t = RigidTransform(np.eye(4))
    for row, angle in zip(dh, q):
        t = t @ _dh_matrix(row, angle + row.theta_offset)
    return t


def _arm_joint_frames(dh: tuple[DHRow, ...], q_r: np.ndarray) -> list[RigidTransform]:
    """Cumulative frames after each arm joint (base frame first)."""
    frames = [RigidTransform(np.eye(4))]
    for row, angle in zip(dh, np.asarray(q_r, dtype=float)):
        frames.append(frames[-1] @ _dh_matrix(row, angle + row.theta_offset))
    return frames


def flexible_fk(geom: EndoGeometry, theta1: float, theta2: float) -> RigidTransform:
    """Flexible-section tip pose relative to its base.

    Each notch pair bends theta1/N about local y (yaw) then theta2/N about
    local x (pitch), advancing L/(2N) along local z after each sub-bend; the
    full section is that pair transform raised to the N-th power. As N grows
    this converges to the constant-curvature arc.
    """
    n = geom.notch_pairs
    if n < 1:
        raise ValueError("notch_pairs must be >= 1")
    half_step = trans_z(geom.flexible_length / (2 * n))
    pair = rot_y(theta1 / n) @ half_step @ rot_x(theta2 / n) @ half_step
    t = RigidTransform(np.eye(4))
    for _ in range(n):
        t = t @ pair
    return t


def wrist_fk(geom: EndoGeometry, theta3: float, theta4: float) -> RigidTransform:
    """Rigid wrist: proximal link, x-rotation, y-rotation, distal link."""
    return (
        trans_z(geom.wrist_proximal)
        @ rot_x(theta3)
        @ rot_y(theta4)
        @ trans_z(geom.wrist_distal)
    )


def compensate(q_e_raw: np.ndarray, cal: CalibrationTerms) -> np.ndarray:
    """Apply the calibrated linear gains: q_e = q_e' + q_e' * k_c, per joint."""
    q = np.asarray(q_e_raw, dtype=float)
    if q.shape != (4,):
        raise ValueError("endoscope configuration must have 4 entries")
    return q + q * cal.k_c


def flexible_base(q_r: np.ndarray, kin: KinematicParams) -> RigidTransform:
    """Pose of the flexible-section base in the arm base frame."""
    return arm_fk(kin.dh, q_r) @ kin.geom.mount


def full_fk(q_r: np.ndarray, q_e_raw: np.ndarray, kin: KinematicParams) -> RigidTransform:
    """Endoscope endpoint pose in the arm base frame.

    Chain: arm flange -> mount -> flexible section -> wrist, then the
    calibrated z-rotation. Raw endoscope angles are compensated first.
    """
    q_e = compensate(q_e_raw, kin.cal)
    return (
        flexible_base(q_r, kin)
        @ flexible_fk(kin.geom, q_e[0], q_e[1])
        @ wrist_fk(kin.geom, q_e[2], q_e[3])
        @ rot_z(kin.cal.theta_rz)
    )


def backbone_polyline(q_r: np.ndarray, q_e_raw: np.ndarray, kin: KinematicParams) -> np.ndarray:
    """Vertices along the endoscope centerline, flexible base to tip, in the
    arm base frame. Flexible section contributes a vertex per half notch step."""
    q_e = compensate(q_e_raw, kin.cal)
    geom = kin.geom
    n = geom.notch_pairs
    half_step = trans_z(geom.flexible_length / (2 * n))
    yaw = rot_y(q_e[0] / n)
    pitch = rot_x(q_e[1] / n)

    t = flexible_base(q_r, kin)
    points = [t.translation.copy()]
    for _ in range(n):
        t = t @ yaw @ half_step
        points.append(t.translation.copy())
        t = t @ pitch @ half_step
        points.append(t.translation.copy())
    t = t @ trans_z(geom.wrist_proximal)
    points.append(t.translation.copy())
    t = t @ rot_x(q_e[2]) @ rot_y(q_e[3]) @ trans_z(geom.wrist_distal)
    points.append(t.translation.copy())
    return np.array(points)


def body_points(
    q_r: np.ndarray, q_e_raw: np.ndarray, kin: KinematicParams, delta: int
) -> np.ndarray:
    """delta points at equal arc-length spacing along the endoscope backbone,
    first at the flexible-section base and last at the endpoint."""
    if delta < 2:
        raise ValueError("delta must be >= 2")
    poly = backbone_polyline(q_r, q_e_raw, kin)
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], delta)
    return np.column_stack([np.interp(targets, s, poly[:, i]) for i in range(3)])


def jacobian(q_r: np.ndarray, q_e_raw: np.ndarray, kin: KinematicParams) -> np.ndarray:
    """3x11 translational Jacobian of the endpoint w.r.t. (q_r, q_e_raw),
    by central finite differences on full_fk."""
    q = np.concatenate([np.asarray(q_r, float), np.asarray(q_e_raw, float)])
    jac = np.zeros((3, 11))
    for k in range(11):
        dq = np.zeros(11)
        dq[k] = JACOBIAN_STEP
        hi = q + dq
        lo = q - dq
        p_hi = full_fk(hi[:7], hi[7:], kin).translation
        p_lo = full_fk(lo[:7], lo[7:], kin).translation
        jac[:, k] = (p_hi - p_lo) / (2 * JACOBIAN_STEP)
    return jac


# -- plain-text configuration --------------------------------------------------
#
# key = value lines, '#' comments. Units are annotated by key suffix:
# *_mm and *_rad are taken as-is, *_deg is converted to radians. Multi-valued
# keys take whitespace-separated numbers. Any key may be omitted (defaults
# apply); the arm table is overridden per-row via dh<k>_{a_mm,alpha_deg,
# d_mm,theta_deg}.

def _parse_kv(path: Path) -> dict[str, list[float]]:
    entries: dict[str, list[float]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        try:
            entries[key.strip()] = [float(tok) for tok in value.split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad number in {value!r}") from exc
    return entries


def _scalar(entries: dict, key: str, default: float) -> float:
    if key not in entries:
        return default
    (value,) = entries.pop(key)
    if key.endswith("_deg"):
        return float(np.deg2rad(value))
    return value


def load_kinematics_config(path: str | Path) -> KinematicParams:
    """Load geometry/calibration overrides from a key = value file."""
    entries = _parse_kv(Path(path))
    base = KinematicParams()

    rows = []
    for k, row in enumerate(base.dh, start=1):
        rows.append(DHRow(
            a=_scalar(entries, f"dh{k}_a_mm", row.a),
            alpha=_scalar(entries, f"dh{k}_alpha_deg", np.rad2deg(row.alpha)),
            d=_scalar(entries, f"dh{k}_d_mm", row.d),
            theta_offset=_scalar(entries, f"dh{k}_theta_deg", np.rad2deg(row.theta_offset)),
        ))

    mount = base.geom.mount
    if "mount_xyz_mm" in entries:
        x, y, z = entries.pop("mount_xyz_mm")
        mount = RigidTransform(np.array([
            [1.0, 0.0, 0.0, x],
            [0.0, 1.0, 0.0, y],
            [0.0, 0.0, 1.0, z],
            [0.0, 0.0, 0.0, 1.0],
        ]))
    geom = EndoGeometry(
        notch_pairs=int(_scalar(entries, "notch_pairs", base.geom.notch_pairs)),
        flexible_length=_scalar(entries, "flexible_length_mm", base.geom.flexible_length),
        wrist_proximal=_scalar(entries, "wrist_proximal_mm", base.geom.wrist_proximal),
        wrist_distal=_scalar(entries, "wrist_distal_mm", base.geom.wrist_distal),
        mount=mount,
    )

    k_c = np.array(entries.pop("kc", base.cal.k_c))
    cal = CalibrationTerms(
        theta_rz=_scalar(entries, "theta_rz_rad", base.cal.theta_rz),
        k_c=k_c,
    )

    arm_limit = _scalar(entries, "arm_limit_rad", np.pi)
    flex_limit = _scalar(entries, "flexible_limit_rad", np.pi / 2)
    wrist_limit = _scalar(entries, "wrist_limit_rad", np.pi / 2)
    endo_limit = np.array([flex_limit, flex_limit, wrist_limit, wrist_limit])
    limits = JointLimits(
        arm_lower=np.full(7, -arm_limit),
        arm_upper=np.full(7, arm_limit),
        endo_lower=-endo_limit,
        endo_upper=endo_limit,
    )

    if entries:
        raise ValueError(f"unknown config keys: {sorted(entries)}")
    return KinematicParams(dh=tuple(rows), geom=geom, cal=cal, limits=limits)
