"""Per-step redundancy resolution and the closed-loop path follower.

Each control step solves a small displacement QP: minimize the weighted step
norm dq^T A dq / 2 subject to J dq = dx (the measured tip error, clamped),
with box constraints keeping every joint inside its limits and under a
per-step clip. The nonconvex obstacle clearance requirement is enforced
outside the QP by shrinking the accepted step until all sampled body points
keep their margin, which makes the safety invariant hold exactly at every
visited configuration.

The follower closes the loop through the simulated imaging pipeline: the tip
position fed back to the QP comes from rendering, thinning, and endpoint
detection, never from ground truth (ground truth is logged separately for
evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environment import PlaneModel, PointCloud, min_distance
from .errors import (
    ControlTimeoutError,
    ImagingAbortError,
    InfeasibleLimitsError,
    NoEndpointError,
    NoSkeletonError,
)
from .imaging import (
    ProjectionModel,
    find_tip,
    project,
    render_endoscope,
    segment,
    skeletonize,
    tip_to_base,
)
from .kinematics import KinematicParams, backbone_polyline, body_points, full_fk, jacobian

ALPHA_LADDER = tuple(0.5**k for k in range(7))  # 1, 1/2, ..., 1/64


@dataclass(frozen=True)
class ControllerConfig:
    a_matrix: np.ndarray = field(default_factory=lambda: np.eye(11))
    dt: float = 0.1
    d_o: float = 1.5
    delta: int = 20
    waypoint_tol: float = 1.0
    max_steps_per_waypoint: int = 200
    step_clip: float = 0.05

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.shape != (11, 11):
            raise ValueError("A must be 11x11")
        if np.max(np.abs(a - a.T)) > 1e-9:
            raise ValueError("A must be symmetric")
        if np.min(np.linalg.eigvalsh(a)) <= 0:
            raise ValueError("A must be positive definite")
        if self.dt <= 0 or self.delta < 2 or self.step_clip <= 0:
            raise ValueError("dt, step_clip must be positive and delta >= 2")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)

    @classmethod
    def from_dict(cls, data: dict) -> "ControllerConfig":
        data = dict(data)
        weights = data.pop("a_diagonal", None)
        if weights is not None:
            data["a_matrix"] = np.diag(np.asarray(weights, dtype=float))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ControlState:
    q_r: np.ndarray
    q_e: np.ndarray  # raw endoscope values, compensation applied inside FK
    waypoint_index: int = 0
    tip_estimate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q_r = np.asarray(self.q_r, dtype=float)
        q_e = np.asarray(self.q_e, dtype=float)
        if q_r.shape != (7,) or q_e.shape != (4,):
            raise ValueError("expected 7 arm and 4 endoscope joint values")
        object.__setattr__(self, "q_r", q_r)
        object.__setattr__(self, "q_e", q_e)
        object.__setattr__(self, "tip_estimate",
                           np.asarray(self.tip_estimate, dtype=float))

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.q_r, self.q_e])


@dataclass(frozen=True)
class StepResult:
    dq: np.ndarray
    feasible: bool
    active_constraints: frozenset[str]
    predicted_tip: np.ndarray
    alpha: float


def _solve_box_qp(
    a: np.ndarray, jac: np.ndarray, b: np.ndarray,
    lb: np.ndarray, ub: np.ndarray,
) -> tuple[np.ndarray, bool]:
    """Active-set solve of min x'Ax/2 s.t. jac x = b, lb <= x <= ub.

    Returns (x, equality_met). Deterministic pivoting: the most violated
    bound is fixed first, the most negative multiplier released first, lowest
    index breaking ties.
    """
    n = a.shape[0]
    m = jac.shape[0]
    at_lower: set[int] = set()
    at_upper: set[int] = set()

    x = np.zeros(n)
    lam = np.zeros(m)
    for _ in range(4 * n + 8):
        fixed = sorted(at_lower | at_upper)
        free = [i for i in range(n) if i not in at_lower and i not in at_upper]
        x = np.zeros(n)
        for i in at_lower:
            x[i] = lb[i]
        for i in at_upper:
            x[i] = ub[i]

        if free:
            nf = len(free)
            kkt = np.zeros((nf + m, nf + m))
            kkt[:nf, :nf] = a[np.ix_(free, free)]
            kkt[:nf, nf:] = jac[:, free].T
            kkt[nf:, :nf] = jac[:, free]
            rhs = np.zeros(nf + m)
            if fixed:
                rhs[:nf] = -a[np.ix_(free, fixed)] @ x[fixed]
                rhs[nf:] = b - jac[:, fixed] @ x[fixed]
            else:
                rhs[nf:] = b
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            x[free] = sol[:nf]
            lam = sol[nf:]
        else:
            lam = np.linalg.lstsq(jac.T, -(a @ x), rcond=None)[0]

        # fix the worst bound violation, if any
        viol_idx, viol_amt, viol_side = -1, 1e-12, 0
        for i in free:
            if lb[i] - x[i] > viol_amt:
                viol_idx, viol_amt, viol_side = i, lb[i] - x[i], -1
            if x[i] - ub[i] > viol_amt:
                viol_idx, viol_amt, viol_side = i, x[i] - ub[i], +1
        if viol_idx >= 0:
            (at_lower if viol_side < 0 else at_upper).add(viol_idx)
            continue

        # release the most negative multiplier, if any
        grad = a @ x + jac.T @ lam
        rel_idx, rel_val = -1, -1e-12
        for i in sorted(at_lower):
            if grad[i] < rel_val:
                rel_idx, rel_val = i, grad[i]
        for i in sorted(at_upper):
            if -grad[i] < rel_val:
                rel_idx, rel_val = i, -grad[i]
        if rel_idx >= 0:
            at_lower.discard(rel_idx)
            at_upper.discard(rel_idx)
            continue
        break

    x = np.clip(x, lb, ub)
    equality_met = bool(np.linalg.norm(jac @ x - b) <= 1e-8 * (1.0 + np.linalg.norm(b)))
    return x, equality_met


def obstacle_margins(
    state: ControlState, env: PointCloud, kin: KinematicParams, cfg: ControllerConfig
) -> np.ndarray:
    """Distance from each sampled body point to the obstacle cloud."""
    pts = body_points(state.q_r, state.q_e, kin, cfg.delta)
    return np.array([min_distance(env, p, cfg.d_o) for p in pts])


def _margins_clear(
    q: np.ndarray, env: PointCloud, kin: KinematicParams, cfg: ControllerConfig
) -> bool:
    """Strictly greater-than d_o clearance at every sampled body point; a
    threshold query per point is much cheaper than the exact distance."""
    pts = body_points(q[:7], q[7:], kin, cfg.delta)
    grid = env.grid(cfg.d_o)
    return not any(grid.any_within(p, cfg.d_o + 1e-9) for p in pts)


def qp_step(
    state: ControlState,
    target_wp_b: np.ndarray,
    kin: KinematicParams,
    env: PointCloud,
    cfg: ControllerConfig,
) -> StepResult:
    """One displacement-QP step toward the target waypoint."""
    q = state.q
    jac = jacobian(state.q_r, state.q_e, kin)
    if not np.all(np.isfinite(jac)):
        raise ValueError("Jacobian is not finite at the current state")
    tags: set[str] = set()

    dx = np.asarray(target_wp_b, dtype=float) - state.tip_estimate
    u_svd, s, _ = np.linalg.svd(jac)
    cap = cfg.step_clip * float(s[0])
    dx_norm = float(np.linalg.norm(dx))
    if dx_norm > cap > 0:
        dx = dx * (cap / dx_norm)
        tags.add("clip")
    rank = int(np.sum(s > 1e-8 * max(float(s[0]), 1e-30)))
    if rank < 3:
        dx = u_svd[:, :rank] @ (u_svd[:, :rank].T @ dx)
        tags.add("singular")

    lower = kin.limits.lower
    upper = kin.limits.upper
    lb = np.maximum(-cfg.step_clip, lower - q)
    ub = np.minimum(cfg.step_clip, upper - q)
    if np.any(lb > ub):
        raise InfeasibleLimitsError("joint-limit box is empty at this state")

    # halve the requested displacement until the box admits it
    dq = np.zeros(11)
    for _ in range(8):
        dq, ok = _solve_box_qp(cfg.a_matrix, jac, dx, lb, ub)
        if ok:
            break
        tags.add("limit")
        dx = dx / 2
    at_bound = np.isclose(dq, lb, atol=1e-12) | np.isclose(dq, ub, atol=1e-12)
    if np.any(at_bound & (np.abs(dq) > 1e-15)):
        tags.add("limit")

    applied_alpha = 0.0
    feasible = False
    for alpha in ALPHA_LADDER:
        if _margins_clear(q + alpha * dq, env, kin, cfg):
            applied_alpha = alpha
            feasible = True
            break
    if feasible and applied_alpha < 1.0:
        tags.add("obstacle")
    if not feasible:
        tags.add("obstacle")
        dq = np.zeros(11)

    dq_applied = applied_alpha * dq if feasible else dq
    predicted = full_fk(q[:7] + dq_applied[:7], q[7:] + dq_applied[7:], kin).translation
    return StepResult(
        dq=dq_applied,
        feasible=feasible,
        active_constraints=frozenset(tags),
        predicted_tip=predicted,
        alpha=applied_alpha,
    )


# -- the closed loop ------------------------------------------------------------

@dataclass(frozen=True)
class ImagingLoop:
    """Bundles the simulated C-arm: projection, the path plane in the base
    frame, and render/segment settings. noise_seed None renders clean frames;
    otherwise frame k is rendered with seed noise_seed + k."""

    pm: ProjectionModel
    plane_b: PlaneModel
    half_width: float = 2.5
    threshold: int = 128
    noise_seed: int | None = None
    noise_sigma: float = 10.0

    def measure(self, q_r: np.ndarray, q_e: np.ndarray, kin: KinematicParams,
                frame_index: int):
        poly = backbone_polyline(q_r, q_e, kin)
        reference = project(self.pm, poly[0])
        seed = None if self.noise_seed is None else self.noise_seed + frame_index
        img = render_endoscope(self.pm, poly, self.half_width, seed, self.noise_sigma)
        skel = skeletonize(segment(img, self.threshold))
        tip_px = find_tip(skel, reference)
        tip_est = tip_to_base(self.pm, self.plane_b, tip_px)
        return tip_px, tip_est, img


@dataclass(frozen=True)
class LogRow:
    step: int
    waypoint_index: int
    u: float
    v: float
    tip_est: np.ndarray
    tip_true: np.ndarray
    q_r: np.ndarray
    q_e: np.ndarray
    min_margin: float
    alpha: float
    active_constraints: str


@dataclass
class TrajectoryLog:
    rows: list[LogRow] = field(default_factory=list)

    CSV_HEADER = (
        "step,waypoint_index,u,v,"
        "tip_est_x,tip_est_y,tip_est_z,tip_true_x,tip_true_y,tip_true_z,"
        "qr1,qr2,qr3,qr4,qr5,qr6,qr7,qe1,qe2,qe3,qe4,"
        "min_margin,alpha,active_constraints"
    )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for r in self.rows:
                vals = [r.step, r.waypoint_index, repr(float(r.u)), repr(float(r.v))]
                vals += [repr(float(x)) for x in r.tip_est]
                vals += [repr(float(x)) for x in r.tip_true]
                vals += [repr(float(x)) for x in r.q_r]
                vals += [repr(float(x)) for x in r.q_e]
                vals += [repr(float(r.min_margin)), repr(float(r.alpha)),
                         r.active_constraints]
                fh.write(",".join(str(v) for v in vals) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrajectoryLog":
        rows = []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != cls.CSV_HEADER:
                raise ValueError(f"{path}: unexpected trajectory header")
            for line in fh:
                if not line.strip():
                    continue
                f = line.strip().split(",")
                rows.append(LogRow(
                    step=int(f[0]), waypoint_index=int(f[1]),
                    u=float(f[2]), v=float(f[3]),
                    tip_est=np.array([float(x) for x in f[4:7]]),
                    tip_true=np.array([float(x) for x in f[7:10]]),
                    q_r=np.array([float(x) for x in f[10:17]]),
                    q_e=np.array([float(x) for x in f[17:21]]),
                    min_margin=float(f[21]), alpha=float(f[22]),
                    active_constraints=f[23],
                ))
        return cls(rows)


def follow_path(
    initial: ControlState,
    path_b: np.ndarray,
    kin: KinematicParams,
    env: PointCloud,
    imaging: ImagingLoop,
    cfg: ControllerConfig,
    frame_sink=None,
) -> TrajectoryLog:
    """Drive the tip through the waypoints using image feedback only.

    Each iteration renders a frame, localizes the tip, advances the waypoint
    index while the estimate is within waypoint_tol, then applies one QP
    step. Rows are logged at measurement time, so every logged configuration
    is one the mechanism actually visited. frame_sink, when given, is called
    as frame_sink(step, image) after each measurement.
    """
    path_b = np.asarray(path_b, dtype=float)
    if path_b.ndim != 2 or path_b.shape[1] != 3 or path_b.shape[0] == 0:
        raise ValueError("path must be a non-empty (n, 3) array")

    log = TrajectoryLog()
    q_r = np.array(initial.q_r, dtype=float)
    q_e = np.array(initial.q_e, dtype=float)
    wp_i = int(initial.waypoint_index)
    steps_on_wp = 0

    for step in range(cfg.max_steps_per_waypoint * (len(path_b) + 1)):
        try:
            tip_px, tip_est, img = imaging.measure(q_r, q_e, kin, step)
        except (NoSkeletonError, NoEndpointError) as exc:
            raise ImagingAbortError(f"tip localization failed at step {step}: {exc}",
                                    log=log) from exc
        if frame_sink is not None:
            frame_sink(step, img)

        while wp_i < len(path_b) and \
                np.linalg.norm(tip_est - path_b[wp_i]) <= cfg.waypoint_tol:
            wp_i += 1
            steps_on_wp = 0

        state = ControlState(q_r=q_r, q_e=q_e, waypoint_index=wp_i, tip_estimate=tip_est)
        margin = float(np.min(obstacle_margins(state, env, kin, cfg)))
        tip_true = full_fk(q_r, q_e, kin).translation

        if wp_i >= len(path_b):
            log.rows.append(LogRow(step, wp_i, tip_px.u, tip_px.v, tip_est, tip_true,
                                   q_r.copy(), q_e.copy(), margin, 0.0, "terminal"))
            return log

        result = qp_step(state, path_b[wp_i], kin, env, cfg)
        tags = "|".join(sorted(result.active_constraints)) or "-"
        log.rows.append(LogRow(step, wp_i, tip_px.u, tip_px.v, tip_est, tip_true,
                               q_r.copy(), q_e.copy(), margin, result.alpha, tags))

        q_r = q_r + result.dq[:7]
        q_e = q_e + result.dq[7:]
        steps_on_wp += 1
        if steps_on_wp > cfg.max_steps_per_waypoint:
            raise ControlTimeoutError(
                f"waypoint {wp_i} not reached within {cfg.max_steps_per_waypoint} steps",
                log=log,
            )

    raise ControlTimeoutError("step budget exhausted", log=log)
