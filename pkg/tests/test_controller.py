"""Controller tests: the per-step displacement QP, obstacle margins, and the
image-fed closed loop.

QP oracles: the pseudo-inverse closed form for the unconstrained case, and a
dense grid search over the two free joints for a bound-constrained reduction
(everything else pinned by zero-width limit boxes).
"""

import numpy as np
import pytest

from endosim.controller import (
    ControllerConfig,
    ControlState,
    TrajectoryLog,
    LogRow,
    ImagingLoop,
    follow_path,
    obstacle_margins,
    qp_step,
)
from endosim.environment import PlaneModel, PointCloud
from endosim.errors import ControlTimeoutError
from endosim.experiment import DEFAULT_Q0, default_controller_config, place_phantom
from endosim.imaging import make_projection
from endosim.kinematics import (
    JointLimits,
    KinematicParams,
    body_points,
    full_fk,
    jacobian,
)

KIN = KinematicParams()


def _far_env():
    rng = np.random.default_rng(0)
    return PointCloud(rng.uniform(900.0, 950.0, (12, 3)), frame_tag="O_B")


def _home_state(kin=KIN):
    tip = full_fk(DEFAULT_Q0, np.zeros(4), kin).translation
    return ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4), tip_estimate=tip)


@pytest.fixture(scope="module")
def default_cfg():
    return default_controller_config()


# -- configuration validation ---------------------------------------------------

def test_config_rejects_asymmetric_a():
    a = np.eye(11)
    a[0, 1] = 0.5
    with pytest.raises(ValueError):
        ControllerConfig(a_matrix=a)


def test_config_rejects_indefinite_a():
    a = np.eye(11)
    a[3, 3] = -1.0
    with pytest.raises(ValueError):
        ControllerConfig(a_matrix=a)


def test_config_rejects_bad_shape_and_params():
    with pytest.raises(ValueError):
        ControllerConfig(a_matrix=np.eye(7))
    with pytest.raises(ValueError):
        ControllerConfig(dt=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(delta=1)


def test_config_from_dict_diagonal():
    cfg = ControllerConfig.from_dict({"a_diagonal": list(range(1, 12)), "d_o": 2.0})
    assert np.allclose(np.diag(cfg.a_matrix), range(1, 12))
    assert cfg.d_o == 2.0
    with pytest.raises(ValueError):
        ControllerConfig.from_dict({"gain": 3.0})


def test_state_shape_validation():
    with pytest.raises(ValueError):
        ControlState(q_r=np.zeros(6), q_e=np.zeros(4))
    with pytest.raises(ValueError):
        ControlState(q_r=np.zeros(7), q_e=np.zeros(3))


# -- obstacle margins --------------------------------------------------------------

def test_margins_far_environment():
    cfg = ControllerConfig()
    margins = obstacle_margins(_home_state(), _far_env(), KIN, cfg)
    assert margins.shape == (cfg.delta,)
    assert np.all(margins > 100.0)


def test_margin_exact_at_d_o():
    cfg = ControllerConfig()
    state = _home_state()
    pts = body_points(state.q_r, state.q_e, KIN, cfg.delta)
    axis = pts[-1] - pts[0]
    axis /= np.linalg.norm(axis)
    perp = np.cross(axis, [1.0, 0.0, 0.0])
    if np.linalg.norm(perp) < 0.5:
        perp = np.cross(axis, [0.0, 1.0, 0.0])
    perp /= np.linalg.norm(perp)
    env = PointCloud(np.array([pts[-1] + cfg.d_o * perp]), frame_tag="O_B")
    margins = obstacle_margins(state, env, KIN, cfg)
    assert abs(margins[-1] - cfg.d_o) <= 1e-9
    assert np.argmin(margins) == len(margins) - 1


def test_margins_equal_brute_force():
    cfg = ControllerConfig()
    rng = np.random.default_rng(4)
    state = _home_state()
    cloud = rng.uniform(-100, 900, (400, 3))
    env = PointCloud(cloud, frame_tag="O_B")
    margins = obstacle_margins(state, env, KIN, cfg)
    pts = body_points(state.q_r, state.q_e, KIN, cfg.delta)
    for k, p in enumerate(pts):
        best = np.inf
        for c in cloud:
            d = np.sqrt((c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2 + (c[2] - p[2]) ** 2)
            best = min(best, d)
        assert abs(margins[k] - best) <= 1e-9


# -- qp_step -----------------------------------------------------------------------

def test_qp_zero_displacement():
    state = _home_state()
    res = qp_step(state, state.tip_estimate, KIN, _far_env(), ControllerConfig())
    assert np.allclose(res.dq, 0.0, atol=1e-12)
    assert res.feasible


def test_qp_identity_matches_pseudo_inverse():
    state = _home_state()
    rng = np.random.default_rng(7)
    env = _far_env()
    cfg = ControllerConfig()  # identity A
    jac = jacobian(state.q_r, state.q_e, KIN)
    for _ in range(10):
        dx = rng.uniform(-0.4, 0.4, 3)
        res = qp_step(state, state.tip_estimate + dx, KIN, env, cfg)
        want = jac.T @ np.linalg.solve(jac @ jac.T, dx)
        assert res.feasible and res.alpha == 1.0
        assert np.max(np.abs(res.dq - want)) <= 1e-8


def test_qp_equality_and_optimality_invariants():
    state = _home_state()
    rng = np.random.default_rng(8)
    env = _far_env()
    jac = jacobian(state.q_r, state.q_e, KIN)
    for trial in range(10):
        m = rng.normal(size=(11, 11))
        a = m.T @ m + 0.5 * np.eye(11)
        a = 0.5 * (a + a.T)
        cfg = ControllerConfig(a_matrix=a)
        dx = rng.uniform(-0.3, 0.3, 3)
        res = qp_step(state, state.tip_estimate + dx, KIN, env, cfg)
        assert res.feasible and res.alpha == 1.0
        assert not res.active_constraints
        assert np.linalg.norm(jac @ res.dq - dx) <= 1e-8 * np.linalg.norm(dx)
        dq_pinv = jac.T @ np.linalg.solve(jac @ jac.T, dx)
        assert res.dq @ a @ res.dq <= dq_pinv @ a @ dq_pinv + 1e-8


def test_qp_clamps_large_displacement():
    state = _home_state()
    res = qp_step(state, state.tip_estimate + np.array([200.0, 0, 0]),
                  KIN, _far_env(), ControllerConfig())
    assert "clip" in res.active_constraints
    assert np.all(np.abs(res.dq) <= ControllerConfig().step_clip + 1e-12)


def test_qp_pinned_joint_matches_grid_oracle():
    # pin everything except the two yaw benders by zero-width limit boxes;
    # their tip columns are parallel at the straight pose, so the equality
    # leaves one degree of freedom for the weights and bounds to resolve
    limits = JointLimits(
        arm_lower=DEFAULT_Q0.copy(), arm_upper=DEFAULT_Q0.copy(),
        endo_lower=np.array([-np.pi / 2, 0.0, 0.0, -np.pi / 2]),
        endo_upper=np.array([np.pi / 2, 0.0, 0.0, 0.0]),  # yaw 2 pinned at upper
    )
    kin = KinematicParams(limits=limits)
    state = _home_state(kin)
    diag = np.ones(11)
    diag[10] = 3.0
    cfg = ControllerConfig(a_matrix=np.diag(diag))

    jac = jacobian(state.q_r, state.q_e, kin)
    dx = jac[:, 7] * 0.004 + jac[:, 10] * 0.003  # demands positive pinned motion
    res = qp_step(state, state.tip_estimate + dx, kin, _far_env(), cfg)

    assert np.max(np.abs(res.dq[:7])) <= 1e-12
    assert np.max(np.abs(res.dq[[8, 9]])) <= 1e-12
    assert res.feasible

    # dense grid over the free pair: keep near-minimal equality violation,
    # then pick the cheapest step
    g1 = np.linspace(-0.05, 0.05, 801)
    g2 = np.linspace(-0.05, 0.0, 401)
    x1, x2 = np.meshgrid(g1, g2, indexing="ij")
    resid = (jac[:, 7][:, None] * x1.ravel()[None, :]
             + jac[:, 10][:, None] * x2.ravel()[None, :] - dx[:, None])
    viol = np.linalg.norm(resid, axis=0)
    band = viol <= viol.min() + np.linalg.norm(jac[:, 7]) * (g1[1] - g1[0])
    cost = diag[7] * x1.ravel() ** 2 + diag[10] * x2.ravel() ** 2
    cost[~band] = np.inf
    best = np.argmin(cost)
    assert abs(res.dq[7] - x1.ravel()[best]) <= 1e-3
    assert abs(res.dq[10] - x2.ravel()[best]) <= 1e-3


def test_qp_obstacle_shrinks_step():
    cfg = ControllerConfig()
    state = _home_state()
    tip = full_fk(state.q_r, state.q_e, KIN).translation
    ahead = full_fk(state.q_r, state.q_e, KIN).rotation[:, 2]
    env = PointCloud(np.array([tip + 2.2 * ahead]), frame_tag="O_B")
    res = qp_step(state, state.tip_estimate + 10.0 * ahead, KIN, env, cfg)
    assert res.feasible
    assert res.alpha < 1.0
    assert "obstacle" in res.active_constraints
    after = ControlState(q_r=state.q_r + res.dq[:7], q_e=state.q_e + res.dq[7:])
    assert np.min(obstacle_margins(after, env, KIN, cfg)) > cfg.d_o


def test_qp_obstacle_veto():
    cfg = ControllerConfig()
    state = _home_state()
    tip = full_fk(state.q_r, state.q_e, KIN).translation
    ahead = full_fk(state.q_r, state.q_e, KIN).rotation[:, 2]
    env = PointCloud(np.array([tip + (cfg.d_o + 0.05) * ahead]), frame_tag="O_B")
    res = qp_step(state, state.tip_estimate + 10.0 * ahead, KIN, env, cfg)
    assert not res.feasible
    assert np.allclose(res.dq, 0.0)
    assert res.alpha == 0.0
    assert "obstacle" in res.active_constraints


# -- closed loop -------------------------------------------------------------------

def _straight_setup(length=20.0, n_wp=7):
    """Free-space line along the instrument axis, imaged edge-on."""
    t_pb = place_phantom(KIN, np.zeros(3))
    path_p = np.column_stack([
        np.linspace(length / n_wp, length, n_wp),
        np.zeros(n_wp), np.zeros(n_wp),
    ])
    path_b = np.array([t_pb.apply(p) for p in path_p])
    plane_p = PlaneModel(normal=np.array([0.0, 0.0, 1.0]), offset=0.0,
                         e_u=np.array([1.0, 0.0, 0.0]),
                         e_v=np.array([0.0, 1.0, 0.0]))
    plane_b = plane_p.transformed(t_pb)
    pm = make_projection(plane_b, 0.42, (256, 96),
                         center_world=t_pb.apply(np.array([10.0, 0.0, 0.0])))
    return path_b, ImagingLoop(pm=pm, plane_b=plane_b)


def test_follow_path_at_tip_terminates_immediately(default_cfg):
    path_b, loop = _straight_setup()
    tip = full_fk(DEFAULT_Q0, np.zeros(4), KIN).translation
    log = follow_path(ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4)),
                      np.array([tip]), KIN, _far_env(), loop, default_cfg)
    assert len(log.rows) == 1
    assert log.rows[0].active_constraints == "terminal"
    assert log.rows[0].waypoint_index == 1


def test_follow_straight_line_rms(default_cfg):
    path_b, loop = _straight_setup()
    log = follow_path(ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4)),
                      path_b, KIN, _far_env(), loop, default_cfg)
    assert log.rows[-1].active_constraints == "terminal"
    errors = []
    for k in range(len(path_b)):
        row = next(r for r in log.rows if r.waypoint_index > k)
        errors.append(np.linalg.norm(row.tip_true - path_b[k]))
    rms = float(np.sqrt(np.mean(np.square(errors))))
    assert rms <= 1.5


def test_follow_respects_boxes_and_clip(default_cfg):
    path_b, loop = _straight_setup()
    log = follow_path(ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4)),
                      path_b, KIN, _far_env(), loop, default_cfg)
    lower, upper = KIN.limits.lower, KIN.limits.upper
    prev = None
    for r in log.rows:
        q = np.concatenate([r.q_r, r.q_e])
        assert np.all(q >= lower - 1e-12) and np.all(q <= upper + 1e-12)
        if prev is not None:
            assert np.max(np.abs(q - prev)) <= default_cfg.step_clip + 1e-12
        prev = q
        assert r.min_margin > default_cfg.d_o


def test_follow_deterministic(default_cfg, tmp_path):
    outs = []
    for k in range(2):
        path_b, loop = _straight_setup()
        log = follow_path(ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4)),
                          path_b, KIN, _far_env(), loop, default_cfg)
        p = tmp_path / f"log{k}.csv"
        log.to_csv(p)
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_follow_timeout_preserves_log(default_cfg):
    path_b, loop = _straight_setup()
    cfg = ControllerConfig(a_matrix=default_cfg.a_matrix,
                           max_steps_per_waypoint=5, step_clip=0.005)
    far = path_b[-1] + 40.0 * (path_b[-1] - path_b[0]) / np.linalg.norm(
        path_b[-1] - path_b[0])
    with pytest.raises(ControlTimeoutError) as exc:
        follow_path(ControlState(q_r=DEFAULT_Q0.copy(), q_e=np.zeros(4)),
                    np.array([far]), KIN, _far_env(), loop, cfg)
    assert len(exc.value.log.rows) >= 5


# -- trajectory log serialization -----------------------------------------------------

def test_log_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    rows = []
    for k in range(4):
        rows.append(LogRow(
            step=k, waypoint_index=k // 2,
            u=float(rng.uniform(0, 256)), v=float(rng.uniform(0, 96)),
            tip_est=rng.normal(size=3), tip_true=rng.normal(size=3),
            q_r=rng.normal(size=7), q_e=rng.normal(size=4),
            min_margin=float(rng.uniform(1, 10)), alpha=0.5,
            active_constraints="clip|limit",
        ))
    log = TrajectoryLog(rows)
    p = tmp_path / "t.csv"
    log.to_csv(p)
    back = TrajectoryLog.from_csv(p)
    assert len(back.rows) == 4
    for a, b in zip(log.rows, back.rows):
        assert a.step == b.step and a.waypoint_index == b.waypoint_index
        assert np.array_equal(a.tip_est, b.tip_est)
        assert np.array_equal(a.tip_true, b.tip_true)
        assert np.array_equal(a.q_r, b.q_r)
        assert np.array_equal(a.q_e, b.q_e)
        assert (a.u, a.v, a.min_margin, a.alpha) == (b.u, b.v, b.min_margin, b.alpha)
        assert a.active_constraints == b.active_constraints


def test_log_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("step,u,v\n")
    with pytest.raises(ValueError):
        TrajectoryLog.from_csv(p)
