"""Closed-loop simulator for a fluoroscopy-guided robotic flexible endoscope.

The package models a 7-DOF arm carrying a 4-DOF flexible endoscope, plans a
plane-constrained path through a sinus-phantom point cloud, and drives the
tip along it with feedback from a simulated fluoroscopic imaging pipeline.
"""

from .controller import (
    ControllerConfig,
    ControlState,
    ImagingLoop,
    StepResult,
    TrajectoryLog,
    follow_path,
    obstacle_margins,
    qp_step,
)
from .environment import (
    Landmarks,
    Phantom,
    PhantomSpec,
    PlaneModel,
    PointCloud,
    fit_plane,
    in_cavity,
    load_cloud,
    load_landmarks,
    min_distance,
    synth_phantom,
)
from .errors import SimError
from .experiment import (
    ExperimentSpec,
    emit_plots,
    load_spec,
    replay_trial,
    run_experiment,
)
from .imaging import (
    BinaryMask,
    GrayImage,
    PixelPoint,
    ProjectionModel,
    find_tip,
    make_projection,
    project,
    render_endoscope,
    segment,
    skeletonize,
    tip_to_base,
)
from .kinematics import (
    CalibrationTerms,
    DHRow,
    EndoGeometry,
    JointLimits,
    KinematicParams,
    arm_fk,
    body_points,
    compensate,
    flexible_fk,
    full_fk,
    jacobian,
    load_kinematics_config,
    wrist_fk,
)
from .planner import PathP, PlannerConfig, edge_clear, plan, shortcut
from .registration import (
    MarkerSet,
    RegistrationSet,
    compose_chain,
    estimate_rigid,
    to_base,
)
from .transforms import RigidTransform

__version__ = "0.1.0"
