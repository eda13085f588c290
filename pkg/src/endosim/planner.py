"""Plane-constrained RRT over the phantom obstacle cloud.

Planning happens in the 2D (u, v) chart of the feasible-path plane, so the
planarity constraint is exact by construction; points are lifted to 3D only
for clearance checks and output. Edges are validated at a finer internal
resolution with an inflated clearance threshold, which makes the returned
path survive brute-force re-checks at 0.1 mm resampling: any point on a
validated edge is within half the check spacing of a checked sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import PlaneModel, PointCloud, in_cavity, min_distance
from .errors import InfeasibleEndpointError, NoPathFoundError

EDGE_RESOLUTION = 0.2  # mm, internal edge-check spacing
PLANE_TOL = 1e-6  # mm, allowed off-plane residual for inputs and waypoints


@dataclass(frozen=True)
class PlannerConfig:
    step_size: float = 2.0
    goal_bias: float = 0.1
    max_iters: int = 20000
    d_o: float = 1.5
    seed: int = 0
    shortcut_passes: int = 100

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must be in [0, 1]")
        if self.d_o <= 0:
            raise ValueError("d_o must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PlannerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown planner keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PathP:
    """Ordered waypoints (mm) in the frame the planner ran in."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] == 0:
            raise ValueError("waypoints must be a non-empty (n, 3) array")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    def __len__(self) -> int:
        return self.waypoints.shape[0]

    def length(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


def validate_path(
    path: PathP,
    env: PointCloud,
    plane: PlaneModel,
    start: np.ndarray,
    target: np.ndarray,
    cfg: PlannerConfig,
) -> None:
    """Raise if any of the path contract's clauses fails."""
    w = path.waypoints
    if not np.allclose(w[0], start, atol=1e-9) or not np.allclose(w[-1], target, atol=1e-9):
        raise ValueError("path endpoints do not match start/target")
    for p in w:
        if abs(plane.residual(p)) > PLANE_TOL:
            raise ValueError("waypoint off the feasible plane")
        if min_distance(env, p, cfg.d_o) < cfg.d_o:
            raise ValueError("waypoint violates obstacle clearance")
    if len(path) > 1:
        spacing = np.linalg.norm(np.diff(w, axis=0), axis=1)
        if np.max(spacing) > cfg.step_size + 1e-9:
            raise ValueError("waypoint spacing exceeds step size")


def edge_clear(
    env: PointCloud,
    plane: PlaneModel,
    a: np.ndarray,
    b: np.ndarray,
    d_o: float,
    resolution: float,
) -> bool:
    """True iff every sample at <= resolution spacing along [a, b] keeps
    clearance d_o and stays inside the cavity."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = max(int(np.ceil(np.linalg.norm(b - a) / resolution)), 1)
    for t in np.linspace(0.0, 1.0, n + 1):
        if not in_cavity(env, a + t * (b - a), d_o):
            return False
    return True


def _subdivide(a: np.ndarray, b: np.ndarray, step: float) -> list[np.ndarray]:
    """Points after a up to and including b, spaced at most step apart."""
    dist = float(np.linalg.norm(b - a))
    n = max(int(np.ceil(dist / step)), 1)
    return [a + k / n * (b - a) for k in range(1, n + 1)]


def _densify(vertices: list[np.ndarray], step: float) -> np.ndarray:
    out = [vertices[0]]
    for a, b in zip(vertices, vertices[1:]):
        out.extend(_subdivide(a, b, step))
    return np.array(out)


def shortcut(
    path: PathP,
    env: PointCloud,
    plane: PlaneModel,
    cfg: PlannerConfig,
    rng: np.random.Generator | None = None,
) -> PathP:
    """Random-pair shortcutting followed by re-subdivision to the step size.

    Splices are accepted only when the direct edge passes the same inflated
    clearance check used during planning, so the contract's invariants hold
    on the output; polyline length never increases.
    """
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    margin = cfg.d_o + EDGE_RESOLUTION / 2 + 1e-6
    verts = [w for w in path.waypoints]
    for _ in range(cfg.shortcut_passes):
        if len(verts) < 3:
            break
        i = int(rng.integers(0, len(verts) - 2))
        j = int(rng.integers(i + 2, len(verts)))
        if edge_clear(env, plane, verts[i], verts[j], margin, EDGE_RESOLUTION):
            verts = verts[: i + 1] + verts[j:]
    return PathP(_densify(verts, cfg.step_size))


def plan(
    env: PointCloud,
    plane: PlaneModel,
    start: np.ndarray,
    target: np.ndarray,
    cfg: PlannerConfig,
) -> PathP:
    """RRT in plane coordinates from start to target, then shortcutting.

    Deterministic for a given (env, cfg.seed). Raises InfeasibleEndpointError
    when an endpoint is off-plane beyond tolerance, in collision, or outside
    the cavity; NoPathFoundError when the iteration budget runs out.
    """
    margin = cfg.d_o + EDGE_RESOLUTION / 2 + 1e-6
    endpoints = []
    for name, p in (("start", start), ("target", target)):
        p = np.asarray(p, dtype=float)
        if abs(plane.residual(p)) > PLANE_TOL:
            raise InfeasibleEndpointError(f"{name} lies {plane.residual(p):.3g} mm off the plane")
        p = plane.project_point(p)
        if not in_cavity(env, p, margin):
            raise InfeasibleEndpointError(f"{name} in collision or outside the cavity")
        endpoints.append(p)
    start3, target3 = endpoints

    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    if np.linalg.norm(target3 - start3) < 1e-12:
        return PathP(np.array([start3]))

    if edge_clear(env, plane, start3, target3, margin, EDGE_RESOLUTION):
        return shortcut(PathP(_densify([start3, target3], cfg.step_size)),
                        env, plane, cfg, rng)

    # sampling window: obstacle extent in plane coordinates, padded
    uv_cloud = plane.to_coords(env.points)
    pad = 2 * cfg.step_size
    lo = uv_cloud.min(axis=0) - pad
    hi = uv_cloud.max(axis=0) + pad

    start_uv = plane.to_coords(start3)
    target_uv = plane.to_coords(target3)
    nodes = np.empty((cfg.max_iters + 2, 2))
    nodes[0] = start_uv
    count = 1
    parents = [-1]

    goal_reached = False
    for _ in range(cfg.max_iters):
        if rng.random() < cfg.goal_bias:
            sample = target_uv
        else:
            sample = rng.uniform(lo, hi)
        diff = nodes[:count] - sample
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
        near_i = int(np.argmin(d2))  # first minimum = lowest node index
        near = nodes[near_i]
        gap = float(np.sqrt(d2[near_i]))
        if gap < 1e-12:
            continue
        new_uv = sample if gap <= cfg.step_size else near + (sample - near) * (cfg.step_size / gap)
        if not edge_clear(env, plane, plane.from_coords(near),
                          plane.from_coords(new_uv), margin, EDGE_RESOLUTION):
            continue
        nodes[count] = new_uv
        parents.append(near_i)
        count += 1
        if np.linalg.norm(new_uv - target_uv) <= cfg.step_size and edge_clear(
            env, plane, plane.from_coords(new_uv),
            target3, margin, EDGE_RESOLUTION,
        ):
            nodes[count] = target_uv
            parents.append(count - 1)
            count += 1
            goal_reached = True
            break

    if not goal_reached:
        raise NoPathFoundError(
            f"no path after {cfg.max_iters} iterations (seed {cfg.seed})"
        )

    chain = []
    i = count - 1
    while i >= 0:
        chain.append(nodes[i].copy())
        i = parents[i]
    chain.reverse()
    verts = [start3] + [plane.from_coords(uv) for uv in chain[1:-1]] + [target3]
    rough = PathP(_densify(verts, cfg.step_size))
    return shortcut(rough, env, plane, cfg, rng)


def path_to_csv(path: PathP, file_path) -> None:
    with open(file_path, "w") as fh:
        fh.write("x,y,z\n")
        for x, y, z in path.waypoints:
            fh.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n")


def path_from_csv(file_path) -> PathP:
    rows = []
    with open(file_path) as fh:
        header = fh.readline()
        if header.strip() != "x,y,z":
            raise ValueError(f"{file_path}: unexpected path header")
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.split(",")])
    return PathP(np.array(rows))
