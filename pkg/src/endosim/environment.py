"""Phantom point clouds, obstacle distance queries, and the feasible-path plane.

The environment is an obstacle point cloud sampled on the cavity walls of a
sinus phantom, expressed in the phantom frame on load. Distance queries run
through a uniform voxel grid but return values bit-identical to a brute-force
scan. A synthetic phantom generator produces a desk-scale stand-in: a nasal
tube joined to a sinus ellipsoid through a narrow ostium corridor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    CloudFormatError,
    DegenerateGeometryError,
    EmptyCloudError,
)
from .transforms import RigidTransform


def _point_sq_dists(points: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Squared distances used by every query path, so the voxel-grid result
    is the same float the brute-force scan would produce."""
    dx = points[:, 0] - p[0]
    dy = points[:, 1] - p[1]
    dz = points[:, 2] - p[2]
    return dx * dx + dy * dy + dz * dz


class _VoxelGrid:
    """Uniform hash grid over the cloud for nearest-point queries."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = float(cell)
        ijk = np.floor(points / self.cell).astype(np.int64)
        cells: dict[tuple[int, int, int], list[int]] = {}
        for idx, key in enumerate(map(tuple, ijk)):
            cells.setdefault(key, []).append(idx)
        self.cells = {k: np.array(v) for k, v in cells.items()}
        self.lo = ijk.min(axis=0)
        self.hi = ijk.max(axis=0)

    def _shell_keys(self, center: tuple, r: int):
        """Occupiable cells at Chebyshev distance exactly r from the center
        cell: the shell clipped to the grid's occupied bounding box, so far
        shells cost nothing to enumerate."""
        cx, cy, cz = center
        x0, x1 = max(-r, int(self.lo[0]) - cx), min(r, int(self.hi[0]) - cx)
        y0, y1 = max(-r, int(self.lo[1]) - cy), min(r, int(self.hi[1]) - cy)
        z0, z1 = max(-r, int(self.lo[2]) - cz), min(r, int(self.hi[2]) - cz)
        if x0 > x1 or y0 > y1 or z0 > z1:
            return
        if r == 0:
            yield (cx, cy, cz)
            return
        for dx in range(x0, x1 + 1):
            for dy in range(y0, y1 + 1):
                if max(abs(dx), abs(dy)) == r:
                    for dz in range(z0, z1 + 1):
                        yield (cx + dx, cy + dy, cz + dz)
                else:
                    if z0 <= -r:
                        yield (cx + dx, cy + dy, cz - r)
                    if z1 >= r:
                        yield (cx + dx, cy + dy, cz + r)

    def nearest_sq(self, p: np.ndarray) -> float:
        center = tuple(
            int(v) for v in np.floor(np.asarray(p, dtype=float) / self.cell)
        )
        # shells beyond this radius cannot contain any occupied cell
        span = np.maximum(self.hi - center, center - self.lo)
        max_r = int(np.max(np.maximum(span, 0))) + 1
        # shells inside the gap between the center and the occupied box are
        # empty, so the scan can start at the box's Chebyshev distance
        gap = np.maximum(np.maximum(self.lo - center, center - self.hi), 0)
        best = np.inf
        for r in range(int(np.max(gap)), max_r + 1):
            for key in self._shell_keys(center, r):
                idx = self.cells.get(key)
                if idx is None:
                    continue
                d = np.min(_point_sq_dists(self.points[idx], p))
                if d < best:
                    best = d
            # every unscanned point now sits in a shell at Chebyshev >= r+1,
            # hence at least r*cell away, so this best cannot be beaten
            if best <= (r * self.cell) ** 2:
                break
        return float(best)

    def any_within(self, p: np.ndarray, dist: float) -> bool:
        """True iff some cloud point lies at distance < dist from p."""
        center = tuple(
            int(v) for v in np.floor(np.asarray(p, dtype=float) / self.cell)
        )
        # a point closer than dist differs by < dist per axis, so its cell
        # index differs by at most ceil(dist/cell)
        reach = int(np.ceil(dist / self.cell))
        sq = dist * dist
        for r in range(reach + 1):
            for key in self._shell_keys(center, r):
                idx = self.cells.get(key)
                if idx is None:
                    continue
                if np.min(_point_sq_dists(self.points[idx], p)) < sq:
                    return True
        return False


@dataclass(frozen=True)
class PointCloud:
    """Obstacle points (mm) in the frame named by frame_tag.

    free_space, when present, is the generator's known free-space solid: a
    predicate over 3-vectors used for cavity-containment checks. External
    clouds without one fall back to the bounding-box rule in in_cavity.
    """

    points: np.ndarray
    frame_tag: str = "O_P"
    free_space: Callable[[np.ndarray], bool] | None = field(
        default=None, compare=False
    )

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise EmptyCloudError("cloud must be a non-empty (n, 3) array")
        if not np.all(np.isfinite(pts)):
            raise CloudFormatError("cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_grids", {})

    def __len__(self) -> int:
        return self.points.shape[0]

    def grid(self, cell: float) -> _VoxelGrid:
        cell = max(float(cell), 1.0)
        cached = self._grids.get(cell)
        if cached is None:
            cached = _VoxelGrid(self.points, cell)
            self._grids[cell] = cached
        return cached

    def transformed(self, t: RigidTransform, frame_tag: str) -> "PointCloud":
        """Express the cloud (and its free-space solid) in another frame; t
        maps current-frame coordinates into the new frame."""
        free = self.free_space
        if free is not None:
            t_inv = t.inverse()
            wrapped = lambda p, _f=free, _ti=t_inv: _f(_ti.apply(p))
        else:
            wrapped = None
        return PointCloud(t.apply(self.points), frame_tag, wrapped)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


def min_distance(cloud: PointCloud, p: np.ndarray, cell: float = 1.5) -> float:
    """Exact minimum Euclidean distance from p to the cloud."""
    if len(cloud) == 0:  # unreachable through the constructor, kept for safety
        raise EmptyCloudError("empty cloud")
    return float(np.sqrt(cloud.grid(cell).nearest_sq(np.asarray(p, dtype=float))))


def clearance_at_least(cloud: PointCloud, p: np.ndarray, d_o: float) -> bool:
    """True iff min_distance(cloud, p) >= d_o; cheaper than the full query."""
    return not cloud.grid(d_o).any_within(np.asarray(p, dtype=float), d_o)


def in_cavity(cloud: PointCloud, p: np.ndarray, d_o: float) -> bool:
    """Cavity-containment test: clear of the walls by d_o and inside the known
    free-space solid (or the cloud's bounding box shrunk by d_o as fallback)."""
    p = np.asarray(p, dtype=float)
    if cloud.free_space is not None:
        if not cloud.free_space(p):
            return False
    else:
        lo, hi = cloud.aabb()
        if not (np.all(p >= lo + d_o) and np.all(p <= hi - d_o)):
            return False
    return clearance_at_least(cloud, p, d_o)


def load_cloud(path: str | Path, frame_tag: str = "O_P") -> PointCloud:
    """Read a CSV cloud file, one x,y,z row per point (mm)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cloud file not found: {path}")
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            xyz = [float(v) for v in parts]
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{lineno}: unparseable number") from exc
        if not all(np.isfinite(v) for v in xyz):
            raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
        rows.append(xyz)
    if not rows:
        raise EmptyCloudError(f"{path}: no points")
    return PointCloud(np.array(rows), frame_tag)


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    with open(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r},{float(y)!r},{float(z)!r}\n")


# -- landmarks and the feasible-path plane -------------------------------------

@dataclass(frozen=True)
class Landmarks:
    """Named phantom-frame points: the plane is defined by nostril, ostium,
    target; start is where the planned path begins."""

    nostril: np.ndarray
    ostium: np.ndarray
    target: np.ndarray
    start: np.ndarray

    def __post_init__(self):
        for name in ("nostril", "ostium", "target", "start"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"landmark {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)

    def plane_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.nostril, self.ostium, self.target


def load_landmarks(path: str | Path) -> Landmarks:
    data = json.loads(Path(path).read_text())
    try:
        return Landmarks(
            nostril=np.array(data["nostril"], dtype=float),
            ostium=np.array(data["ostium"], dtype=float),
            target=np.array(data["target"], dtype=float),
            start=np.array(data["start"], dtype=float),
        )
    except KeyError as exc:
        raise CloudFormatError(f"{path}: missing landmark {exc}") from exc


def save_landmarks(lm: Landmarks, path: str | Path) -> None:
    payload = {
        "nostril": list(lm.nostril),
        "ostium": list(lm.ostium),
        "target": list(lm.target),
        "start": list(lm.start),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class PlaneModel:
    """Plane n.x = offset with an orthonormal in-plane chart (e_u, e_v).

    e_u x e_v = normal, so (u, v, n) is right-handed; from_coords(u, v) =
    offset*n + u*e_u + v*e_v.
    """

    normal: np.ndarray
    offset: float
    e_u: np.ndarray
    e_v: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        u = np.asarray(self.e_u, dtype=float)
        v = np.asarray(self.e_v, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("normal must be unit length")
        if abs(np.dot(n, u)) > 1e-9 or abs(np.dot(n, v)) > 1e-9:
            raise ValueError("in-plane axes must be orthogonal to the normal")
        if np.linalg.norm(np.cross(u, v) - n) > 1e-9:
            raise ValueError("in-plane axes must be right-handed with the normal")
        for name, vec in (("normal", n), ("e_u", u), ("e_v", v)):
            vec = vec.copy()
            vec.setflags(write=False)
            object.__setattr__(self, name, vec)

    @property
    def origin(self) -> np.ndarray:
        return self.normal * self.offset

    def residual(self, p: np.ndarray) -> float:
        return float(np.dot(self.normal, np.asarray(p, dtype=float)) - self.offset)

    def to_coords(self, p: np.ndarray) -> np.ndarray:
        """In-plane (u, v) coordinates of p projected onto the plane."""
        p = np.asarray(p, dtype=float)
        rel = p - self.origin
        return np.stack([rel @ self.e_u, rel @ self.e_v], axis=-1)

    def from_coords(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return self.origin + np.outer(uv[..., 0], self.e_u).reshape(uv.shape[:-1] + (3,)) \
            + np.outer(uv[..., 1], self.e_v).reshape(uv.shape[:-1] + (3,))

    def project_point(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p - self.residual(p) * self.normal

    def transformed(self, t: RigidTransform) -> "PlaneModel":
        r = t.rotation
        n = r @ self.normal
        origin = t.apply(self.origin)
        return PlaneModel(
            normal=n,
            offset=float(np.dot(n, origin)),
            e_u=r @ self.e_u,
            e_v=r @ self.e_v,
        )


def fit_plane(landmarks: Landmarks) -> PlaneModel:
    """Plane through nostril, ostium, target; e_u points from nostril toward
    ostium; degenerate when the points are collinear within tolerance."""
    a, b, c = landmarks.plane_points()
    ab = b - a
    ac = c - a
    cross = np.cross(ab, ac)
    # scale-free collinearity test: sine of the landmark angle
    span = np.linalg.norm(ab) * np.linalg.norm(ac)
    if np.linalg.norm(cross) <= 1e-9 * max(span, 1.0):
        raise DegenerateGeometryError("plane landmarks are collinear")
    normal = cross / np.linalg.norm(cross)
    e_u = (b - a) / np.linalg.norm(b - a)
    e_v = np.cross(normal, e_u)
    return PlaneModel(normal=normal, offset=float(np.dot(normal, a)), e_u=e_u, e_v=e_v)


# -- synthetic phantom ----------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters for the desk-scale synthetic phantom (mm).

    Geometry along +x: a nasal tube from x = 0, a conical flare into a narrow
    ostium corridor (corridor_radius is the throat radius, so the corridor is
    2*corridor_radius wide), a flare out, then the sinus ellipsoid.
    """

    tube_radius: float = 6.0
    tube_length: float = 40.0
    corridor_radius: float = 2.0
    corridor_length: float = 3.0
    flare_length: float = 1.5
    flare_radius: float = 4.0
    sinus_center_x: float = 52.0
    sinus_semi_axes: tuple[float, float, float] = (9.0, 10.0, 8.0)
    point_spacing: float = 0.8
    jitter: float = 0.05
    target: tuple[float, float, float] = (50.0, 0.8, 0.0)
    start: tuple[float, float, float] = (2.0, 0.0, 0.0)

    def __post_init__(self):
        if self.corridor_radius <= 0:
            raise ValueError("corridor must be wider than zero")
        if self.corridor_radius >= min(self.tube_radius, *self.sinus_semi_axes) \
                or self.flare_radius >= self.tube_radius:
            raise ValueError("corridor/flare wider than the chambers it joins")
        if self.point_spacing <= 0:
            raise ValueError("point_spacing must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("sinus_semi_axes", "target", "start"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class Phantom:
    cloud: PointCloud
    landmarks: Landmarks
    manifest: dict


def _ring(rng, x: float, radius: float, spacing: float, jitter: float) -> np.ndarray:
    count = max(int(np.ceil(2 * np.pi * radius / spacing)), 6)
    phase = rng.uniform(0.0, 2 * np.pi)
    angles = phase + 2 * np.pi * np.arange(count) / count
    r = radius + rng.normal(0.0, jitter, size=count)
    x_j = x + rng.normal(0.0, jitter, size=count)
    return np.column_stack([x_j, r * np.cos(angles), r * np.sin(angles)])


def _free_space_predicate(spec: PhantomSpec) -> Callable[[np.ndarray], bool]:
    cone_in_lo = spec.tube_length - spec.flare_length
    cone_out_hi = spec.tube_length + spec.corridor_length + spec.flare_length
    corridor_lo = spec.tube_length
    corridor_hi = spec.tube_length + spec.corridor_length
    slope = (spec.flare_radius - spec.corridor_radius) / spec.flare_length
    cx = spec.sinus_center_x
    ax, ay, az = spec.sinus_semi_axes

    def free(p: np.ndarray) -> bool:
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        r = np.hypot(y, z)
        if 0.0 <= x <= cone_in_lo and r < spec.tube_radius:
            return True
        if cone_in_lo <= x <= corridor_lo and \
                r < spec.flare_radius - slope * (x - cone_in_lo):
            return True
        if corridor_lo <= x <= corridor_hi and r < spec.corridor_radius:
            return True
        if corridor_hi <= x <= cone_out_hi and \
                r < spec.corridor_radius + slope * (x - corridor_hi):
            return True
        return ((x - cx) / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2 < 1.0

    return free


def synth_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Deterministic wall-point sampling of the tube/corridor/sinus solid."""
    rng = np.random.Generator(np.random.PCG64(seed))
    sp = spec.point_spacing
    jt = spec.jitter
    chunks = []

    # nasal tube wall, open at x = 0
    cone_in_lo = spec.tube_length - spec.flare_length
    for x in np.arange(0.0, cone_in_lo, sp):
        chunks.append(_ring(rng, x, spec.tube_radius, sp, jt))

    # annulus wall where the tube necks down to the entry flare
    for r in np.arange(spec.flare_radius, spec.tube_radius, sp):
        chunks.append(_ring(rng, cone_in_lo, r, sp, jt))

    # entry flare cone, corridor throat, exit flare cone
    corridor_hi = spec.tube_length + spec.corridor_length
    slope = (spec.flare_radius - spec.corridor_radius) / spec.flare_length
    for x in np.arange(cone_in_lo, spec.tube_length, sp / 2):
        chunks.append(_ring(rng, x, spec.flare_radius - slope * (x - cone_in_lo), sp, jt))
    for x in np.arange(spec.tube_length, corridor_hi + sp / 4, sp / 2):
        chunks.append(_ring(rng, x, spec.corridor_radius, sp, jt))
    cone_out_hi = corridor_hi + spec.flare_length
    for x in np.arange(corridor_hi + sp / 2, cone_out_hi, sp / 2):
        chunks.append(_ring(rng, x, spec.corridor_radius + slope * (x - corridor_hi), sp, jt))

    # sinus ellipsoid with an entry hole carved around the corridor mouth
    ax, ay, az = spec.sinus_semi_axes
    n_lat = max(int(np.ceil(np.pi * max(ay, az) / sp)), 8)
    hole_r = spec.flare_radius + 1.0
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        ring_r = np.sin(phi) * max(ay, az)
        count = max(int(np.ceil(2 * np.pi * ring_r / sp)), 6)
        phase = rng.uniform(0.0, 2 * np.pi)
        theta = phase + 2 * np.pi * np.arange(count) / count
        pts = np.column_stack([
            spec.sinus_center_x + ax * np.cos(phi) * np.ones(count),
            ay * np.sin(phi) * np.cos(theta),
            az * np.sin(phi) * np.sin(theta),
        ])
        pts += rng.normal(0.0, jt, size=pts.shape)
        lat = np.hypot(pts[:, 1], pts[:, 2])
        keep = ~((pts[:, 0] < cone_out_hi + 1.0) & (lat < hole_r))
        if np.any(keep):
            chunks.append(pts[keep])

    points = np.vstack(chunks)
    cloud = PointCloud(points, "O_P", _free_space_predicate(spec))

    ostium = np.array([spec.tube_length + spec.corridor_length / 2, 0.0, 0.0])
    landmarks = Landmarks(
        nostril=np.zeros(3),
        ostium=ostium,
        target=np.array(spec.target, dtype=float),
        start=np.array(spec.start, dtype=float),
    )

    # generator guarantees, asserted here so bad parameter sets fail loudly
    fit_plane(landmarks)
    for name in ("nostril", "ostium", "target", "start"):
        p = getattr(landmarks, name)
        if min_distance(cloud, p) < spec.corridor_radius / 2:
            raise ValueError(f"landmark {name} too close to the phantom wall")
        if not cloud.free_space(p):
            raise ValueError(f"landmark {name} outside free space")

    manifest = {
        "point_count": int(points.shape[0]),
        "seed": int(seed),
        "spacing": spec.point_spacing,
        "corridor_width": 2 * spec.corridor_radius,
    }
    return Phantom(cloud=cloud, landmarks=landmarks, manifest=manifest)
