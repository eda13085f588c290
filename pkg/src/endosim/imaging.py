"""Simulated fluoroscopic imaging and endoscope tip localization.

The projection is a calibrated affine 3x4 map from base-frame millimeters to
pixels (orthographic at fixed depth; depth is recovered through the path
plane, not a perspective divide). A frame is rendered by drawing the
projected endoscope backbone as a bright band, segmented by threshold,
thinned to a skeleton, and the tip is taken as the skeleton endpoint
farthest from a reference pixel near the instrument's entry side.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.morphology import skeletonize as _skimage_skeletonize

from .environment import PlaneModel
from .errors import (
    DegenerateViewError,
    EmptyFrameError,
    NoEndpointError,
    NoSkeletonError,
)


@dataclass(frozen=True)
class PixelPoint:
    """Image coordinates: u right, v down, origin at the top-left corner."""

    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class ProjectionModel:
    """Affine pixel projection [u, v, 1]^T = K [X, Y, Z, 1]^T_B."""

    k: np.ndarray
    image_size: tuple[int, int]  # (width, height)
    pixel_pitch: float = 0.42

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        if k.shape != (3, 4) or not np.all(np.isfinite(k)):
            raise ValueError("K must be a finite 3x4 matrix")
        if not np.allclose(k[2], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("K must be affine: third row (0, 0, 0, 1)")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        w, h = self.image_size
        if w < 1 or h < 1:
            raise ValueError("image_size must be positive")
        k = k.copy()
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "image_size", (int(w), int(h)))


def make_projection(
    plane_b: PlaneModel,
    pixel_pitch: float,
    image_size: tuple[int, int],
    center_world: np.ndarray,
) -> ProjectionModel:
    """Projection looking along the plane normal, with the given world point
    at the image center and the plane's chart axes as the pixel axes."""
    w, h = image_size
    cw = np.asarray(center_world, dtype=float)
    row_u = np.concatenate([plane_b.e_u / pixel_pitch,
                            [w / 2 - float(plane_b.e_u @ cw) / pixel_pitch]])
    row_v = np.concatenate([plane_b.e_v / pixel_pitch,
                            [h / 2 - float(plane_b.e_v @ cw) / pixel_pitch]])
    k = np.vstack([row_u, row_v, [0.0, 0.0, 0.0, 1.0]])
    return ProjectionModel(k=k, image_size=(w, h), pixel_pitch=pixel_pitch)


def project(pm: ProjectionModel, p_b: np.ndarray) -> PixelPoint:
    p = np.asarray(p_b, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("point must be a finite 3-vector")
    uvw = pm.k @ np.append(p, 1.0)
    return PixelPoint(u=float(uvw[0] / uvw[2]), v=float(uvw[1] / uvw[2]))


def _project_many(pm: ProjectionModel, pts: np.ndarray) -> np.ndarray:
    homog = np.column_stack([pts, np.ones(len(pts))])
    uvw = homog @ pm.k.T
    return uvw[:, :2] / uvw[:, 2:3]


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width):
            raise ValueError("pixel array does not match the declared size")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) bool

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.shape != (self.height, self.width):
            raise ValueError("pixel array does not match the declared size")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def count(self) -> int:
        return int(np.count_nonzero(self.pixels))


def render_endoscope(
    pm: ProjectionModel,
    body: np.ndarray,
    half_width: float,
    noise_seed: int | None = None,
    noise_sigma: float = 10.0,
) -> GrayImage:
    """Draw the projected backbone polyline at the given half-width (pixels)
    as value 255 on black, optionally adding seeded Gaussian noise."""
    body = np.asarray(body, dtype=float)
    if body.ndim != 2 or body.shape[0] < 2 or body.shape[1] != 3:
        raise ValueError("need at least two body points")
    w, h = pm.image_size
    canvas = np.zeros((h, w), dtype=np.uint8)
    px = _project_many(pm, body)

    drew = False
    for (u0, v0), (u1, v1) in zip(px[:-1], px[1:]):
        lo_u = max(int(np.floor(min(u0, u1) - half_width - 1)), 0)
        hi_u = min(int(np.ceil(max(u0, u1) + half_width + 1)), w - 1)
        lo_v = max(int(np.floor(min(v0, v1) - half_width - 1)), 0)
        hi_v = min(int(np.ceil(max(v0, v1) + half_width + 1)), h - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        uu, vv = np.meshgrid(
            np.arange(lo_u, hi_u + 1), np.arange(lo_v, hi_v + 1)
        )
        du, dv = u1 - u0, v1 - v0
        seg_sq = du * du + dv * dv
        if seg_sq < 1e-18:
            t = np.zeros_like(uu, dtype=float)
        else:
            t = np.clip(((uu - u0) * du + (vv - v0) * dv) / seg_sq, 0.0, 1.0)
        dist = np.hypot(uu - (u0 + t * du), vv - (v0 + t * dv))
        hit = dist <= half_width
        if np.any(hit):
            canvas[lo_v : hi_v + 1, lo_u : hi_u + 1][hit] = 255
            drew = True

    if not drew:
        raise EmptyFrameError("endoscope projects entirely outside the image")

    if noise_seed is not None:
        rng = np.random.Generator(np.random.PCG64(noise_seed))
        noisy = canvas.astype(float) + rng.normal(0.0, noise_sigma, size=canvas.shape)
        canvas = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return GrayImage(width=w, height=h, pixels=canvas)


def segment(img: GrayImage, threshold: int) -> BinaryMask:
    return BinaryMask(img.width, img.height, img.pixels >= threshold)


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Two-subiteration morphological thinning to a 1-pixel centerline."""
    thin = _skimage_skeletonize(mask.pixels.copy())
    return BinaryMask(mask.width, mask.height, thin)


def _neighbor_counts(px: np.ndarray) -> np.ndarray:
    padded = np.pad(px.astype(np.int32), 1)
    counts = np.zeros_like(px, dtype=np.int32)
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if dv == 0 and du == 0:
                continue
            counts += padded[1 + dv : 1 + dv + px.shape[0],
                             1 + du : 1 + du + px.shape[1]]
    return counts


def find_tip(skel: BinaryMask, reference: PixelPoint) -> PixelPoint:
    """Endpoint pixel of the skeleton: a pixel with at most one skeleton
    neighbor, preferring fewer neighbors, then greater distance from the
    reference, then the lowest (v, u)."""
    px = skel.pixels
    if not np.any(px):
        raise NoSkeletonError("skeleton is empty")
    counts = _neighbor_counts(px)
    cand = np.argwhere(px & (counts <= 1))
    if cand.shape[0] == 0:
        raise NoEndpointError("skeleton has no endpoint pixels (closed loop)")
    best = None
    best_key = None
    for v, u in cand:
        d2 = (float(u) - reference.u) ** 2 + (float(v) - reference.v) ** 2
        key = (int(counts[v, u]), -d2, int(v), int(u))
        if best_key is None or key < best_key:
            best_key = key
            best = (int(u), int(v))
    return PixelPoint(u=best[0], v=best[1])


def tip_to_base(pm: ProjectionModel, plane_b: PlaneModel, px: PixelPoint) -> np.ndarray:
    """Unique base-frame point on the path plane projecting to px."""
    origin = plane_b.origin
    b0 = project(pm, origin).as_array()
    mu = project(pm, origin + plane_b.e_u).as_array() - b0
    mv = project(pm, origin + plane_b.e_v).as_array() - b0
    m = np.column_stack([mu, mv])
    if np.linalg.cond(m) >= 1e8:
        raise DegenerateViewError("projection nearly collapses the path plane")
    st = np.linalg.solve(m, px.as_array() - b0)
    return origin + st[0] * plane_b.e_u + st[1] * plane_b.e_v


# -- image file I/O -------------------------------------------------------------

def write_pgm(img: GrayImage, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        fh.write(img.pixels.tobytes())


def read_pgm(path: str | Path) -> GrayImage:
    data = Path(path).read_bytes()
    fields = data.split(maxsplit=4)
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    raw = fields[4][: w * h]
    return GrayImage(w, h, np.frombuffer(raw, dtype=np.uint8).reshape(h, w))


def write_pbm(mask: BinaryMask, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P4\n{mask.width} {mask.height}\n".encode())
        fh.write(np.packbits(mask.pixels, axis=1).tobytes())


def read_pbm(path: str | Path) -> BinaryMask:
    data = Path(path).read_bytes()
    fields = data.split(maxsplit=3)
    if fields[0] != b"P4":
        raise ValueError(f"{path}: not a binary PBM")
    w, h = int(fields[1]), int(fields[2])
    row_bytes = (w + 7) // 8
    bits = np.unpackbits(
        np.frombuffer(fields[3][: row_bytes * h], dtype=np.uint8).reshape(h, row_bytes),
        axis=1,
    )[:, :w]
    return BinaryMask(w, h, bits.astype(bool))
