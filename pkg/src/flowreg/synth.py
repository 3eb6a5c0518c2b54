"""Synthetic shapes, deformations, and the guidance-frame generator.

These stand in for the upstream reconstruction stages: they produce shape
pairs with known ground-truth correspondence and noisy intermediate point
clouds for demos and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .geometry import PointCloud, TriMesh, as_points

__all__ = [
    "SyntheticDeformation",
    "synth_guidance",
    "apply_deformation",
    "deformation_frames",
    "make_deformed_pair",
    "sphere_cloud",
    "ball_cloud",
    "sphere_mesh",
    "bar_mesh",
]

DEFORMATION_TAGS = ("translate", "bend", "twist", "ellipsoid-morph")


@dataclass(frozen=True)
class SyntheticDeformation:
    """Recipe for synthetic guidance: deformation family plus noise model.

    ``frames`` intermediate clouds are generated; each carries Gaussian noise
    of standard deviation ``sigma`` and an extra ``interior_fraction`` of
    points sampled inside the convex hull of the frame.
    """

    tag: str = "translate"
    params: dict = field(default_factory=dict)
    frames: int = 4
    sigma: float = 0.0
    interior_fraction: float = 0.0

    def __post_init__(self):
        if self.tag not in DEFORMATION_TAGS:
            raise InvalidArgument(f"unknown deformation tag {self.tag!r}")
        if self.frames < 0:
            raise InvalidArgument("frames must be >= 0")
        if self.sigma < 0:
            raise InvalidArgument("sigma must be >= 0")
        if not 0.0 <= self.interior_fraction < 1.0:
            raise InvalidArgument("interior_fraction must be in [0, 1)")


def apply_deformation(points, tag, params=None):
    """Apply a named deformation to an (N, 3) point set.

    Tags: ``translate`` (offset), ``bend`` (arc of total angle ``angle`` about
    the x-extent), ``twist`` (rotation about x growing linearly with x), and
    ``ellipsoid-morph`` (per-axis scaling).
    """
    pts = as_points(points).copy()
    params = dict(params or {})
    if tag == "translate":
        return pts + np.asarray(params.get("offset", (1.0, 0.0, 0.0)), dtype=np.float64)
    if tag == "bend":
        angle = float(params.get("angle", np.pi / 2))
        if angle == 0.0:
            return pts
        span = pts[:, 0].max() - pts[:, 0].min()
        if span == 0.0:
            raise InvalidArgument("bend requires nonzero x extent")
        radius = span / angle
        phi = pts[:, 0] / radius
        out = pts.copy()
        out[:, 0] = (radius - pts[:, 2]) * np.sin(phi)
        out[:, 2] = radius - (radius - pts[:, 2]) * np.cos(phi)
        return out
    if tag == "twist":
        angle = float(params.get("angle", np.pi / 2))
        lo, hi = pts[:, 0].min(), pts[:, 0].max()
        if hi == lo:
            raise InvalidArgument("twist requires nonzero x extent")
        theta = angle * (pts[:, 0] - lo) / (hi - lo)
        c, s = np.cos(theta), np.sin(theta)
        out = pts.copy()
        out[:, 1] = c * pts[:, 1] - s * pts[:, 2]
        out[:, 2] = s * pts[:, 1] + c * pts[:, 2]
        return out
    if tag == "ellipsoid-morph":
        axes = np.asarray(params.get("axes", (1.0, 0.6, 0.6)), dtype=np.float64)
        return pts * axes
    raise InvalidArgument(f"unknown deformation tag {tag!r}")


def make_deformed_pair(base, tag, params=None):
    """Deform a base mesh; returns (source, target, ground-truth index map)."""
    target = TriMesh(apply_deformation(base.vertices, tag, params), base.triangles)
    return base, target, np.arange(len(base), dtype=np.int64)


def deformation_frames(base_points, tag, params, count):
    """Ground-truth intermediate clouds: the deformation applied at partial strength.

    Frame ``j`` of ``count`` applies the deformation scaled by ``j / (count+1)``
    (``angle`` and ``offset`` parameters are interpolated; axes interpolate
    toward identity).
    """
    pts = as_points(base_points)
    frames = []
    for j in range(1, count + 1):
        alpha = j / (count + 1)
        scaled = dict(params or {})
        if "angle" in scaled or tag in ("bend", "twist"):
            scaled["angle"] = alpha * float(scaled.get("angle", np.pi / 2))
        if "offset" in scaled or tag == "translate":
            scaled["offset"] = alpha * np.asarray(scaled.get("offset", (1.0, 0.0, 0.0)), dtype=np.float64)
        if tag == "ellipsoid-morph":
            axes = np.asarray(scaled.get("axes", (1.0, 0.6, 0.6)), dtype=np.float64)
            scaled["axes"] = (1.0 - alpha) + alpha * axes
        frames.append(PointCloud(apply_deformation(pts, tag, scaled)))
    return frames


def synth_guidance(source, target, correspondence, spec, seed=0):
    """Noisy intermediate clouds bridging matched source and target positions.

    Frame ``j`` of ``spec.frames`` blends each source point toward its matched
    target position at fraction ``j / (frames+1)``, adds isotropic Gaussian
    noise ``spec.sigma``, and appends ``round(N * interior_fraction)`` points
    sampled inside the convex hull of the blended cloud. Deterministic for a
    fixed seed.
    """
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    corr = np.asarray(correspondence, dtype=np.int64)
    if corr.shape != (len(src),):
        raise InvalidArgument("correspondence must give one target index per source point")
    if corr.size and (corr.min() < 0 or corr.max() >= len(tgt)):
        raise InvalidArgument("correspondence index out of target range")
    matched = tgt[corr]
    rng = np.random.default_rng(seed)
    n_interior = int(round(len(src) * spec.interior_fraction))
    frames = []
    for j in range(1, spec.frames + 1):
        alpha = j / (spec.frames + 1)
        blend = (1.0 - alpha) * src + alpha * matched
        pts = blend
        if spec.sigma > 0:
            pts = pts + rng.normal(0.0, spec.sigma, size=blend.shape)
        if n_interior:
            pts = np.concatenate([pts, _hull_interior_samples(blend, n_interior, rng)])
        frames.append(PointCloud(pts))
    return frames


def _hull_interior_samples(points, count, rng):
    # Convex combinations of 4 random cloud points lie inside the hull.
    picks = rng.integers(0, len(points), size=(count, 4))
    weights = rng.dirichlet(np.ones(4), size=count)
    return np.einsum("ij,ijk->ik", weights, points[picks])


def sphere_cloud(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Deterministic Fibonacci-spiral sampling of a sphere surface."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    theta = np.pi * (1.0 + 5.0**0.5) * i
    r_xy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r_xy * np.cos(theta), r_xy * np.sin(theta), z], axis=1)
    return PointCloud(pts * radius + np.asarray(center, dtype=np.float64))


def ball_cloud(n, radius=1.0, center=(0.0, 0.0, 0.0), seed=0):
    """Uniform random samples inside a ball."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return PointCloud(direction * r + np.asarray(center, dtype=np.float64))


def sphere_mesh(n_lat=12, n_lon=18, radius=1.0):
    """Watertight UV-sphere mesh."""
    if n_lat < 2 or n_lon < 3:
        raise InvalidArgument("need n_lat >= 2 and n_lon >= 3")
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            theta = 2 * np.pi * j / n_lon
            verts.append((
                radius * np.sin(phi) * np.cos(theta),
                radius * np.sin(phi) * np.sin(theta),
                radius * np.cos(phi),
            ))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    tris = []
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
        tris.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    return TriMesh(np.asarray(verts), np.asarray(tris))


def bar_mesh(length=2.0, width=0.4, nx=24, ny=6):
    """Flat rectangular strip in the z=0 plane, length along x, grid-triangulated."""
    if nx < 1 or ny < 1:
        raise InvalidArgument("need nx >= 1 and ny >= 1")
    xs = np.linspace(-length / 2, length / 2, nx + 1)
    ys = np.linspace(-width / 2, width / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    return TriMesh(verts, np.asarray(tris))
