"""Surface point extraction by depth rendering and unprojection.

Interior points of a dense reconstruction are occluded from every direction,
so rendering z-buffered depth images from cameras surrounding the cloud and
unprojecting the visible pixels keeps only points near the outer surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyGeometry, InvalidArgument
from .geometry import PointCloud, as_points

__all__ = [
    "CameraView",
    "DepthImage",
    "EMPTY_DEPTH",
    "hexahedron_views",
    "sphere_views",
    "render_depth",
    "unproject",
    "extract_surface_points",
    "pixel_footprint",
]

# Sentinel for pixels no point projects onto.
EMPTY_DEPTH = np.inf

DEFAULT_FOV = math.pi / 3
_PAD_FRACTION = 0.05
_AXES = np.array([
    [1, 0, 0], [-1, 0, 0],
    [0, 1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, -1],
], dtype=np.float64)


@dataclass(frozen=True)
class CameraView:
    """Perspective pinhole camera: eye, look-at center, up vector, fov, image size."""

    eye: np.ndarray
    center: np.ndarray
    up: np.ndarray
    fov: float = DEFAULT_FOV
    width: int = 512
    height: int = 512

    def __post_init__(self):
        eye = np.asarray(self.eye, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        if eye.shape != (3,) or center.shape != (3,) or up.shape != (3,):
            raise InvalidArgument("eye, center, up must be 3-vectors")
        forward = center - eye
        if np.linalg.norm(forward) == 0:
            raise InvalidArgument("eye and center coincide")
        if np.linalg.norm(np.cross(forward, up)) == 0:
            raise InvalidArgument("up vector parallel to view direction")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image dimensions must be >= 1 pixel")
        if not 0 < self.fov < math.pi:
            raise InvalidArgument("field of view must lie in (0, pi)")
        object.__setattr__(self, "eye", eye)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "up", up)

    def basis(self):
        """Right, up, forward unit vectors of the camera frame."""
        forward = self.center - self.eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return right, true_up, forward


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel camera-space depth; ``EMPTY_DEPTH`` (+inf) marks empty pixels."""

    width: int
    height: int
    depth: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != (self.height, self.width):
            raise InvalidArgument("depth array shape must be (height, width)")
        filled = depth[np.isfinite(depth)]
        if filled.size and (filled <= 0).any():
            raise InvalidArgument("non-empty depths must be positive")
        object.__setattr__(self, "depth", depth)

    @property
    def filled_mask(self):
        return np.isfinite(self.depth)


def _bounding_cube(points):
    centroid = points.mean(axis=0)
    half = np.abs(points - centroid).max() if len(points) else 0.0
    half = half * (1.0 + _PAD_FRACTION)
    if half == 0.0:
        half = 0.5
    return centroid, half


def _eye_distance(half, fov):
    # Pushes the camera back until the padded cube fits the frustum per axis.
    return half * (1.0 + 1.0 / math.tan(fov / 2))


def hexahedron_views(cloud, resolution=512, fov=DEFAULT_FOV):
    """Six axis-aligned cameras on the faces of the cloud's padded bounding cube.

    All eyes sit at the same distance from the centroid, along +-x, +-y, +-z,
    looking back at the centroid.
    """
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyGeometry("cannot place cameras around an empty cloud")
    centroid, half = _bounding_cube(pts)
    dist = _eye_distance(half, fov)
    views = []
    for axis in _AXES:
        up = np.array([0.0, 0.0, 1.0]) if axis[2] == 0 else np.array([1.0, 0.0, 0.0])
        views.append(CameraView(
            eye=centroid + dist * axis, center=centroid, up=up,
            fov=fov, width=resolution, height=resolution,
        ))
    return views


def sphere_views(cloud, count, resolution=512, fov=DEFAULT_FOV):
    """Generalization of :func:`hexahedron_views` to `count` sphere-distributed cameras."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyGeometry("cannot place cameras around an empty cloud")
    if count < 1:
        raise InvalidArgument("need at least one view")
    centroid, half = _bounding_cube(pts)
    dist = _eye_distance(half, fov)
    i = np.arange(count)
    z = 1.0 - 2.0 * (i + 0.5) / count
    theta = math.pi * (1.0 + 5.0**0.5) * i
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    views = []
    for d in dirs:
        up = np.array([0.0, 0.0, 1.0])
        if abs(d[2]) > 0.9:
            up = np.array([1.0, 0.0, 0.0])
        views.append(CameraView(
            eye=centroid + dist * d, center=centroid, up=up,
            fov=fov, width=resolution, height=resolution,
        ))
    return views


def _project(points, view):
    """Camera-space depth and continuous pixel coordinates of each point."""
    right, up, forward = view.basis()
    v = points - view.eye
    x = v @ right
    y = v @ up
    z = v @ forward
    tan_half = math.tan(view.fov / 2)
    aspect = view.width / view.height
    with np.errstate(divide="ignore", invalid="ignore"):
        col = (x / (z * tan_half * aspect) + 1.0) * 0.5 * view.width
        row = (1.0 - y / (z * tan_half)) * 0.5 * view.height
    return z, col, row


def render_depth(cloud, view, splat_radius=2):
    """Z-buffer render of a point cloud.

    Each point splats a disc of ``splat_radius`` pixels around its projected
    position; every covered pixel keeps the minimum camera-space depth.
    Pixels no point reaches stay ``EMPTY_DEPTH``.
    """
    if splat_radius < 0:
        raise InvalidArgument("splat_radius must be >= 0")
    pts = as_points(cloud)
    buf = np.full((view.height, view.width), EMPTY_DEPTH)
    if len(pts) == 0:
        return DepthImage(view.width, view.height, buf)
    z, col, row = _project(pts, view)
    front = z > 1e-12
    z, col, row = z[front], col[front], row[front]
    ci = np.floor(col).astype(np.int64)
    ri = np.floor(row).astype(np.int64)
    r = int(splat_radius)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            cc = ci + dx
            rr = ri + dy
            ok = (cc >= 0) & (cc < view.width) & (rr >= 0) & (rr < view.height)
            np.minimum.at(buf, (rr[ok], cc[ok]), z[ok])
    return DepthImage(view.width, view.height, buf)


def unproject(depth, view):
    """World-space point for every non-empty pixel (pixel centers along view rays)."""
    if depth.width != view.width or depth.height != view.height:
        raise InvalidArgument("depth image dimensions do not match the view")
    rows, cols = np.nonzero(depth.filled_mask)
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)))
    z = depth.depth[rows, cols]
    tan_half = math.tan(view.fov / 2)
    aspect = view.width / view.height
    x_ndc = (cols + 0.5) / view.width * 2.0 - 1.0
    y_ndc = 1.0 - (rows + 0.5) / view.height * 2.0
    x = x_ndc * tan_half * aspect * z
    y = y_ndc * tan_half * z
    right, up, forward = view.basis()
    pts = view.eye + np.outer(x, right) + np.outer(y, up) + np.outer(z, forward)
    return PointCloud(pts)


def pixel_footprint(view, distance):
    """World-space side length of one pixel at the given camera-space depth."""
    return 2.0 * math.tan(view.fov / 2) * distance / view.height


def extract_surface_points(cloud, resolution=512, splat_radius=2, views=None):
    """Keep only points visible from outside: render, unproject, aggregate.

    Renders the cloud from the six hexahedron views (or the supplied ones),
    unprojects every filled pixel, and merges the partial clouds with a voxel
    dedup at one-pixel-footprint scale. Points hidden in every view (interior
    points) contribute no pixels and vanish.
    """
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyGeometry("cannot extract the surface of an empty cloud")
    if views is None:
        views = hexahedron_views(cloud, resolution=resolution)
    centroid = pts.mean(axis=0)
    voxel = max(
        pixel_footprint(v, np.linalg.norm(centroid - v.eye)) for v in views
    )
    partials = []
    for view in views:
        image = render_depth(pts, view, splat_radius=splat_radius)
        part = unproject(image, view)
        if len(part):
            partials.append(part.points)
    if not partials:
        return PointCloud(np.zeros((0, 3)))
    merged = np.concatenate(partials)
    keys = np.floor(merged / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return PointCloud(merged[np.sort(first)])
