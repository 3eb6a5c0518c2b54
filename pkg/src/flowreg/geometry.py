"""Core geometry types and kernels.

Conventions used throughout the package:

* a point is a length-3 ``float64`` array ``(x, y, z)``,
* a point set is an ``(N, 3)`` ``float64`` array,
* colors are ``(N, 3)`` ``uint8`` arrays with channels in ``[0, 255]``,
* vertex and triangle indices are 0-based ``int64``.

Nearest-neighbor ties are always broken toward the lowest index, which keeps
every index-valued result deterministic and equal to a brute-force argmin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra
from scipy.spatial import cKDTree

from .errors import (
    DegenerateExtent,
    EmptyGeometry,
    InsufficientPoints,
    InvalidArgument,
    NonFiniteInput,
)

__all__ = [
    "PointCloud",
    "TriMesh",
    "SpatialIndex",
    "NormalizationTransform",
    "as_points",
    "normalize_to_unit_sphere",
    "chamfer_distance",
    "farthest_point_sample",
    "remove_outliers",
    "colorize_by_height",
    "geodesic_distances",
    "surface_area",
    "mesh_edges",
]


def _as_float_array(points, name="points"):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteInput(f"{name} contain non-finite coordinates")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points; the row order is stable and indices are identities."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_float_array(self.points))

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: ``vertices`` (N, 3) float and ``triangles`` (M, 3) vertex indices."""

    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        verts = _as_float_array(self.vertices, "vertices")
        tris = np.asarray(self.triangles, dtype=np.int64)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise InvalidArgument(f"triangles must have shape (M, 3), got {tris.shape}")
        if tris.size:
            if tris.min() < 0 or tris.max() >= len(verts):
                raise InvalidArgument("triangle index out of vertex range")
            a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
            if ((a == b) | (b == c) | (a == c)).any():
                raise InvalidArgument("degenerate triangle with repeated vertex index")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    def __len__(self):
        return self.vertices.shape[0]


def as_points(shape, name="shape"):
    """Coerce a PointCloud, TriMesh, or raw array to an (N, 3) float64 array."""
    if isinstance(shape, TriMesh):
        return shape.vertices
    if isinstance(shape, PointCloud):
        return shape.points
    return _as_float_array(shape, name)


class SpatialIndex:
    """Immutable nearest-neighbor index over a point set.

    Backed by a KD-tree; results are guaranteed to equal a brute-force argmin
    over the indexed points, with exact-distance ties resolved to the lowest
    index. Safe to share across threads after construction.
    """

    def __init__(self, points):
        pts = as_points(points)
        if len(pts) == 0:
            raise EmptyGeometry("cannot index an empty point set")
        self._points = pts
        self._tree = cKDTree(pts)

    @property
    def points(self):
        return self._points

    def __len__(self):
        return len(self._points)

    def nearest(self, queries):
        """Nearest indexed point for each query.

        Returns ``(distances, indices)`` arrays; ties go to the lowest index.
        """
        q = as_points(queries, "queries")
        if len(self._points) == 1:
            d = np.linalg.norm(q - self._points[0], axis=1)
            return d, np.zeros(len(q), dtype=np.int64)
        dist, idx = self._tree.query(q, k=2)
        out_d = dist[:, 0].copy()
        out_i = idx[:, 0].astype(np.int64)
        tied = np.nonzero(dist[:, 0] == dist[:, 1])[0]
        for row in tied:
            out_i[row] = self._resolve_tie(q[row], out_d[row])
        return out_d, out_i

    def _resolve_tie(self, query, radius):
        candidates = self._tree.query_ball_point(query, radius + 1e-12)
        diffs = self._points[candidates] - query
        d = np.linalg.norm(diffs, axis=1)
        best = d.min()
        return min(c for c, dc in zip(candidates, d) if dc == best)

    def nearest_distances(self, queries):
        """Distances only (no tie refinement needed)."""
        q = as_points(queries, "queries")
        dist, _ = self._tree.query(q)
        return np.atleast_1d(dist)

    def self_nearest_distances(self):
        """For each indexed point, distance to its nearest *other* indexed point."""
        if len(self._points) < 2:
            raise InsufficientPoints("need at least 2 points for self-NN distances")
        dist, _ = self._tree.query(self._points, k=2)
        return dist[:, 1]


@dataclass(frozen=True)
class NormalizationTransform:
    """Centering + isotropic scaling: ``normalized = (p - offset) * scale``."""

    offset: np.ndarray
    scale: float

    def apply(self, points):
        return (as_points(points) - self.offset) * self.scale

    def invert(self, points):
        return as_points(points) / self.scale + self.offset


def _rewrap(shape, new_points):
    if isinstance(shape, TriMesh):
        return TriMesh(new_points, shape.triangles)
    if isinstance(shape, PointCloud):
        return PointCloud(new_points)
    return new_points


def normalize_to_unit_sphere(shape):
    """Center a shape at the origin and scale it to fit the unit sphere exactly.

    Returns the normalized shape (same type as the input) and the
    :class:`NormalizationTransform` that was applied; ``transform.invert``
    reproduces the original coordinates.
    """
    pts = as_points(shape)
    if len(pts) == 0:
        raise EmptyGeometry("cannot normalize an empty shape")
    centroid = pts.mean(axis=0)
    radius = np.linalg.norm(pts - centroid, axis=1).max()
    if radius == 0.0:
        raise DegenerateExtent("shape has zero spatial extent")
    transform = NormalizationTransform(offset=centroid, scale=1.0 / radius)
    return _rewrap(shape, transform.apply(pts)), transform


def chamfer_distance(a, b, index_a=None, index_b=None):
    """Symmetric Chamfer distance between two point sets.

    Mean-of-squared convention, both directions summed:
    ``mean_a min_b ||a-b||^2 + mean_b min_a ||a-b||^2``. Prebuilt
    :class:`SpatialIndex` instances may be passed to amortize repeated calls.
    """
    pa = as_points(a, "a")
    pb = as_points(b, "b")
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyGeometry("Chamfer distance requires two non-empty clouds")
    if index_a is None:
        index_a = SpatialIndex(pa)
    if index_b is None:
        index_b = SpatialIndex(pb)
    d_ab = index_b.nearest_distances(pa)
    d_ba = index_a.nearest_distances(pb)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def farthest_point_sample(cloud, k, seed_index=0):
    """Greedy farthest-point subsampling.

    Starting from ``seed_index``, repeatedly selects the point maximizing the
    distance to the already-selected set (ties to the lowest index). Returns
    the ``k`` selected indices in selection order.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidArgument(f"k={k} out of range for cloud of {n} points")
    if not 0 <= seed_index < n:
        raise InvalidArgument(f"seed_index={seed_index} out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed_index
    dist = np.linalg.norm(pts - pts[seed_index], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1), out=dist)
    return selected


def remove_outliers(cloud, multiplier=3.0):
    """Drop points whose nearest-neighbor distance is anomalously large.

    A point survives iff its distance to the nearest other point is at most
    ``multiplier`` times the cloud's median nearest-neighbor distance.
    Survivor order is preserved.
    """
    pts = as_points(cloud)
    if len(pts) < 2:
        raise InsufficientPoints("outlier filtering needs at least 2 points")
    if multiplier <= 0:
        raise InvalidArgument("multiplier must be positive")
    nn = SpatialIndex(pts).self_nearest_distances()
    keep = nn <= multiplier * np.median(nn)
    return _rewrap(cloud if isinstance(cloud, PointCloud) else pts, pts[keep])


def colorize_by_height(shape):
    """Assign an RGB color to each point from its height above the z-minimum.

    The height is quantized to a 16-bit value
    ``d = floor((z - z_min) / (z_max - z_min) * 65535)`` which is split into
    channels ``(d // 256, d // 256, d mod 256)``. Returns an (N, 3) uint8 array.
    """
    pts = as_points(shape)
    if len(pts) == 0:
        raise EmptyGeometry("cannot colorize an empty shape")
    z = pts[:, 2]
    z_min, z_max = z.min(), z.max()
    if z_max == z_min:
        raise DegenerateExtent("z extent is zero; height colors are undefined")
    d = np.floor((z - z_min) / (z_max - z_min) * 65535.0).astype(np.int64)
    high = d // 256
    colors = np.stack([high, high, d - 256 * high], axis=1)
    return colors.astype(np.uint8)


def mesh_edges(mesh):
    """Unique undirected edges of a mesh as a lexicographically sorted (E, 2) array."""
    tris = mesh.triangles
    if tris.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def geodesic_distances(mesh, source_vertex):
    """Shortest-path distance along mesh edges from one vertex to all vertices.

    Edges are weighted by Euclidean length; vertices unreachable from the
    source get ``+inf``. This is the edge-graph approximation of the geodesic
    metric, not an exact polyhedral geodesic.
    """
    n = len(mesh)
    if not 0 <= source_vertex < n:
        raise InvalidArgument(f"source vertex {source_vertex} out of range")
    edges = mesh_edges(mesh)
    if edges.size == 0:
        out = np.full(n, np.inf)
        out[source_vertex] = 0.0
        return out
    weights = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    graph = coo_matrix(
        (np.concatenate([weights, weights]),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(n, n),
    ).tocsr()
    return _csgraph_dijkstra(graph, directed=False, indices=source_vertex)


def surface_area(mesh):
    """Total area of all triangles."""
    if mesh.triangles.size == 0:
        return 0.0
    v = mesh.vertices
    t = mesh.triangles
    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return float(0.5 * np.linalg.norm(cross, axis=1).sum())
