"""Velocity-field flow model: MLP field, RK4 integration, losses, training.

The deformation is the solution of dy/dt = f(y, t) where f is a small MLP on
(x, y, z, t). Training fits the field so that integrating the source points
across the flow interval matches the target (Chamfer), passes near guidance
clouds at interior times (Chamfer), and keeps local neighborhoods rigid
(ARAP). Gradients are exact reverse-mode derivatives of the discrete
objective: backpropagation through the unrolled RK4 steps, with
nearest-neighbor assignments and per-vertex rotations treated as constants of
the current evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DivergedFlow, EmptyGeometry, InvalidArgument, NonFiniteInput
from .geometry import PointCloud, as_points, mesh_edges

__all__ = [
    "VelocityField",
    "ODEConfig",
    "LossWeights",
    "NeighborGraph",
    "FlowTrainConfig",
    "eval_velocity",
    "integrate_flow",
    "arap_energy",
    "optimal_rotations",
    "loss_total",
    "gradient",
    "train_flow",
    "to_checkpoint_dict",
    "from_checkpoint_dict",
]

_ACTIVATIONS = {
    # value, derivative expressed through the activation output
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda y: 1.0 - np.exp(-y)),
}


@dataclass
class VelocityField:
    """MLP velocity field f(y, t): input (x, y, z, t), output a 3-vector."""

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise InvalidArgument("weights and biases must be non-empty and parallel")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        dims = self.dims
        if dims[0] != 4 or dims[-1] != 3:
            raise InvalidArgument("field must map R^4 (xyz + time) to R^3")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidArgument(f"layer {i} has inconsistent shapes")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise InvalidArgument(f"layer {i} does not chain with layer {i - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NonFiniteInput(f"layer {i} has non-finite parameters")

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def initialize(cls, hidden_dims=(128, 128, 128), activation="tanh", seed=0):
        """Glorot-uniform hidden layers; zero final layer, so the initial flow
        is the identity map."""
        rng = np.random.default_rng(seed)
        dims = [4, *hidden_dims, 3]
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        weights[-1] = np.zeros_like(weights[-1])
        return cls(weights, biases, activation)

    def zero_grads(self):
        return ([np.zeros_like(w) for w in self.weights],
                [np.zeros_like(b) for b in self.biases])


@dataclass(frozen=True)
class ODEConfig:
    """Flow interval and fixed-step integrator settings.

    The source shape sits at ``t1`` and flows to its target prediction at
    ``t0`` (signed integration; ``t1 > t0`` by default).
    """

    t0: float = 0.0
    t1: float = 0.5
    steps: int = 32
    scheme: str = "rk4"

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.t0 == self.t1:
            raise InvalidArgument("flow interval is empty (t0 == t1)")
        if self.scheme != "rk4":
            raise InvalidArgument(f"unsupported scheme {self.scheme!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_cd_inter: float = 1.0
    lambda_cd_final: float = 10.0
    lambda_arap: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cd_inter, self.lambda_cd_final, self.lambda_arap) < 0:
            raise InvalidArgument("loss weights must be nonnegative")


class NeighborGraph:
    """Symmetric vertex adjacency with uniform weights, CSR layout.

    ``src``/``dst`` list every directed edge (both orientations), grouped by
    source vertex.
    """

    def __init__(self, offsets, indices):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        n = len(self.offsets) - 1
        counts = np.diff(self.offsets)
        self.src = np.repeat(np.arange(n, dtype=np.int64), counts)
        self.dst = self.indices
        if (self.src == self.dst).any():
            raise InvalidArgument("self-loops are not allowed")
        forward = {(int(a), int(b)) for a, b in zip(self.src, self.dst)}
        if {(b, a) for a, b in forward} != forward:
            raise InvalidArgument("neighbor graph must be symmetric")

    def __len__(self):
        return len(self.offsets) - 1

    def neighbors(self, i):
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    @classmethod
    def _from_pairs(cls, n, pairs):
        # pairs: unique undirected (i < j); expand to both directions.
        both = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else np.zeros((0, 2), np.int64)
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=n)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(offsets, both[:, 1])

    @classmethod
    def from_mesh(cls, mesh):
        return cls._from_pairs(len(mesh), mesh_edges(mesh))

    @classmethod
    def from_points_knn(cls, points, k=6):
        pts = as_points(points)
        if len(pts) < 2:
            raise InvalidArgument("k-NN graph needs at least 2 points")
        k = min(k, len(pts) - 1)
        _, idx = cKDTree(pts).query(pts, k=k + 1)
        src = np.repeat(np.arange(len(pts)), k)
        dst = idx[:, 1:].ravel()
        pairs = np.stack([src, dst], axis=1)
        pairs.sort(axis=1)
        return cls._from_pairs(len(pts), np.unique(pairs, axis=0))


# ---------------------------------------------------------------------------
# MLP forward / vector-Jacobian product


def _mlp_forward(fieldnet, x):
    act, _ = _ACTIVATIONS[fieldnet.activation]
    h = x
    cache = [x]
    last = len(fieldnet.weights) - 1
    for layer, (w, b) in enumerate(zip(fieldnet.weights, fieldnet.biases)):
        z = h @ w + b
        h = act(z) if layer < last else z
        cache.append(h)
    return h, cache


def _mlp_vjp(fieldnet, x, g_out, grads_w, grads_b):
    """Backprop ``g_out`` through the MLP at input ``x``.

    Accumulates parameter gradients in-place; returns the gradient w.r.t. x.
    """
    _, cache = _mlp_forward(fieldnet, x)
    _, act_deriv = _ACTIVATIONS[fieldnet.activation]
    last = len(fieldnet.weights) - 1
    g = g_out
    for layer in range(last, -1, -1):
        if layer < last:
            g = g * act_deriv(cache[layer + 1])
        grads_w[layer] += cache[layer].T @ g
        grads_b[layer] += g.sum(axis=0)
        g = g @ fieldnet.weights[layer].T
    return g


def _with_time(points, t):
    return np.concatenate([points, np.full((len(points), 1), t)], axis=1)


def eval_velocity(fieldnet, points, t):
    """Velocity vectors of the field at the given points and time."""
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgument("points must have shape (N, 3)")
    if not (np.isfinite(pts).all() and np.isfinite(t)):
        raise NonFiniteInput("velocity queried at non-finite points or time")
    out, _ = _mlp_forward(fieldnet, _with_time(pts, t))
    return out


# ---------------------------------------------------------------------------
# RK4 integration and its reverse sweep


def _rk4_step(fieldnet, x, t, h):
    def vel(pts, tt):
        return _mlp_forward(fieldnet, _with_time(pts, tt))[0]

    k1 = vel(x, t)
    x2 = x + 0.5 * h * k1
    k2 = vel(x2, t + 0.5 * h)
    x3 = x + 0.5 * h * k2
    k3 = vel(x3, t + 0.5 * h)
    x4 = x + h * k3
    k4 = vel(x4, t + h)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x_next, (x, x2, x3, x4, t, h)


def _rk4_backstep(fieldnet, record, g_next, grads_w, grads_b):
    x, x2, x3, x4, t, h = record

    def vjp(pts, tt, g):
        return _mlp_vjp(fieldnet, _with_time(pts, tt), g, grads_w, grads_b)[:, :3]

    g_k4 = (h / 6.0) * g_next
    g_x4 = vjp(x4, t + h, g_k4)
    g_k3 = (h / 3.0) * g_next + h * g_x4
    g_x3 = vjp(x3, t + 0.5 * h, g_k3)
    g_k2 = (h / 3.0) * g_next + 0.5 * h * g_x3
    g_x2 = vjp(x2, t + 0.5 * h, g_k2)
    g_k1 = (h / 6.0) * g_next + 0.5 * h * g_x2
    g_x1 = vjp(x, t, g_k1)
    return g_next + g_x1 + g_x2 + g_x3 + g_x4


def _integrate_tape(fieldnet, start, t_a, t_b, steps):
    h = (t_b - t_a) / steps
    x = start
    states = [x]
    records = []
    for i in range(steps):
        x, record = _rk4_step(fieldnet, x, t_a + i * h, h)
        if not np.isfinite(x).all():
            raise DivergedFlow(f"trajectory became non-finite at step {i + 1}/{steps}")
        states.append(x)
        records.append(record)
    return states, records


def integrate_flow(fieldnet, start, t_a, t_b, steps):
    """Fixed-step RK4 integration of the field from ``t_a`` to ``t_b``.

    Points evolve independently; the step is signed, so integrating back from
    ``t_b`` to ``t_a`` reverses the flow.
    """
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    pts = as_points(start, "start")
    states, _ = _integrate_tape(fieldnet, pts, float(t_a), float(t_b), int(steps))
    out = states[-1]
    return PointCloud(out) if isinstance(start, PointCloud) else out


# ---------------------------------------------------------------------------
# ARAP energy


def optimal_rotations(rest, deformed, graph):
    """Best-fit rotation of each vertex neighborhood (SVD, det-corrected)."""
    r_e = rest[graph.src] - rest[graph.dst]
    d_e = deformed[graph.src] - deformed[graph.dst]
    n = len(graph)
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, graph.src, r_e[:, :, None] * d_e[:, None, :])
    u, _, vt = np.linalg.svd(cov)
    rot = np.einsum("nji,nkj->nik", vt, u)  # V @ U^T per vertex
    det = np.linalg.det(rot)
    # flip the smallest singular direction where a reflection appeared
    vt_fixed = vt.copy()
    vt_fixed[:, 2, :] *= det[:, None]
    rot = np.einsum("nji,nkj->nik", vt_fixed, u)
    return rot


def _arap_residuals(rest, deformed, graph, rotations):
    r_e = rest[graph.src] - rest[graph.dst]
    d_e = deformed[graph.src] - deformed[graph.dst]
    rotated = np.einsum("nij,nj->ni", rotations[graph.src], r_e)
    return d_e - rotated


def arap_energy(rest, deformed, graph):
    """As-rigid-as-possible distortion of ``deformed`` relative to ``rest``.

    Sum over directed edges of ``||(d_i - d_j) - R_i (r_i - r_j)||^2`` with
    per-vertex rotations fit by SVD. Zero exactly when the deformation is a
    global rigid motion.
    """
    rest = as_points(rest, "rest")
    deformed = as_points(deformed, "deformed")
    if len(rest) != len(deformed) or len(rest) != len(graph):
        raise InvalidArgument("rest, deformed, and graph sizes must agree")
    if len(graph.src) == 0:
        return 0.0
    res = _arap_residuals(rest, deformed, graph, optimal_rotations(rest, deformed, graph))
    return float((res * res).sum())


def _arap_energy_grad(rest, deformed, graph):
    """Energy and gradient w.r.t. deformed positions, rotations held fixed."""
    if len(graph.src) == 0:
        return 0.0, np.zeros_like(deformed)
    rot = optimal_rotations(rest, deformed, graph)
    res = _arap_residuals(rest, deformed, graph, rot)
    grad = np.zeros_like(deformed)
    np.add.at(grad, graph.src, 2.0 * res)
    np.add.at(grad, graph.dst, -2.0 * res)
    return float((res * res).sum()), grad


# ---------------------------------------------------------------------------
# Chamfer term (differentiable w.r.t. the moving cloud)


def _nn_indices(queries, refs, block=2048):
    out = np.empty(len(queries), dtype=np.int64)
    ref_sq = (refs * refs).sum(axis=1)
    for s in range(0, len(queries), block):
        q = queries[s:s + block]
        d2 = (q * q).sum(axis=1)[:, None] + ref_sq[None, :] - 2.0 * (q @ refs.T)
        out[s:s + len(q)] = d2.argmin(axis=1)
    return out


def _chamfer_value_grad(moving, fixed):
    """Symmetric mean-of-squared Chamfer and its gradient w.r.t. ``moving``."""
    j = _nn_indices(moving, fixed)
    i = _nn_indices(fixed, moving)
    diff_mf = moving - fixed[j]
    diff_fm = fixed - moving[i]
    value = float((diff_mf * diff_mf).sum() / len(moving) + (diff_fm * diff_fm).sum() / len(fixed))
    grad = 2.0 * diff_mf / len(moving)
    np.add.at(grad, i, -2.0 * diff_fm / len(fixed))
    return value, grad


# ---------------------------------------------------------------------------
# Total loss and gradient


def _snap_guidance(guidance, ode):
    """Map each guidance frame time to the nearest interior trajectory index."""
    if guidance is None:
        return []
    frames = getattr(guidance, "frames", None)
    times = getattr(guidance, "times", None)
    if frames is None or times is None:
        raise InvalidArgument("guidance must provide .frames and .times")
    if len(frames) == 0:
        return []
    times = np.asarray(times, dtype=np.float64)
    if len(times) != len(frames):
        raise InvalidArgument("guidance frames and times differ in length")
    span = ode.t0 - ode.t1
    lo, hi = sorted((ode.t0, ode.t1))
    if (times <= lo).any() or (times >= hi).any():
        raise InvalidArgument("guidance times must lie strictly inside the flow interval")
    snapped = []
    for frame, t in zip(frames, times):
        idx = int(np.ceil((t - ode.t1) / span * ode.steps - 0.5))
        idx = min(max(idx, 1), ode.steps - 1)
        snapped.append((idx, as_points(frame, "guidance frame")))
    return snapped


def _loss_pieces(fieldnet, source, guidance, target, graph, weights, ode, want_grads):
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyGeometry("source and target must be non-empty")
    snapped = _snap_guidance(guidance, ode)
    states, records = _integrate_tape(fieldnet, src, ode.t1, ode.t0, ode.steps)
    final = states[-1]

    cd_final, g_final = _chamfer_value_grad(final, tgt)
    if weights.lambda_arap != 0.0 and graph is None:
        raise InvalidArgument("ARAP weight is nonzero but no neighbor graph was given")
    if graph is not None and weights.lambda_arap != 0.0:
        if len(graph) != len(src):
            raise InvalidArgument("neighbor graph size does not match the source")
        arap, g_arap = _arap_energy_grad(src, final, graph)
    else:
        arap, g_arap = 0.0, np.zeros_like(final)

    cd_inter = 0.0
    interior = {}
    for idx, frame in snapped:
        value, g = _chamfer_value_grad(states[idx], frame)
        cd_inter += value / len(snapped)
        if want_grads:
            scale = weights.lambda_cd_inter / len(snapped)
            interior[idx] = interior.get(idx, 0.0) + scale * g

    total = (weights.lambda_cd_inter * cd_inter
             + weights.lambda_cd_final * cd_final
             + weights.lambda_arap * arap)
    breakdown = {"cd_inter": cd_inter, "cd_final": cd_final, "arap": arap}
    if not want_grads:
        return total, breakdown, None

    grads_w, grads_b = fieldnet.zero_grads()
    g = weights.lambda_cd_final * g_final + weights.lambda_arap * g_arap
    for i in range(ode.steps - 1, -1, -1):
        g = _rk4_backstep(fieldnet, records[i], g, grads_w, grads_b)
        if i in interior:
            g = g + interior[i]
    return total, breakdown, (grads_w, grads_b)


def loss_total(fieldnet, source, guidance, target, graph, weights, ode):
    """Weighted flow-fitting objective and its per-term breakdown.

    One trajectory from ``ode.t1`` (source) to ``ode.t0`` supplies all terms:
    guidance frames are compared at their nearest trajectory states, the final
    state is compared to the target, and ARAP is measured between the source
    and the final state. The breakdown holds the unweighted term values.
    """
    total, breakdown, _ = _loss_pieces(
        fieldnet, source, guidance, target, graph, weights, ode, want_grads=False)
    return total, breakdown


def gradient(fieldnet, source, guidance, target, graph, weights, ode):
    """Parameter gradients of :func:`loss_total` (reverse mode, exact for the
    discrete objective)."""
    _, _, grads = _loss_pieces(
        fieldnet, source, guidance, target, graph, weights, ode, want_grads=True)
    return grads


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class FlowTrainConfig:
    iterations: int = 4000
    learning_rate: float = 1e-3
    weights: LossWeights = dc_field(default_factory=LossWeights)
    ode: ODEConfig = dc_field(default_factory=ODEConfig)
    hidden_dims: tuple = (128, 128, 128)
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning rate must be positive")


def train_flow(source, guidance, target, graph, config):
    """Adam-optimize a fresh velocity field; deterministic for a fixed seed.

    Returns the trained field and the loss history, an ``(iterations, 4)``
    array with columns total, cd_inter, cd_final, arap (term values
    unweighted).
    """
    fieldnet = VelocityField.initialize(config.hidden_dims, config.activation, config.seed)
    src = as_points(source, "source")
    tgt = as_points(target, "target")
    params = fieldnet.weights + fieldnet.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    history = np.empty((config.iterations, 4))
    for it in range(config.iterations):
        total, breakdown, (gw, gb) = _loss_pieces(
            fieldnet, src, guidance, tgt, graph, config.weights, config.ode, want_grads=True)
        if not np.isfinite(total):
            raise DivergedFlow(f"loss became non-finite at iteration {it}")
        history[it] = (total, breakdown["cd_inter"], breakdown["cd_final"], breakdown["arap"])
        grads = gw + gb
        step = config.learning_rate * np.sqrt(1.0 - beta2 ** (it + 1)) / (1.0 - beta1 ** (it + 1))
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= beta1
            mi += (1.0 - beta1) * g
            vi *= beta2
            vi += (1.0 - beta2) * g * g
            p -= step * mi / (np.sqrt(vi) + eps)
    return fieldnet, history


# ---------------------------------------------------------------------------
# Checkpoint (de)serialization


def to_checkpoint_dict(fieldnet, t0, t1):
    return {
        "dims": fieldnet.dims,
        "activation": fieldnet.activation,
        "layers": [{"w": w.tolist(), "b": b.tolist()}
                   for w, b in zip(fieldnet.weights, fieldnet.biases)],
        "t0": float(t0),
        "t1": float(t1),
    }


def from_checkpoint_dict(data):
    try:
        layers = data["layers"]
        fieldnet = VelocityField(
            [np.asarray(layer["w"], dtype=np.float64) for layer in layers],
            [np.asarray(layer["b"], dtype=np.float64) for layer in layers],
            data["activation"],
        )
        return fieldnet, float(data["t0"]), float(data["t1"])
    except (KeyError, TypeError) as exc:
        raise InvalidArgument(f"malformed flow checkpoint: missing {exc}") from exc
