import math

import numpy as np
import pytest

from flowreg.errors import DivergedFlow, InvalidArgument, NonFiniteInput
from flowreg.flow import (
    FlowTrainConfig,
    LossWeights,
    NeighborGraph,
    ODEConfig,
    VelocityField,
    arap_energy,
    eval_velocity,
    from_checkpoint_dict,
    gradient,
    integrate_flow,
    loss_total,
    to_checkpoint_dict,
    train_flow,
)
from flowreg.geometry import chamfer_distance
from flowreg.synth import bar_mesh, sphere_cloud


def constant_field(c):
    w = np.zeros((4, 3))
    return VelocityField([w], [np.asarray(c, dtype=float)])


def identity_field():
    w = np.zeros((4, 3))
    w[:3, :3] = np.eye(3)
    return VelocityField([w], [np.zeros(3)])


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def pair_graph():
    return NeighborGraph([0, 1, 2], [1, 0])


class TestEvalVelocity:
    def test_zero_parameters_zero_velocity(self, rng):
        pts = rng.normal(size=(10, 3))
        assert np.array_equal(eval_velocity(constant_field((0, 0, 0)), pts, 0.3), np.zeros((10, 3)))

    def test_identity_linear_layer(self, rng):
        pts = rng.normal(size=(7, 3))
        out = eval_velocity(identity_field(), pts, 0.9)
        assert np.allclose(out, pts, atol=1e-15)

    def test_tiny_network_hand_computation(self):
        w1 = np.array([[0.5, -1.0], [0.25, 0.0], [0.0, 0.75], [1.0, 0.5]])
        b1 = np.array([0.1, -0.2])
        w2 = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 0.5]])
        b2 = np.array([0.0, 0.3, -0.1])
        net = VelocityField([w1, w2], [b1, b2])
        p, t = (0.2, -0.4, 1.0), 0.5
        h1 = math.tanh(0.5 * 0.2 + 0.25 * -0.4 + 0.0 * 1.0 + 1.0 * 0.5 + 0.1)
        h2 = math.tanh(-1.0 * 0.2 + 0.0 * -0.4 + 0.75 * 1.0 + 0.5 * 0.5 - 0.2)
        expected = [h1 * 1.0, h2 * -1.0 + 0.3, h1 * 2.0 + h2 * 0.5 - 0.1]
        out = eval_velocity(net, [p], t)
        assert np.allclose(out[0], expected, atol=1e-15)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteInput):
            eval_velocity(identity_field(), [(0.0, 0.0, np.inf)], 0.0)


class TestIntegrateFlow:
    def test_zero_field_identity(self, rng):
        pts = rng.normal(size=(12, 3))
        out = integrate_flow(constant_field((0, 0, 0)), pts, 0.5, 0.0, 8)
        assert np.array_equal(out, pts)

    def test_constant_field_exact(self, rng):
        pts = rng.normal(size=(9, 3))
        c = np.array([0.3, -1.2, 0.7])
        out = integrate_flow(constant_field(c), pts, 0.0, 0.5, 4)
        assert np.allclose(out, pts + 0.5 * c, atol=1e-14)
        back = integrate_flow(constant_field(c), pts, 0.5, 0.0, 4)
        assert np.allclose(back, pts - 0.5 * c, atol=1e-14)

    def test_linear_field_matches_exponential(self, rng):
        pts = rng.normal(size=(20, 3))
        out = integrate_flow(identity_field(), pts, 0.0, 0.5, 64)
        expected = pts * math.exp(0.5)
        assert np.abs(out - expected).max() / np.abs(expected).max() < 1e-8

    def test_fourth_order_convergence(self, rng):
        pts = rng.normal(size=(30, 3))
        exact = pts * math.exp(0.5)
        errs = [np.abs(integrate_flow(identity_field(), pts, 0.0, 0.5, n) - exact).max()
                for n in (8, 16, 32)]
        for coarse, fine in zip(errs, errs[1:]):
            assert 12.0 <= coarse / fine <= 20.0

    def test_divergence_detected(self, rng):
        with pytest.raises(DivergedFlow):
            integrate_flow(identity_field(), rng.normal(size=(4, 3)), 0.0, 2000.0, 100)


class TestNeighborGraph:
    def test_from_mesh_symmetric(self, small_bar):
        graph = NeighborGraph.from_mesh(small_bar)
        assert len(graph) == len(small_bar)
        assert 1 in graph.neighbors(0) and 0 in graph.neighbors(1)

    def test_from_knn_symmetric(self, rng):
        graph = NeighborGraph.from_points_knn(rng.normal(size=(30, 3)), k=4)
        for i in range(30):
            for j in graph.neighbors(i):
                assert i in graph.neighbors(j)

    def test_self_loop_rejected(self):
        with pytest.raises(InvalidArgument):
            NeighborGraph([0, 1, 2], [0, 0])


class TestArapEnergy:
    def test_identity_zero(self, small_bar):
        graph = NeighborGraph.from_mesh(small_bar)
        assert arap_energy(small_bar.vertices, small_bar.vertices, graph) == 0.0

    def test_rigid_motion_zero(self, small_bar, rng):
        graph = NeighborGraph.from_mesh(small_bar)
        for _ in range(5):
            rot = rotation_matrix(rng.normal(size=3), rng.uniform(0, np.pi))
            moved = small_bar.vertices @ rot.T + rng.normal(size=3)
            assert arap_energy(small_bar.vertices, moved, graph) < 1e-8

    def test_single_edge_double_scale(self):
        rest = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert arap_energy(rest, 2.0 * rest, pair_graph()) == pytest.approx(2.0, abs=1e-9)

    def test_simultaneous_rigid_invariance(self, small_bar, rng):
        graph = NeighborGraph.from_mesh(small_bar)
        deformed = small_bar.vertices + 0.05 * rng.normal(size=small_bar.vertices.shape)
        base = arap_energy(small_bar.vertices, deformed, graph)
        rot = rotation_matrix((1.0, 2.0, 0.5), 1.1)
        shift = np.array([3.0, -1.0, 2.0])
        moved = arap_energy(small_bar.vertices @ rot.T + shift, deformed @ rot.T + shift, graph)
        assert moved == pytest.approx(base, rel=1e-9)

    def test_size_mismatch(self, small_bar):
        graph = NeighborGraph.from_mesh(small_bar)
        with pytest.raises(InvalidArgument):
            arap_energy(small_bar.vertices, small_bar.vertices[:-1], graph)


class GuidanceStub:
    def __init__(self, frames, times):
        self.frames = frames
        self.times = times


class TestLossTotal:
    def setup_method(self):
        self.ode = ODEConfig(steps=8)

    def test_perfect_fit_zero(self):
        cloud = sphere_cloud(40).points
        total, terms = loss_total(constant_field((0, 0, 0)), cloud, None, cloud,
                                  None, LossWeights(1, 10, 0), self.ode)
        assert total == 0.0
        assert terms == {"cd_inter": 0.0, "cd_final": 0.0, "arap": 0.0}

    def test_translated_target_value(self):
        cloud = sphere_cloud(40).points
        total, terms = loss_total(constant_field((0, 0, 0)), cloud, None,
                                  cloud + np.array([1.0, 0.0, 0.0]),
                                  None, LossWeights(1, 10, 0), self.ode)
        assert terms["cd_final"] == pytest.approx(2.0, abs=1e-12)
        assert total == pytest.approx(20.0, abs=1e-11)

    def test_weight_zeroing(self):
        cloud = sphere_cloud(30).points
        tgt = cloud * 1.3
        frames = GuidanceStub([cloud * 1.1], [0.25])
        total, terms = loss_total(constant_field((0, 0, 0)), cloud, frames, tgt,
                                  None, LossWeights(0, 1, 0), self.ode)
        assert total == pytest.approx(terms["cd_final"])

    def test_guidance_term(self):
        cloud = sphere_cloud(30).points
        frames = GuidanceStub([cloud + np.array([1.0, 0.0, 0.0])], [0.25])
        _, terms = loss_total(constant_field((0, 0, 0)), cloud, frames, cloud,
                              None, LossWeights(1, 10, 0), self.ode)
        assert terms["cd_inter"] == pytest.approx(2.0, abs=1e-12)

    def test_guidance_time_outside_interval_rejected(self):
        cloud = sphere_cloud(10).points
        frames = GuidanceStub([cloud], [0.7])
        with pytest.raises(InvalidArgument):
            loss_total(constant_field((0, 0, 0)), cloud, frames, cloud,
                       None, LossWeights(1, 10, 0), self.ode)


def flatten_params(net):
    return np.concatenate([a.ravel() for a in net.weights + net.biases])


def write_params(net, vec):
    pos = 0
    for arr in net.weights + net.biases:
        arr[...] = vec[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size


def gradient_check(seed, rtol=1e-4):
    rng = np.random.default_rng(seed)
    source = rng.normal(size=(20, 3)) * 0.5
    target = source + np.array([0.4, 0.0, 0.1]) + 0.05 * rng.normal(size=(20, 3))
    frames = GuidanceStub(
        [source + 0.1 * rng.normal(size=(20, 3)), source + 0.2 * rng.normal(size=(20, 3))],
        [0.35, 0.15],
    )
    graph = NeighborGraph.from_points_knn(source, k=4)
    net = VelocityField.initialize(hidden_dims=(8,), seed=seed)
    # give the final layer nonzero weights so every parameter participates
    rng2 = np.random.default_rng(seed + 1000)
    net.weights[-1][...] = 0.1 * rng2.normal(size=net.weights[-1].shape)
    weights = LossWeights(1.0, 10.0, 2.0)
    ode = ODEConfig(steps=8)

    gw, gb = gradient(net, source, frames, target, graph, weights, ode)
    analytic = np.concatenate([a.ravel() for a in gw + gb])

    theta = flatten_params(net)
    h = 1e-5
    fd = np.empty_like(theta)
    for i in range(len(theta)):
        bump = theta.copy()
        bump[i] = theta[i] + h
        write_params(net, bump)
        hi = loss_total(net, source, frames, target, graph, weights, ode)[0]
        bump[i] = theta[i] - h
        write_params(net, bump)
        lo = loss_total(net, source, frames, target, graph, weights, ode)[0]
        fd[i] = (hi - lo) / (2 * h)
    write_params(net, theta)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
    return np.abs(fd - analytic) / denom


class TestGradient:
    def test_zero_loss_zero_gradient(self):
        cloud = sphere_cloud(25).points
        gw, gb = gradient(constant_field((0, 0, 0)), cloud, None, cloud,
                          None, LossWeights(1, 10, 0), ODEConfig(steps=4))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in gw + gb)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_finite_differences(self, seed):
        rel = gradient_check(seed)
        assert rel.max() < 1e-4

    def test_linear_in_final_weight(self, rng):
        source = rng.normal(size=(15, 3))
        target = source * 1.2
        net = VelocityField.initialize(hidden_dims=(8,), seed=3)
        net.weights[-1][...] = 0.05 * rng.normal(size=net.weights[-1].shape)
        ode = ODEConfig(steps=4)
        g1w, g1b = gradient(net, source, None, target, None, LossWeights(0, 1, 0), ode)
        g2w, g2b = gradient(net, source, None, target, None, LossWeights(0, 2, 0), ode)
        for a, b in zip(g1w + g1b, g2w + g2b):
            assert np.allclose(2.0 * a, b, rtol=1e-12)


@pytest.fixture(scope="module")
def trained_translation():
    source = sphere_cloud(128).points
    target = source + np.array([0.5, 0.0, 0.0])
    config = FlowTrainConfig(
        iterations=350, learning_rate=1e-3,
        weights=LossWeights(1.0, 10.0, 0.5),
        ode=ODEConfig(steps=12), hidden_dims=(48, 48), seed=11,
    )
    graph = NeighborGraph.from_points_knn(source, k=6)
    net, history = train_flow(source, None, target, graph, config)
    return source, target, config, net, history


class TestTrainFlow:
    def test_self_registration_stays_put(self):
        cloud = sphere_cloud(80).points
        config = FlowTrainConfig(iterations=40, weights=LossWeights(1, 10, 0),
                                 ode=ODEConfig(steps=6), hidden_dims=(16,), seed=0)
        net, history = train_flow(cloud, None, cloud, None, config)
        assert history[-1, 2] <= history[0, 2]
        assert history[-1, 2] < 1e-3

    def test_translation_recovery(self, trained_translation):
        source, target, config, net, history = trained_translation
        out = integrate_flow(net, source, config.ode.t1, config.ode.t0, config.ode.steps)
        assert chamfer_distance(out, target) < 1e-3
        displacement = (out - source).mean(axis=0)
        assert np.allclose(displacement, (0.5, 0.0, 0.0), atol=0.05)

    def test_invertibility_of_trained_field(self, trained_translation):
        source, _, config, net, _ = trained_translation
        fwd = integrate_flow(net, source, config.ode.t1, config.ode.t0, 32)
        back = integrate_flow(net, fwd, config.ode.t0, config.ode.t1, 32)
        mean_err = np.linalg.norm(back - source, axis=1).mean()
        assert mean_err < 1e-5

    def test_arap_weight_monotonicity(self):
        bar = bar_mesh(nx=10, ny=3)
        source = bar.vertices
        target = source * np.array([1.6, 0.7, 1.0]) + np.array([0.0, 0.3, 0.2])
        graph = NeighborGraph.from_mesh(bar)
        outs = {}
        for lam in (2.0, 1e6):
            config = FlowTrainConfig(iterations=120, weights=LossWeights(1, 10, lam),
                                     ode=ODEConfig(steps=8), hidden_dims=(24, 24), seed=5)
            net, _ = train_flow(source, None, target, graph, config)
            out = integrate_flow(net, source, 0.5, 0.0, 8)
            outs[lam] = arap_energy(source, out, graph)
        assert outs[1e6] < outs[2.0]

    def test_determinism_bitwise(self):
        cloud = sphere_cloud(40).points
        target = cloud * 1.2
        config = FlowTrainConfig(iterations=25, weights=LossWeights(1, 10, 0),
                                 ode=ODEConfig(steps=4), hidden_dims=(12,), seed=9)
        _, h1 = train_flow(cloud, None, target, None, config)
        _, h2 = train_flow(cloud, None, target, None, config)
        assert np.array_equal(h1, h2)

    def test_diverged_loss_raises(self):
        cloud = sphere_cloud(10).points
        config = FlowTrainConfig(iterations=5, weights=LossWeights(1, 10, 0),
                                 ode=ODEConfig(steps=2), hidden_dims=(4,), seed=0)
        with pytest.raises(DivergedFlow):
            train_flow(cloud, None, cloud * 1e200, None, config)


def test_checkpoint_round_trip():
    net = VelocityField.initialize(hidden_dims=(8, 8), seed=2)
    data = to_checkpoint_dict(net, 0.0, 0.5)
    assert data["dims"] == [4, 8, 8, 3]
    restored, t0, t1 = from_checkpoint_dict(data)
    assert (t0, t1) == (0.0, 0.5)
    for a, b in zip(net.weights + net.biases, restored.weights + restored.biases):
        assert np.array_equal(a, b)
