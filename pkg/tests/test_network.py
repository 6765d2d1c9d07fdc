import numpy as np
import pytest

from scrslam.errors import SerializationError
from scrslam.network import (
    AdamOptimizer,
    HomMlp,
    HomMlpConfig,
    TriMlp,
    TriplaneConfig,
    axis_centers,
    coordinates_from_votes,
    deserialize,
    make_bases,
    serialize,
)

from conftest import (
    finite_difference_gradients,
    max_relative_gradient_error,
    small_hommlp,
    small_trimlp,
)


class TestBases:
    def test_two_cell_unit_box(self):
        config = TriplaneConfig(r_x=2, r_y=2, r_z=2, bounds_min=(0, 0, 0),
                                bounds_max=(1, 1, 1), hidden_width=4,
                                hidden_depth=1, descriptor_dim=4)
        bases = make_bases(config)
        np.testing.assert_allclose(sorted(set(bases["xy"][:, :, 0].ravel())), [0.25, 0.75])
        np.testing.assert_allclose(sorted(set(bases["xy"][:, :, 1].ravel())), [0.25, 0.75])

    def test_three_cell_centers(self):
        np.testing.assert_allclose(axis_centers(-1.0, 1.0, 3), [-2 / 3, 0.0, 2 / 3])

    def test_mean_is_box_center(self):
        config = TriplaneConfig(r_x=5, r_y=7, r_z=4, bounds_min=(-1, 0, 2),
                                bounds_max=(3, 8, 11), hidden_width=4,
                                hidden_depth=1, descriptor_dim=4)
        center = (np.array(config.bounds_min) + config.bounds_max) / 2
        bases = make_bases(config)
        for plane, (ai, aj) in (("xy", (0, 1)), ("xz", (0, 2)), ("yz", (1, 2))):
            np.testing.assert_allclose(bases[plane][:, :, 0].mean(), center[ai])
            np.testing.assert_allclose(bases[plane][:, :, 1].mean(), center[aj])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TriplaneConfig(r_x=1)
        with pytest.raises(ValueError):
            TriplaneConfig(bounds_min=(0, 0, 0), bounds_max=(0, 1, 1))
        with pytest.raises(ValueError):
            HomMlpConfig(hidden_width=0)


class TestTriMlpForward:
    def test_zero_init_outputs_box_center(self, rng):
        config = TriplaneConfig(r_x=6, r_y=5, r_z=4, bounds_min=(-1, -2, 0),
                                bounds_max=(3, 2, 4), hidden_width=16,
                                hidden_depth=2, descriptor_dim=8)
        net = TriMlp.create(config, rng)
        out, _ = net.forward(rng.normal(size=(20, 8)).astype(np.float32))
        center = (np.array(config.bounds_min) + config.bounds_max) / 2
        np.testing.assert_allclose(out, np.tile(center, (20, 1)), atol=1e-6)

    @staticmethod
    def _saturate(net, cell):
        """Force one logit per plane to +1e4, selecting cell (a, b, c)."""
        a, b, c = cell
        cfg = net.config
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        xy = a * cfg.r_y + b
        xz = cfg.r_x * cfg.r_y + a * cfg.r_z + c
        yz = cfg.r_x * cfg.r_y + cfg.r_x * cfg.r_z + b * cfg.r_z + c
        for idx in (xy, xz, yz):
            net.biases[-1][idx] = 1e4

    def test_saturated_votes_hit_cell_center(self, rng):
        net = small_trimlp(rng, dtype=np.float32, randomize_head=False)
        cfg = net.config
        cell = (2, 1, 3)
        self._saturate(net, cell)
        out, _ = net.forward(rng.normal(size=(3, 6)).astype(np.float32))
        expected = [axis_centers(cfg.bounds_min[0], cfg.bounds_max[0], cfg.r_x)[cell[0]],
                    axis_centers(cfg.bounds_min[1], cfg.bounds_max[1], cfg.r_y)[cell[1]],
                    axis_centers(cfg.bounds_min[2], cfg.bounds_max[2], cfg.r_z)[cell[2]]]
        np.testing.assert_allclose(out, np.tile(expected, (3, 1)), atol=1e-6)

    def test_axis_averaging_across_planes(self, rng):
        # XY plane votes x = 0.25 while XZ votes x = 0.75: output x must be 0.5
        config = TriplaneConfig(r_x=2, r_y=2, r_z=2, bounds_min=(0, 0, 0),
                                bounds_max=(1, 1, 1), hidden_width=8,
                                hidden_depth=1, descriptor_dim=4)
        net = TriMlp.create(config, rng)
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        net.biases[-1][0 * 2 + 0] = 1e4                  # xy cell (0, 0): x=0.25
        net.biases[-1][4 + 1 * 2 + 0] = 1e4              # xz cell (1, 0): x=0.75
        net.biases[-1][8 + 0 * 2 + 0] = 1e4              # yz cell (0, 0)
        out, _ = net.forward(rng.normal(size=(1, 4)).astype(np.float32))
        assert out[0, 0] == pytest.approx(0.5, abs=1e-6)

    def test_distributions_normalized(self, rng):
        net = small_trimlp(rng)
        x = rng.normal(size=(64, 6))
        _, cache = net.forward(x, want_cache=True)
        for plane in ("xy", "xz", "yz"):
            c = cache.distributions[plane]
            assert (c >= 0).all()
            np.testing.assert_allclose(c.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)

    def test_outputs_inside_bounds(self, rng):
        net = small_trimlp(rng, dtype=np.float32)
        out, _ = net.forward(rng.normal(size=(10_000, 6)).astype(np.float32) * 5)
        lo = np.array(net.config.bounds_min) - 1e-5
        hi = np.array(net.config.bounds_max) + 1e-5
        assert (out >= lo).all() and (out <= hi).all()

    def test_axis_average_identity(self, rng):
        # reconstructed output == componentwise average of the plane estimates
        net = small_trimlp(rng)
        _, cache = net.forward(rng.normal(size=(32, 6)), want_cache=True)
        xy, xz, yz = (cache.plane_coords[p] for p in ("xy", "xz", "yz"))
        recon = np.stack([(xy[:, 0] + xz[:, 0]) / 2,
                          (xy[:, 1] + yz[:, 0]) / 2,
                          (xz[:, 1] + yz[:, 1]) / 2], axis=1)
        np.testing.assert_allclose(recon, cache.outputs, atol=1e-9)

    def test_forward_deterministic(self, rng):
        net = small_trimlp(rng, dtype=np.float32)
        x = rng.normal(size=(16, 6)).astype(np.float32)
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_many_to_one_votes(self):
        # different distributions with equal per-plane expectations agree
        config = TriplaneConfig(r_x=3, r_y=3, r_z=3, bounds_min=(-1, -1, -1),
                                bounds_max=(1, 1, 1), hidden_width=4,
                                hidden_depth=1, descriptor_dim=4)
        delta = {p: np.zeros((1, 3, 3)) for p in ("xy", "xz", "yz")}
        spread = {p: np.zeros((1, 3, 3)) for p in ("xy", "xz", "yz")}
        for p in ("xy", "xz", "yz"):
            delta[p][0, 1, 1] = 1.0                  # all mass on the center cell
            spread[p][0, 0, 0] = 0.5                 # opposite corners, same mean
            spread[p][0, 2, 2] = 0.5
        out_a, _ = coordinates_from_votes(config, delta)
        out_b, _ = coordinates_from_votes(config, spread)
        np.testing.assert_allclose(out_a, out_b, atol=1e-9)

    def test_dimension_mismatch(self, rng):
        net = small_trimlp(rng)
        with pytest.raises(ValueError):
            net.forward(rng.normal(size=(4, 7)))


class TestHomMlpForward:
    def test_zero_init_outputs_origin(self, rng):
        net = HomMlp.create(HomMlpConfig(descriptor_dim=8, hidden_width=16,
                                         hidden_depth=3), rng)
        out, _ = net.forward(rng.normal(size=(5, 8)).astype(np.float32))
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_hand_computed_single_layer(self):
        # one hidden layer, weights set by hand; expected value computed inline
        config = HomMlpConfig(descriptor_dim=2, hidden_width=2, hidden_depth=1,
                              w_epsilon=1e-6)
        net = HomMlp.create(config, np.random.default_rng(0), dtype=np.float64)
        net.weights[0][:] = [[1.0, -1.0], [0.5, 2.0]]
        net.biases[0][:] = [0.1, -0.2]
        net.weights[1][:] = [[1.0, 0.0, -1.0, 0.5],
                             [0.0, 2.0, 1.0, 0.0]]
        net.biases[1][:] = [0.0, 0.1, 0.0, 0.3]
        x = np.array([[0.4, 0.6]])
        h = np.maximum([0.4 * 1.0 + 0.6 * 0.5 + 0.1, 0.4 * -1.0 + 0.6 * 2.0 - 0.2], 0)
        raw = np.array([h[0], 2 * h[1] + 0.1, -h[0] + h[1], 0.5 * h[0] + 0.3])
        divisor = np.log1p(np.exp(raw[3])) + 1e-6
        expected = raw[:3] / divisor
        out, _ = net.forward(x)
        np.testing.assert_allclose(out[0], expected, rtol=1e-12)

    def test_identical_descriptors_identical_outputs(self, rng):
        net = small_hommlp(rng, dtype=np.float32)
        x = np.tile(rng.normal(size=(1, 6)).astype(np.float32), (40, 1))
        out, _ = net.forward(x)
        assert (out == out[0]).all()

    def test_skip_connections_change_output(self, rng):
        # depth 3 has one skip (layer 2); zeroing that layer's weights must
        # still pass the layer-0 activation through the identity branch
        net = small_hommlp(rng, depth=3)
        net.weights[2][:] = 0.0
        net.biases[2][:] = 0.0
        x = rng.normal(size=(4, 6))
        _, cache = net.forward(x, want_cache=True)
        np.testing.assert_allclose(cache.acts[3], cache.acts[1])


class TestBackward:
    def test_zero_output_gradient(self, rng):
        for net in (small_trimlp(rng), small_hommlp(rng)):
            x = rng.normal(size=(8, 6))
            _, cache = net.forward(x, want_cache=True)
            grads = net.backward(cache, np.zeros((8, 3)))
            assert all(np.all(g == 0) for g in grads)

    @pytest.mark.parametrize("maker", [small_trimlp, small_hommlp])
    def test_matches_finite_differences(self, maker, rng):
        net = maker(rng)
        x = rng.normal(size=(4, 6))
        g_out = rng.normal(size=(4, 3))
        _, cache = net.forward(x, want_cache=True)
        analytic = net.backward(cache, g_out)
        numeric = finite_difference_gradients(net, x, g_out)
        assert max_relative_gradient_error(analytic, numeric) < 1e-4

    def test_hommlp_deep_skip_finite_differences(self, rng):
        net = small_hommlp(rng, depth=6)   # skips at hidden layers 2 and 4
        x = rng.normal(size=(3, 6))
        g_out = rng.normal(size=(3, 3))
        _, cache = net.forward(x, want_cache=True)
        analytic = net.backward(cache, g_out)
        numeric = finite_difference_gradients(net, x, g_out)
        assert max_relative_gradient_error(analytic, numeric) < 1e-4

    def test_batch_gradient_is_sum_of_samples(self, rng):
        net = small_trimlp(rng)
        x = rng.normal(size=(5, 6))
        g = rng.normal(size=(5, 3))
        _, cache = net.forward(x, want_cache=True)
        batch = net.backward(cache, g)
        summed = None
        for i in range(5):
            _, ci = net.forward(x[i:i + 1], want_cache=True)
            gi = net.backward(ci, g[i:i + 1])
            summed = gi if summed is None else [s + d for s, d in zip(summed, gi)]
        for b, s in zip(batch, summed):
            np.testing.assert_allclose(b, s, atol=1e-10)

    def test_stale_cache_shape_mismatch(self, rng):
        net = small_trimlp(rng)
        _, cache = net.forward(rng.normal(size=(4, 6)), want_cache=True)
        with pytest.raises(ValueError):
            net.backward(cache, np.zeros((5, 3)))


class TestAdam:
    def test_zero_gradient_leaves_parameters(self, rng):
        net = small_trimlp(rng, dtype=np.float32)
        before = [p.copy() for p in net.parameters()]
        opt = AdamOptimizer(learning_rate=0.1)
        opt.step(net, [np.zeros_like(p) for p in net.parameters()])
        for b, p in zip(before, net.parameters()):
            np.testing.assert_array_equal(b, p)

    def test_descends_scalar_quadratic(self):
        config = HomMlpConfig(descriptor_dim=1, hidden_width=1, hidden_depth=1)
        net = HomMlp.create(config, np.random.default_rng(0), dtype=np.float64)
        w = net.weights[0]
        w[:] = 1.0
        opt = AdamOptimizer(learning_rate=0.1)
        grads = [np.zeros_like(p) for p in net.parameters()]
        grads[0] = 2.0 * w    # d/dw of w^2
        opt.step(net, grads)
        assert w[0, 0] < 1.0

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_first_step_magnitude_near_lr(self, rng, scale):
        net = small_trimlp(rng, dtype=np.float64)
        before = [p.copy() for p in net.parameters()]
        lr = 0.05
        opt = AdamOptimizer(learning_rate=lr)
        grads = [np.full_like(p, scale) for p in net.parameters()]
        opt.step(net, grads)
        for b, p in zip(before, net.parameters()):
            steps = np.abs(p - b)
            assert (steps >= 0.9 * lr - 1e-12).all()
            assert (steps <= lr + 1e-12).all()

    def test_shape_mismatch_rejected(self, rng):
        net = small_trimlp(rng)
        opt = AdamOptimizer()
        grads = [np.zeros_like(p) for p in net.parameters()]
        grads[0] = np.zeros((1, 1))
        with pytest.raises(ValueError):
            opt.step(net, grads)


class TestSerialization:
    def test_round_trip_byte_identical(self, rng):
        for net in (TriMlp.create(TriplaneConfig(r_x=4, r_y=4, r_z=4,
                                                 hidden_width=8, hidden_depth=2,
                                                 descriptor_dim=5), rng),
                    HomMlp.create(HomMlpConfig(descriptor_dim=5, hidden_width=8,
                                               hidden_depth=2), rng)):
            net.weights[-1][:] = rng.normal(size=net.weights[-1].shape)
            data = serialize(net)
            again = serialize(deserialize(data))
            assert data == again

    def test_deserialized_parameters_match(self, rng):
        net = small_trimlp(rng, dtype=np.float64)
        restored = deserialize(serialize(net))
        assert restored.kind == "trimlp"
        assert restored.config.resolutions == net.config.resolutions
        for a, b in zip(net.parameters(), restored.parameters()):
            np.testing.assert_array_equal(a.astype(np.float32), b)

    def test_default_map_within_size_budget(self):
        net = TriMlp.create(TriplaneConfig(), np.random.default_rng(0))
        size = len(serialize(net))
        assert size <= 2 * 1024 * 1024

    def test_truncated_stream_rejected(self, rng):
        data = serialize(small_trimlp(rng))
        with pytest.raises(SerializationError):
            deserialize(data[:-8])
        with pytest.raises(SerializationError):
            deserialize(data[:10])

    def test_trailing_bytes_rejected(self, rng):
        data = serialize(small_trimlp(rng))
        with pytest.raises(SerializationError):
            deserialize(data + b"\x00\x00\x00\x00")

    def test_bad_magic_and_version(self, rng):
        data = bytearray(serialize(small_trimlp(rng)))
        bad_magic = b"XXXX" + bytes(data[4:])
        with pytest.raises(SerializationError):
            deserialize(bad_magic)
        bad_version = bytes(data[:4]) + (99).to_bytes(4, "little") + bytes(data[8:])
        with pytest.raises(SerializationError):
            deserialize(bad_version)

    def test_hommlp_kind_preserved(self, rng):
        net = HomMlp.create(HomMlpConfig(descriptor_dim=4, hidden_width=6,
                                         hidden_depth=2), rng)
        assert deserialize(serialize(net)).kind == "hommlp"
