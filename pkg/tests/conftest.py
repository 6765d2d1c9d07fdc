import numpy as np
import pytest

from scrslam.geometry import Pose, quat_to_rotation
from scrslam.network import HomMlp, HomMlpConfig, TriMlp, TriplaneConfig


def random_pose(rng: np.random.Generator, translation_scale: float = 3.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(quat_to_rotation(q), rng.uniform(-translation_scale, translation_scale, 3))


def small_trimlp(rng=None, dtype=np.float64, randomize_head=True) -> TriMlp:
    rng = rng if rng is not None else np.random.default_rng(0)
    config = TriplaneConfig(r_x=4, r_y=3, r_z=5,
                            bounds_min=(-1.0, -2.0, 0.0), bounds_max=(1.0, 2.0, 3.0),
                            hidden_width=16, hidden_depth=3, descriptor_dim=6)
    net = TriMlp.create(config, rng, dtype=dtype)
    if randomize_head:
        net.weights[-1][:] = rng.normal(scale=0.5, size=net.weights[-1].shape)
        net.biases[-1][:] = rng.normal(scale=0.5, size=net.biases[-1].shape)
    return net


def small_hommlp(rng=None, dtype=np.float64, depth=5, randomize_head=True) -> HomMlp:
    rng = rng if rng is not None else np.random.default_rng(0)
    config = HomMlpConfig(descriptor_dim=6, hidden_width=16, hidden_depth=depth)
    net = HomMlp.create(config, rng, dtype=dtype)
    if randomize_head:
        net.weights[-1][:] = rng.normal(scale=0.5, size=net.weights[-1].shape)
        net.biases[-1][:] = rng.normal(scale=0.5, size=net.biases[-1].shape)
    return net


def finite_difference_gradients(net, descriptors, out_grad, h=1e-5):
    """Central-difference gradient of sum(forward(x) * out_grad) per parameter."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float((net.forward(descriptors)[0] * out_grad).sum())
            flat[i] = orig - h
            minus = float((net.forward(descriptors)[0] * out_grad).sum())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def max_relative_gradient_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
