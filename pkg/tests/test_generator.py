import numpy as np
import pytest

from oagdefense.generator import (
    GeneratorArch,
    GeneratorParams,
    energy_forward,
    grad_wrt_image,
    grad_wrt_params,
    init_params,
)
from oagdefense.tensor_core import ConfigError, SeededRng
from oracles import central_difference, energy_loop, rel_error

SMALL = GeneratorArch(filters=4, kernel_size=5, stride=3, input_shape=(3, 16, 16))


def random_params(g, arch=SMALL, bias_shift=0.0):
    return GeneratorParams(
        arch,
        g.normal(size=arch.conv.weight_shape),
        g.normal(size=arch.filters) + bias_shift,
        g.normal(size=arch.feature_shape),
        float(g.normal()),
    )


def kink_margin(image, theta):
    from oagdefense.generator import _preactivation

    pre, _ = _preactivation(image, theta)
    return np.abs(pre).min()


def away_from_kinks(g, arch=SMALL):
    while True:
        theta = random_params(g, arch)
        image = g.normal(size=arch.input_shape)
        if kink_margin(image, theta) > 1e-3:
            return image, theta


def test_init_same_seed_identical():
    a = init_params(SeededRng(3), SMALL)
    b = init_params(SeededRng(3), SMALL)
    for x, y in zip(a.arrays().values(), b.arrays().values()):
        np.testing.assert_array_equal(x, y)
    assert not a.bias.any() and a.dense_bias == 0.0


def test_init_zero_std_gives_zero_params():
    theta = init_params(SeededRng(3), SMALL, init_std=0.0)
    assert all(not a.any() for a in theta.arrays().values())


def test_init_std_matches():
    arch = GeneratorArch(64, 15, 3, (3, 64, 64))
    theta = init_params(SeededRng(11), arch, init_std=0.01)
    assert theta.weights.size >= 10**4
    assert abs(theta.weights.std() / 0.01 - 1) < 0.05


def test_arch_feature_shape():
    assert GeneratorArch(64, 15, 3, (3, 64, 64)).feature_shape == (64, 17, 17)
    with pytest.raises(ConfigError):
        GeneratorArch(4, 17, 3, (3, 16, 16))


def test_zero_image_gives_dense_bias():
    g = np.random.default_rng(0)
    theta = random_params(g)
    theta.bias[:] = 0
    theta.dense_bias = 0.7
    assert energy_forward(np.zeros(SMALL.input_shape), theta) == 0.7


def test_prototype_single_window():
    arch = GeneratorArch(filters=5, kernel_size=4, stride=1, input_shape=(2, 4, 4))
    g = np.random.default_rng(1)
    theta = random_params(g, arch)
    theta.dense[:] = 1.0
    theta.dense_bias = 0.0
    image = g.normal(size=arch.input_shape)
    expected = sum(max(float(image.ravel() @ theta.weights[k].ravel() + theta.bias[k]), 0.0) for k in range(5))
    assert energy_forward(image, theta) == pytest.approx(expected, rel=1e-13)


def test_matches_scalar_loop_energy():
    g = np.random.default_rng(2)
    theta = random_params(g)
    image = g.normal(size=SMALL.input_shape)
    ref = energy_loop(image, theta.weights, theta.bias, theta.dense, theta.dense_bias, SMALL.stride)
    assert energy_forward(image, theta) == pytest.approx(ref, rel=1e-12)


def test_linear_in_dense_weights():
    g = np.random.default_rng(3)
    theta = random_params(g)
    image = g.normal(size=SMALL.input_shape)
    doubled = theta.copy()
    doubled.dense *= 2
    f1 = energy_forward(image, theta) - theta.dense_bias
    f2 = energy_forward(image, doubled) - theta.dense_bias
    assert f2 == pytest.approx(2 * f1, rel=1e-12)


def test_dead_relu_zero_gradient():
    g = np.random.default_rng(4)
    theta = random_params(g, bias_shift=-1e6)
    image = g.normal(size=SMALL.input_shape)
    assert not grad_wrt_image(image, theta).any()


def test_all_active_prototype_is_kernel_scatter():
    g = np.random.default_rng(5)
    theta = random_params(g, bias_shift=1e6)
    theta.dense[:] = 1.0
    image = g.normal(size=SMALL.input_shape)
    expected = np.zeros(SMALL.input_shape)
    _, ho, wo = SMALL.feature_shape
    r, s = SMALL.kernel_size, SMALL.stride
    for i in range(ho):
        for j in range(wo):
            expected[:, i * s:i * s + r, j * s:j * s + r] += theta.weights.sum(axis=0)
    np.testing.assert_allclose(grad_wrt_image(image, theta), expected, atol=1e-12)


def test_image_gradient_finite_differences():
    g = np.random.default_rng(6)
    image, theta = away_from_kinks(g)
    fd = central_difference(lambda z: energy_forward(z, theta), image)
    assert rel_error(grad_wrt_image(image, theta), fd) < 1e-6


def test_param_gradient_trivial():
    g = np.random.default_rng(7)
    theta = random_params(g)
    assert grad_wrt_params(g.normal(size=SMALL.input_shape), theta).dense_bias == 1.0
    theta.bias[:] = 0
    grads = grad_wrt_params(np.zeros(SMALL.input_shape), theta)
    assert not grads.weights.any()


def _param_fd(image, theta):
    out = {}
    for name in ("weights", "bias", "dense"):
        def f(arr, name=name):
            t = theta.copy()
            setattr(t, name, arr)
            return energy_forward(image, t)
        out[name] = central_difference(f, getattr(theta, name))
    return out


def test_param_gradient_finite_differences():
    g = np.random.default_rng(8)
    image, theta = away_from_kinks(g)
    grads = grad_wrt_params(image, theta)
    for name, fd in _param_fd(image, theta).items():
        assert rel_error(getattr(grads, name), fd) < 1e-6, name


def test_positive_homogeneity():
    g = np.random.default_rng(9)
    theta = random_params(g)
    image = g.normal(size=SMALL.input_shape)
    for t in (0.3, 2.0, 7.5):
        scaled = theta.copy()
        scaled.bias *= t
        lhs = energy_forward(t * image, scaled) - theta.dense_bias
        rhs = t * (energy_forward(image, theta) - theta.dense_bias)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_piecewise_linear_along_direction():
    g = np.random.default_rng(10)
    image, theta = away_from_kinks(g)
    d = g.normal(size=image.shape)
    d *= 1e-5 / np.abs(d).max()
    f0, f1, f2 = (energy_forward(image + a * d, theta) for a in (0.0, 1.0, 2.0))
    assert abs((f2 - f1) - (f1 - f0)) < 1e-9 * max(1.0, abs(f1))


def test_shape_mismatch_errors():
    theta = init_params(SeededRng(0), SMALL)
    with pytest.raises(ConfigError, match="image"):
        energy_forward(np.zeros((3, 15, 16)), theta)
    with pytest.raises(ConfigError):
        grad_wrt_image(np.zeros((1, 16, 16)), theta)
    with pytest.raises(ConfigError, match="dense"):
        GeneratorParams(SMALL, theta.weights, theta.bias, np.zeros((4, 3, 3)))


def test_checkpoint_round_trip(tmp_path):
    g = np.random.default_rng(11)
    theta = random_params(g)
    theta.save(tmp_path / "gen.bin")
    back = GeneratorParams.load(tmp_path / "gen.bin")
    assert back.arch == theta.arch
    for a, b in zip(theta.arrays().values(), back.arrays().values()):
        np.testing.assert_array_equal(a, b)
