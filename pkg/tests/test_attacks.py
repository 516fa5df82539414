import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oagdefense.attacks import (
    AttackSpec,
    choose_targets,
    default_iterations,
    fgsm_targeted,
    fgsm_untargeted,
    igsm,
    mifgsm,
    run_attack,
)
from oagdefense.tensor_core import ConfigError, SeededRng


class FixedGradient:
    """Returns a fixed gradient regardless of image or label."""

    def __init__(self, grad):
        self.grad = np.asarray(grad, dtype=float)
        self.calls = 0

    def loss_grad_wrt_input(self, images, labels):
        self.calls += 1
        return np.broadcast_to(self.grad, np.shape(images)).copy()


class GradientSequence:
    def __init__(self, grads):
        self.grads = [np.asarray(g, dtype=float) for g in grads]
        self.i = 0

    def loss_grad_wrt_input(self, images, labels):
        g = self.grads[self.i]
        self.i += 1
        return g


class LinearSoftmax:
    """Tiny differentiable classifier: logits = W x."""

    def __init__(self, weights):
        self.w = weights

    def logits(self, x):
        x = np.asarray(x)
        return x.reshape(*x.shape[:-3], -1) @ self.w.T

    def loss_grad_wrt_input(self, x, labels):
        x = np.asarray(x)
        z = self.logits(x)
        p = np.exp(z - z.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        onehot = np.eye(self.w.shape[0])[labels]
        return ((p - onehot) @ self.w).reshape(x.shape)


IMG = np.full((1, 2, 2), 100.0)


def test_fgsm_sign_example():
    clf = FixedGradient([[[2.0, -3.0], [0.0, 1.0]]])
    out = fgsm_untargeted(IMG, 0, clf, 6)
    np.testing.assert_array_equal(out - IMG, [[[6.0, -6.0], [0.0, 6.0]]])


def test_zero_epsilon_identity():
    clf = FixedGradient(np.ones((1, 2, 2)))
    for out in (fgsm_untargeted(IMG, 0, clf, 0), fgsm_targeted(IMG, 1, clf, 0),
                igsm(IMG, 1, clf, 0), mifgsm(IMG, 0, clf, 0)):
        np.testing.assert_array_equal(out, IMG)


def test_targeted_is_negated_ascent():
    clf = LinearSoftmax(np.random.default_rng(0).normal(size=(3, 4)))
    up = fgsm_untargeted(IMG, 2, clf, 5) - IMG
    down = fgsm_targeted(IMG, 2, clf, 5) - IMG
    np.testing.assert_array_equal(down, -up)


def test_target_equal_to_truth_rejected():
    clf = FixedGradient(np.ones((1, 2, 2)))
    with pytest.raises(ConfigError):
        fgsm_targeted(IMG, 1, clf, 3, true_label=1)
    with pytest.raises(ConfigError):
        igsm(IMG, 2, clf, 3, true_label=2)


def test_igsm_single_step_collapses_to_fgsm():
    clf = LinearSoftmax(np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(igsm(IMG, 1, clf, 4, step_size=4, iterations=1), fgsm_targeted(IMG, 1, clf, 4))


def test_igsm_clip_saturates():
    clf = FixedGradient([[[1.0, -1.0], [0.0, 2.0]]])
    out = igsm(IMG, 1, clf, 3, step_size=1, iterations=8)
    np.testing.assert_array_equal(out - IMG, [[[-3.0, 3.0], [0.0, -3.0]]])
    assert clf.calls == 8


def test_igsm_small_budget_never_hits_ball():
    clf = LinearSoftmax(np.random.default_rng(2).normal(size=(3, 4)))
    image = np.array([[[0.0, 254.0], [100.0, 2.0]]])
    clipped = igsm(image, 1, clf, 3, step_size=1, iterations=3)
    free = igsm(image, 1, clf, 1e6, step_size=1, iterations=3)
    np.testing.assert_array_equal(clipped, free)


@pytest.mark.parametrize("eps, expected", [(6, 8), (4, 5), (2, 3), (0, 0), (8, 10), (1, 2)])
def test_default_iterations(eps, expected):
    assert default_iterations(eps) == expected


def test_mifgsm_single_step_matches_fgsm():
    clf = LinearSoftmax(np.random.default_rng(3).normal(size=(3, 4)))
    out = mifgsm(IMG, 0, clf, 5, step_size=5, iterations=1, decay=0.0)
    np.testing.assert_array_equal(out, fgsm_untargeted(IMG, 0, clf, 5))


def test_mifgsm_two_step_hand_oracle():
    g1 = [[[4.0, -1.0], [1.0, 0.0]]]  # |g1|_1 = 6
    g2 = [[[-1.0, 3.0], [-2.0, 1.0]]]  # |g2|_1 = 7
    out = mifgsm(IMG, 0, GradientSequence([g1, g2]), 10, step_size=1, iterations=2, decay=1.0)
    # step 1: sign(g1/6); step 2: sign(g1/6 + g2/7) = [[+, +], [-, +]]
    np.testing.assert_array_equal(out - IMG, [[[2.0, 0.0], [0.0, 1.0]]])


def test_mifgsm_zero_gradient_is_finite():
    out = mifgsm(IMG, 0, FixedGradient(np.zeros((1, 2, 2))), 4, iterations=3)
    np.testing.assert_array_equal(out, IMG)


def test_mifgsm_zero_decay_equals_ascent_igsm():
    clf = LinearSoftmax(np.random.default_rng(4).normal(size=(3, 4)))
    image = np.random.default_rng(4).uniform(20, 230, (1, 2, 2))
    a = mifgsm(image, 0, clf, 4, iterations=5, decay=0.0)
    x = image.copy()
    for _ in range(5):
        x = np.clip(np.clip(x + np.sign(clf.loss_grad_wrt_input(x, 0)), image - 4, image + 4), 0, 255)
    np.testing.assert_array_equal(a, x)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    eps=st.integers(0, 16),
    kind=st.sampled_from(["fgsm_untargeted", "fgsm_targeted", "igsm_targeted", "mifgsm_untargeted"]),
)
def test_linf_soundness(seed, eps, kind):
    g = np.random.default_rng(seed)
    clf = LinearSoftmax(g.normal(size=(4, 12)))
    images = g.integers(0, 256, (5, 3, 2, 2)).astype(float)
    labels = g.integers(0, 4, 5)
    spec = AttackSpec(kind, eps)
    target = choose_targets(labels, 4, SeededRng(seed)) if spec.targeted else None
    out = run_attack(spec, images, labels, clf, target)
    assert np.abs(out - images).max() <= eps
    assert out.min() >= 0 and out.max() <= 255


def test_attack_spec_validation():
    with pytest.raises(ConfigError):
        AttackSpec("cw", 6)
    with pytest.raises(ConfigError):
        AttackSpec("igsm_targeted", 2, step_size=3)
    assert AttackSpec("igsm_targeted", 6).n_iter == 8
    assert AttackSpec("mifgsm_untargeted", 2).n_iter == 3
    assert AttackSpec("fgsm_targeted", 6).n_iter == 1
    with pytest.raises(ConfigError):
        run_attack(AttackSpec("igsm_targeted", 6), IMG, 0, FixedGradient(np.ones((1, 2, 2))))
    with pytest.raises(ConfigError):
        run_attack(AttackSpec("fgsm_untargeted", 6), IMG, 0, FixedGradient(np.ones((1, 2, 2))), target_label=1)


def test_choose_targets_never_true_label():
    labels = np.arange(1000) % 10
    targets = choose_targets(labels, 10, SeededRng(0))
    assert not np.any(targets == labels)
    assert set(np.unique(targets)) == set(range(10))
    np.testing.assert_array_equal(targets, choose_targets(labels, 10, SeededRng(0)))


def test_attacks_deterministic():
    clf = LinearSoftmax(np.random.default_rng(5).normal(size=(3, 4)))
    a = mifgsm(IMG, 1, clf, 6)
    b = mifgsm(IMG, 1, clf, 6)
    np.testing.assert_array_equal(a, b)
