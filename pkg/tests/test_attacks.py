import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apartlab import attacks
from apartlab.attacks import AttackSpec
from apartlab.models import ArchConfig, PerturbationSet, ResidualNet

from conftest import linear_model, quadratic_model


def test_fgsm_on_a_linear_loss_is_eps_sign_w():
    w = np.array([0.7, -1.3, 0.0001, -2.0])
    x = np.random.default_rng(1).normal(size=(5, 4))
    delta = attacks.fgsm(linear_model(w), x, np.zeros(5, int), 0.25).input_delta
    np.testing.assert_array_equal(delta, np.broadcast_to(0.25 * np.sign(w), x.shape))


@pytest.mark.parametrize("steps, expected", [(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.3), (10, 0.3)])
def test_pgd_on_a_quadratic_walks_then_saturates(steps, expected):
    spec = AttackSpec("pgd", 0.3, steps, step_size=0.1, init="zero")
    delta = attacks.pgd(quadratic_model(), np.array([[0.5]]), np.zeros(1, int), spec).input_delta
    assert abs(delta[0, 0] - expected) <= 1e-12


def test_pgd_trace_is_monotone_on_the_quadratic():
    trace = []
    spec = AttackSpec("pgd", 0.3, 4, step_size=0.1, init="zero")
    attacks.pgd(quadratic_model(), np.array([[0.5]]), np.zeros(1, int), spec, trace=trace)
    values = [float(t[0]) for t in trace]
    np.testing.assert_allclose(values, [0.25, 0.36, 0.49, 0.64, 0.64], atol=1e-12)


def test_fgsm_equals_one_step_zero_init_pgd_bitwise(dense_net, moons_batch):
    x, y, _ = moons_batch
    a = attacks.fgsm(dense_net, x, y, 0.1).input_delta
    b = attacks.pgd(dense_net, x, y, AttackSpec("pgd", 0.1, 1, step_size=0.1, init="zero")).input_delta
    assert a.tobytes() == b.tobytes()


def test_pgd_zero_steps_is_zero(dense_net, moons_batch):
    x, y, _ = moons_batch
    d = attacks.pgd(dense_net, x, y, AttackSpec("pgd", 0.1, 0)).input_delta
    assert not np.any(d)


def test_zero_epsilon_gives_zero_perturbation(dense_net, moons_batch):
    x, y, _ = moons_batch
    for kind in ("fgsm", "pgd", "f-plus-fgsm", "random-sign", "gaussian"):
        d = attacks.perturb(dense_net, x, y, AttackSpec(kind, 0.0)).input_delta
        assert not np.any(d), kind


def test_clip_keeps_inputs_in_the_unit_box(dense_net):
    x = np.array([[0.0, 1.0], [0.02, 0.97]])
    y = np.array([0, 1])
    for kind in ("fgsm", "pgd", "f-plus-fgsm", "random-sign", "gaussian"):
        d = attacks.perturb(dense_net, x, y, AttackSpec(kind, 0.1, clip=True), np.random.default_rng(0)).input_delta
        assert np.all(x + d >= 0.0) and np.all(x + d <= 1.0), kind
        assert np.max(np.abs(d)) <= 0.1


def test_noise_kinds():
    rng = np.random.default_rng(0)
    d = attacks.noise("random-sign", (200, 3), 0.2, rng).input_delta
    assert set(np.unique(d)) == {-0.2, 0.2}
    g = attacks.noise("gaussian", (2000,), 0.2, rng).input_delta
    assert np.max(np.abs(g)) <= 0.2
    assert 0.08 < np.std(g) < 0.1
    with pytest.raises(ValueError):
        attacks.noise("laplace", (2,), 0.1, rng)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("cw", 0.1)
    with pytest.raises(ValueError):
        AttackSpec("pgd", -0.1)
    with pytest.raises(ValueError):
        AttackSpec("pgd", 0.1, step_size=0.0)
    assert AttackSpec("pgd", 0.2, 7).name == "pgd-7"
    assert AttackSpec("pgd", 0.2).pgd_step == pytest.approx(0.05)


def test_non_finite_gradient_names_the_batch_element():
    from apartlab.models import FunctionModel
    from apartlab.tensor import NonFiniteError, forward_op

    m = FunctionModel(lambda P, h: forward_op("sum", [h * h * np.array([[1.0], [np.inf]])], axis=1))
    with pytest.raises(NonFiniteError) as err:
        attacks.fgsm(m, np.ones((2, 1)), np.zeros(2, int), 0.1)
    assert err.value.index == 1


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(1, 6), st.integers(0, 2**16))
def test_pgd_stays_in_the_ball(eps, steps, seed):
    net = ResidualNet(ArchConfig("micro-preact", (3,), 3, width=6, blocks=1, init_seed=seed % 7))
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    d = attacks.pgd(net, x, y, AttackSpec("pgd", eps, steps), rng).input_delta
    assert np.max(np.abs(d)) <= eps


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 2**16))
def test_fgsm_is_optimal_for_any_linear_loss(eps, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=4)
    x = rng.normal(size=(3, 4))
    m = linear_model(w)
    d = attacks.fgsm(m, x, np.zeros(3, int), eps)
    best = attacks.perturbed_loss(m, x, None, d)
    for _ in range(5):
        other = PerturbationSet(rng.uniform(-eps, eps, size=x.shape))
        assert np.all(attacks.perturbed_loss(m, x, None, other) <= best + 1e-12)


def test_projection_examples():
    eps = 8 / 255
    np.testing.assert_array_equal(attacks.project_linf(np.array([0.5, -0.01]), eps), [eps, -0.01])
    inside = np.array([0.01, -0.02, 0.0])
    np.testing.assert_array_equal(attacks.project_linf(inside, eps), inside)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 2.0), st.integers(0, 2**16))
def test_projection_is_idempotent(eps, seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=20)
    once = attacks.project_linf(x, eps)
    assert np.array_equal(attacks.project_linf(once, eps), once)
    assert np.max(np.abs(once)) <= eps


def test_fgsm_with_zero_gradient_is_zero():
    d = attacks.fgsm(linear_model([0.0, 0.0]), np.ones((3, 2)), np.zeros(3, int), 0.1).input_delta
    assert not np.any(d)


def test_fgsm_raises_the_loss_on_random_nets():
    ascents = 0
    for seed in range(100):
        net = ResidualNet(ArchConfig("micro-preact", (4,), 3, width=8, blocks=3, init_seed=seed))
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(16, 4))
        y = rng.integers(0, 3, size=16)
        d = attacks.fgsm(net, x, y, 0.05)
        ascents += np.mean(attacks.perturbed_loss(net, x, y, d)) >= np.mean(attacks.perturbed_loss(net, x, y))
    assert ascents >= 95


def test_pgd10_beats_fgsm_on_the_quadratic():
    x, y = np.array([[0.5]]), np.zeros(1, int)
    m = quadratic_model()
    strong = attacks.pgd(m, x, y, AttackSpec("pgd", 0.3, 10, step_size=0.075, seed=1))
    weak = attacks.fgsm(m, x, y, 0.3)
    assert attacks.perturbed_loss(m, x, y, strong)[0] >= attacks.perturbed_loss(m, x, y, weak)[0] - 1e-12


def test_f_plus_fgsm_with_zero_gradient_returns_the_random_start():
    x = np.zeros((50, 3))
    d = attacks.f_plus_fgsm(linear_model(np.zeros(3)), x, np.zeros(50, int), 0.2, np.random.default_rng(4)).input_delta
    start = np.random.default_rng(4).uniform(-0.2, 0.2, size=x.shape)
    np.testing.assert_array_equal(d, start)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 2**16))
def test_f_plus_fgsm_is_bounded_and_seeded(eps, seed):
    net = ResidualNet(ArchConfig("micro-preact", (2,), 2, width=4, blocks=1, init_seed=1))
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(6, 2))
    y = rng.integers(0, 2, size=6)
    a = attacks.f_plus_fgsm(net, x, y, eps, np.random.default_rng(seed)).input_delta
    b = attacks.f_plus_fgsm(net, x, y, eps, np.random.default_rng(seed)).input_delta
    assert a.tobytes() == b.tobytes()
    assert np.max(np.abs(a)) <= eps


@pytest.mark.parametrize("kind", ["random-sign", "gaussian"])
def test_noise_mean_is_zero_within_three_sigma(kind):
    eps = 0.1
    d = attacks.noise(kind, (10_000,), eps, np.random.default_rng(0)).input_delta
    sigma = eps if kind == "random-sign" else eps / 2
    assert abs(d.mean()) <= 3 * sigma / np.sqrt(d.size)


def test_check_bounded_flags_escapes():
    with pytest.raises(AssertionError):
        attacks.check_bounded(PerturbationSet(np.array([0.2])), 0.1)
