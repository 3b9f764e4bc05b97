import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsacondense.augment import IDENTITY, AugParam, AugRanges
from dsacondense.autodiff import Tensor, grad
from dsacondense.autodiff.gradcheck import numerical_grad, relative_error
from dsacondense.matching import (MatchingError, layer_gradient_distance, matching_loss, multi_omega_loss,
                                  network_gradients)
from dsacondense.models import ArchSpec, GradSet, make_network


def gradset(*arrays):
    return GradSet([Tensor(np.asarray(a, np.float64)) for a in arrays])


def random_gradset(rng, shapes=((3, 5), (2, 7), (4, 1))):
    return gradset(*[rng.standard_normal(s) for s in shapes])


def nodes(gs):
    return sum(gs.node_counts)


def test_self_distance_is_zero(rng):
    g = random_gradset(rng)
    assert layer_gradient_distance(g, g).total == pytest.approx(0.0, abs=1e-12)


def test_antipodal_is_twice_node_count(rng):
    g = random_gradset(rng)
    neg = GradSet([-a for a in g.layers])
    assert layer_gradient_distance(g, neg).total == pytest.approx(2.0 * nodes(g), abs=1e-12)


def test_orthogonal_single_node_is_one():
    assert layer_gradient_distance(gradset([[1.0, 0.0]]), gradset([[0.0, 3.0]])).total == 1.0


def test_zero_norm_node_counts_as_orthogonal():
    d = layer_gradient_distance(gradset([[0.0, 0.0], [1.0, 1.0]]), gradset([[1.0, 2.0], [2.0, 2.0]]))
    assert d.total == pytest.approx(1.0)
    assert np.isfinite(d.total)


def test_per_layer_breakdown_sums_to_total(rng):
    d = layer_gradient_distance(random_gradset(rng), random_gradset(rng))
    assert sum(d.per_layer) == pytest.approx(d.total, abs=1e-12)
    assert len(d.per_layer) == 3


def test_structure_mismatch_fails(rng):
    with pytest.raises(MatchingError):
        layer_gradient_distance(random_gradset(rng), random_gradset(rng, ((3, 5),)))
    with pytest.raises(MatchingError):
        layer_gradient_distance(random_gradset(rng, ((3, 5),)), random_gradset(rng, ((3, 4),)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_distance_invariants(seed, alpha):
    rng = np.random.default_rng(seed)
    a, b = random_gradset(rng), random_gradset(rng)
    d = layer_gradient_distance(a, b).total
    assert 0.0 <= d <= 2.0 * nodes(a) + 1e-12
    assert layer_gradient_distance(b, a).total == d
    scaled = [x.data.copy() for x in a.layers]
    layer = int(rng.integers(len(scaled)))
    row = int(rng.integers(scaled[layer].shape[0]))
    scaled[layer][row] *= alpha
    assert abs(layer_gradient_distance(gradset(*scaled), b).total - d) <= 1e-6


def test_distance_differentiable_in_both_arguments(rng):
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))

    def d(a, b):
        return layer_gradient_distance(GradSet([a]), GradSet([b])).value

    at, bt = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    ga, gb = grad(d(at, bt), [at, bt])
    num_a = numerical_grad(lambda a, b: d(Tensor(a), Tensor(b)).item(), [a0, b0], 0)
    num_b = numerical_grad(lambda a, b: d(Tensor(a), Tensor(b)).item(), [a0, b0], 1)
    assert relative_error(ga.data, num_a) < 1e-6 and relative_error(gb.data, num_b) < 1e-6


# ----------------------------------------------------------------------
# augmented matching loss on a network
# ----------------------------------------------------------------------

def small_net(rng, **kw):
    spec = ArchSpec(depth=1, width=4, im_size=(8, 8), channels=1, num_classes=3, **kw)
    return make_network(spec, rng, np.float64)


def test_identical_batches_give_zero_loss(rng):
    net = small_net(rng)
    x = rng.standard_normal((3, 1, 8, 8))
    y = np.full(3, 2)
    m = matching_loss(Tensor(x, requires_grad=True), y, x, y, net)
    assert m.total == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("omega", [IDENTITY, AugParam("rotate", angle=9.0), AugParam("crop", shift=(1, -1)),
                                   AugParam("scale", scale=(1.1, 0.9)),
                                   AugParam("color", brightness=0.3, contrast=1.2)])
def test_synthetic_gradient_matches_finite_differences(omega, rng):
    net = small_net(rng)
    real = rng.standard_normal((5, 1, 8, 8))
    syn0 = rng.standard_normal((2, 1, 8, 8))
    ys, yr = np.ones(2, int), np.ones(5, int)

    def value(s):
        return matching_loss(Tensor(s, requires_grad=True), ys, real, yr, net, omega).total

    s = Tensor(syn0, requires_grad=True)
    (g,) = grad(matching_loss(s, ys, real, yr, net, omega).value, [s])
    assert relative_error(g.data, numerical_grad(value, [syn0], 0)) <= 1e-3


def test_linear_net_two_pixel_example(rng):
    spec = ArchSpec.mlp(width=2, channels=1, im_size=(1, 2), num_classes=2)
    net = make_network(spec, rng, np.float64)
    real = rng.standard_normal((4, 1, 1, 2))
    syn0 = rng.standard_normal((1, 1, 1, 2))
    y1, y4 = np.zeros(1, int), np.zeros(4, int)

    def value(s):
        return matching_loss(Tensor(s, requires_grad=True), y1, real, y4, net).total

    s = Tensor(syn0, requires_grad=True)
    (g,) = grad(matching_loss(s, y1, real, y4, net).value, [s])
    assert relative_error(g.data, numerical_grad(value, [syn0], 0)) <= 1e-3


def test_real_branch_is_constant(rng):
    net = small_net(rng)
    real = Tensor(rng.standard_normal((3, 1, 8, 8)), requires_grad=True)
    g = network_gradients(net, real, np.zeros(3, int))
    assert all(not layer.requires_grad for layer in g.layers)


def test_mixed_class_batches_fail(rng):
    net = small_net(rng)
    x = rng.standard_normal((2, 1, 8, 8))
    with pytest.raises(MatchingError):
        matching_loss(Tensor(x), np.array([0, 1]), x, np.array([0, 0]), net)
    with pytest.raises(MatchingError):
        matching_loss(Tensor(x), np.array([0, 0]), x, np.array([1, 1]), net)
    with pytest.raises(MatchingError):
        matching_loss(Tensor(x), np.array([0, 0]), rng.standard_normal((2, 1, 4, 4)), np.array([0, 0]), net)


def test_multi_omega_equals_sum_of_single_losses(rng):
    net = small_net(rng)
    real = rng.standard_normal((4, 1, 8, 8))
    syn = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    ys, yr = np.zeros(2, int), np.zeros(4, int)
    omegas = [AugParam("flip", mirror=True), AugParam("rotate", angle=-7.0), AugParam("cutout", center=(4, 4), side=4)]
    total = multi_omega_loss(syn, ys, real, yr, net, omegas)
    singles = [matching_loss(syn, ys, real, yr, net, w) for w in omegas]
    assert total.total == pytest.approx(sum(m.total for m in singles), rel=1e-12)
    (g_total,) = grad(total.value, [syn])
    g_sum = sum(grad(m.value, [syn])[0].data for m in singles)
    np.testing.assert_allclose(g_total.data, g_sum, rtol=1e-10, atol=1e-12)


def test_include_norm_switch_adds_norm_layers(rng):
    net = small_net(rng)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    y = np.zeros(2, int)
    assert len(network_gradients(net, x, y).layers) == 2
    assert len(network_gradients(net, x, y, include_norm=True).layers) == 3


def test_loss_uses_cosine_eps_floor():
    net_free = layer_gradient_distance(gradset([[1e-8, 0.0]]), gradset([[1e-8, 0.0]]))
    assert net_free.total == pytest.approx(1.0, abs=1e-9)


def test_augmented_loss_uses_same_transform_on_both_sides(rng):
    net = small_net(rng)
    x = rng.standard_normal((3, 1, 8, 8))
    y = np.zeros(3, int)
    m = matching_loss(Tensor(x, requires_grad=True), y, x, y, net, AugParam("rotate", angle=12.0))
    assert m.total == pytest.approx(0.0, abs=1e-10)
    m2 = matching_loss(Tensor(x, requires_grad=True), y, x, y, net, AugParam("rotate", angle=12.0),
                       AugRanges(), real_omega=IDENTITY)
    assert m2.total > 1e-3
