import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsacondense.autodiff import (DetachedLeafWarning, Graph, SecondOrderError, ShapeError, Tensor, concat, flip,
                                  forward, gradient, gradient_of_gradient_objective, grad, leaky_relu, logsumexp,
                                  maximum, no_grad, pad)
from dsacondense.autodiff import functional as F
from dsacondense.autodiff.gradcheck import check_gradients, numerical_grad, relative_error

FIRST_TOL = 1e-4
SECOND_TOL = 1e-3


def r(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


# ----------------------------------------------------------------------
# graph forward / gradient examples
# ----------------------------------------------------------------------

def test_identity_graph_returns_input():
    g = Graph(lambda x: x, {"x": np.array([[1.0, 2.0], [3.0, 4.0]])})
    np.testing.assert_array_equal(forward(g).data, [[1, 2], [3, 4]])


def test_sum_relu_hand_value():
    g = Graph(lambda x: x.relu().sum(), {"x": np.array([[-1.0, 2.0], [3.0, -4.0]])})
    assert forward(g).item() == 5.0


def test_rebinding_identical_leaves_is_bit_identical(rng):
    x = r(rng, 2, 3, 6, 6)
    w = r(rng, 4, 3, 3, 3)
    g = Graph(lambda x, w: F.instance_norm(F.conv2d(x, w, padding=1)).sigmoid().sum(), {"x": x, "w": w})
    a = forward(g, {"x": x, "w": w}).data.copy()
    ga = gradient(g)["w"].data.copy()
    b = forward(g, {"x": x.copy(), "w": w.copy()}).data
    gb = gradient(g)["w"].data
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()


def test_topological_order_parents_precede_children(rng):
    g = Graph(lambda x: (x * x + x.exp()).sum(), {"x": r(rng, 3)})
    forward(g)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        if node._ctx is not None:
            for p in node._ctx.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(node)]


def test_bind_shape_mismatch_names_leaf():
    g = Graph(lambda x: x.sum(), {"x": np.zeros(3)})
    with pytest.raises(ShapeError, match="'x'"):
        g.bind(x=np.zeros(4))


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    assert grad(x * x, x).item() == 6.0


def test_conv_input_gradient_counts_windows():
    g = Graph(lambda x, k: F.conv2d(x, k).sum(), {"x": np.ones((1, 1, 3, 3)), "k": np.ones((1, 1, 2, 2))})
    dx = gradient(g, ["x"])["x"].data[0, 0]
    np.testing.assert_array_equal(dx, [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


def test_non_scalar_root_fails():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        grad(x * 2.0, x)


def test_detached_leaf_gets_zero_gradient_with_warning():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with pytest.warns(DetachedLeafWarning):
        gx, gy = grad((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy.data, 0.0)
    np.testing.assert_array_equal(gx.data, 2.0)


def test_unrequested_leaves_untouched(rng):
    a = Tensor(r(rng, 3), requires_grad=True)
    b = Tensor(r(rng, 3), requires_grad=True)
    before = b.data.copy()
    (ga,) = grad((a * b).sum(), [a])
    np.testing.assert_array_equal(ga.data, b.data)
    np.testing.assert_array_equal(b.data, before)


# ----------------------------------------------------------------------
# first-order finite-difference oracle, every operator
# ----------------------------------------------------------------------

def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, shape)


FIRST_ORDER_CASES = {
    "add": (lambda a, b: ((a + b) * (a + b)).sum(), lambda g: [r(g, 3, 4), r(g, 4)]),
    "sub": (lambda a, b: ((a - b) * (a - b)).sum(), lambda g: [r(g, 3, 4), r(g, 3, 1)]),
    "mul": (lambda a, b: (a * b * a).sum(), lambda g: [r(g, 2, 3), r(g, 2, 3)]),
    "div": (lambda a, b: (a / b).sum(), lambda g: [r(g, 2, 3), _pos(g, 2, 3)]),
    "neg": (lambda a: (-a * a).sum(), lambda g: [r(g, 4)]),
    "pow": (lambda a: (a ** 3.0).sum(), lambda g: [r(g, 4)]),
    "exp": (lambda a: a.exp().sum(), lambda g: [r(g, 4)]),
    "log": (lambda a: a.log().sum(), lambda g: [_pos(g, 4)]),
    "sqrt": (lambda a: a.sqrt().sum(), lambda g: [_pos(g, 4)]),
    "maximum": (lambda a: maximum(a * a, 0.3).sum(), lambda g: [r(g, 6)]),
    "relu": (lambda a: (a.relu() * a).sum(), lambda g: [r(g, 6)]),
    "leakyrelu": (lambda a: (leaky_relu(a) * a).sum(), lambda g: [r(g, 6)]),
    "sigmoid": (lambda a: a.sigmoid().sum(), lambda g: [r(g, 6)]),
    "sum_axis": (lambda a: (a.sum(axis=1) ** 2.0).sum(), lambda g: [r(g, 3, 4)]),
    "mean": (lambda a: (a.mean(axis=0) ** 2.0).sum(), lambda g: [r(g, 3, 4)]),
    "reshape_transpose": (lambda a: (a.reshape(4, 3).transpose(1, 0) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
                          lambda g: [r(g, 3, 4)]),
    "matmul": (lambda a, b: ((a @ b) ** 2.0).sum(), lambda g: [r(g, 2, 3), r(g, 3, 4)]),
    "getitem": (lambda a: (a[:, 1:3] ** 2.0).sum(), lambda g: [r(g, 3, 4)]),
    "pad": (lambda a: (pad(a, ((0, 0), (1, 2))) * Tensor(np.arange(21.0).reshape(3, 7))).sum(),
            lambda g: [r(g, 3, 4)]),
    "flip": (lambda a: (flip(a, 1) * Tensor(np.arange(12.0).reshape(3, 4))).sum(), lambda g: [r(g, 3, 4)]),
    "concat": (lambda a, b: (concat([a, b], 0) ** 2.0).sum(), lambda g: [r(g, 2, 3), r(g, 1, 3)]),
    "logsumexp": (lambda a: logsumexp(a, axis=1).sum(), lambda g: [r(g, 3, 5)]),
    "conv2d": (lambda x, w, b: (F.conv2d(x, w, b, padding=1) ** 2.0).sum(),
               lambda g: [r(g, 2, 2, 5, 5), r(g, 3, 2, 3, 3), r(g, 3)]),
    "conv2d_stride2": (lambda x, w: (F.conv2d(x, w, stride=2) ** 2.0).sum(), lambda g: [r(g, 1, 2, 5, 5), r(g, 2, 2, 3, 3)]),
    "linear": (lambda x, w, b: (F.linear(x, w, b) ** 2.0).sum(), lambda g: [r(g, 3, 4), r(g, 2, 4), r(g, 2)]),
    "avgpool": (lambda x: (F.avg_pool2d(x) ** 2.0).sum(), lambda g: [r(g, 2, 2, 4, 4)]),
    "maxpool": (lambda x: (F.max_pool2d(x) ** 2.0).sum(), lambda g: [r(g, 2, 2, 4, 4)]),
    "instance_norm": (lambda x, w, b: (F.instance_norm(x, w, b) * Tensor(np.arange(48.0).reshape(1, 3, 4, 4))).sum(),
                      lambda g: [r(g, 1, 3, 4, 4), r(g, 3), r(g, 3)]),
    "layer_norm": (lambda x, w, b: (F.layer_norm(x, w, b) ** 3.0).sum(), lambda g: [r(g, 2, 3, 3, 3), r(g, 3), r(g, 3)]),
    "group_norm": (lambda x, w, b: (F.group_norm(x, 2, w, b) ** 3.0).sum(),
                   lambda g: [r(g, 2, 4, 3, 3), r(g, 4), r(g, 4)]),
    "batch_norm": (lambda x, w, b: (F.batch_norm(x, w, b) ** 3.0).sum(), lambda g: [r(g, 3, 2, 3, 3), r(g, 2), r(g, 2)]),
    "flatten": (lambda x: (F.flatten(x) * Tensor(np.arange(24.0).reshape(2, 12))).sum(), lambda g: [r(g, 2, 3, 2, 2)]),
    "softmax_cross_entropy": (lambda z: F.softmax_cross_entropy(z, [0, 2, 1]), lambda g: [r(g, 3, 4)]),
    "grid_sample": (lambda x: (F.grid_sample(x, *_warp_grid(5, 5, 0.3)) ** 2.0).sum(), lambda g: [r(g, 1, 2, 5, 5)]),
}


def _warp_grid(h, w, angle):
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    cy, cx = (h - 1) / 2, (w - 1) / 2
    c, s = math.cos(angle), math.sin(angle)
    return c * (yy - cy) - s * (xx - cx) + cy + 0.13, s * (yy - cy) + c * (xx - cx) + cx - 0.07


@pytest.mark.parametrize("name", sorted(FIRST_ORDER_CASES))
def test_first_order_matches_finite_differences(name):
    fn, make = FIRST_ORDER_CASES[name]
    arrays = make(np.random.default_rng(7))
    errs = check_gradients(fn, arrays)
    assert max(errs) <= FIRST_TOL, errs


# ----------------------------------------------------------------------
# second-order: d/ds of a functional of grad_w L
# ----------------------------------------------------------------------

def second_order_error(loss, s, w, rng):
    """Relative error of d h / d s with h = sum(c * g + g * g), g = grad_w loss(s, w)."""
    c = rng.standard_normal(w.shape)

    def h_of(gw):
        return (gw * Tensor(c) + gw * gw).sum()

    st_, wt = Tensor(s, requires_grad=True), Tensor(w, requires_grad=True)
    (gw,) = grad(loss(st_, wt), [wt], create_graph=True)
    (analytic,) = grad(h_of(gw), [st_])

    def scalar(s_arr):
        wt2 = Tensor(w, requires_grad=True)
        (g2,) = grad(loss(Tensor(s_arr), wt2), [wt2])
        return h_of(g2).item()

    numeric = numerical_grad(scalar, [s], 0)
    return relative_error(analytic.data, numeric)


SECOND_ORDER_CASES = {
    "conv_relu": lambda s, w: (F.conv2d(s, w, padding=1).relu() ** 2.0).sum(),
    "conv_sigmoid": lambda s, w: F.conv2d(s, w, padding=1).sigmoid().sum(),
    "conv_leaky": lambda s, w: (leaky_relu(F.conv2d(s, w, padding=1)) ** 2.0).sum(),
    "conv_instance_norm": lambda s, w: (F.instance_norm(F.conv2d(s, w, padding=1)) ** 3.0).sum(),
    "conv_layer_norm": lambda s, w: (F.layer_norm(F.conv2d(s, w, padding=1)) ** 3.0).sum(),
    "conv_group_norm": lambda s, w: (F.group_norm(F.conv2d(s, w, padding=1), 2) ** 3.0).sum(),
    "conv_batch_norm": lambda s, w: (F.batch_norm(F.conv2d(s, w, padding=1)) ** 3.0).sum(),
    "conv_avgpool": lambda s, w: (F.avg_pool2d(F.conv2d(s, w, padding=1)) ** 2.0).sum(),
    "conv_maxpool": lambda s, w: (F.max_pool2d(F.conv2d(s, w, padding=1)) ** 2.0).sum(),
    "warp_conv": lambda s, w: (F.conv2d(F.grid_sample(s, *_warp_grid(4, 4, 0.4)), w, padding=1) ** 2.0).sum(),
    "crop_flip_conv": lambda s, w: (F.conv2d(flip(pad(s, ((0, 0), (0, 0), (1, 1), (1, 1)))[:, :, 2:, :4], 3), w, padding=1)
                                    ** 2.0).sum(),
    "conv_linear_ce": lambda s, w: F.softmax_cross_entropy(
        F.linear(F.flatten(F.conv2d(s, w, padding=1).relu()), Tensor(np.linspace(-1, 1, 3 * 64).reshape(3, 64))),
        [0, 2]),
}


@pytest.mark.parametrize("name", sorted(SECOND_ORDER_CASES))
def test_second_order_matches_finite_differences(name):
    rng = np.random.default_rng(11)
    s = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((4, 2, 3, 3)) * 0.5
    assert second_order_error(SECOND_ORDER_CASES[name], s, w, rng) <= SECOND_TOL


def test_cubic_second_order_example():
    g = Graph(lambda x: x * x * x, {"x": np.array(1.0)})
    out = gradient_of_gradient_objective(g, lambda gs: gs[0] * gs[0], ["x"], ["x"])
    assert out["x"].item() == pytest.approx(36.0)


def test_constant_objective_gives_zero_gradient(rng):
    g = Graph(lambda s, w: (F.linear(s, w) ** 2.0).sum(), {"s": r(rng, 1, 2), "w": r(rng, 2, 2)})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DetachedLeafWarning)
        out = gradient_of_gradient_objective(g, lambda gs: Tensor(3.0), ["w"], ["s"])
    np.testing.assert_array_equal(out["s"].data, 0.0)


def test_second_order_refused_by_first_order_operator():
    from dsacondense.autodiff import fused

    x = Tensor(np.ones((1, 4, 4, 1)), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3)), requires_grad=True)
    with pytest.raises(SecondOrderError, match="ConvNHWC"):
        grad(fused.ConvNHWC.apply(x, w, padding=1).sum(), [w], create_graph=True)


# ----------------------------------------------------------------------
# operator examples
# ----------------------------------------------------------------------

def test_conv_all_ones_example():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_identity_kernel_and_zero_input(rng):
    x = r(rng, 2, 1, 4, 5)
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    assert not F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(r(rng, 3, 2, 3, 3))).data.any()


def test_conv_non_positive_output_fails():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_channel_mismatch_fails():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_is_cross_correlation():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(k)).data[0, 0], [[0, 1], [3, 4]])


def test_instance_norm_examples(rng):
    assert not F.instance_norm(Tensor(np.full((1, 1, 2, 2), 3.0))).data.any()
    out = F.instance_norm(Tensor(np.array([[[[1.0, -1.0]]]])), eps=1e-12).data
    np.testing.assert_allclose(out.ravel(), [1.0, -1.0], atol=1e-6)
    y = F.instance_norm(Tensor(r(rng, 3, 4, 8, 8) * 5 + 2)).data
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-5
    assert np.abs(y.var(axis=(2, 3)) - 1).max() < 1e-3


def test_softmax_cross_entropy_examples(rng):
    assert F.softmax_cross_entropy(Tensor(np.zeros((2, 10))), [3, 7]).item() == pytest.approx(math.log(10), abs=1e-12)
    assert F.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0]).item() == pytest.approx(0.0, abs=1e-12)
    z = r(rng, 4, 5)
    y = np.array([0, 4, 2, 2])
    zt = Tensor(z, requires_grad=True)
    g = grad(F.softmax_cross_entropy(zt, y), zt).data
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(g, p / 4, atol=1e-12)


def test_softmax_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_maxpool_ties_go_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    g = grad(F.max_pool2d(x).sum(), x).data[0, 0]
    np.testing.assert_array_equal(g, [[1, 0], [0, 0]])


def test_grid_sample_zero_padding_outside():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = F.grid_sample(x, np.full((1, 2), -5.0), np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, 0.0)


def test_no_nan_from_finite_inputs_at_default_eps():
    x = Tensor(np.zeros((2, 4, 3, 3)), requires_grad=True)
    y = (F.instance_norm(x) + F.layer_norm(x) + F.group_norm(x, 2) + F.batch_norm(x)).sum()
    assert np.isfinite(y.item())
    assert np.all(np.isfinite(grad(y, x).data))


# ----------------------------------------------------------------------
# properties
# ----------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 1),
       st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_conv_gradients_match_finite_differences(n, cin, cout, hw, padding, stride, seed):
    rng = np.random.default_rng(seed)
    x, w = r(rng, n, cin, hw, hw), r(rng, cout, cin, 3, 3)
    errs = check_gradients(lambda a, b: (F.conv2d(a, b, stride=stride, padding=padding) ** 2.0).sum(), [x, w])
    assert max(errs) <= FIRST_TOL


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x1, x2, w = r(rng, 1, 2, 5, 5), r(rng, 1, 2, 5, 5), Tensor(r(rng, 3, 2, 3, 3))
    lhs = F.conv2d(Tensor(a * x1 + b * x2), w, padding=1).data
    rhs = a * F.conv2d(Tensor(x1), w, padding=1).data + b * F.conv2d(Tensor(x2), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_conv_matches_torch_oracle(rng):
    torch = pytest.importorskip("torch")
    x, w, b = r(rng, 2, 3, 7, 6), r(rng, 4, 3, 3, 3), r(rng, 4)
    for stride, padding in ((1, 1), (2, 0), (2, 1)):
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = F.conv2d(xt, wt, Tensor(b), stride=stride, padding=padding)
        gx, gw = grad((out * out).sum(), [xt, wt])
        tx = torch.tensor(x, requires_grad=True)
        tw = torch.tensor(w, requires_grad=True)
        to = torch.nn.functional.conv2d(tx, tw, torch.tensor(b), stride=stride, padding=padding)
        (to * to).sum().backward()
        np.testing.assert_allclose(out.data, to.detach().numpy(), atol=1e-10)
        np.testing.assert_allclose(gx.data, tx.grad.numpy(), atol=1e-9)
        np.testing.assert_allclose(gw.data, tw.grad.numpy(), atol=1e-9)


def test_no_grad_builds_no_graph(rng):
    x = Tensor(r(rng, 3), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad
