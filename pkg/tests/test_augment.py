import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsacondense import augment
from dsacondense.augment import (IDENTITY, KINDS, AugDistribution, AugError, AugParam, AugRanges, apply,
                                 augment_independent, check_range, cutout_mask, sample_omega, siamese_apply)
from dsacondense.autodiff import Tensor
from dsacondense.autodiff.gradcheck import check_directional

HW = (8, 8)

IDENTITY_PARAMS = {
    "crop": AugParam("crop", shift=(0, 0)),
    "cutout": AugParam("cutout", center=(3, 3), side=0),
    "flip": AugParam("flip", mirror=False),
    "scale": AugParam("scale", scale=(1.0, 1.0)),
    "rotate": AugParam("rotate", angle=0.0),
    "color": AugParam("color", brightness=0.5, saturation=1.0, contrast=1.0),
}

NONTRIVIAL = {
    "crop": AugParam("crop", shift=(1, -1)),
    "cutout": AugParam("cutout", center=(2, 5), side=4),
    "flip": AugParam("flip", mirror=True),
    "scale": AugParam("scale", scale=(1.13, 0.9)),
    "rotate": AugParam("rotate", angle=11.3),
    "color": AugParam("color", brightness=0.8, saturation=1.6, contrast=0.7),
}


def batch(rng, n=2, c=3, hw=HW):
    return rng.standard_normal((n, c, *hw))


@pytest.mark.parametrize("kind", KINDS)
def test_identity_parameters_are_bit_exact(kind, rng):
    x = Tensor(batch(rng))
    out = apply(x, IDENTITY_PARAMS[kind])
    assert out.data.tobytes() == x.data.tobytes()
    assert out is x


def test_flip_is_an_involution(rng):
    x = Tensor(batch(rng))
    twice = apply(apply(x, NONTRIVIAL["flip"]), NONTRIVIAL["flip"])
    np.testing.assert_array_equal(twice.data, x.data)


def test_rotate_180_index_mapping():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = apply(x, AugParam("rotate", angle=180.0), AugRanges(rotate_deg=180.0)).data[0, 0]
    np.testing.assert_array_equal(out, [[4.0, 3.0], [2.0, 1.0]])


def test_rotate_90_is_exact_permutation():
    img = np.arange(9.0).reshape(1, 1, 3, 3)
    out = apply(Tensor(img), AugParam("rotate", angle=90.0), AugRanges(rotate_deg=90.0)).data[0, 0]
    assert sorted(out.ravel()) == list(range(9))
    assert out[1, 1] == 4.0


def test_crop_window_offset():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    out = apply(Tensor(img), AugParam("crop", shift=(1, 0))).data[0, 0]
    np.testing.assert_array_equal(out[:3], img[0, 0, 1:])
    np.testing.assert_array_equal(out[3], 0.0)


def test_cutout_region_is_zero_and_clipped(rng):
    x = batch(rng, hw=(6, 6)) + 10.0
    out = apply(Tensor(x), AugParam("cutout", center=(0, 0), side=3)).data
    assert np.all(out[:, :, :2, :2] == 0.0)
    np.testing.assert_array_equal(out[:, :, 2:, :], x[:, :, 2:, :])
    np.testing.assert_array_equal(out[:, :, :, 2:], x[:, :, :, 2:])
    assert cutout_mask((6, 6), (3, 3), 3).sum() == 36 - 9


def test_scale_zoom_reads_closer_to_center():
    img = np.arange(9.0).reshape(1, 1, 3, 3)
    out = apply(Tensor(img), AugParam("scale", scale=(1.2, 1.2))).data[0, 0]
    assert out[1, 1] == 4.0
    src = 1 - 1 / 1.2
    expected = (1 - src) ** 2 * 0 + src * (1 - src) * (1 + 3) + src * src * 4
    assert out[0, 0] == pytest.approx(expected)


def test_color_components():
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    bright = apply(Tensor(x), AugParam("color", brightness=1.0)).data
    np.testing.assert_allclose(bright, x + 0.5)
    gray = apply(Tensor(x), AugParam("color", saturation=0.0)).data
    np.testing.assert_allclose(gray, np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape))
    flat = apply(Tensor(x), AugParam("color", contrast=0.5)).data
    np.testing.assert_allclose(flat, 0.5 * x + 0.5 * x.mean())


def test_sample_single_rotate_in_range(rng):
    dist = AugDistribution("single", "rotate")
    for _ in range(50):
        w = sample_omega(dist, rng, HW)
        assert w.kind == "rotate" and -15 <= w.angle <= 15


def test_combination_on_digits_never_flips(rng):
    dist = AugDistribution.for_dataset("combination", "mnist")
    kinds = {sample_omega(dist, rng, (28, 28)).kind for _ in range(400)}
    assert kinds == {"color", "crop", "cutout", "scale", "rotate"}
    assert "flip" in {sample_omega(AugDistribution.for_dataset("combination", "cifar10"), rng, HW).kind
                      for _ in range(400)}


def test_fashion_mnist_keeps_flip():
    assert not AugDistribution.for_dataset("combination", "fashionmnist").digits


def test_strategy_none_gives_identity(rng):
    assert sample_omega(AugDistribution(), rng, HW) == IDENTITY


def test_empty_admissible_set_fails(rng):
    with pytest.raises(AugError):
        sample_omega(AugDistribution("combination", kinds=("flip",), digits=True), rng, HW)
    with pytest.raises(AugError):
        sample_omega(AugDistribution("single", kind="warp"), rng, HW)


@pytest.mark.parametrize("omega", [AugParam("rotate", angle=30.0), AugParam("crop", shift=(5, 0)),
                                   AugParam("scale", scale=(2.0, 1.0)), AugParam("color", contrast=3.0),
                                   AugParam("cutout", center=(9, 0), side=2)])
def test_out_of_range_parameters_fail(omega, rng):
    with pytest.raises(AugError):
        apply(Tensor(batch(rng)), omega)


def test_sampled_parameters_lie_in_ranges(rng):
    dist = AugDistribution("combination")
    for _ in range(300):
        check_range(sample_omega(dist, rng, HW), HW)


def test_empty_batch_fails():
    with pytest.raises(AugError):
        apply(Tensor(np.zeros((0, 1, 4, 4))), NONTRIVIAL["flip"])


@pytest.mark.parametrize("kind", KINDS)
def test_input_jvp_matches_finite_differences(kind, rng):
    x = batch(rng, n=2, c=3, hw=(7, 7))
    v = rng.standard_normal(x.shape)
    weights = rng.standard_normal(x.shape)

    def f(t):
        out = apply(t, NONTRIVIAL[kind])
        return (out * out * Tensor(weights)).sum()

    assert check_directional(f, [x], 0, v) <= 1e-3


def test_siamese_identity_returns_inputs(rng):
    r, s = Tensor(batch(rng, 4)), Tensor(batch(rng, 2))
    ro, so = siamese_apply(r, s, IDENTITY)
    assert ro is r and so is s


def test_siamese_records_same_omega_and_flip_mirrors(rng):
    r, s = Tensor(batch(rng, 4)), Tensor(batch(rng, 2))
    pair = siamese_apply(r, s, NONTRIVIAL["flip"])
    assert pair.real_omega == pair.syn_omega == NONTRIVIAL["flip"]
    np.testing.assert_array_equal(pair[0].data, r.data[..., ::-1])
    np.testing.assert_array_equal(pair[1].data, s.data[..., ::-1])


def test_siamese_shape_mismatch_fails(rng):
    with pytest.raises(AugError):
        siamese_apply(Tensor(batch(rng, c=3)), Tensor(batch(rng, c=1)), IDENTITY)


_omega_strategy = st.one_of(
    st.builds(lambda a, b: AugParam("crop", shift=(a, b)), st.integers(-1, 1), st.integers(-1, 1)),
    st.builds(lambda a, b: AugParam("cutout", center=(a, b), side=4), st.integers(0, 7), st.integers(0, 7)),
    st.builds(lambda m: AugParam("flip", mirror=m), st.booleans()),
    st.builds(lambda a, b: AugParam("scale", scale=(a, b)), st.floats(1 / 1.2, 1.2), st.floats(1 / 1.2, 1.2)),
    st.builds(lambda a: AugParam("rotate", angle=a), st.floats(-15, 15)),
    st.builds(lambda a, b, c: AugParam("color", brightness=a, saturation=b, contrast=c),
              st.floats(0, 1), st.floats(0, 2), st.floats(0.5, 1.5)),
)


@settings(max_examples=60, deadline=None)
@given(_omega_strategy, st.integers(0, 2**31 - 1))
def test_siamese_equals_componentwise_apply(omega, seed):
    rng = np.random.default_rng(seed)
    r, s = Tensor(batch(rng, 3)), Tensor(batch(rng, 2))
    ro, so = siamese_apply(r, s, omega)
    assert ro.data.tobytes() == apply(r, omega).data.tobytes()
    assert so.data.tobytes() == apply(s, omega).data.tobytes()
    assert ro.shape == r.shape and so.shape == s.shape
    assert np.all(np.isfinite(ro.data))


@settings(max_examples=40, deadline=None)
@given(_omega_strategy, st.integers(0, 2**31 - 1))
def test_cutout_zero_and_outputs_finite(omega, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(batch(rng) + 5.0)
    out = apply(x, omega).data
    assert np.all(np.isfinite(out))
    if omega.kind == "cutout":
        mask = cutout_mask(HW, omega.center, omega.side)
        assert np.all(out[..., mask == 0] == 0.0)


def test_independent_augmentation_is_per_image(rng):
    x = Tensor(np.repeat(batch(rng, 1), 6, axis=0))
    out = augment_independent(x, AugDistribution("single", "rotate"), rng).data
    assert out.shape == x.shape
    assert len({out[i].tobytes() for i in range(6)}) > 1


def test_ranges_surface_in_distribution():
    ranges = AugRanges(rotate_deg=5.0)
    dist = dataclasses.replace(AugDistribution("single", "rotate"), ranges=ranges)
    rng = np.random.default_rng(0)
    assert all(abs(sample_omega(dist, rng, HW).angle) <= 5.0 for _ in range(50))
    assert augment.AugRanges().crop_pad((28, 28)) == (4, 4)
    assert augment.AugRanges().cutout_side((32, 32)) == 16
