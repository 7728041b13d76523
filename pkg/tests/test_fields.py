import numpy as np
import pytest
from conftest import check_grads
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tedsnet import fields as F
from tedsnet import ndtensor as nt
from tedsnet.ndtensor import DimensionError, Tensor

NO_SMOOTH = F.SmoothingConfig(enabled=False)


def field(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def const_field(H, W, cr, cc):
    d = np.zeros((2, H, W))
    d[0], d[1] = cr, cc
    return field(d)


# -- activation -----------------------------------------------------------------


def test_activation_values():
    assert np.all(F.diffeo_activation(field(np.zeros((2, 3, 3)))).data == 0)
    assert F.diffeo_activation(field([1.0])).data[0] == pytest.approx(0.5 * np.tanh(1.0), abs=1e-15)
    assert F.diffeo_activation(field([1.0])).data[0] == pytest.approx(0.380797077977882, abs=1e-12)
    sat = F.diffeo_activation(field([1000.0])).data[0]
    assert sat <= 0.5 and 0.5 - sat < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e6, 1e6)))
def test_activation_bound(u):
    assert np.all(np.abs(F.diffeo_activation(field(u)).data) <= 0.5)


# -- composition -----------------------------------------------------------------


def test_compose_identities(rng):
    d = field(rng.uniform(-2, 2, (2, 7, 9)))
    z = field(np.zeros((2, 7, 9)))
    np.testing.assert_array_equal(F.compose(z, d).data, d.data)
    np.testing.assert_array_equal(F.compose(d, z).data, d.data)


def test_compose_constant_fields():
    out = F.compose(const_field(12, 12, 0.3, -0.2), const_field(12, 12, 0.25, 0.4)).data
    np.testing.assert_allclose(out[0, 2:-2, 2:-2], 0.55, atol=1e-12)
    np.testing.assert_allclose(out[1, 2:-2, 2:-2], 0.2, atol=1e-12)


def test_compose_matches_pointwise_definition(rng):
    d1 = rng.uniform(-0.7, 0.7, (2, 6, 5))
    d2 = rng.uniform(-0.7, 0.7, (2, 6, 5))
    out = F.compose(field(d1), field(d2)).data
    for i in range(6):
        for j in range(5):
            r = min(max(i + d1[0, i, j], 0), 5)
            c = min(max(j + d1[1, i, j], 0), 4)
            r0, c0 = int(np.floor(r)), int(np.floor(c))
            r1, c1 = min(r0 + 1, 5), min(c0 + 1, 4)
            a, b = r - r0, c - c0
            for ch in range(2):
                s = d2[ch]
                want = (1 - a) * ((1 - b) * s[r0, c0] + b * s[r0, c1]) + a * ((1 - b) * s[r1, c0] + b * s[r1, c1])
                assert out[ch, i, j] == pytest.approx(d1[ch, i, j] + want, abs=1e-13)


def test_compose_grid_mismatch():
    with pytest.raises(DimensionError):
        F.compose(field(np.zeros((2, 4, 4))), field(np.zeros((2, 4, 5))))


def test_compose_grad(rng):
    a = field(rng.uniform(-0.45, 0.45, (2, 6, 7)), grad=True)
    b = field(rng.uniform(-0.45, 0.45, (2, 6, 7)), grad=True)
    probe = rng.normal(size=(2, 6, 7))
    check_grads(lambda: (F.compose(a, b) * probe).sum(), [a, b], rng, n_probe=10)


# -- smoothing -----------------------------------------------------------------------


def test_kernel_normalised():
    k = F.SmoothingConfig().kernel2d()
    assert k.shape == (5, 5)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


def test_smooth_constant_field():
    out = F.gaussian_smooth(const_field(9, 11, 1.7, -0.4)).data
    np.testing.assert_allclose(out[0], 1.7, atol=1e-14)
    np.testing.assert_allclose(out[1], -0.4, atol=1e-14)


def test_smooth_impulse_is_kernel():
    d = np.zeros((2, 9, 9))
    d[:, 4, 4] = 1.0
    out = F.gaussian_smooth(field(d)).data
    off = np.arange(-2, 3)
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2 * 2.0**2))
    g /= g.sum()
    np.testing.assert_allclose(out[0, 2:7, 2:7], g, atol=1e-15)
    assert np.count_nonzero(out[0]) == 25


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 6, 8), elements=st.floats(-50, 50)), arrays(np.float64, (2, 6, 8), elements=st.floats(-50, 50)))
def test_smooth_linear_and_contractive(a, b):
    sa = F.gaussian_smooth(field(a)).data
    sb = F.gaussian_smooth(field(b)).data
    np.testing.assert_allclose(F.gaussian_smooth(field(a + b)).data, sa + sb, atol=1e-12)
    assert np.abs(sa).max() <= np.abs(a).max() + 1e-12


def test_smooth_grad(rng):
    a = field(rng.normal(size=(2, 6, 7)), grad=True)
    probe = rng.normal(size=(2, 6, 7))
    check_grads(lambda: (F.gaussian_smooth(a) * probe).sum(), [a], rng)


# -- integration -------------------------------------------------------------------------


def test_integrate_zero():
    z = field(np.zeros((2, 8, 8)))
    for T in (0, 3, 8):
        assert np.all(F.integrate_ss(z, T).data == 0)


def test_integrate_T0_is_identity(rng):
    v = field(rng.uniform(-0.5, 0.5, (2, 5, 5)))
    assert F.integrate_ss(v, 0) is v


def test_integrate_constant_doubles():
    out = F.integrate_ss(const_field(24, 24, 0.3, 0.3), 3, NO_SMOOTH).data
    np.testing.assert_allclose(out[:, 8:-8, 8:-8], 2.4, atol=1e-9)


def test_integrate_negative_T():
    with pytest.raises(ValueError):
        F.integrate_ss(field(np.zeros((2, 3, 3))), -1)


@pytest.mark.parametrize("smooth", [True, False])
@pytest.mark.parametrize("T", [1, 4, 7])
def test_integrate_cap(rng, smooth, T):
    v = F.diffeo_activation(field(rng.normal(0, 3.0, (2, 10, 12))))
    out = F.integrate_ss(v, T, F.SmoothingConfig(enabled=smooth)).data
    assert np.abs(out).max() <= 0.5 * 2**T


def test_integrate_grad(rng):
    u = field(rng.normal(0, 0.05, (2, 6, 8)), grad=True)
    probe = rng.normal(size=(2, 6, 8))
    check_grads(lambda: (F.integrate_ss(F.diffeo_activation(u), 3) * probe).sum(), [u], rng, n_probe=10)


# -- super-upsampling -----------------------------------------------------------------------


def test_super_upsample_zero_and_constant():
    z = F.super_upsample(field(np.zeros((2, 4, 6))), 8, 12).data
    assert z.shape == (2, 8, 12) and np.all(z == 0)
    c = F.super_upsample(const_field(4, 6, 0.7, -1.1), 8, 12).data
    np.testing.assert_allclose(c[0], 1.4, atol=1e-14)
    np.testing.assert_allclose(c[1], -2.2, atol=1e-14)


def test_super_upsample_bulk_extents():
    h, w = 64, 96
    out = F.super_upsample(field(np.zeros((2, h // 8, w // 8))), 2 * h, 2 * w)
    assert out.shape == (2, 2 * h, 2 * w)


def test_super_upsample_anisotropic_units():
    c = F.super_upsample(const_field(4, 6, 1.0, 1.0), 16, 12).data
    np.testing.assert_allclose(c[0], 4.0)
    np.testing.assert_allclose(c[1], 2.0)


def test_super_upsample_grad(rng):
    a = field(rng.normal(size=(2, 3, 4)), grad=True)
    probe = rng.normal(size=(2, 12, 8))
    check_grads(lambda: (F.super_upsample(a, 12, 8) * probe).sum(), [a], rng)


# -- warping ---------------------------------------------------------------------------------


def test_warp_identity_exact(rng):
    img = field(rng.random((7, 9)))
    assert np.array_equal(F.warp(img, field(np.zeros((2, 7, 9)))).data, img.data)


def test_warp_integer_shift(rng):
    img = rng.random((10, 12))
    out = F.warp(field(img), const_field(10, 12, 2.0, -3.0)).data
    # out(r, c) = img(r + 2, c - 3) away from clamped borders
    np.testing.assert_array_equal(out[:8, 3:], img[2:, :9])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(0, 1)), arrays(np.float64, (2, 6, 7), elements=st.floats(-20, 20)))
def test_warp_range_preserved(img, d):
    out = F.warp(field(img), field(d)).data
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), arrays(np.float64, (2, 5, 6), elements=st.floats(-30, 30)))
def test_warp_constant_image(c, d):
    out = F.warp(field(np.full((5, 6), c)), field(d)).data
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_warp_batched_shapes(rng):
    imgs = field(rng.random((3, 6, 7)))
    ds = field(rng.normal(size=(3, 2, 6, 7)))
    assert F.warp(imgs, ds).shape == (3, 6, 7)
    with pytest.raises(DimensionError):
        F.warp(field(rng.random((6, 8))), field(np.zeros((2, 6, 7))))


def test_warp_grad(rng):
    img = field(rng.random((7, 8)), grad=True)
    d = field(rng.uniform(-1.5, 1.5, (2, 7, 8)), grad=True)
    probe = rng.normal(size=(7, 8))
    check_grads(lambda: (F.warp(img, d) * probe).sum(), [img, d], rng, n_probe=10)


# -- Jacobian ---------------------------------------------------------------------------------


def test_jacobian_identity():
    rep = F.jacobian_report(np.zeros((2, 5, 6)))
    assert rep.det_grid.shape == (4, 5)
    assert np.all(rep.det_grid == 1.0) and rep.frac_nonpositive == 0.0


def test_jacobian_uniform_scaling():
    H, W = 9, 11
    r, c = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d = np.stack([0.1 * (r - H / 2), 0.1 * (c - W / 2)])
    rep = F.jacobian_report(d)
    np.testing.assert_allclose(rep.det_grid, 1.21, atol=1e-14)
    assert rep.min_det == pytest.approx(1.21)


def test_jacobian_fold():
    H, W = 6, 5
    r = np.arange(H, dtype=float)[:, None] * np.ones((1, W))
    rep = F.jacobian_report(np.stack([-2.0 * r, np.zeros((H, W))]))
    assert np.all(rep.det_grid <= 0) and rep.frac_nonpositive == 1.0


def test_jacobian_fraction_counts(rng):
    d = rng.normal(0, 0.8, (2, 8, 8))
    rep = F.jacobian_report(d)
    assert rep.frac_nonpositive == np.count_nonzero(rep.det_grid <= 0) / rep.det_grid.size


def test_jacobian_degenerate_grid():
    with pytest.raises(DimensionError):
        F.jacobian_report(np.zeros((2, 1, 5)))


def test_random_fields_stay_diffeomorphic():
    # the full 1,000-field version lives in the acceptance suite
    rng = np.random.default_rng(3)
    for H, W in ((8, 12), (32, 48)):
        for _ in range(25):
            v = F.diffeo_activation(field(rng.normal(0, 0.1, (2, H, W))))
            phi = F.super_upsample(F.integrate_ss(v, 8), 128, 192)
            assert F.jacobian_report(phi).frac_nonpositive == 0.0
