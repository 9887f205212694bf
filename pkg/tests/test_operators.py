import math

import numpy as np
import pytest
from scipy.integrate import quad

from forward_curves.errors import CurveDomainError, CurveRangeError, InvertibilityError, StructuralError
from forward_curves.operators import MultiplicativeKernel, exp_map, invert_kernel, log_map, mult_apply
from forward_curves.space_core import Cone, CurveGrid, cone_membership, norm


def _smooth_curve(space, rng):
    a, b, r = rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.2, 3)
    return CurveGrid.from_function(space, lambda x: a + b * np.exp(-r * x), tail=a)


def test_identity_kernel_leaves_curve_unchanged(space, saturating):
    f = saturating(space)
    result = mult_apply(MultiplicativeKernel(CurveGrid.constant(space, 1.0)), f)
    np.testing.assert_array_equal(result.values, f.values)
    assert result.tail == f.tail


def test_constant_kernels_multiply(space):
    h = MultiplicativeKernel(CurveGrid.constant(space, 2.0))
    product = mult_apply(h, CurveGrid.constant(space, 3.0))
    np.testing.assert_array_equal(product.values, 6.0)
    assert norm(product) == pytest.approx(6.0)
    assert norm(product) <= h.operator_norm_bound() * 3.0


def test_multiplicative_bound_on_random_smooth_curves(space, rng):
    assert space.k_mult == pytest.approx(3.0)
    for _ in range(200):
        h, f = _smooth_curve(space, rng), _smooth_curve(space, rng)
        product = mult_apply(MultiplicativeKernel(h), f)
        assert norm(product) <= 3.0 * norm(h) * norm(f) * (1 + 1e-2)


def test_mult_apply_rejects_mismatched_spaces(space, coarse_space):
    with pytest.raises(StructuralError):
        mult_apply(MultiplicativeKernel(CurveGrid.constant(space, 1.0)), CurveGrid.constant(coarse_space, 1.0))


def test_invert_constant_kernel(space):
    inverse = invert_kernel(MultiplicativeKernel(CurveGrid.constant(space, 2.0)))
    np.testing.assert_array_equal(inverse.kernel.values, 0.5)
    assert inverse.kernel.tail == 0.5


def test_inverse_roundtrip(space, saturating):
    h = MultiplicativeKernel(CurveGrid.from_function(space, lambda x: 1 + np.exp(-x), tail=1.0))
    assert h.cone is Cone.STRICTLY_POSITIVE
    inverse = invert_kernel(h)
    np.testing.assert_allclose(inverse.kernel.values, 1 / (1 + np.exp(-space.nodes)), rtol=1e-15)
    assert inverse.kernel.tail == 1.0

    f = saturating(space) + CurveGrid.constant(space, 0.25)
    roundtrip = mult_apply(inverse, mult_apply(h, f))
    np.testing.assert_allclose(roundtrip.values, f.values, rtol=1e-13)


def test_negative_kernel_is_invertible(space):
    h = MultiplicativeKernel(CurveGrid.constant(space, -4.0))
    assert h.invertible
    np.testing.assert_array_equal(invert_kernel(h).kernel.values, -0.25)


def test_boundary_kernel_names_the_tail(space):
    h = MultiplicativeKernel(CurveGrid.from_function(space, lambda x: np.exp(-x), tail=0.0))
    with pytest.raises(InvertibilityError) as err:
        invert_kernel(h)
    assert err.value.node == 'tail'


def test_sign_change_names_the_node(space):
    values = np.ones(space.n_nodes)
    values[42] = 0.0
    with pytest.raises(InvertibilityError) as err:
        invert_kernel(MultiplicativeKernel(CurveGrid(values, space, 1.0)))
    assert err.value.node == 42


def test_equal_infimum_does_not_fix_the_norm(space):
    """Two kernels with the same inf |h| can have very different norms"""
    flat = CurveGrid.constant(space, 1.0)
    wiggly = CurveGrid.from_function(space, lambda x: 2.0 + np.cos(5 * np.pi * x) * np.exp(-x), tail=2.0)
    wiggly = wiggly - CurveGrid.constant(space, float(np.min(wiggly.values)) - 1.0)
    assert np.min(flat.values) == pytest.approx(np.min(wiggly.values))
    assert norm(wiggly) > 5 * norm(flat)
    assert MultiplicativeKernel(flat).invertible and MultiplicativeKernel(wiggly).invertible


def test_exp_map_constants(space):
    np.testing.assert_array_equal(exp_map(CurveGrid.zeros(space)).values, 1.0)
    np.testing.assert_allclose(exp_map(CurveGrid.constant(space, math.log(2))).values, 2.0, rtol=1e-15)


def test_exp_map_matches_quadrature(fine_space, saturating):
    result = exp_map(saturating(fine_space))
    x = fine_space.nodes
    np.testing.assert_allclose(result.values, np.exp(1 - np.exp(-x)), rtol=1e-15)
    assert result.tail == pytest.approx(math.e)

    # (e^f)' = e^{-x} e^{1 - e^{-x}}, so the norm squared is 1 + int e^{-x} e^{2 - 2 e^{-x}} dx
    oracle = 1.0 + quad(lambda s: np.exp(-s) * np.exp(2 - 2 * np.exp(-s)), 0.0, fine_space.x_max)[0]
    assert norm(result) ** 2 == pytest.approx(oracle, rel=1e-3)


def test_exp_map_overflow(space):
    values = np.zeros(space.n_nodes)
    values[3] = 1000.0
    with pytest.raises(CurveRangeError) as err:
        exp_map(CurveGrid(values, space, 0.0))
    assert err.value.node == 3


def test_log_map(space):
    np.testing.assert_array_equal(log_map(CurveGrid.constant(space, 1.0)).values, 0.0)
    np.testing.assert_allclose(log_map(CurveGrid.constant(space, math.e)).values, 1.0, rtol=1e-15)
    with pytest.raises(CurveDomainError):
        log_map(CurveGrid.from_function(space, lambda x: np.exp(-x), tail=0.0))
    with pytest.raises(CurveDomainError) as err:
        log_map(CurveGrid.constant(space, -1.0))
    assert err.value.node == 0


def test_log_exp_roundtrip(space, rng):
    for _ in range(50):
        f = _smooth_curve(space, rng)
        np.testing.assert_allclose(log_map(exp_map(f)).values, f.values, rtol=1e-13, atol=1e-14)


def _kernel(space, rng, sign=1.0):
    """Random kernel bounded away from zero with the given sign"""
    a, b, r = rng.uniform(0.5, 2), rng.uniform(-0.4, 0.4), rng.uniform(0.2, 3)
    return MultiplicativeKernel(CurveGrid.from_function(space, lambda x: sign * (a + b * np.exp(-r * x)),
                                                        tail=sign * a))


def test_mult_apply_is_linear(space, rng):
    for _ in range(50):
        h = MultiplicativeKernel(_smooth_curve(space, rng))
        f, g = _smooth_curve(space, rng), _smooth_curve(space, rng)
        a, b = rng.normal(size=2)
        combined = mult_apply(h, f * a + g * b)
        separate = mult_apply(h, f) * a + mult_apply(h, g) * b
        np.testing.assert_allclose(combined.values, separate.values, rtol=1e-12, atol=1e-12)
        assert combined.tail == pytest.approx(separate.tail, rel=1e-12, abs=1e-12)


def test_exp_map_lands_in_positive_cone(space, rng):
    for _ in range(100):
        assert cone_membership(exp_map(_smooth_curve(space, rng))) is Cone.STRICTLY_POSITIVE


@pytest.mark.parametrize('sign', [1.0, -1.0])
def test_double_inversion_returns_the_kernel(space, rng, sign):
    for _ in range(50):
        h = _kernel(space, rng, sign)
        twice = invert_kernel(invert_kernel(h))
        np.testing.assert_allclose(twice.kernel.values, h.kernel.values, rtol=1e-14)
        assert twice.kernel.tail == pytest.approx(h.kernel.tail, rel=1e-14)


def test_negative_kernel_roundtrip(space, rng):
    for _ in range(50):
        h = _kernel(space, rng, sign=-1.0)
        assert h.cone is Cone.STRICTLY_NEGATIVE
        f = _smooth_curve(space, rng)
        roundtrip = mult_apply(invert_kernel(h), mult_apply(h, f))
        np.testing.assert_allclose(roundtrip.values, f.values, rtol=1e-13, atol=1e-14)


@pytest.mark.slow
def test_multiplicative_bound_on_a_thousand_pairs(space):
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        h, f = _smooth_curve(space, rng), _smooth_curve(space, rng)
        product = mult_apply(MultiplicativeKernel(h), f)
        assert norm(product) <= space.k_mult * norm(h) * norm(f) * (1 + 1e-2)
