import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfhom.errors import InvalidInputError, UnsupportedKindError
from perfhom.operator import (OperatorSpec, check_condition_A, eval_flux, eval_potential,
                              random_triples)

X0 = np.zeros(3)


def weighted(m=2.0):
    return OperatorSpec("weighted", m, weight=lambda x: 1.0 + 0.5 * np.sin(x[:, 0]) ** 2,
                        nu1=1.0, nu2=2.0)


def all_kinds(m):
    return [OperatorSpec("pure", m), OperatorSpec("regularized", m), weighted(m)]


# components stay normal after scaling, so rounding is relative
comp = st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-150)
vec = st.lists(comp, min_size=3, max_size=3).map(np.array)


# -- frozen values

def test_pure_m2_flux_is_identity():
    assert np.allclose(eval_flux(OperatorSpec("pure", 2.0), X0, [1, 2, 0]), [1, 2, 0])


def test_pure_m3_flux_scales_by_norm():
    assert np.allclose(eval_flux(OperatorSpec("pure", 3.0), X0, [2, 0, 0]), [4, 0, 0])


def test_potential_values():
    assert eval_potential(OperatorSpec("pure", 2.0), X0, [1, 2, 0]) == pytest.approx(2.5)
    assert eval_potential(OperatorSpec("pure", 3.0), X0, [2, 0, 0]) == pytest.approx(8 / 3)


def test_regularized_potential_closed_form():
    # m = 3: Phi(t) = t^2/2 + t^3/3
    op = OperatorSpec("regularized", 3.0)
    assert eval_potential(op, X0, [1.5, 0, 0]) == pytest.approx(1.5 ** 2 / 2 + 1.5 ** 3 / 3)


@pytest.mark.parametrize("m", [1.5, 2.0, 2.5])
def test_zero_gradient(m):
    for op in all_kinds(m):
        assert np.all(eval_flux(op, X0, np.zeros(3)) == 0)
        assert eval_potential(op, X0, np.zeros(3)) == 0


# -- Condition A

def test_linear_flux_monotonicity_gap_is_exact():
    op = OperatorSpec("pure", 2.0)
    samples = random_triples(3, 1000, seed=1)
    rep = check_condition_A(op, samples)
    assert rep.ok
    gaps = [np.dot(p - q, p - q) for _, p, q in samples]
    assert rep.monotonicity_min_gap == pytest.approx(min(gaps), rel=1e-12)
    assert rep.monotonicity_min_ratio == pytest.approx(1.0, rel=1e-12)


def test_adversarial_flux_reported_at_first_pair():
    op = OperatorSpec("pure", 2.0, flux_override=lambda x, p: -p)
    samples = random_triples(3, 50, seed=2)
    rep = check_condition_A(op, samples)
    mono = [v for v in rep.violations if v[0] == "monotonicity"]
    first = next(i for i, (_, p, q) in enumerate(samples) if np.any(p != q))
    assert mono and mono[0][1] == first


def test_regularized_default_margins():
    op = OperatorSpec("regularized", 2.5)
    rep = check_condition_A(op, random_triples(3, 10_000, seed=3))
    assert rep.ok
    assert rep.continuity_max_ratio <= 1.0
    assert rep.coercivity_min_ratio >= 1.0 - 1e-12


def test_override_has_no_potential():
    op = OperatorSpec("pure", 2.0, flux_override=lambda x, p: p)
    with pytest.raises(UnsupportedKindError):
        eval_potential(op, X0, [1, 0, 0])


# -- validation

def test_rejects_bad_specs():
    with pytest.raises(UnsupportedKindError):
        OperatorSpec("anisotropic", 2.0)
    with pytest.raises(InvalidInputError):
        OperatorSpec("pure", 1.0)
    with pytest.raises(InvalidInputError):
        OperatorSpec("weighted", 2.0)
    with pytest.raises(InvalidInputError):
        OperatorSpec("pure", 3.0, strict=True)
    with pytest.raises(InvalidInputError):
        eval_flux(OperatorSpec("pure", 2.0), X0, [np.nan, 0, 0])


def test_weight_range_check():
    op = OperatorSpec("weighted", 2.0, weight=lambda x: np.full(len(x), 3.0), nu1=1.0, nu2=2.0)
    with pytest.raises(InvalidInputError):
        op.check_weight(np.zeros((4, 3)))
    weighted().check_weight(np.random.default_rng(0).uniform(-1, 1, (100, 3)))


# -- properties

@settings(max_examples=200, deadline=None)
@given(p=vec, q=vec, m=st.sampled_from([1.5, 2.0, 2.5, 3.0]))
def test_monotone(p, q, m):
    for op in all_kinds(m):
        gap = np.dot(eval_flux(op, X0, p) - eval_flux(op, X0, q), p - q)
        assert gap >= -1e-12 * (1 + np.abs(p).sum() + np.abs(q).sum()) ** m


@settings(max_examples=200, deadline=None)
@given(p=vec.filter(lambda v: 0.1 < np.linalg.norm(v)), m=st.sampled_from([1.5, 2.0, 2.5, 3.0]))
def test_gradient_consistency(p, m):
    x = np.array([0.3, -0.2, 0.1])
    for op in all_kinds(m):
        step = 1e-5
        fd = np.array([(eval_potential(op, x, p + step * e) - eval_potential(op, x, p - step * e))
                       / (2 * step) for e in np.eye(3)])
        a = eval_flux(op, x, p)
        assert np.linalg.norm(fd - a) <= 1e-6 * np.linalg.norm(a)


@settings(max_examples=200, deadline=None)
@given(p=vec, lam=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3),
       m=st.sampled_from([1.5, 2.0, 2.5, 3.0]))
def test_homogeneous_kinds(p, lam, m):
    x = np.array([0.1, 0.2, 0.3])
    for op in (OperatorSpec("pure", m), weighted(m)):
        lhs = eval_flux(op, x, lam * p)
        rhs = abs(lam) ** (m - 2) * lam * eval_flux(op, x, p)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-300)


def test_regularized_not_homogeneous():
    op = OperatorSpec("regularized", 2.5)
    p = np.array([1.0, 0, 0])
    assert not np.allclose(eval_flux(op, X0, 2 * p), 2 ** 1.5 * eval_flux(op, X0, p))
    assert not op.homogeneous


@pytest.mark.parametrize("m", [1.5, 2.5, 3.0])
def test_weighted_margins_scale_with_weight_bounds(m):
    rep = check_condition_A(weighted(m), random_triples(3, 10_000, seed=5))
    assert rep.ok
    assert rep.coercivity_min_ratio >= 1.0 - 1e-12
