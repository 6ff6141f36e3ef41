import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from perfhom.errors import EmptyCellError, InvalidInputError, ResolutionError
from perfhom.grid import (HOLE, INTERIOR, OUTSIDE, BumpSpec, GridSpec, MollifierSpec,
                          PerforationFamily, ScalarField, build_perforation, cell_mean,
                          cell_mean_mollified, load_field, load_mask, mollify, norms, save_field,
                          save_mask)


def unit_grid(h=1 / 32):
    """Omega_0 = [0, 1]^3, used where the margin rule is irrelevant."""
    return GridSpec(3, 0.5, 0.25, h, (0.5, 0.5, 0.5), check_margin=False)


def counting_oracle(grid, centers, a):
    """Hole nodes by looping over centres, independent of the lattice arithmetic."""
    pts = [grid.axis(i) for i in range(3)]
    hit = np.zeros(grid.shape, dtype=bool)
    inside = grid.inside_omega()
    for c in centers:
        sl, sub = [], []
        for i in range(3):
            k = np.flatnonzero(np.abs(pts[i] - c[i]) <= a + grid.h)
            sl.append(slice(k[0], k[-1] + 1))
            sub.append(pts[i][k] - c[i])
        r2 = sub[0][:, None, None] ** 2 + sub[1][None, :, None] ** 2 + sub[2][None, None, :] ** 2
        hit[tuple(sl)] |= r2 <= a * a * (1 + 1e-12)
    return hit & inside


# -- GridSpec

def test_grid_validation():
    with pytest.raises(InvalidInputError):
        GridSpec(3, 1.0, 0.5, 1 / 16)          # margin < 1
    with pytest.raises(InvalidInputError):
        GridSpec(3, 1.5, 0.5, 0.7)             # non-integer node count
    with pytest.raises(InvalidInputError):
        GridSpec(3, 1.5, 0.5, 1.0)             # fewer than 8 nodes
    g = GridSpec(3, 1.5, 0.5, 1 / 8)
    assert g.nodes_per_axis == 25
    assert g.quadrature_weights().sum() == pytest.approx(27.0)


def test_field_rejects_nonfinite():
    g = GridSpec(3, 1.5, 0.5, 1 / 4)
    with pytest.raises(InvalidInputError):
        ScalarField(g, np.full(g.shape, np.nan))


def test_bump_spec():
    g = GridSpec(3, 1.5, 0.5, 1 / 8)
    psi = BumpSpec().field(g).values
    assert np.all(psi[g.inside_omega(closed=True)] == 1.0)
    assert np.all((psi >= 0) & (psi <= 1))
    near = np.zeros(g.shape, dtype=bool)
    for a, c in zip(g.mesh(), g.center):
        near |= np.abs(a - c) >= g.omega0_halfwidth - g.h - 1e-12
    assert np.all(psi[near] == 0)


# -- perforations

def test_no_holes_for_zero_c0():
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    mask = build_perforation(PerforationFamily(0.0, cell_sizes=(0.25,)), 1, g)
    assert mask.hole_count() == 0
    assert np.array_equal(mask.labels == INTERIOR, g.inside_omega())


def test_hole_count_near_volume_oracle():
    # d = 0.25, a = 0.2 * 0.25 = 0.05 on a side-1 inner cube: 4^3 cells
    g = GridSpec(3, 1.5, 0.5, 1 / 80)
    fam = PerforationFamily(0.2, gamma=1.0, cell_sizes=(0.25,))
    a = fam.a(1)
    assert a == pytest.approx(0.05)
    mask = build_perforation(fam, 1, g)
    expected = 64 * (4 / 3) * math.pi * a ** 3 / g.h ** 3
    layer = 64 * 4 * math.pi * a ** 2 / g.h ** 2
    assert abs(mask.hole_count() - expected) <= layer
    assert len(mask.centers) == 64


def test_perforation_matches_counting_oracle():
    g = GridSpec(3, 1.5, 0.5, 1 / 40)
    fam = PerforationFamily(0.6, gamma=2.0, cell_sizes=(0.5, 1 / 3))
    for s in (1, 2):
        mask = build_perforation(fam, s, g)
        assert np.array_equal(mask.holes, counting_oracle(g, mask.centers, fam.a(s)))


def test_volume_fraction_ratio_between_levels():
    g = GridSpec(3, 1.5, 0.5, 1 / 60)
    fam = PerforationFamily(1.5, gamma=3.0, cell_sizes=(0.5, 1 / 3))
    counts = [build_perforation(fam, s, g).hole_count() for s in (1, 2)]
    d1, d2 = fam.d(1), fam.d(2)
    oracle_counts = [counting_oracle(g, build_perforation(fam, s, g).centers, fam.a(s)).sum()
                     for s in (1, 2)]
    assert counts == oracle_counts
    # volume fraction (a/d)^3 = c0^3 d^(3 gamma - 3)
    analytic = (d2 / d1) ** (3 * 3.0 - 3)
    assert counts[1] / counts[0] == pytest.approx(analytic, rel=0.25)


def test_perforation_periodic():
    g = GridSpec(3, 1.5, 0.5, 1 / 40)
    fam = PerforationFamily(1.0, gamma=2.0, cell_sizes=(0.25,))
    mask = build_perforation(fam, 1, g)
    k = int(round(fam.d(1) / g.h))
    inner = g.inside_omega()
    shifted = np.roll(mask.holes, k, axis=0)
    both = inner & np.roll(inner, k, axis=0)
    assert np.array_equal(shifted[both], mask.holes[both])


def test_under_resolved_hole_reports_required_h():
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    fam = PerforationFamily(1.0, gamma=3.0, cell_sizes=(0.4,))
    with pytest.raises(ResolutionError) as err:
        build_perforation(fam, 1, g)
    assert err.value.required_h == pytest.approx(fam.a(1) / 2)


def test_family_rules():
    with pytest.raises(InvalidInputError):
        PerforationFamily(0.1, cell_sizes=(0.5, 0.5))
    with pytest.raises(InvalidInputError):
        PerforationFamily(10.0, cell_sizes=(0.5,)).a(1)
    assert PerforationFamily(0.1, m=2.0, n=3).exponent == 3.0


def test_center_alignment_puts_hole_at_origin():
    g = GridSpec(3, 1.5, 0.5, 1 / 30)
    fam = PerforationFamily(1.9, cell_sizes=(0.5,), align="center")
    mask = build_perforation(fam, 1, g)
    assert mask.labels[g.index_of((0.0, 0.0, 0.0))] == HOLE


# -- mollifier

def test_kernel_normalization():
    K = MollifierSpec()
    mass = integrate.quad(lambda t: 4 * math.pi * t * t * K.profile(t), 0, 1,
                          epsabs=1e-13, epsrel=1e-13)[0]
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert K.profile(0.0) == pytest.approx(K.bound)
    assert K.quadrature_mass(1 / 64, 8 / 64) == pytest.approx(1.0, abs=5e-3)


def _interior(g, k):
    sl = tuple(slice(k, -k) for _ in range(g.n))
    return sl


def test_mollify_constant_and_linear():
    g = unit_grid()
    h = 4 * g.h
    k = int(h / g.h) + 1
    u = mollify(ScalarField.constant(g, 5.0), h)
    assert np.allclose(u.values[_interior(g, k)], 5.0, atol=1e-10)
    lin = ScalarField.from_function(g, lambda x, y, z: x + 0 * y + 0 * z)
    ul = mollify(lin, h)
    assert np.allclose(ul.values[_interior(g, k)], lin.values[_interior(g, k)], atol=1e-6)


def test_mollify_step():
    g = unit_grid()
    u = ScalarField.from_function(g, lambda x, y, z: np.where(x > 0.5, 1.0, 0.0) + 0 * y + 0 * z)
    v = mollify(u, 4 * g.h)
    assert v.values.max() <= u.values.max() + 1e-12
    # away from the zero extension past the outer boundary
    line_u = u.values[5:-5, 16, 16]
    line_v = v.values[5:-5, 16, 16]
    assert np.abs(np.diff(line_v)).sum() <= np.abs(np.diff(line_u)).sum() + 1e-12
    assert np.abs(np.diff(line_v)).max() < 0.5


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_mollify_linear(a, b, seed):
    g = GridSpec(3, 0.5, 0.25, 1 / 8, check_margin=False)
    rng = np.random.default_rng(seed)
    u = ScalarField(g, rng.normal(size=g.shape))
    v = ScalarField(g, rng.normal(size=g.shape))
    lhs = mollify(u * a + v * b, 2 * g.h).values
    rhs = (mollify(u, 2 * g.h) * a + mollify(v, 2 * g.h) * b).values
    assert np.allclose(lhs, rhs, atol=1e-12)


# -- cell means and norms

def test_cell_mean():
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    assert cell_mean(ScalarField.constant(g, 2.5), (0, 0, 0), 0.25) == pytest.approx(2.5)
    x1 = ScalarField.from_function(g, lambda x, y, z: x + 0 * y + 0 * z)
    assert abs(cell_mean(x1, (0, 0, 0), 0.25)) <= g.h ** 2
    rng = np.random.default_rng(4)
    u = ScalarField(g, rng.normal(size=g.shape))
    i, j, k = g.index_of((0.125, 0.0, -0.125))
    block = u.values[i - 2:i + 3, j - 2:j + 3, k - 2:k + 3]
    assert cell_mean(u, (0.125, 0.0, -0.125), 2 * g.h) == pytest.approx(block.sum() / 125,
                                                                           rel=1e-14)
    with pytest.raises(EmptyCellError):
        cell_mean(u, (0.01, 0.01, 0.01), 0.001)


def test_cell_mean_of_mollified_is_fused_quadrature():
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    rng = np.random.default_rng(5)
    u = ScalarField(g, rng.normal(size=g.shape))
    h = 3 * g.h
    a = cell_mean(mollify(u, h), (0.25, 0, 0), 0.25)
    b = cell_mean_mollified(u, h, (0.25, 0, 0), 0.25)
    assert a == pytest.approx(b, abs=1e-10)


def test_norms_values():
    g = unit_grid(1 / 64)
    assert norms(ScalarField.constant(g, 0.0), 2) == (0.0, 0.0)
    x1 = ScalarField.from_function(g, lambda x, y, z: x + 0 * y + 0 * z)
    assert norms(x1, 2)[1] == pytest.approx(1.0, abs=g.h ** 2)
    s = ScalarField.from_function(g, lambda x, y, z: np.sin(np.pi * x) + 0 * y + 0 * z)
    assert norms(s, 2)[0] == pytest.approx(math.sqrt(0.5), rel=0.01)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_norms_monotone_under_domination(seed, p):
    g = GridSpec(3, 0.5, 0.25, 1 / 8, check_margin=False)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=g.shape)
    u = v * rng.uniform(-1, 1, size=g.shape)
    assert norms(ScalarField(g, u), p)[0] <= norms(ScalarField(g, v), p)[0] + 1e-12


# -- I/O

def test_field_and_mask_roundtrip(tmp_path):
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    u = ScalarField(g, np.random.default_rng(6).normal(size=g.shape))
    back = load_field(save_field(u, tmp_path / "u.raw"))
    assert back.grid.key == g.key and np.array_equal(back.values, u.values)
    mask = build_perforation(PerforationFamily(1.0, gamma=3.0, cell_sizes=(0.5,)), 1,
                             GridSpec(3, 1.5, 0.5, 1 / 32))
    mb = load_mask(save_mask(mask, tmp_path / "m.raw"))
    assert np.array_equal(mb.labels, mask.labels)
    assert set(np.unique(mb.labels)) <= {INTERIOR, HOLE, OUTSIDE}
