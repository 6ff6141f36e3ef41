import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfhom.capacity import (CompactSet, ConditionBReport, ball_capacity, box_green_radius,
                              capacity_grid, check_homogeneity, combine_scans, compute_CA,
                              compute_Cm, diagnostics_estimates, harmonic_box_correction,
                              potential_v, richardson, scan_condition_B, two_box_extrapolation,
                              whole_space_Cm)
from perfhom.errors import InvalidInputError, NotApplicableError, PremiseError, ResolutionError
from perfhom.grid import GridSpec, PerforationFamily, build_perforation
from perfhom.operator import OperatorSpec

TOL = 1e-8
H = 1 / 16


def pure(m=2.0):
    return OperatorSpec("pure", m)


# -- closed forms and helpers

def test_ball_capacity_closed_form():
    assert ball_capacity(0.25, 2.0, 3) == pytest.approx(math.pi)
    # m = 2.5: 4 pi (1/3)^1.5 a^0.5
    assert ball_capacity(0.25, 2.5, 3) == pytest.approx(4 * math.pi * 3 ** -1.5 * 0.5)


def test_harmonic_correction_inverts_series_law():
    L, C_inf = 1.25, 3.0
    C_box = 1 / (1 / C_inf - 1 / (4 * math.pi * box_green_radius(L)))
    assert harmonic_box_correction(C_box, L) == pytest.approx(C_inf)


def test_two_box_recovers_exact_law():
    m, n, C_inf, beta = 2.5, 3, 2.0, 0.3
    e, k = -1 / (m - 1), (m - n) / (m - 1)
    C = lambda L: (C_inf ** e - beta * L ** k) ** (1 / e)
    assert two_box_extrapolation(C(1.0), 1.0, C(2.0), 2.0, m, n) == pytest.approx(C_inf)


def test_richardson_first_order():
    f = lambda h: 3.0 + 2.0 * h
    assert richardson([0.1, 0.05], [f(0.1), f(0.05)]) == pytest.approx(3.0)


# -- C_m

def test_empty_set_has_zero_capacity():
    rep = compute_Cm(CompactSet.empty(), capacity_grid(CompactSet.cube(0.25), H))
    assert rep.value == 0.0


def test_capacity_monotone_in_set():
    g = capacity_grid(CompactSet.cube(0.4), H)
    small = compute_Cm(CompactSet.ball(0.2), g, TOL).value
    big = compute_Cm(CompactSet.ball(0.3), g, TOL).value
    cube = compute_Cm(CompactSet.cube(0.3), g, TOL).value
    assert 0 < small <= big + TOL <= cube + 2 * TOL


def test_capacity_scaling_m2():
    # doubling radius and box together doubles C_2 (n - m = 1)
    h = 1 / 32
    c1 = compute_Cm(CompactSet.ball(0.25), h=h, margin=0.5).value
    c2 = compute_Cm(CompactSet.ball(0.5), h=h, margin=1.0).value
    assert c2 / c1 == pytest.approx(2.0, rel=0.05)


def test_resolution_guard():
    with pytest.raises(ResolutionError):
        compute_Cm(CompactSet.ball(0.05), h=1 / 16)


def test_whole_space_ball_m2_coarse():
    est = whole_space_Cm(CompactSet.ball(0.25), [1 / 16, 1 / 24])
    assert est.method == "harmonic"
    assert est.value == pytest.approx(math.pi, rel=0.08)
    # a grounded box raises capacity, so the correction lowers it
    assert all(c < b for b, c in zip(est.box_values, est.corrected))


@pytest.mark.slow
def test_whole_space_ball_m25():
    est = whole_space_Cm(CompactSet.ball(0.25), [1 / 16, 1 / 24], 2.5)
    assert est.value == pytest.approx(ball_capacity(0.25, 2.5, 3), rel=0.08)


def test_whole_space_needs_m_below_n():
    with pytest.raises(NotApplicableError):
        whole_space_Cm(CompactSet.ball(0.25), [1 / 16], 3.0)


# -- potentials and C_A

def test_zero_level_gives_zero():
    rep = potential_v(pure(), CompactSet.ball(0.25), 0.0, h=H)
    assert rep.value == 0.0
    assert compute_CA(pure(3.0), CompactSet.ball(0.25), 0.0, h=H).value == 0.0


def test_potential_profile_m2():
    F = CompactSet.ball(0.25)
    rep = potential_v(pure(), F, 1.0, h=H)
    v = rep.potential.values
    g = rep.grid
    assert np.all(v[F.realize(g)] == pytest.approx(1.0))
    assert v.max() == pytest.approx(1.0)
    assert v.min() >= 0
    line = [v[g.index_of((x, 0, 0))] for x in (0.25, 0.375, 0.5, 0.75, 1.0)]
    assert all(a > b for a, b in zip(line, line[1:]))
    # spherical condenser between the ball and the box's effective radius;
    # the staircase bias is first order in h, so extrapolate from two grids
    fine = potential_v(pure(), F, 1.0, h=H / 2)
    v2 = fine.potential.values[fine.grid.index_of((0.375, 0, 0))]
    R = box_green_radius(g.omega0_halfwidth)
    exact = 0.25 * (1 / 0.375 - 1 / R) / (1 - 0.25 / R)
    assert 2 * v2 - line[1] == pytest.approx(exact, rel=0.03)


def test_CA_equals_Cm_pure_m2_and_m3():
    F = CompactSet.cube(0.25, (0.0625, 0, 0))
    for m in (2.0, 3.0):
        g = capacity_grid(F, H)
        ca = compute_CA(pure(m), F, 1.0, TOL, grid=g).value
        cm = compute_Cm(F, g, TOL, m).value
        assert abs(ca - cm) <= 2 * TOL * max(1.0, cm)


def test_homogeneity_m3_factor_four():
    F = CompactSet.ball(0.25)
    g = capacity_grid(F, H)
    c1 = compute_CA(pure(3.0), F, 1.0, 1e-10, grid=g).value
    c2 = compute_CA(pure(3.0), F, 2.0, 1e-10, grid=g).value
    assert c2 / c1 == pytest.approx(4.0, rel=1e-4)


def test_homogeneity_report():
    F = CompactSet.ball(0.25)
    g = capacity_grid(F, H)
    rep = check_homogeneity(pure(), F, 1.0, [1.0, -1.0, 0.5, 2.0, 4.0], TOL, grid=g)
    assert rep.deviations[0] == 0.0
    assert rep.max_deviation <= 1e-4
    assert rep.values[1] == pytest.approx(-rep.base, abs=10 * TOL)
    with pytest.raises(NotApplicableError):
        check_homogeneity(OperatorSpec("regularized", 2.5), F, 1.0, [2.0], grid=g)


def test_regularized_CA_is_not_homogeneous():
    F = CompactSet.ball(0.25)
    g = capacity_grid(F, H)
    op = OperatorSpec("regularized", 2.5)
    c1 = compute_CA(op, F, 1.0, TOL, grid=g).value
    c2 = compute_CA(op, F, 2.0, TOL, grid=g).value
    assert c2 > 0 and abs(c2 / c1 - 2 ** 1.5) > 1e-3


@settings(max_examples=6, deadline=None)
@given(q=st.floats(-3, 3).filter(lambda v: abs(v) > 0.05),
       r=st.sampled_from([0.1875, 0.25]),
       kind=st.sampled_from(["pure", "regularized"]),
       m=st.sampled_from([2.0, 2.5]))
def test_potential_range(q, r, kind, m):
    op = OperatorSpec(kind, m)
    rep = potential_v(op, CompactSet.ball(r, (0.0625, 0, 0)), q, h=1 / 12)
    ratio = rep.potential.values / q
    assert ratio.min() >= -1e-12 and ratio.max() <= 1 + 1e-12


# -- Condition B

def test_scan_without_holes_is_zero():
    g = GridSpec(3, 1.5, 0.5, 1 / 16)
    mask = build_perforation(PerforationFamily(0.0, cell_sizes=(0.25,)), 1, g)
    rep = scan_condition_B(mask, [0.125], stride=4, max_centers=4)
    assert rep.A == 0.0 and all(e["C"] == 0.0 for e in rep.entries)


def test_scan_fit_monotone_in_scan_set():
    g = GridSpec(3, 1.5, 0.5, 1 / 24)
    fam = PerforationFamily(0.8, gamma=2.0, cell_sizes=(0.5,), align="center")
    mask = build_perforation(fam, 1, g)
    few = scan_condition_B(mask, [0.125], stride=6, offset=0, max_centers=1)
    more = scan_condition_B(mask, [0.125], stride=6, offset=0)
    assert len(more.entries) == 27
    assert 0 <= few.A <= more.A and more.A > 0
    assert more.A_volume == pytest.approx(more.A / 8)
    assert more.to_json()["A"] == more.A


def test_combine_scans_richardson():
    e = lambda C: {"center": [0.0, 0.0, 0.0], "r": 0.25, "C_box": C, "C": C, "ratio": C / 0.25 ** 3}
    a = ConditionBReport([0.25], [e(1.0)], 0, {}, [], 0.25)
    b = ConditionBReport([0.25], [e(1.5)], 0, {}, [], 0.25)
    rep = combine_scans([a, b], [0.1, 0.05])
    assert rep.entries[0]["C"] == pytest.approx(2.0)
    assert rep.A == pytest.approx(2.0 / 0.25 ** 3)
    with pytest.raises(InvalidInputError):
        combine_scans([a], [0.1])


# -- estimate diagnostics

def test_diagnostics_zero_level():
    est = diagnostics_estimates(pure(), CompactSet.ball(0.2), 0.0, [0.1, 0.5], 0.2, H)
    assert est.lhs_22 == [0.0, 0.0] and est.K1 == 0.0


def test_diagnostics_sublevel_energy_m2():
    est = diagnostics_estimates(pure(), CompactSet.ball(0.2), 1.0, [0.25, 0.5, 1.0], 0.2, H,
                                margin=2.0)
    # at mu = |q| the sublevel energy is the whole energy q^2 C_2(F)
    assert est.ratio_22[-1] == pytest.approx(1.0, rel=1e-6)
    # linear growth in mu below |q|
    assert est.lhs_22[1] <= 2 * est.lhs_22[0] * 1.1
    # far-field decay of the m = 2 potential is |x|^-1
    assert est.decay_exponent == pytest.approx(-1.0, abs=0.5)
    assert np.isfinite(est.K2) and np.isfinite(est.K3)


def test_diagnostics_premises():
    with pytest.raises(PremiseError):
        diagnostics_estimates(pure(), CompactSet.ball(0.2), 1.0, [0.5], 0.2, H, A=1e-3)
    est = diagnostics_estimates(pure(), CompactSet.ball(0.2), 1.0, [0.5], 0.2, H, A=1e-3,
                                check_premises=False)
    assert math.isnan(est.K3)
    with pytest.raises(InvalidInputError):
        diagnostics_estimates(pure(), CompactSet.ball(0.3), 1.0, [0.5], 0.2, H)
