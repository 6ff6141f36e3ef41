"""Schedules, subdivisions, correctors, capacity densities and experiments.

The corrector of a perforation level s is

    r_s(x) = sum_alpha v_alpha(x, q_alpha) phi_alpha(x)

where the sum runs over the interior cubes of a lattice subdivision,
v_alpha is the capacitary potential of the holes inside the inner cube
K'(alpha) and phi_alpha is a level-set cut-off of a second potential
w_alpha taken at a modified level.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from .capacity import CompactSet, capacity_grid, compute_CA, hole_nodes, richardson
from .errors import (DegenerateSubdivisionError, InvalidInputError, InvalidScheduleError,
                     InvalidTestFunctionError)
from .grid import (BumpSpec, DomainMask, GridSpec, MollifierSpec, PerforationFamily,
                   ScalarField, cell_mean, cube_nodes, mollify, norms, HOLE, OUTSIDE)
from .operator import OperatorSpec
from .solver import (DensityTerm, LinearDensity, PowerDensity, TabulatedDensity,
                     energy_integrals, flux_pairing)

log = logging.getLogger(__name__)


# ------------------------------------------------------------ schedule

@dataclass
class Schedule:
    rho: tuple
    mu: tuple
    lam: tuple
    mode: str
    m: float
    deviation: bool
    notes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rho)

    def level(self, s: int) -> tuple:
        """(rho_s, mu_s, lambda_s) for 1-based s."""
        if not 1 <= s <= len(self.rho):
            raise InvalidInputError(f"schedule has no level {s}")
        return self.rho[s - 1], self.mu[s - 1], self.lam[s - 1]

    def to_json(self) -> dict:
        return {"rho": list(self.rho), "mu": list(self.mu), "lambda": list(self.lam),
                "mode": self.mode, "m": self.m, "deviation": self.deviation,
                "notes": list(self.notes)}


def integer_part_lambda(rho: float, m: float) -> int:
    return int(math.floor(math.floor(math.log(1.0 / rho)) ** (2 * m)))


def build_schedule(rhos: Sequence[float], m: float, mode: str = "override",
                   lambdas: Sequence[int] | None = None, r_s: float | None = None) -> Schedule:
    """mu_s = 1/ln(1/rho_s); lambda_s from the integer-part formula or supplied.

    ``mode='paper'`` uses lambda_s = floor(ln(1/rho_s))^(2m); ``'override'``
    takes ``lambdas`` and flags the deviation.
    """
    rhos = [float(r) for r in rhos]
    if not rhos:
        raise InvalidScheduleError("empty rho list")
    if any(not (0 < r < 1) for r in rhos):
        raise InvalidScheduleError("every rho_s must lie in (0, 1)")
    if any(b >= a for a, b in zip(rhos, rhos[1:])):
        raise InvalidScheduleError("rho_s must be strictly decreasing")
    if r_s is not None and min(rhos) < r_s:
        raise InvalidScheduleError(f"rho_s below the Condition-B radius {r_s:g}")
    mu = [1.0 / math.log(1.0 / r) for r in rhos]
    notes = []
    if mode == "paper":
        lam = [integer_part_lambda(r, m) for r in rhos]
        deviation = False
    elif mode == "override":
        if lambdas is None or len(lambdas) != len(rhos):
            raise InvalidScheduleError("override mode needs one lambda per rho")
        if any(float(l) != int(l) for l in lambdas):
            raise InvalidScheduleError("lambda_s must be integers")
        lam = [int(l) for l in lambdas]
        deviation = any(l != integer_part_lambda(r, m) for l, r in zip(lam, rhos))
        if deviation:
            notes.append("lambda_s differs from the integer-part formula")
    else:
        raise InvalidScheduleError(f"unknown schedule mode {mode!r}")
    if any(l <= 2 for l in lam):
        raise InvalidScheduleError("lambda_s must exceed 2 so the inner cubes are nonempty")
    if any(b < a for a, b in zip(lam, lam[1:])):
        raise InvalidScheduleError("lambda_s must be nondecreasing")
    lr = [l * r for l, r in zip(lam, rhos)]
    if any(b >= a for a, b in zip(lr, lr[1:])):
        raise InvalidScheduleError("lambda_s * rho_s must be strictly decreasing")
    return Schedule(tuple(rhos), tuple(mu), tuple(lam), mode, m, deviation, notes)


# ------------------------------------------------------------ subdivision

@dataclass
class Subdivision:
    s: int
    rho: float
    lam: int
    mu: float
    grid: GridSpec
    alphas: np.ndarray
    centers: np.ndarray
    measure_cubes: float
    measure_leftover: float
    discrete_cover: float

    @property
    def half(self) -> float:
        """Halfwidth lambda rho of K_s(alpha)."""
        return self.lam * self.rho

    @property
    def inner_half(self) -> float:
        """Halfwidth (lambda - 2) rho of K'_s(alpha)."""
        return (self.lam - 2) * self.rho

    @property
    def support_half(self) -> float:
        return (self.lam - 1) * self.rho

    def __len__(self) -> int:
        return len(self.centers)

    def to_json(self) -> dict:
        return {"s": self.s, "rho": self.rho, "lambda": self.lam, "mu": self.mu,
                "count": len(self), "alphas": self.alphas.tolist(),
                "measure_cubes": self.measure_cubes, "measure_leftover": self.measure_leftover}


def build_subdivision(schedule: Schedule, s: int, grid: GridSpec) -> Subdivision:
    """Cubes K(x_alpha, lambda rho) with x_alpha = 2 lambda rho alpha and
    K(x_alpha, 2 lambda rho) inside the closed inner cube."""
    rho, mu, lam = schedule.level(s)
    step = 2 * lam * rho
    L = grid.omega_halfwidth
    if step > 2 * L * (1 + 1e-12):
        raise DegenerateSubdivisionError(f"2 lambda rho = {step:g} exceeds the domain side {2 * L:g}")
    tol = 1e-9 * grid.h
    axes = []
    for c in grid.center:
        k0 = math.ceil((c - L + step) / step - 1e-9)
        k1 = math.floor((c + L - step) / step + 1e-9)
        ks = [k for k in range(k0, k1 + 1) if abs(k * step - c) + step <= L + tol]
        axes.append(ks)
    if any(not a for a in axes):
        raise DegenerateSubdivisionError("no cube K(x_alpha, 2 lambda rho) fits inside the domain")
    alphas = np.array(np.meshgrid(*axes, indexing="ij")).reshape(grid.n, -1).T
    centers = alphas * step
    vol = (2 * L) ** grid.n
    cubes = len(alphas) * step ** grid.n
    # discrete cover: grid cells whose centres fall in some K_s(alpha)
    cell_axes = [grid.axis(i)[:-1] + grid.h / 2 for i in range(grid.n)]
    inside = np.ones(tuple(len(a) for a in cell_axes), dtype=bool)
    covered = np.zeros_like(inside)
    for i, a in enumerate(cell_axes):
        shape = [1] * grid.n
        shape[i] = -1
        inside = inside & (np.abs(a - grid.center[i]) < L).reshape(shape)
    for x in centers:
        sel = np.ones_like(covered)
        for i, a in enumerate(cell_axes):
            shape = [1] * grid.n
            shape[i] = -1
            sel = sel & (np.abs(a - x[i]) < lam * rho).reshape(shape)
        covered |= sel
    disc = float(np.count_nonzero(covered & inside)) * grid.h ** grid.n
    return Subdivision(s, rho, lam, mu, grid, alphas, centers, cubes, vol - cubes, disc)


# ------------------------------------------------------------ corrector

def cutoff(w: np.ndarray, mu_alpha: float) -> np.ndarray:
    """phi = (2/mu) min([|w| - mu/2]_+, mu/2)."""
    return (2.0 / mu_alpha) * np.minimum(np.clip(np.abs(w) - mu_alpha / 2, 0, None), mu_alpha / 2)


@dataclass
class CorrectorField:
    r: ScalarField
    subdivision: Subdivision
    q_alpha: np.ndarray
    q_tilde: np.ndarray
    mu_alpha: np.ndarray
    primary: np.ndarray            # True for I', False for I''
    hole_nodes: np.ndarray         # count of hole nodes in each K'(alpha)
    overlaps: list
    escapes: list
    support_ok: bool
    cutoff_ok: bool
    summand_mass: list             # per-alpha int |v phi|^m
    fields: dict = field(default_factory=dict)

    @property
    def regime_ok(self) -> bool:
        """Summand supports are separated (no support-overlap warning)."""
        return not self.overlaps and not self.escapes

    def norms(self, m: float) -> dict:
        """||r||_{L_m}, ||grad r||_{L_{m-1/2}}, ||grad r||_{L_m} (simplex quadrature)."""
        op = OperatorSpec("pure", m, self.r.grid.n)
        lm = float(np.sum(self.r.grid.quadrature_weights() * np.abs(self.r.values) ** m)) ** (1 / m)
        gm = float(energy_integrals(op, self.r)[1]) ** (1 / m)
        p = m - 0.5
        gp = float(energy_integrals(OperatorSpec("pure", p, self.r.grid.n), self.r)[1]) ** (1 / p)
        return {"L_m": lm, "grad_L_p": gp, "grad_L_m": gm, "p": p}

    def to_json(self) -> dict:
        return {"subdivision": self.subdivision.to_json(), "q_alpha": self.q_alpha.tolist(),
                "q_tilde": self.q_tilde.tolist(), "mu_alpha": self.mu_alpha.tolist(),
                "primary": self.primary.tolist(), "hole_nodes": self.hole_nodes.tolist(),
                "overlaps": [list(p) for p in self.overlaps], "escapes": self.escapes,
                "regime_ok": self.regime_ok, "support_ok": self.support_ok,
                "cutoff_ok": self.cutoff_ok}


def build_corrector(op: OperatorSpec, sub: Subdivision, q_s: ScalarField, mask: DomainMask,
                    psi: BumpSpec = BumpSpec(), tol: float = 1e-8, threads: int = 1,
                    keep_fields: bool = False) -> CorrectorField:
    """Assemble r_s from per-cube potentials and cut-offs."""
    from .capacity import potential_v
    grid = sub.grid
    if mask.grid.key != grid.key or q_s.grid.key != grid.key:
        raise InvalidInputError("corrector inputs must share one grid")
    mu = sub.mu
    k = len(sub)
    q_alpha = np.array([cell_mean(q_s, x, sub.half) for x in sub.centers])
    primary = np.abs(q_alpha) > 2 * mu
    q_tilde = np.where(primary, q_alpha, 2 * mu)
    mu_alpha = mu * np.maximum(1.0, np.abs(q_alpha))
    holes = mask.holes
    F_masks = [holes & cube_nodes(grid, x, sub.inner_half) for x in sub.centers]

    def run(i):
        Fm = F_masks[i]
        Fset = CompactSet("mask", tuple(sub.centers[i]), sub.inner_half, label=f"alpha {i}")
        w = potential_v(op, Fset, float(q_tilde[i]), psi, grid=grid, tol=tol, mask=Fm).potential
        phi = cutoff(w.values, mu_alpha[i])
        if primary[i]:
            v = w.values
        elif q_alpha[i] == 0 or not Fm.any():
            v = np.zeros(grid.shape)
        else:
            v = potential_v(op, Fset, float(q_alpha[i]), psi, grid=grid, tol=tol,
                            mask=Fm).potential.values
        sand = bool(np.all((np.abs(w.values) < mu_alpha[i] - 1e-12) | (phi >= 1 - 1e-12)) and
                    np.all((np.abs(w.values) > mu_alpha[i] / 2 + 1e-12) | (phi <= 1e-12)) and
                    phi.min() >= 0 and phi.max() <= 1)
        return v * phi, phi > 0, sand, w.values if keep_fields else None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]

    r = np.zeros(grid.shape)
    owner = np.full(grid.shape, -1, dtype=np.int32)
    overlaps = set()
    masses = []
    wq = grid.quadrature_weights()
    for i, (summand, supp, _, _) in enumerate(results):
        r += summand
        masses.append(float(np.sum(wq * np.abs(summand) ** op.m)))
        clash = supp & (owner >= 0)
        for j in np.unique(owner[clash]):
            overlaps.add((int(j), i))
        owner[supp & (owner < 0)] = i
    overlaps = sorted(overlaps)
    # r_s should vanish outside the union of K(x_alpha, (lambda - 1) rho)
    allowed = np.zeros(grid.shape, dtype=bool)
    escapes = []
    for i, x in enumerate(sub.centers):
        own = cube_nodes(grid, x, sub.support_half)
        if np.any(results[i][1] & ~own):
            escapes.append(i)
        allowed |= own
    support_ok = bool(not np.any(np.abs(r[~allowed]) > 1e-12))
    if overlaps or escapes:
        log.warning("corrector outside the separated regime: overlapping pairs %s, "
                    "supports leaving K(x_alpha, (lambda-1) rho) for alpha %s",
                    overlaps[:10], escapes[:10])
    fields = {}
    if keep_fields:
        fields["w"] = [res[3] for res in results]
    return CorrectorField(ScalarField(grid, r), sub, q_alpha, q_tilde, mu_alpha, primary,
                          np.array([int(F.sum()) for F in F_masks]), overlaps, escapes,
                          support_ok, all(res[2] for res in results), masses, fields)


def corrector_level_field(f: ScalarField, u0: ScalarField, h: float,
                          g: ScalarField | None = None, kernel=MollifierSpec()) -> ScalarField:
    """q_s = (f - u0)_h - g: mollified deviation of the data from the limit solution."""
    q = mollify(f - u0, h, kernel)
    return q - g if g is not None else q


# ------------------------------------------------------------ probes

@dataclass
class ProbeReport:
    pairings: list            # [s][k]
    labels: list

    def trend(self, k: int = 0) -> list:
        return [abs(p[k]) for p in self.pairings]

    def decreasing(self) -> list:
        out = []
        for k in range(len(self.pairings[0]) if self.pairings else 0):
            t = self.trend(k)
            out.append(all(b < a for a, b in zip(t, t[1:])))
        return out

    def to_json(self):
        return {"pairings": self.pairings, "labels": self.labels, "decreasing": self.decreasing()}


def check_test_function(z: ScalarField, mask: DomainMask, atol: float = 1e-12):
    bad_h = np.abs(z.values[mask.holes]) > atol
    bad_o = np.abs(z.values[mask.outside]) > atol
    if bad_h.any():
        raise InvalidTestFunctionError(f"test function is nonzero on {int(bad_h.sum())} hole nodes")
    if bad_o.any():
        raise InvalidTestFunctionError(
            f"test function is nonzero on {int(bad_o.sum())} nodes outside the domain")


def convergence_probe(op: OperatorSpec, correctors: Sequence[CorrectorField],
                      z_family: Sequence[Sequence[ScalarField]],
                      masks: Sequence[DomainMask], labels=None) -> ProbeReport:
    """Pairings sum_j int a_j(grad r_s) d_j z_s for a battery of z_s per level."""
    if len(correctors) != len(z_family) or len(correctors) != len(masks):
        raise InvalidInputError("need one test battery and mask per corrector")
    out = []
    for corr, zs, mask in zip(correctors, z_family, masks):
        row = []
        for z in zs:
            check_test_function(z, mask)
            if not np.any(z.values) or not np.any(corr.r.values):
                row.append(0.0)
                continue
            row.append(float(flux_pairing(op, corr.r, z)))
        out.append(row)
    return ProbeReport(out, list(labels) if labels else [f"z{k}" for k in range(len(out[0]))])


def smooth_bump(grid: GridSpec, center, width: float) -> ScalarField:
    """(1 - |x - c|^2 / w^2)^2 on the ball of radius w, zero outside."""
    r2 = sum((a - c) ** 2 for a, c in zip(grid.mesh(), center)) / width ** 2
    return ScalarField(grid, np.where(r2 < 1, (1 - r2) ** 2, 0.0))


def bump_battery(grid: GridSpec, count: int = 10, seed: int = 0) -> list:
    """Deterministic smooth bumps compactly supported in the open inner cube."""
    rng = np.random.default_rng(seed)
    L = grid.omega_halfwidth
    out = []
    for k in range(count):
        w = L * rng.uniform(0.3, 0.6)
        c = np.asarray(grid.center) + rng.uniform(-(L - w), L - w, grid.n) * 0.95
        out.append(smooth_bump(grid, c, w))
    return out


def hole_vanishing(mask: DomainMask, b: ScalarField, scale: float | None = None) -> ScalarField:
    """b * min(1, dist(x, holes)/a): vanishes on holes, equals b away from them."""
    a = scale or mask.hole_radius or mask.grid.h
    if mask.holes.any():
        dist = ndimage.distance_transform_edt(~mask.holes) * mask.grid.h
        eta = np.minimum(1.0, dist / a)
    else:
        eta = np.ones(mask.grid.shape)
    vals = b.values * eta
    vals[mask.outside] = 0.0
    return ScalarField(mask.grid, vals)


# ------------------------------------------------------------ density

@dataclass
class DensityTable:
    samples: list                 # dicts x, q, r, s, c_est, per-h values
    c: dict                       # (x index, q) -> extrapolated value
    converged: dict
    m: float
    mode: str
    K6: float
    spread_x: float
    spread_q: float
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.converged.values())

    def value(self, q: float, xi: int = 0) -> float:
        return self.c[(xi, q)]

    def qs(self) -> list:
        return sorted({q for (_, q) in self.c})

    def growth_violations(self, K6: float | None = None) -> list:
        K6 = self.K6 if K6 is None else K6
        vals = [(k, v) for k, v in self.c.items()] + [
            ((e["xi"], e["q"]), e["c_est"]) for e in self.samples]
        return [(k, v) for k, v in vals
                if abs(v) > K6 * abs(k[1]) ** (self.m - 1) * (1 + 1e-12)]

    def homogeneous_deviation(self, xi: int = 0) -> float:
        """max_q |c(q) - |q|^(m-2) q c(1)| / (|q|^(m-1) |c(1)|)."""
        c1 = self.c.get((xi, 1.0))
        if c1 is None:
            raise InvalidInputError("q = 1 not sampled")
        devs = [abs(v - abs(q) ** (self.m - 2) * q * c1) / (abs(q) ** (self.m - 1) * abs(c1))
                for (x, q), v in self.c.items() if x == xi and q != 0]
        return max(devs) if devs else 0.0

    def bracket(self, eps: float, xi: int = 0, q: float = 1.0) -> Optional[dict]:
        """Smallest ladder position from which every raw sample is eps-close
        (relative) to the extrapolated value."""
        target = self.c[(xi, q)]
        rows = [e for e in self.samples if e["xi"] == xi and e["q"] == q]
        ss = sorted({e["s"] for e in rows})
        for s0 in ss:
            if all(abs(e["c_est"] - target) <= eps * abs(target) for e in rows if e["s"] >= s0):
                return {"s": s0, "r": max(e["r"] for e in rows if e["s"] >= s0)}
        return None

    def density_term(self, op: OperatorSpec, xi: int = 0) -> DensityTerm:
        c1 = self.c.get((xi, 1.0))
        if op.homogeneous and c1 is not None:
            return LinearDensity(c1) if op.m == 2.0 else PowerDensity(c1, op.m)
        qs = [q for (x, q) in self.c if x == xi]
        return TabulatedDensity(qs, [self.c[(xi, q)] for q in qs])

    def to_json(self) -> dict:
        return {"mode": self.mode, "m": self.m, "K6": self.K6, "spread_x": self.spread_x,
                "spread_q": self.spread_q, "notes": self.notes,
                "c": [{"xi": k[0], "q": k[1], "c": v, "converged": self.converged[k]}
                      for k, v in sorted(self.c.items())],
                "samples": self.samples}


def _density_spacing(family: PerforationFamily, s: int, cells: float) -> float:
    """Largest h <= a_s / cells dividing the cell size d_s."""
    d, a = family.d(s), family.a(s)
    N = math.ceil(cells * d / a - 1e-9)
    return d / N


def snap_to_hole(family: PerforationFamily, s: int, base, x) -> tuple:
    """Nearest hole centre of level s to the point x."""
    d = family.d(s)
    b = np.asarray(base, dtype=float)
    k = np.round((np.asarray(x, dtype=float) - b) / d - 0.5)
    return tuple(float(v) for v in b + d * (k + 0.5))


def estimate_density(op: OperatorSpec, family: PerforationFamily, x_samples, q_samples,
                     r_ladder, s_ladder, tol: float = 1e-8, domain: GridSpec | None = None,
                     cells_per_radius: Sequence[float] = (2, 3), margin: float = 1.0,
                     stab_tol: float = 0.02, threads: int = 1) -> DensityTable:
    """Sample C_A(K(x, r) minus Omega_s, q) / (2r)^n and extract the limit.

    ``r_ladder='cell'`` ties r to each level as r = d_s/2 (cubes holding one
    lattice cell); the limit is then taken along s by linear extrapolation in
    a_s.  Otherwise r_ladder is a list of radii: the inner limit over s is
    the last stable ladder value and the outer limit over r a linear fit
    in r.  Each sample is itself extrapolated over ``cells_per_radius``
    resolutions (two-grid, first order).
    """
    n = family.n
    x_samples = [tuple(map(float, x)) for x in x_samples]
    q_samples = [float(q) for q in q_samples]
    s_ladder = list(s_ladder)
    cell_mode = isinstance(r_ladder, str)
    if cell_mode and r_ladder != "cell":
        raise InvalidInputError(f"unknown r ladder {r_ladder!r}")
    notes = []
    if domain is not None:
        lo = np.asarray(domain.center) - domain.omega_halfwidth
        center = domain.center
    else:
        lo = np.zeros(n) - 0.5
        center = (0.0,) * n

    jobs = []
    for xi, x in enumerate(x_samples):
        for q in q_samples:
            for s in s_ladder:
                radii = [family.d(s) / 2] if cell_mode else list(r_ladder)
                for r in radii:
                    jobs.append((xi, x, q, s, r))

    if domain is not None:
        L = domain.omega_halfwidth
        for xi, x, q, s, r in jobs:
            if cell_mode:
                x = snap_to_hole(family, s, family.lattice_base(s, lo, center), x)
            if any(abs(xc - c) + r > L + 1e-12 for xc, c in zip(x, domain.center)):
                raise InvalidInputError(f"cube K(x, {r:g}) at x = {x} leaves the domain")

    def run(job):
        xi, x, q, s, r = job
        if q == 0:
            return {"xi": xi, "x": list(x), "q": q, "s": s, "r": r, "c_est": 0.0, "per_h": []}
        base = family.lattice_base(s, lo, center)
        if cell_mode:
            x = snap_to_hole(family, s, base, x)
        F = CompactSet.holes_in_cube(family, s, x, r, base)
        hs, vals = [], []
        for cells in cells_per_radius:
            h = _density_spacing(family, s, cells)
            g = capacity_grid(F, h, margin)
            rep = compute_CA(op, F, q, tol, grid=g)
            hs.append(h)
            vals.append(rep.value / (2 * r) ** n)
        c_est = richardson(hs, vals) if len(hs) > 1 else vals[0]
        return {"xi": xi, "x": list(x), "q": q, "s": s, "r": r, "c_est": float(c_est),
                "per_h": [[float(h), float(v)] for h, v in zip(hs, vals)]}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(j) for j in jobs]

    c, conv = {}, {}
    for xi in range(len(x_samples)):
        for q in q_samples:
            rows = [e for e in samples if e["xi"] == xi and e["q"] == q]
            if q == 0:
                c[(xi, q)] = 0.0
                conv[(xi, q)] = True
                continue
            if cell_mode:
                rows.sort(key=lambda e: e["s"])
                a = [family.a(e["s"]) for e in rows]
                y = [e["c_est"] for e in rows]
                if len(rows) >= 2:
                    val = y[-1] + (y[-1] - y[-2]) * (0 - a[-1]) / (a[-1] - a[-2])
                    change = abs(y[-1] - y[-2]) / abs(y[-1])
                else:
                    val, change = y[-1], float("inf")
                c[(xi, q)] = float(val)
                conv[(xi, q)] = change <= stab_tol
            else:
                per_r, ok = [], True
                for r in sorted({e["r"] for e in rows}):
                    seq = sorted((e for e in rows if e["r"] == r), key=lambda e: e["s"])
                    y = [e["c_est"] for e in seq]
                    stable = [k for k in range(1, len(y))
                              if abs(y[k] - y[k - 1]) <= stab_tol * abs(y[k])]
                    if stable:
                        per_r.append((r, y[stable[-1]]))
                    else:
                        ok = False
                        per_r.append((r, y[-1]))
                if len(per_r) >= 2:
                    (r1, y1), (r2, y2) = per_r[0], per_r[1]
                    val = y1 - (y2 - y1) / (r2 - r1) * r1
                else:
                    val = per_r[0][1]
                c[(xi, q)] = float(val)
                conv[(xi, q)] = ok
    if not all(conv.values()):
        notes.append("ladder did not stabilize within the relative threshold")

    m = op.m
    ratios = [abs(v) / abs(k[1]) ** (m - 1) for k, v in c.items() if k[1] != 0]
    ratios += [abs(e["c_est"]) / abs(e["q"]) ** (m - 1) for e in samples if e["q"] != 0]
    K6 = max(ratios) if ratios else 0.0
    spread_x = 0.0
    for q in q_samples:
        vals = [c[(xi, q)] for xi in range(len(x_samples))]
        if q != 0 and len(vals) > 1:
            spread_x = max(spread_x, (max(vals) - min(vals)) / abs(np.mean(vals)))
    table = DensityTable(samples, c, conv, m, "cell" if cell_mode else "iterated", K6, spread_x,
                         0.0, notes)
    if 1.0 in q_samples:
        table.spread_q = max(table.homogeneous_deviation(xi) for xi in range(len(x_samples)))
    return table


# ------------------------------------------------------------ energy bound

def energy_bound(op: OperatorSpec, f: ScalarField, fj=None, side: float | None = None,
                 w_min: float | None = None) -> Optional[float]:
    """Data-only bound R >= int |grad u|^m + |u|^m for the energy minimizer.

    From J(u) <= J(f): (w/m) X^m - ||f_vec||_{m'} X <= J(f) bounds
    X = ||grad u||_m; a Poincare step on u - f (constant 2 * side, with a
    factor 2 slack for the discrete norm) bounds ||u||_m.
    """
    m = op.m
    if op.kind == "regularized" and m < 2:
        return None
    grid = f.grid
    w = w_min if w_min is not None else (op.nu1 if op.kind == "weighted" else 1.0)
    side = side or 2 * grid.omega_halfwidth
    from .solver import Discretization, _cell_average
    fj_cells = [_cell_average(g.values) for g in fj] if fj is not None else None
    disc = Discretization(op, grid.shape, grid.h, grid.origin, fj_cells=fj_cells)
    Jf = disc.energy(f.values, 0.0, exact=True)
    mp = m / (m - 1)
    qw = grid.quadrature_weights()
    Fn = 0.0
    if fj is not None:
        Fn = float(np.sum(qw * sum(g.values ** 2 for g in fj) ** (mp / 2)) ** (1 / mp))
    gradf = energy_integrals(OperatorSpec("pure", m, grid.n), f)[1] ** (1 / m)
    fn = float(np.sum(qw * np.abs(f.values) ** m) ** (1 / m))

    def gfun(X):
        return (w / m) * X ** m - Fn * X - Jf

    hi = 1.0
    while gfun(hi) < 0:
        hi *= 2
    X = optimize.brentq(gfun, 0.0, hi) if gfun(0.0) < 0 else 0.0
    X = max(X, gradf)
    return float(X ** m + (fn + 2 * side * (X + gradf)) ** m)


def energy_lhs(op: OperatorSpec, u: ScalarField) -> float:
    m = op.m
    grad = energy_integrals(OperatorSpec("pure", m, u.grid.n), u)[1]
    return float(grad + np.sum(u.grid.quadrature_weights() * np.abs(u.values) ** m))


# ------------------------------------------------------------ experiments

@dataclass
class ExperimentReport:
    tables: dict = field(default_factory=dict)     # name -> (columns, rows)
    manifest: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    failed: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.failed is None

    def column(self, table: str, name: str) -> list:
        cols, rows = self.tables[table]
        k = cols.index(name)
        return [r[k] for r in rows]


def _lm(u: np.ndarray, w: np.ndarray, m: float) -> float:
    return float(np.sum(w * np.abs(u) ** m) ** (1.0 / m))


def _scan_offset(family: PerforationFamily, s: int, grid: GridSpec) -> tuple:
    """Node stride and offset that put scan centres on the hole lattice."""
    lo = np.asarray(grid.center) - grid.omega_halfwidth
    base = family.lattice_base(s, lo, grid.center)
    d = family.d(s)
    stride = max(1, int(round(d / grid.h)))
    first = (base[0] - lo[0]) + d / 2
    offset = int(round(first / grid.h)) % stride
    return stride, offset


STAGES = ("density", "limit", "levels", "condition_b", "corrector")


def _needed(cfg, stages) -> set:
    want = set(STAGES if stages is None else stages)
    unknown = want - set(STAGES)
    if unknown:
        raise InvalidInputError(f"unknown stages {sorted(unknown)}")
    if "levels" in want:
        want |= {"limit"}
    if "corrector" in want and cfg.raw["corrector"] and cfg.raw["corrector"]["q_mode"] == "data":
        want |= {"limit"}
    if "limit" in want:
        want |= {"density"}
    if cfg.raw["condition_b"] is None and stages is None:
        want.discard("condition_b")
    if cfg.raw["corrector"] is None and stages is None:
        want.discard("corrector")
    return want


def run_experiment(cfg, threads: int = 1, strict: bool = False,
                   stages: Sequence[str] | None = None) -> ExperimentReport:
    """Solve u_s for each level, the limit problem and the hole-free problem,
    estimate the density and optionally scan Condition B and build correctors.

    ``stages`` restricts the run to a subset of STAGES (dependencies are
    added).  A failing stage stops the run; the report keeps everything
    computed so far and names the stage in ``failed``.
    """
    from .capacity import scan_condition_B
    from .grid import build_perforation
    from .solver import ProblemSpec, solve_dirichlet, solve_limit
    from . import __version__

    rep = ExperimentReport()
    rep.manifest = {"version": __version__, "config_hash": cfg.hash, "seed": cfg.raw["seed"],
                    "deviations": [], "constants": {}}
    stage = "setup"
    try:
        want = _needed(cfg, stages)
        grid = cfg.grid_spec()
        op = cfg.operator(strict)
        f, fj = cfg.data(grid)
        fam = cfg.family()
        tol = float(cfg.raw["tolerances"]["solver"])
        stab = float(cfg.raw["tolerances"].get("stabilization", 0.02))
        lad = cfg.raw["ladders"]
        s_list = list(lad["s"])
        seed = int(cfg.raw["seed"])
        holes = fam is not None and fam.c0 > 0
        wq = grid.quadrature_weights()
        inside = grid.inside_omega()
        m = op.m
        masks = {}

        def mask_of(s):
            if s not in masks:
                if holes:
                    masks[s] = build_perforation(fam, s, grid)
                else:
                    masks[s] = DomainMask(grid, np.where(inside, 0, OUTSIDE).astype(np.int8))
            return masks[s]

        rep.stages.append(stage)

        density = None
        if "density" in want:
            stage = "density"
            dmode = cfg.raw["density"]["mode"]
            if holes and dmode == "fixed":
                val = float(cfg.raw["density"]["value"])
                density = LinearDensity(val) if m == 2.0 else PowerDensity(val, m)
                rep.manifest["constants"]["c"] = val
            elif holes and dmode == "estimate":
                xs = lad["x"] or [list(grid.center)]
                table = estimate_density(op, fam, xs, lad["q"], lad["r"], s_list, tol,
                                         domain=grid, cells_per_radius=lad["cells_per_radius"],
                                         margin=float(cfg.raw["density"]["margin"]),
                                         stab_tol=stab, threads=threads)
                density = table.density_term(op)
                rows = [[e["xi"], e["q"], e["s"], e["r"], e["c_est"]] for e in table.samples]
                rows += [[k[0], k[1], "lim", "", v] for k, v in sorted(table.c.items())]
                rep.tables["density"] = (["xi", "q", "s", "r", "c_est"], rows)
                rep.manifest["constants"].update(
                    {"K6": table.K6,
                     "c": {f"{k[0]}:{k[1]}": v for k, v in sorted(table.c.items())},
                     "density_spread_x": table.spread_x, "density_spread_q": table.spread_q})
                rep.manifest["density_converged"] = table.ok
                if not table.ok:
                    rep.manifest["deviations"].append("density ladder did not stabilize")
            rep.stages.append(stage)

        u0 = None
        if "limit" in want:
            stage = "limit"
            u0 = solve_limit(ProblemSpec(op, grid, ~inside, f, fj, density, inside), tol)
            uD = solve_dirichlet(ProblemSpec(op, grid, ~inside, f, fj), tol)
            R = energy_bound(op, f, fj)
            rep.manifest["constants"]["R"] = R
            rep.manifest["limit"] = {"iterations": u0.iterations, "residual": u0.residual,
                                     "energy": u0.energy,
                                     "err_f": _lm(u0.solution.values - f.values, wq, m),
                                     "max_err_f": float(np.max(np.abs(u0.solution.values -
                                                                      f.values)))}
            rep.stages.append(stage)

        if "levels" in want:
            stage = "levels"
            battery = bump_battery(grid, int(cfg.raw["probes"]["count"]), seed)
            lrows, prows = [], []
            for s in s_list:
                mask = mask_of(s)
                us = solve_dirichlet(ProblemSpec.from_mask(op, mask, f, fj), tol)
                u = us.solution.values
                lhs = energy_lhs(op, us.solution)
                lrows.append([s, fam.d(s) if holes else "", fam.a(s) if holes else "",
                              mask.hole_count(), us.iterations, us.residual,
                              _lm(u - u0.solution.values, wq, m),
                              _lm(u - uD.solution.values, wq, m), _lm(u - f.values, wq, m),
                              lhs, "" if R is None else R, bool(R is None or lhs <= R)])
                diff = u - u0.solution.values
                for k, b in enumerate(battery):
                    prows.append([s, k, float(np.sum(wq * diff * b.values))])
            rep.tables["levels"] = (["s", "d_s", "a_s", "hole_nodes", "newton", "residual",
                                     "err_u0", "err_uD", "err_f", "energy", "R", "bound_ok"],
                                    lrows)
            rep.tables["probes"] = (["s", "k", "pairing"], prows)
            rep.stages.append(stage)

        cb = cfg.raw["condition_b"]
        if "condition_b" in want and holes:
            stage = "condition_b"
            cb = cb or {"radii": "cell", "stride": "cell", "cap": None, "margin": 1.0}
            rows, summ = [], []
            for s in s_list:
                stride, offset = _scan_offset(fam, s, grid)
                if cb["stride"] != "cell":
                    stride = int(cb["stride"])
                radii = [fam.d(s) / 2] if cb["radii"] == "cell" else list(cb["radii"])
                sc = scan_condition_B(mask_of(s), radii, stride, m, tol,
                                      margin=float(cb["margin"]), offset=offset, cap=cb["cap"],
                                      threads=threads)
                for e in sc.entries:
                    rows.append([s, *e["center"], e["r"], e["C_box"], e["C"], e["ratio"]])
                summ.append([s, sc.A, sc.A_volume, sc.r_s, len(sc.violations)])
            rep.tables["condition_b"] = (["s"] + [f"x{i + 1}" for i in range(grid.n)] +
                                         ["r", "C_box", "C", "ratio"], rows)
            rep.tables["condition_b_fit"] = (["s", "A", "A_volume", "r_s", "violations"], summ)
            rep.manifest["constants"]["A"] = {str(r[0]): r[1] for r in summ}
            rep.stages.append(stage)

        cor = cfg.raw["corrector"]
        if "corrector" in want:
            stage = "corrector"
            if cor is None:
                raise InvalidInputError("config has no corrector section")
            sch_cfg = cfg.raw["schedule"]
            schedule = build_schedule(sch_cfg["rho"], m, sch_cfg.get("mode", "override"),
                                      sch_cfg.get("lambda"))
            if strict and schedule.mode != "paper":
                raise InvalidScheduleError("strict mode requires the integer-part schedule")
            if schedule.deviation:
                rep.manifest["deviations"].append("schedule lambda_s overridden")
            rep.manifest["schedule"] = schedule.to_json()
            fixed = []
            for b in bump_battery(grid, int(cor["battery"]), seed + 1):
                for s in s_list:
                    b = hole_vanishing(mask_of(s), b)
                fixed.append(b)
            crows, zrows = [], []
            g_field = cfg.field(cor["g"], grid) if cor["g"] else None
            for s in s_list:
                sub = build_subdivision(schedule, s, grid)
                if cor["q_mode"] == "constant":
                    q = ScalarField.constant(grid, float(cor["q"]))
                else:
                    hm = float(cor["mollifier_h"] or 2 * grid.h)
                    q = corrector_level_field(f, u0.solution, hm, g_field)
                corr = build_corrector(op, sub, q, mask_of(s), tol=tol, threads=threads)
                nm = corr.norms(m)
                pair = [float(flux_pairing(op, corr.r, z)) / s for z in fixed]
                zrows += [[s, k, p] for k, p in enumerate(pair)]
                crows.append([s, len(sub), nm["L_m"], nm["grad_L_p"], nm["grad_L_m"],
                              corr.regime_ok, corr.support_ok, corr.cutoff_ok,
                              max((abs(p) for p in pair), default=0.0)])
                if not corr.regime_ok:
                    rep.manifest["deviations"].append(
                        f"corrector level {s}: summand supports not separated")
            rep.tables["corrector"] = (["s", "cubes", "r_Lm", "grad_r_Lp", "grad_r_Lm",
                                        "regime_ok", "support_ok", "cutoff_ok", "sup_pairing"],
                                       crows)
            rep.tables["pairings"] = (["s", "k", "pairing"], zrows)
            rep.stages.append(stage)
    except Exception as e:  # noqa: BLE001 - partial report by design
        rep.failed = {"stage": stage, "error": f"{type(e).__name__}: {e}"}
        log.error("experiment failed in stage %s: %s", stage, e)
    rep.manifest["stages"] = list(rep.stages)
    rep.manifest["failed"] = rep.failed
    return rep
