"""m-capacities, capacitary potentials and operator capacities.

All capacities are computed relative to a box (the outer cube of the grid);
:func:`whole_space_Cm` removes the box bias.  For m = 2 the correction uses
the regular part of the Dirichlet Green's function of a cube at its centre,
which by the method of images equals the NaCl Madelung constant over 8 pi L.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (EmptyCellError, InvalidInputError, NotApplicableError, PremiseError,
                     ResolutionError)
from .grid import (BumpSpec, DomainMask, GridSpec, PerforationFamily, ScalarField,
                   cube_nodes, HOLE)
from .operator import OperatorSpec, radial_profile
from .solver import (Discretization, ProblemSpec, SolveReport, SolverSettings,
                     solve_dirichlet)

MADELUNG_NACL = 1.7475645946331822


def unit_sphere_area(n: int) -> float:
    """Surface area of the unit sphere in R^n (omega_{n-1})."""
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


def ball_capacity(a: float, m: float, n: int) -> float:
    """Whole-space m-capacity of a ball of radius a (1 < m < n)."""
    return unit_sphere_area(n) * ((n - m) / (m - 1)) ** (m - 1) * a ** (n - m)


# ------------------------------------------------------------ compact sets

@dataclass(frozen=True)
class CompactSet:
    """A compact set F realized as a node mask.

    kinds: ``empty``; ``ball`` (center, size = radius); ``cube`` (center,
    size = halfwidth); ``holes`` = closed cube K(center, size) minus the
    perforated domain of ``family`` at level ``s`` (hole lattice anchored at
    ``base``); ``mask`` = explicit predicate on node coordinates.
    """
    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    size: float = 0.0
    family: Optional[PerforationFamily] = None
    s: int = 1
    base: tuple = ()
    predicate: Optional[Callable] = field(default=None, compare=False)
    label: str = ""

    @classmethod
    def empty(cls, center=(0.0, 0.0, 0.0)):
        return cls("empty", tuple(center))

    @classmethod
    def ball(cls, radius, center=(0.0, 0.0, 0.0)):
        return cls("ball", tuple(center), float(radius))

    @classmethod
    def cube(cls, halfwidth, center=(0.0, 0.0, 0.0)):
        return cls("cube", tuple(center), float(halfwidth))

    @classmethod
    def holes_in_cube(cls, family, s, center, halfwidth, base):
        return cls("holes", tuple(center), float(halfwidth), family, s, tuple(base))

    @property
    def n(self) -> int:
        return len(self.center)

    @property
    def extent(self) -> float:
        """Halfwidth of a cube around ``center`` that contains F."""
        return self.size

    def realize(self, grid: GridSpec) -> np.ndarray:
        if self.kind == "empty":
            return np.zeros(grid.shape, dtype=bool)
        X = grid.mesh()
        if self.kind == "ball":
            r2 = sum((x - c) ** 2 for x, c in zip(X, self.center))
            return r2 <= self.size ** 2 * (1 + 1e-12)
        if self.kind == "cube":
            return cube_nodes(grid, self.center, self.size)
        if self.kind == "holes":
            return cube_nodes(grid, self.center, self.size) & hole_nodes(
                self.family, self.s, grid, self.base)
        if self.kind == "mask":
            return np.asarray(self.predicate(*X), dtype=bool) & np.ones(grid.shape, dtype=bool)
        raise InvalidInputError(f"unknown set kind {self.kind!r}")

    def check_resolution(self, grid: GridSpec):
        if self.kind == "ball" and self.size < 2 * grid.h - 1e-12:
            raise ResolutionError(f"ball radius {self.size:g} needs h <= {self.size / 2:g}",
                                  required_h=self.size / 2)
        if self.kind == "cube" and self.size < grid.h - 1e-12:
            raise ResolutionError(f"cube halfwidth {self.size:g} needs h <= {self.size:g}",
                                  required_h=self.size)
        if self.kind == "holes" and self.family.c0 > 0:
            a = self.family.a(self.s)
            if a < 2 * grid.h - 1e-12:
                raise ResolutionError(f"hole radius {a:g} needs h <= {a / 2:g}", required_h=a / 2)

    def describe(self) -> dict:
        d = {"kind": self.kind, "center": list(self.center), "size": self.size}
        if self.kind == "holes":
            d.update(s=self.s, family=self.family.to_json())
        if self.label:
            d["label"] = self.label
        return d


def hole_nodes(family: PerforationFamily, s: int, grid: GridSpec, base) -> np.ndarray:
    """Nodes within the holes centred at base + d_s (k + 1/2); see
    :meth:`PerforationFamily.lattice_base` for ``base``."""
    if family.c0 == 0:
        return np.zeros(grid.shape, dtype=bool)
    d, a = family.d(s), family.a(s)
    base = np.asarray(base, dtype=float)
    offs = []
    for i, ax in enumerate(grid.mesh()):
        k = np.floor((ax - base[i]) / d)
        offs.append(ax - (base[i] + d * (k + 0.5)))
    if family.shape == "ball":
        return sum(o * o for o in offs) <= a * a * (1 + 1e-12)
    out = np.ones(grid.shape, dtype=bool)
    for o in offs:
        out = out & (np.abs(o) <= a * (1 + 1e-12))
    return out


def capacity_grid(F: CompactSet, h: float, margin: float = 1.0, n: int | None = None) -> GridSpec:
    """Box grid centred on F: inner cube covers F, outer cube adds ``margin``."""
    n = n or F.n
    inner = max(F.extent, h)
    k_in = math.ceil(inner / h - 1e-9)
    k_out = math.ceil((k_in * h + margin) / h - 1e-9)
    return GridSpec(n, k_out * h, k_in * h, h, tuple(F.center), check_margin=margin >= 1)


# ------------------------------------------------------------ reports

@dataclass
class CapacityReport:
    value: float
    potential: Optional[ScalarField]
    energy_density: Optional[np.ndarray]
    solve: Optional[SolveReport]
    grid: Optional[GridSpec]
    q: float = 1.0
    set_descriptor: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"value": self.value, "q": self.q, "set": self.set_descriptor,
                "grid": self.grid.to_json() if self.grid else None,
                "solve": self.solve.to_json() if self.solve else None,
                **{k: v for k, v in self.extras.items() if np.isscalar(v) or isinstance(v, (list, dict))}}


def _cell_energy(op: OperatorSpec, u: ScalarField) -> tuple:
    """Per-cell sum of |T| a(grad u).grad u over the cube's simplices."""
    g = u.grid
    disc = Discretization(op, g.shape, g.h, g.origin)
    acc = np.zeros(disc.cshape)
    for perm, offs in disc.simplices:
        gr = disc.gradients(u.values, offs)
        t = np.sqrt(sum(x * x for x in gr))
        d1t = radial_profile(op, t)[1]
        if op.kind != "regularized" and op.m < 2:
            d1t = np.where(t == 0, 0.0, d1t)
        acc += d1t * t * t
    return disc.vol * acc


def _weighted_cell_energy(op, u):
    e = _cell_energy(op, u)
    if op.kind == "weighted":
        g = u.grid
        axes = [g.origin[i] + g.h * (np.arange(g.nodes_per_axis - 1) + 0.5) for i in range(g.n)]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        e = e * op.weight_at(pts).reshape(e.shape)
    return e


# ------------------------------------------------------------ C_m

def compute_Cm(F: CompactSet, grid: GridSpec | None = None, tol: float = 1e-8, m: float = 2.0,
               h: float | None = None, margin: float = 1.0,
               settings: SolverSettings | None = None, mask: np.ndarray | None = None
               ) -> CapacityReport:
    """Box-relative m-capacity: min of int |grad phi|^m with phi = 1 on F, 0 on the box boundary."""
    if grid is None:
        if h is None:
            raise InvalidInputError("need a grid or a spacing h")
        grid = capacity_grid(F, h, margin)
    Fm = F.realize(grid) if mask is None else mask
    if F.kind == "empty" or not Fm.any():
        return CapacityReport(0.0, ScalarField.constant(grid, 0.0), None, None, grid,
                              set_descriptor=F.describe())
    F.check_resolution(grid)
    inner = grid.inside_omega(closed=True)
    if np.any(Fm & ~inner):
        raise InvalidInputError("set F is not contained in the inner cube")
    op = OperatorSpec("pure", m, grid.n)
    f = ScalarField(grid, Fm.astype(float))
    rep = solve_dirichlet(ProblemSpec(op, grid, Fm, f), tol=tol, settings=settings)
    dens = _cell_energy(op, rep.solution)
    value = float(dens.sum())
    return CapacityReport(value, rep.solution, dens / grid.h ** grid.n, rep, grid,
                          set_descriptor=F.describe())


def box_green_radius(L: float) -> float:
    """Effective radius R with H(0) = 1/(4 pi R) for the cube of halfwidth L."""
    return 2.0 * L / MADELUNG_NACL


def harmonic_box_correction(C_box: float, L: float) -> float:
    """Whole-space Newtonian capacity from the capacity relative to a centred cube."""
    if C_box == 0:
        return 0.0
    return 1.0 / (1.0 / C_box + 1.0 / (4 * math.pi * box_green_radius(L)))


def two_box_extrapolation(C1: float, L1: float, C2: float, L2: float, m: float, n: int) -> float:
    """Eliminate the box term from C(L)^(-1/(m-1)) = C_inf^(-1/(m-1)) - beta L^((m-n)/(m-1))."""
    if C1 == 0 or C2 == 0:
        return 0.0
    e = -1.0 / (m - 1)
    k = (m - n) / (m - 1)
    y1, y2 = C1 ** e, C2 ** e
    x1, x2 = L1 ** k, L2 ** k
    beta = (y1 - y2) / (x2 - x1)
    y_inf = y1 + beta * x1
    return y_inf ** (1.0 / e)


def richardson(hs: Sequence[float], values: Sequence[float], order: float = 1.0) -> float:
    """Two-resolution extrapolation to h = 0 assuming error ~ h^order."""
    (h1, v1), (h2, v2) = sorted(zip(hs, values), reverse=True)[:2]
    r = (h1 / h2) ** order
    return v2 + (v2 - v1) / (r - 1.0)


@dataclass
class WholeSpaceEstimate:
    value: float
    method: str
    box_values: list
    corrected: list
    hs: list

    def to_json(self):
        return self.__dict__


def whole_space_Cm(F: CompactSet, hs: Sequence[float], m: float = 2.0, margin: float = 1.0,
                   tol: float = 1e-8, method: str | None = None, margin2: float | None = None,
                   settings=None) -> WholeSpaceEstimate:
    """Whole-space C_m: box correction per resolution, then two-grid extrapolation."""
    method = method or ("harmonic" if m == 2.0 else "two-box")
    n = len(F.center)
    if method != "none" and m >= n:
        raise NotApplicableError(f"whole-space C_m vanishes for m = {m} >= n = {n}")
    boxes, corrected = [], []
    for h in hs:
        g = capacity_grid(F, h, margin)
        C = compute_Cm(F, g, tol, m, settings=settings).value
        if method == "harmonic":
            if m != 2.0:
                raise NotApplicableError("harmonic box model needs m = 2")
            corr = harmonic_box_correction(C, g.omega0_halfwidth)
            boxes.append(C)
        elif method == "two-box":
            g2 = capacity_grid(F, h, margin2 or 2 * margin)
            C2 = compute_Cm(F, g2, tol, m, settings=settings).value
            corr = two_box_extrapolation(C, g.omega0_halfwidth, C2, g2.omega0_halfwidth, m, g.n)
            boxes.append((C, C2))
        elif method == "none":
            corr = C
            boxes.append(C)
        else:
            raise InvalidInputError(f"unknown box correction {method!r}")
        corrected.append(corr)
    value = richardson(hs, corrected) if len(hs) >= 2 else corrected[0]
    return WholeSpaceEstimate(value, method, boxes, corrected, list(hs))


# ------------------------------------------------------------ potentials and C_A

def potential_v(op: OperatorSpec, F: CompactSet, q: float, psi: BumpSpec = BumpSpec(),
                grid: GridSpec | None = None, tol: float = 1e-8, h: float | None = None,
                margin: float = 1.0, settings=None, mask: np.ndarray | None = None
                ) -> CapacityReport:
    """Solve div a(grad v) = 0 off F with v = q psi on the boundary of (outer cube minus F).

    The returned field equals q on F (psi = 1 there).
    """
    if not np.isfinite(q):
        raise InvalidInputError("level q must be finite")
    if grid is None:
        if h is None:
            raise InvalidInputError("need a grid or a spacing h")
        grid = capacity_grid(F, h, margin)
    Fm = F.realize(grid) if mask is None else mask
    if Fm.any():
        F.check_resolution(grid)
    if np.any(Fm & ~grid.inside_omega(closed=True)):
        raise InvalidInputError("set F is not contained in the inner cube")
    if q == 0 or not Fm.any():
        zero = ScalarField.constant(grid, 0.0)
        return CapacityReport(0.0, zero, np.zeros(tuple(s - 1 for s in grid.shape)), None, grid,
                              q=q, set_descriptor=F.describe())
    psi_f = psi.field(grid)
    f = ScalarField(grid, q * psi_f.values)
    rep = solve_dirichlet(ProblemSpec(op, grid, Fm, f), tol=tol, settings=settings)
    dens = _weighted_cell_energy(op, rep.solution)
    return CapacityReport(float(dens.sum()), rep.solution, dens / grid.h ** grid.n, rep, grid,
                          q=q, set_descriptor=F.describe(), extras={"F_mask": Fm})


def compute_CA(op: OperatorSpec, F: CompactSet, q: float, tol: float = 1e-8, **kw) -> CapacityReport:
    """C_A(F, q) = (1/q) int a(grad v) . grad v over the outer cube; C_A(F, 0) = 0."""
    if q == 0:
        grid = kw.get("grid")
        return CapacityReport(0.0, None, None, None, grid, q=0.0, set_descriptor=F.describe())
    rep = potential_v(op, F, q, tol=tol, **kw)
    rep.extras["pairing"] = rep.value
    rep.value = rep.value / q
    return rep


@dataclass
class HomogeneityReport:
    lambdas: list
    values: list
    base: float
    deviations: list

    @property
    def max_deviation(self) -> float:
        return max(self.deviations) if self.deviations else 0.0


def check_homogeneity(op: OperatorSpec, F: CompactSet, q: float, lambdas: Sequence[float],
                      tol: float = 1e-8, **kw) -> HomogeneityReport:
    """Relative deviation of C_A(F, lam q) from |lam|^(m-2) lam C_A(F, q)."""
    if not op.homogeneous:
        raise NotApplicableError("homogeneity needs an odd (m-1)-homogeneous flux")
    base = compute_CA(op, F, q, tol, **kw).value
    vals, devs = [], []
    for lam in lambdas:
        if lam == 1:
            vals.append(base)
            devs.append(0.0)
            continue
        v = compute_CA(op, F, lam * q, tol, **kw).value
        expect = abs(lam) ** (op.m - 2) * lam * base
        denom = abs(base * abs(lam) ** (op.m - 1))
        vals.append(v)
        devs.append(abs(v - expect) / denom if denom > 0 else abs(v - expect))
    return HomogeneityReport(list(lambdas), vals, base, devs)


# ------------------------------------------------------------ Condition B

@dataclass
class ConditionBReport:
    radii: list
    entries: list          # dicts: center, r, C_box, C, ratio
    A: float
    per_radius_max: dict
    violations: list
    r_s: float
    n: int = 3

    @property
    def A_volume(self) -> float:
        """Fitted constant against meas K(x, r) = (2r)^n instead of r^n."""
        return self.A / 2 ** self.n

    def to_json(self) -> dict:
        return {"radii": self.radii, "A": self.A, "A_volume": self.A_volume,
                "per_radius_max": {str(k): v for k, v in self.per_radius_max.items()},
                "violations": self.violations, "r_s": self.r_s,
                "entries": self.entries}


def scan_centers(mask: DomainMask, r: float, r_s: float, stride: int, offset=None) -> list:
    """Node-lattice centres x with K(x, r + r_s) inside the closed inner cube."""
    g = mask.grid
    offset = stride // 2 if offset is None else offset
    lo = np.asarray(g.center) - g.omega_halfwidth
    hi = lo + 2 * g.omega_halfwidth
    idx = np.arange(g.nodes_per_axis)
    tol = 1e-9 * g.h
    out, axes = [], []
    for i in range(g.n):
        first = int(round((lo[i] - g.origin[i]) / g.h))
        xs = g.axis(i)[(idx - first - offset) % max(stride, 1) == 0]
        ok = (xs - r - r_s >= lo[i] - tol) & (xs + r + r_s <= hi[i] + tol)
        axes.append(xs[ok])
    for pt in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, g.n):
        out.append(tuple(float(v) for v in pt))
    return out


def scan_condition_B(mask: DomainMask, radii: Sequence[float], stride: int, m: float = 2.0,
                     tol: float = 1e-8, margin: float = 1.0, r_s: float | None = None,
                     offset: int | None = None, cap: float | None = None,
                     box_correction: str | None = None, threads: int = 1,
                     max_centers: int | None = None) -> ConditionBReport:
    """Fit the smallest A with C_m(K(x, r) minus the perforated domain) <= A r^n.

    Capacities are solved on local boxes K(x, r + margin) cut from the mask's
    grid, so hole nodes are exactly those of ``mask``.
    """
    g = mask.grid
    n = g.n
    radii = sorted(float(r) for r in radii)
    if radii and radii[0] < 2 * g.h - 1e-12:
        raise InvalidInputError("scan radii must be at least two cells")
    r_s = radii[0] if r_s is None else r_s
    method = box_correction or ("harmonic" if m == 2.0 else "none")
    jobs = []
    for r in radii:
        centers = scan_centers(mask, r, r_s, stride, offset)
        if max_centers:
            centers = centers[:max_centers]
        jobs += [(c, r) for c in centers]

    def run(job):
        c, r = job
        k_in = int(round(r / g.h))
        k_out = k_in + int(math.ceil(margin / g.h - 1e-9))
        local = GridSpec(n, k_out * g.h, k_in * g.h, g.h, c, check_margin=False)
        idx = g.index_of(local.origin)
        sl = tuple(slice(i, i + local.nodes_per_axis) for i in idx)
        sub = mask.labels[sl]
        if sub.shape != local.shape:
            raise InvalidInputError("local capacity box leaves the grid; enlarge the outer cube")
        Fm = (sub == HOLE) & cube_nodes(local, c, r)
        if not Fm.any():
            return {"center": list(c), "r": r, "C_box": 0.0, "C": 0.0, "ratio": 0.0}
        Fset = CompactSet("mask", c, r, label="cube minus perforated domain")
        rep = compute_Cm(Fset, local, tol, m, mask=Fm)
        C = rep.value
        if method == "harmonic":
            C_ws = harmonic_box_correction(C, local.omega0_halfwidth)
        else:
            C_ws = C
        return {"center": list(c), "r": r, "C_box": rep.value, "C": C_ws, "ratio": C_ws / r ** n}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(run, jobs))
    else:
        entries = [run(j) for j in jobs]
    per_r = {}
    for e in entries:
        per_r[e["r"]] = max(per_r.get(e["r"], 0.0), e["ratio"])
    A = max((e["ratio"] for e in entries), default=0.0)
    violations = [e for e in entries if cap is not None and e["ratio"] > cap]
    if cap is not None and violations:
        bad_r = max(e["r"] for e in violations)
        ok_r = [r for r in radii if r > bad_r]
        r_valid = ok_r[0] if ok_r else float("inf")
    else:
        r_valid = radii[0] if radii else float("inf")
    return ConditionBReport(radii, entries, A, per_r, violations, r_valid, n)


def combine_scans(reports: Sequence[ConditionBReport], hs: Sequence[float],
                  cap: float | None = None) -> ConditionBReport:
    """Richardson-combine scans of the same centres taken at two spacings."""
    if len(reports) != 2 or len(hs) != 2:
        raise InvalidInputError("combine_scans needs exactly two scans")
    key = lambda e: (tuple(round(v, 9) for v in e["center"]), round(e["r"], 9))
    other = {key(e): e for e in reports[1].entries}
    entries = []
    for e in reports[0].entries:
        f = other.get(key(e))
        if f is None:
            continue
        C = richardson(hs, [e["C"], f["C"]])
        entries.append({"center": e["center"], "r": e["r"], "C_box": f["C_box"], "C": C,
                        "ratio": C / e["r"] ** reports[0].n})
    if not entries:
        raise InvalidInputError("scans share no centres")
    per_r = {}
    for e in entries:
        per_r[e["r"]] = max(per_r.get(e["r"], 0.0), e["ratio"])
    A = max(e["ratio"] for e in entries)
    violations = [e for e in entries if cap is not None and e["ratio"] > cap]
    radii = sorted(per_r)
    return ConditionBReport(radii, entries, A, per_r, violations, radii[0], reports[0].n)


# ------------------------------------------------------------ estimates

@dataclass
class EstimateReport:
    mu: list
    lhs_22: list
    ratio_22: list
    K1: float
    ratio_23: list
    K2: float
    ratio_25: list
    K3: float
    decay_exponent: float
    Cm: float

    def to_json(self):
        return self.__dict__


def _linf_dist_to_cube(grid: GridSpec, x0, r) -> np.ndarray:
    """Euclidean distance from each node to the cube K(x0, r)."""
    d2 = 0.0
    for a, c in zip(grid.mesh(), x0):
        d2 = d2 + np.clip(np.abs(a - c) - r, 0, None) ** 2
    return np.sqrt(d2)


def _shell(grid: GridSpec, x0, r_in, r_out) -> np.ndarray:
    return cube_nodes(grid, x0, r_out) & ~cube_nodes(grid, x0, r_in)


def diagnostics_estimates(op: OperatorSpec, F: CompactSet, q: float, mu_list: Sequence[float],
                          r: float, h: float, A: float | None = None, tol: float = 1e-8,
                          margin: float = 1.0, x0=None, check_premises: bool = True
                          ) -> EstimateReport:
    """Empirical ratios for the sublevel energy, pointwise decay and refined bounds.

    F must lie in K(x0, r).  The refined bound is evaluated only when its
    premises C_m(F) <= A r^n and |q|^(m-1) r <= 1 hold (PremiseError
    otherwise, unless ``check_premises`` is False, in which case it is skipped).
    """
    n, m = len(F.center), op.m
    x0 = tuple(F.center) if x0 is None else tuple(x0)
    grid = capacity_grid(CompactSet.cube(3 * r, x0), h, margin)
    Fm = F.realize(grid)
    if np.any(Fm & ~cube_nodes(grid, x0, r)):
        raise InvalidInputError("F must be contained in K(x0, r)")
    Cm = compute_Cm(F, grid, tol, m, mask=Fm).value if Fm.any() else 0.0
    premise_fail = None
    if A is not None and Cm > A * r ** n:
        premise_fail = f"C_m(F) = {Cm:.4g} exceeds A r^n = {A * r ** n:.4g}"
    elif abs(q) ** (m - 1) * r > 1:
        premise_fail = f"|q|^(m-1) r = {abs(q) ** (m - 1) * r:.4g} exceeds 1"
    if premise_fail and check_premises:
        raise PremiseError(premise_fail)

    if q == 0 or not Fm.any():
        z = [0.0] * len(mu_list)
        return EstimateReport(list(mu_list), z, z, 0.0, [0.0], 0.0, [0.0], 0.0, float("nan"), Cm)

    rep = potential_v(op, F, q, grid=grid, tol=tol, mask=Fm)
    v = rep.potential.values
    disc = Discretization(op, grid.shape, grid.h, grid.origin)
    lhs = []
    for mu in mu_list:
        tot = 0.0
        for perm, offs in disc.simplices:
            gr = disc.gradients(v, offs)
            t = np.sqrt(sum(x * x for x in gr))
            vbar = sum(np.abs(v[disc._sl(o)]) for o in offs) / len(offs)
            tot += np.sum(np.where(vbar <= mu * (1 + 1e-12), (1 + t) ** (m - 2) * t * t, 0.0))
        lhs.append(disc.vol * tot)
    rhs = [mu * abs(q) * (abs(q) + r) ** (m - 2) * Cm for mu in mu_list]
    ratio22 = [a / b if b > 0 else 0.0 for a, b in zip(lhs, rhs)]

    shell = _shell(grid, x0, r, 3 * r)
    rho = _linf_dist_to_cube(grid, x0, r)[shell]
    vs = np.abs(v[shell])
    bound23 = abs(q) * (r / rho) ** (n - 1) * (Cm / r ** (n - m)) ** (1.0 / (m - 1))
    ratio23 = vs / bound23

    if premise_fail:
        ratio25 = np.array([np.nan])
    else:
        shell2 = _shell(grid, x0, 1.5 * r, 2 * r)
        ratio25 = np.abs(v[shell2]) / (abs(q) * (abs(q) + r) ** (m - 2) * r * r)

    # far-field decay exponent of |v| against distance from x0
    dist = np.sqrt(sum((a - c) ** 2 for a, c in zip(grid.mesh(), x0)))
    far = shell & (dist > 1.5 * r)
    if far.sum() > 4:
        slope = np.polyfit(np.log(dist[far]), np.log(np.abs(v[far]) + 1e-300), 1)[0]
    else:
        slope = float("nan")
    return EstimateReport(list(mu_list), lhs, ratio22, max(ratio22),
                          ratio23.tolist(), float(ratio23.max()),
                          ratio25.tolist(), float(np.nanmax(ratio25)) if not premise_fail else float("nan"),
                          float(slope), Cm)
