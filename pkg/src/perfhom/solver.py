"""Discrete nonlinear Dirichlet solves on masked tensor grids.

Each grid cube is split into n! simplices (Kuhn triangulation) and the
energy

    J(u) = sum_T |T| [Phi(x_T, grad u|_T) - f_vec(x_T) . grad u|_T]
           + sum_nodes w_i G(x_i, f_i - u_i)

is minimized over nodal fields equal to f on Dirichlet nodes.  Its gradient
is the nodal weak-form residual; G is the primitive of the density term c
and is present only for the limit problem.  For m = 2 the simplex
stiffness collapses to the 7-point Laplacian.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidDensityError, InvalidInputError, SolverError
from .grid import GridSpec, ScalarField, DomainMask
from .linalg import make_preconditioner, pcg
from .operator import OperatorSpec, radial_profile

log = logging.getLogger(__name__)

EPS_LADDER = tuple(10.0 ** -k for k in range(1, 9))


# ------------------------------------------------------------ density terms

class DensityTerm:
    """Zeroth-order term c(x, q) of the limit problem, nondecreasing in q."""

    def value(self, x, q):
        raise NotImplementedError

    def dq(self, x, q):
        raise NotImplementedError

    def primitive(self, x, q):
        raise NotImplementedError

    def check(self, qs=np.linspace(-4, 4, 81)):
        qs = np.asarray(qs, dtype=float)
        x = np.zeros((qs.size, 1))
        c = np.asarray(self.value(x, qs))
        if np.any(np.diff(c) < -1e-12 * (1 + np.abs(c[:-1]))):
            raise InvalidDensityError("density is not nondecreasing in q")
        z = np.asarray(self.value(np.zeros((1, 1)), np.zeros(1)))
        if np.any(np.abs(z) > 1e-14):
            raise InvalidDensityError("density must vanish at q = 0")


@dataclass
class LinearDensity(DensityTerm):
    cbar: float

    def value(self, x, q):
        return self.cbar * q

    def dq(self, x, q):
        return np.full_like(np.asarray(q, dtype=float), self.cbar)

    def primitive(self, x, q):
        return 0.5 * self.cbar * q * q


@dataclass
class PowerDensity(DensityTerm):
    """c(x, q) = cbar |q|^(m-2) q, the homogeneous form."""
    cbar: float
    m: float

    def value(self, x, q):
        return self.cbar * np.abs(q) ** (self.m - 2) * q

    def dq(self, x, q):
        with np.errstate(divide="ignore"):
            return (self.m - 1) * self.cbar * np.abs(q) ** (self.m - 2)

    def primitive(self, x, q):
        return self.cbar * np.abs(q) ** self.m / self.m


class TabulatedDensity(DensityTerm):
    """Piecewise-linear interpolation of sampled c(q), linear beyond the ends."""

    def __init__(self, q, c):
        q = np.asarray(q, dtype=float)
        c = np.asarray(c, dtype=float)
        order = np.argsort(q)
        q, c = q[order], c[order]
        if 0.0 not in q:
            q = np.append(q, 0.0)
            c = np.append(c, 0.0)
            order = np.argsort(q)
            q, c = q[order], c[order]
        if np.any(np.diff(c) < 0):
            raise InvalidDensityError("tabulated density is not monotone in q")
        if abs(c[q == 0][0]) > 0:
            raise InvalidDensityError("tabulated density must vanish at q = 0")
        self.q, self.c = q, c
        self.slopes = np.diff(c) / np.diff(q)
        # primitive at the knots, anchored at q = 0
        seg = 0.5 * (c[1:] + c[:-1]) * np.diff(q)
        P = np.concatenate([[0.0], np.cumsum(seg)])
        self.P = P - P[np.flatnonzero(q == 0)[0]]

    def _seg(self, q):
        return np.clip(np.searchsorted(self.q, q) - 1, 0, len(self.q) - 2)

    def value(self, x, q):
        q = np.asarray(q, dtype=float)
        k = self._seg(q)
        return self.c[k] + self.slopes[k] * (q - self.q[k])

    def dq(self, x, q):
        return self.slopes[self._seg(np.asarray(q, dtype=float))]

    def primitive(self, x, q):
        q = np.asarray(q, dtype=float)
        k = self._seg(q)
        dq = q - self.q[k]
        return self.P[k] + self.c[k] * dq + 0.5 * self.slopes[k] * dq * dq


# ------------------------------------------------------------ problem data

@dataclass
class ProblemSpec:
    operator: OperatorSpec
    grid: GridSpec
    dirichlet: np.ndarray
    f: ScalarField
    fj: Optional[Sequence[ScalarField]] = None
    density: Optional[DensityTerm] = None
    density_region: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dirichlet.shape != self.grid.shape:
            raise InvalidInputError("Dirichlet mask does not match grid")
        if self.f.grid.key != self.grid.key:
            raise InvalidInputError("boundary field lives on a different grid")
        for g in self.fj or ():
            if g.grid.key != self.grid.key:
                raise InvalidInputError("divergence data lives on a different grid")
        if self.fj is not None and len(self.fj) != self.grid.n:
            raise InvalidInputError("need one f_j field per coordinate")
        # the outer boundary always carries data
        self.dirichlet = self.dirichlet | self.grid.boundary()

    @classmethod
    def from_mask(cls, op, mask: DomainMask, f: ScalarField, fj=None, density=None):
        """Dirichlet on holes and outside the inner cube (trace condition u = f)."""
        return cls(op, mask.grid, ~mask.interior, f, fj, density)


@dataclass
class SolveReport:
    solution: ScalarField
    iterations: int
    residual: float
    energy: float
    epsilon: float
    converged: bool = True
    history: list = field(default_factory=list)
    rung_energies: list = field(default_factory=list)
    linear_iterations: int = 0
    preconditioner: str = ""

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual, "energy": self.energy,
                "epsilon": self.epsilon, "converged": self.converged,
                "linear_iterations": self.linear_iterations,
                "preconditioner": self.preconditioner,
                "rung_energies": [list(map(float, r)) for r in self.rung_energies],
                "history": [float(h) for h in self.history]}


@dataclass
class SolverSettings:
    tol: float = 1e-8
    eps_ladder: tuple = EPS_LADDER
    max_newton: int = 60
    cg_rtol: float = 1e-10
    preconditioner: str = "auto"
    max_retries: int = 3


# ------------------------------------------------------------ discretization

def kuhn_simplices(n: int):
    """(permutation, vertex offsets) for the n! simplices of a unit cube."""
    out = []
    for perm in itertools.permutations(range(n)):
        o = [np.zeros(n, dtype=int)]
        for ax in perm:
            nxt = o[-1].copy()
            nxt[ax] += 1
            o.append(nxt)
        out.append((perm, [tuple(v) for v in o]))
    return out


def _hessian_terms(op: OperatorSpec, t, eps):
    """alpha, gamma with Hessian(Phi) = alpha I + gamma p p^T (unit weight)."""
    m = op.m
    if op.kind == "regularized":
        s = 1.0 + t
        alpha = s ** (m - 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(t > 0, (m - 2) * s ** (m - 3) / np.where(t > 0, t, 1), 0.0)
        return alpha, gamma
    if m == 2.0:
        return np.ones_like(t), np.zeros_like(t)
    r2 = t * t + eps * eps
    return r2 ** (m / 2 - 1), (m - 2) * r2 ** (m / 2 - 2)


def _solver_potential(op: OperatorSpec, t, eps):
    """Potential used inside the solver: (|p|^2+eps^2)^(m/2)/m for the
    homogeneous kinds, so that the minimum is monotone in eps."""
    if op.kind == "regularized" or op.m == 2.0:
        phi, d1t, _ = radial_profile(op, t)
        return phi, d1t
    r2 = t * t + eps * eps
    return r2 ** (op.m / 2) / op.m, r2 ** (op.m / 2 - 1)


class Discretization:
    """Energy, gradient and Hessian on a rectangular block of nodes."""

    def __init__(self, op: OperatorSpec, shape, h: float, origin, *, fj_cells=None,
                 weight_cells=None):
        self.op = op
        self.shape = tuple(shape)
        self.n = len(shape)
        self.h = h
        self.origin = np.asarray(origin, dtype=float)
        self.vol = h ** self.n / math.factorial(self.n)
        self.cshape = tuple(s - 1 for s in self.shape)
        self.simplices = kuhn_simplices(self.n)
        self.fj_cells = fj_cells
        self.weight_cells = weight_cells
        self.strides = np.array([int(np.prod(self.shape[i + 1:])) for i in range(self.n)])

    def _sl(self, o):
        return tuple(slice(o[i], o[i] + self.cshape[i]) for i in range(self.n))

    def gradients(self, u, offsets):
        return [(u[self._sl(offsets[k + 1])] - u[self._sl(offsets[k])]) / self.h
                for k in range(self.n)]

    def energy(self, u, eps, exact=False):
        total = 0.0
        w = 1.0 if self.weight_cells is None else self.weight_cells
        for perm, offs in self.simplices:
            g = self.gradients(u, offs)
            t = np.sqrt(sum(gk * gk for gk in g))
            if exact:
                phi = radial_profile(self.op, t)[0]
            else:
                phi = _solver_potential(self.op, t, eps)[0]
            e = np.sum(w * phi)
            if self.fj_cells is not None:
                e -= sum(np.sum(self.fj_cells[perm[k]] * g[k]) for k in range(self.n))
            total += e
        return self.vol * total

    def gradient(self, u, eps):
        out = np.zeros(self.shape)
        w = 1.0 if self.weight_cells is None else self.weight_cells
        for perm, offs in self.simplices:
            g = self.gradients(u, offs)
            t = np.sqrt(sum(gk * gk for gk in g))
            d1t = w * _solver_potential(self.op, t, eps)[1]
            for k in range(self.n):
                ak = d1t * g[k]
                if self.fj_cells is not None:
                    ak = ak - self.fj_cells[perm[k]]
                ak *= self.vol / self.h
                out[self._sl(offs[k + 1])] += ak
                out[self._sl(offs[k])] -= ak
        return out

    def flux_pairing(self, u, z, eps=0.0):
        """sum_T |T| a(grad u) . grad z (no data term)."""
        total = 0.0
        w = 1.0 if self.weight_cells is None else self.weight_cells
        for perm, offs in self.simplices:
            g = self.gradients(u, offs)
            gz = self.gradients(z, offs)
            t = np.sqrt(sum(gk * gk for gk in g))
            d1t = w * radial_profile(self.op, t, eps)[1]
            if self.op.kind != "regularized" and self.op.m < 2 and eps == 0:
                d1t = np.where(t == 0, 0.0, d1t)
            total += sum(np.sum(d1t * g[k] * gz[k]) for k in range(self.n))
        return self.vol * total

    def hessian_coefficients(self, u, eps) -> dict:
        """Stencil coefficients keyed by node offset: A[i, i+d] = coef[d][i]."""
        n = self.n
        coef = {}
        w = 1.0 if self.weight_cells is None else self.weight_cells
        scale = self.vol / self.h ** 2
        for perm, offs in self.simplices:
            g = self.gradients(u, offs)
            t = np.sqrt(sum(gk * gk for gk in g))
            alpha, gamma = _hessian_terms(self.op, t, eps)
            alpha = scale * w * alpha
            gamma = scale * w * gamma
            trivial = np.ndim(gamma) == 0 or not np.any(gamma)
            # edge-space Hessian, padded with zero rows for the path ends
            P = [[0.0] * (n + 2) for _ in range(n + 2)]
            for a in range(n):
                for b in range(a, n):
                    val = gamma * g[a] * g[b] if not trivial else 0.0
                    if a == b:
                        val = alpha + val
                    P[a + 1][b + 1] = val
                    P[b + 1][a + 1] = val
            for i in range(n + 1):
                for j in range(n + 1):
                    K = P[i][j] - P[i][j + 1] - P[i + 1][j] + P[i + 1][j + 1]
                    if np.ndim(K) == 0 and K == 0.0:
                        continue
                    d = tuple(int(x) for x in np.subtract(offs[j], offs[i]))
                    arr = coef.get(d)
                    if arr is None:
                        arr = coef[d] = np.zeros(self.shape)
                    arr[self._sl(offs[i])] += K
        return coef

    def assemble(self, coef: dict, free: np.ndarray) -> sp.csr_matrix:
        """Sparse Hessian with Dirichlet rows/columns replaced by identity."""
        N = int(np.prod(self.shape))
        offsets, data = [], []
        freef = free.astype(float)
        for d, arr in coef.items():
            if not np.any(arr):
                continue
            # zero couplings touching a Dirichlet node
            shifted = np.zeros(self.shape)
            src = tuple(slice(max(0, -x), s - max(0, x)) for x, s in zip(d, self.shape))
            dst = tuple(slice(max(0, x), s - max(0, -x)) for x, s in zip(d, self.shape))
            shifted[src] = freef[dst]
            vals = arr * freef * shifted
            if d == (0,) * self.n:
                vals = vals + (1.0 - freef)
            flat = int(np.dot(d, self.strides))
            row = np.zeros(N)
            v = vals.ravel()
            # dia storage indexes by column: data[k, j] = A[j - off, j]
            if flat >= 0:
                row[flat:] = v[:N - flat] if flat else v
            else:
                row[:N + flat] = v[-flat:]
            offsets.append(flat)
            data.append(row)
        A = sp.dia_matrix((np.array(data), np.array(offsets)), shape=(N, N))
        return A.tocsr()


def _cell_average(values: np.ndarray) -> np.ndarray:
    n = values.ndim
    acc = np.zeros(tuple(s - 1 for s in values.shape))
    for corner in itertools.product((0, 1), repeat=n):
        acc += values[tuple(slice(c, c + s - 1) for c, s in zip(corner, values.shape))]
    return acc / 2 ** n


def _free_block(free: np.ndarray):
    """Slices of the bounding box of free nodes, widened by one layer."""
    idx = np.nonzero(free)
    if idx[0].size == 0:
        return None
    return tuple(slice(max(int(i.min()) - 1, 0), min(int(i.max()) + 2, s))
                 for i, s in zip(idx, free.shape))


# ------------------------------------------------------------ Newton driver

class _Problem:
    def __init__(self, spec: ProblemSpec, settings: SolverSettings, block):
        self.spec = spec
        self.settings = settings
        g = spec.grid
        self.block = block
        self.free = ~spec.dirichlet[block]
        origin = g.origin + g.h * np.array([s.start for s in block])
        fj_cells = None
        if spec.fj is not None:
            fj_cells = [_cell_average(fj.values[block]) for fj in spec.fj]
        weight_cells = None
        if spec.operator.kind == "weighted":
            shape = tuple(s.stop - s.start for s in block)
            axes = [origin[i] + g.h * (np.arange(shape[i] - 1) + 0.5) for i in range(g.n)]
            pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
            weight_cells = spec.operator.weight_at(pts).reshape(tuple(s - 1 for s in shape))
        self.disc = Discretization(spec.operator, self.free.shape, g.h, origin,
                                   fj_cells=fj_cells, weight_cells=weight_cells)
        self.f = spec.f.values[block]
        self.density = spec.density
        if self.density is not None:
            region = self.free if spec.density_region is None else (
                self.free & spec.density_region[block])
            self.dens_idx = np.nonzero(region)
            qw = g.quadrature_weights()[block]
            self.dens_w = qw[self.dens_idx]
            pts = np.stack([origin[i] + g.h * self.dens_idx[i] for i in range(g.n)], axis=1)
            self.dens_x = pts

    def energy(self, u, eps):
        e = self.disc.energy(u, eps)
        if self.density is not None:
            q = self.f[self.dens_idx] - u[self.dens_idx]
            e += np.sum(self.dens_w * self.density.primitive(self.dens_x, q))
        return e

    def gradient(self, u, eps):
        gr = self.disc.gradient(u, eps)
        if self.density is not None:
            q = self.f[self.dens_idx] - u[self.dens_idx]
            gr[self.dens_idx] -= self.dens_w * self.density.value(self.dens_x, q)
        gr[~self.free] = 0.0
        return gr

    def hessian(self, u, eps):
        coef = self.disc.hessian_coefficients(u, eps)
        if self.density is not None:
            q = self.f[self.dens_idx] - u[self.dens_idx]
            diag = coef.setdefault((0,) * self.disc.n, np.zeros(self.disc.shape))
            diag[self.dens_idx] += self.dens_w * self.density.dq(self.dens_x, q)
        return self.disc.assemble(coef, self.free)


def _needs_continuation(op: OperatorSpec) -> bool:
    return op.kind != "regularized" and op.m != 2.0


def _newton(prob: _Problem, u, eps, rtol, ref, settings, report):
    """Damped Newton on J_eps until ||grad||_free <= rtol * ref."""
    free = prob.free
    for it in range(settings.max_newton):
        gr = prob.gradient(u, eps)
        res = float(np.linalg.norm(gr[free]))
        report.history.append(res / ref)
        if res <= rtol * ref:
            return u, True
        A = prob.hessian(u, eps)
        M, name = make_preconditioner(A, settings.preconditioner)
        report.preconditioner = name
        b = -gr.ravel()
        cg = pcg(A, b, M, rtol=settings.cg_rtol)
        report.linear_iterations += cg.iterations
        if cg.breakdown or not np.all(np.isfinite(cg.x)):
            raise _Singular()
        du = cg.x.reshape(u.shape)
        du[~free] = 0.0
        J0 = prob.energy(u, eps)
        slope = float(np.sum(gr * du))
        if slope >= 0:
            raise _Singular()
        step = 1.0
        for _ in range(40):
            trial = u + step * du
            J1 = prob.energy(trial, eps)
            if J1 <= J0 + 1e-4 * step * slope or abs(J1 - J0) <= 1e-15 * max(1.0, abs(J0)):
                break
            step *= 0.5
        else:
            raise _Singular()
        u = trial
        report.iterations += 1
    gr = prob.gradient(u, eps)
    res = float(np.linalg.norm(gr[free]))
    report.history.append(res / ref)
    return u, res <= rtol * ref


class _Singular(Exception):
    pass


def _solve(spec: ProblemSpec, settings: SolverSettings, initial=None) -> SolveReport:
    grid = spec.grid
    free_full = ~spec.dirichlet
    u_full = spec.f.values.copy()
    if initial is not None:
        u_full[free_full] = initial.values[free_full]
    else:
        u_full[free_full] = 0.0
    block = _free_block(free_full)
    report = SolveReport(solution=None, iterations=0, residual=0.0, energy=0.0, epsilon=0.0)
    if block is None:
        report.solution = ScalarField(grid, u_full, spec.dirichlet.copy())
        report.energy = _full_energy(spec, u_full)
        return report

    prob = _Problem(spec, settings, block)
    u = u_full[block].copy()
    # reference residual: zero-interior lift of the data
    lift = spec.f.values[block].copy()
    lift[prob.free] = 0.0
    eps_final = settings.eps_ladder[-1] if _needs_continuation(spec.operator) else 0.0
    ref = float(np.linalg.norm(prob.gradient(lift, max(eps_final, 0.0))[prob.free]))
    if ref == 0.0:
        ref = float(np.linalg.norm(prob.gradient(u, eps_final)[prob.free]))
        if ref == 0.0:
            u_full[block] = u
            report.solution = ScalarField(grid, u_full, spec.dirichlet.copy())
            report.energy = _full_energy(spec, u_full)
            report.epsilon = eps_final
            return report
    if _needs_continuation(spec.operator):
        ladder = list(settings.eps_ladder)
        if spec.operator.m < 2:
            # sublinear flux growth: start near the gradient scale of the guess
            scale = max(float(np.max(np.abs(np.diff(u, axis=i)))) for i in range(u.ndim)) / grid.h
            top = ladder[0]
            while top * 10 <= scale:
                top *= 10
                ladder.insert(0, top)
    else:
        ladder = [0.0]

    ok = False
    k = 0
    retries = 0
    while k < len(ladder):
        eps = ladder[k]
        last = k == len(ladder) - 1
        rtol = settings.tol if last else max(settings.tol, 1e-4)
        try:
            u, ok = _newton(prob, u, eps, rtol, ref, settings, report)
        except _Singular:
            retries += 1
            if retries > settings.max_retries or not _needs_continuation(spec.operator):
                raise SolverError("singular linearization persists after regularization",
                                  report.history)
            # step back up the ladder and retry with a larger epsilon
            k = max(k - 1, 0)
            ladder = ladder[:k] + [ladder[k] * 10] + ladder[k:]
            continue
        report.rung_energies.append((eps, prob.energy(u, eps)))
        k += 1
    report.epsilon = ladder[-1]
    report.residual = report.history[-1] if report.history else 0.0
    report.converged = ok
    u_full[block] = u
    report.solution = ScalarField(grid, u_full, spec.dirichlet.copy())
    report.energy = _full_energy(spec, u_full)
    if not ok:
        raise SolverError(
            f"no convergence: residual {report.residual:.3e} > tol {settings.tol:.1e}",
            report.history)
    return report


def _full_energy(spec: ProblemSpec, u: np.ndarray) -> float:
    """Exact (eps = 0) discrete energy over the whole grid."""
    full = tuple(slice(0, s) for s in u.shape)
    dummy = SolverSettings()
    prob = _Problem(spec, dummy, full)
    e = prob.disc.energy(u, 0.0, exact=True)
    if prob.density is not None:
        q = prob.f[prob.dens_idx] - u[prob.dens_idx]
        e += np.sum(prob.dens_w * prob.density.primitive(prob.dens_x, q))
    return float(e)


def solve_dirichlet(spec: ProblemSpec, tol: float = 1e-8, settings: SolverSettings | None = None,
                    initial: ScalarField | None = None) -> SolveReport:
    """Minimize the discrete energy with u = f on Dirichlet nodes."""
    if spec.density is not None:
        raise InvalidInputError("solve_dirichlet takes no density term; use solve_limit")
    settings = settings or SolverSettings()
    settings = SolverSettings(**{**settings.__dict__, "tol": tol})
    return _solve(spec, settings, initial)


def solve_limit(spec: ProblemSpec, tol: float = 1e-8, settings: SolverSettings | None = None,
                initial: ScalarField | None = None) -> SolveReport:
    """Solve div a(grad u) + c(x, f - u) = div f_vec with u = f on the boundary."""
    settings = settings or SolverSettings()
    settings = SolverSettings(**{**settings.__dict__, "tol": tol})
    if spec.density is not None:
        spec.density.check()
    return _solve(spec, settings, initial)


def weak_residual(spec: ProblemSpec, u: ScalarField, eps: float = 0.0) -> np.ndarray:
    """Nodal weak-form residual (zero on Dirichlet nodes)."""
    full = tuple(slice(0, s) for s in u.grid.shape)
    prob = _Problem(spec, SolverSettings(), full)
    return prob.gradient(u.values, eps)


def flux_pairing(op: OperatorSpec, u: ScalarField, z: ScalarField) -> float:
    """sum_j int a_j(x, grad u) d_j z dx on the simplex discretization."""
    g = u.grid
    weight = None
    if op.kind == "weighted":
        axes = [g.origin[i] + g.h * (np.arange(g.nodes_per_axis - 1) + 0.5) for i in range(g.n)]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        weight = op.weight_at(pts).reshape(tuple(s - 1 for s in g.shape))
    disc = Discretization(op, g.shape, g.h, g.origin, weight_cells=weight)
    return disc.flux_pairing(u.values, z.values)


def energy_integrals(op: OperatorSpec, u: ScalarField, region_cells=None) -> tuple:
    """(sum |T| a(grad u).grad u, sum |T| |grad u|^m) per simplex; optionally
    restricted by a cell mask."""
    g = u.grid
    disc = Discretization(op, g.shape, g.h, g.origin)
    e1 = e2 = 0.0
    for perm, offs in disc.simplices:
        gr = disc.gradients(u.values, offs)
        t = np.sqrt(sum(x * x for x in gr))
        d1t = radial_profile(op, t)[1]
        if op.kind != "regularized" and op.m < 2:
            d1t = np.where(t == 0, 0.0, d1t)
        a = d1t * t * t
        b = t ** op.m
        if region_cells is not None:
            a = a * region_cells
            b = b * region_cells
        e1 += a.sum()
        e2 += b.sum()
    return disc.vol * e1, disc.vol * e2
