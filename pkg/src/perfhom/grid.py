"""Tensor grids on the outer cube, scalar fields, holes, mollifier and norms.

Geometry lives on a uniform node lattice covering the outer cube
``[c - L0, c + L0]^n``; the inner cube ``[c - L, c + L]^n`` is the domain
that gets perforated.  Holes are classified node by node (staircase).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .errors import EmptyCellError, InvalidInputError, ResolutionError

INTERIOR, HOLE, OUTSIDE = 0, 1, 2


@dataclass(frozen=True)
class GridSpec:
    n: int = 3
    omega0_halfwidth: float = 1.5
    omega_halfwidth: float = 0.5
    h: float = 1.0 / 32
    center: tuple = ()
    check_margin: bool = True

    def __post_init__(self):
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.n)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != self.n:
            raise InvalidInputError("center dimension does not match n")
        cells = 2 * self.omega0_halfwidth / self.h
        if abs(cells - round(cells)) > 1e-8 * max(1.0, cells):
            raise InvalidInputError(
                f"2*omega0_halfwidth/h = {cells} is not an integer node count")
        if round(cells) + 1 < 8:
            raise InvalidInputError("need at least 8 nodes per axis")
        if self.check_margin and self.omega0_halfwidth - self.omega_halfwidth < 1 - 1e-12:
            raise InvalidInputError(
                "outer cube must keep distance >= 1 from the inner cube "
                f"(got {self.omega0_halfwidth - self.omega_halfwidth:g})")
        if self.omega_halfwidth <= 0 or self.omega_halfwidth >= self.omega0_halfwidth:
            raise InvalidInputError("need 0 < omega_halfwidth < omega0_halfwidth")

    @property
    def nodes_per_axis(self) -> int:
        return int(round(2 * self.omega0_halfwidth / self.h)) + 1

    @property
    def shape(self) -> tuple:
        return (self.nodes_per_axis,) * self.n

    @property
    def size(self) -> int:
        return self.nodes_per_axis ** self.n

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.center) - self.omega0_halfwidth

    @property
    def key(self) -> tuple:
        return (self.n, round(self.omega0_halfwidth, 12), round(self.omega_halfwidth, 12),
                round(self.h, 14), tuple(round(c, 12) for c in self.center))

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.h * np.arange(self.nodes_per_axis)

    def mesh(self) -> list:
        """Open (broadcastable) coordinate arrays, one per axis."""
        out = []
        for i in range(self.n):
            shape = [1] * self.n
            shape[i] = -1
            out.append(self.axis(i).reshape(shape))
        return out

    def points(self) -> np.ndarray:
        """All node coordinates, shape (size, n), C order."""
        return np.stack([np.broadcast_to(a, self.shape).ravel() for a in self.mesh()], axis=1)

    def index_of(self, x) -> tuple:
        idx = np.rint((np.asarray(x, dtype=float) - self.origin) / self.h).astype(int)
        return tuple(int(i) for i in idx)

    def inside_omega(self, closed: bool = False) -> np.ndarray:
        """Nodes of the open (or closed) inner cube."""
        tol = 1e-9 * self.h
        lim = self.omega_halfwidth + (tol if closed else -tol)
        inside = np.ones(self.shape, dtype=bool)
        for c, a in zip(self.center, self.mesh()):
            inside &= np.abs(a - c) < lim if not closed else np.abs(a - c) <= lim
        return inside

    def boundary(self) -> np.ndarray:
        """Nodes on the boundary of the outer cube."""
        b = np.zeros(self.shape, dtype=bool)
        for i in range(self.n):
            sl = [slice(None)] * self.n
            sl[i] = 0
            b[tuple(sl)] = True
            sl[i] = -1
            b[tuple(sl)] = True
        return b

    def quadrature_weights(self) -> np.ndarray:
        """Node-centred dual-cell volumes (product trapezoid weights)."""
        w1 = np.full(self.nodes_per_axis, self.h)
        w1[0] = w1[-1] = self.h / 2
        w = np.ones(self.shape)
        for i in range(self.n):
            shape = [1] * self.n
            shape[i] = -1
            w = w * w1.reshape(shape)
        return w

    def to_json(self) -> dict:
        return {"n": self.n, "omega0_halfwidth": self.omega0_halfwidth,
                "omega_halfwidth": self.omega_halfwidth, "h": self.h,
                "center": list(self.center)}


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray
    dirichlet: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise InvalidInputError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("field has non-finite values")
        if self.dirichlet is None:
            self.dirichlet = np.zeros(self.grid.shape, dtype=bool)

    @classmethod
    def from_function(cls, grid: GridSpec, fn, dirichlet=None) -> "ScalarField":
        vals = np.broadcast_to(np.asarray(fn(*grid.mesh()), dtype=float), grid.shape).copy()
        return cls(grid, vals, dirichlet)

    @classmethod
    def constant(cls, grid: GridSpec, c: float = 0.0) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.dirichlet.copy())

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _vals(other), self.dirichlet.copy())

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _vals(other), self.dirichlet.copy())

    def __mul__(self, c):
        return ScalarField(self.grid, self.values * _vals(c), self.dirichlet.copy())

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, ScalarField) else x


# ---------------------------------------------------------------- bump psi

def _smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6 * t - 15) + 10)


@dataclass(frozen=True)
class BumpSpec:
    width: float = 1.0
    profile: str = "smootherstep"

    def field(self, grid: GridSpec) -> ScalarField:
        """psi = 1 on the closed inner cube, 0 within one cell of the outer boundary."""
        L = grid.omega_halfwidth
        w = min(self.width, grid.omega0_halfwidth - L - grid.h)
        if w <= 0:
            raise InvalidInputError("no room for the bump transition")
        psi = np.ones(grid.shape)
        for c, a in zip(grid.center, grid.mesh()):
            d = np.abs(a - c) - L
            psi = psi * (1.0 - _smootherstep(d / w))
        return ScalarField(grid, psi)


# ---------------------------------------------------------- perforations

@dataclass(frozen=True)
class PerforationFamily:
    """Periodic holes of radius a_s = c0 * d_s**gamma in cells of size d_s.

    ``cell_sizes`` lists d_1, d_2, ... explicitly; otherwise
    d_s = d1 * ratio**(s-1).  ``gamma=None`` selects the critical exponent
    n/(n-m).
    """
    c0: float
    m: float = 2.0
    n: int = 3
    gamma: Optional[float] = None
    cell_sizes: tuple = ()
    d1: float = 1.0
    ratio: float = 0.5
    shape: str = "ball"
    anchor: tuple = ()
    align: str = "corner"

    def __post_init__(self):
        if self.align not in ("corner", "center"):
            raise InvalidInputError(f"unknown lattice alignment {self.align!r}")
        if self.shape not in ("ball", "cube"):
            raise InvalidInputError(f"unknown hole shape {self.shape!r}")
        if self.c0 < 0:
            raise InvalidInputError("c0 must be nonnegative")
        if self.cell_sizes:
            d = np.asarray(self.cell_sizes, dtype=float)
            if np.any(np.diff(d) >= 0) or np.any(d <= 0):
                raise InvalidInputError("cell sizes must be positive and strictly decreasing")
        elif not (0 < self.ratio < 1 and self.d1 > 0):
            raise InvalidInputError("geometric cell law needs d1 > 0 and 0 < ratio < 1")

    @property
    def exponent(self) -> float:
        return self.gamma if self.gamma is not None else self.n / (self.n - self.m)

    def d(self, s: int) -> float:
        if s < 1:
            raise InvalidInputError("index s starts at 1")
        if self.cell_sizes:
            if s > len(self.cell_sizes):
                raise InvalidInputError(f"family defines only {len(self.cell_sizes)} levels")
            return float(self.cell_sizes[s - 1])
        return self.d1 * self.ratio ** (s - 1)

    def a(self, s: int) -> float:
        a = self.c0 * self.d(s) ** self.exponent
        if a >= self.d(s) / 2:
            raise InvalidInputError(f"hole radius {a:g} does not fit in cell {self.d(s):g}")
        return a

    def lattice_base(self, s: int, lo, center) -> np.ndarray:
        """Corner of the lattice cell grid: holes sit at base + d_s (k + 1/2).

        ``corner`` counts cells from the inner cube's lower corner, ``center``
        puts a hole at the inner cube's centre.
        """
        shift = np.asarray(self.anchor or (0.0,) * len(lo), dtype=float)
        if self.align == "corner":
            return np.asarray(lo, dtype=float) + shift
        return np.asarray(center, dtype=float) - self.d(s) / 2 + shift

    def to_json(self) -> dict:
        return {"c0": self.c0, "m": self.m, "n": self.n, "gamma": self.exponent,
                "cell_sizes": list(self.cell_sizes), "d1": self.d1, "ratio": self.ratio,
                "shape": self.shape, "anchor": list(self.anchor), "align": self.align}


@dataclass
class DomainMask:
    """Node classes: INTERIOR (in the perforated domain), HOLE, OUTSIDE."""
    grid: GridSpec
    labels: np.ndarray
    hole_radius: float = 0.0
    period: float = 0.0
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def holes(self) -> np.ndarray:
        return self.labels == HOLE

    @property
    def interior(self) -> np.ndarray:
        return self.labels == INTERIOR

    @property
    def outside(self) -> np.ndarray:
        return self.labels == OUTSIDE

    def hole_count(self) -> int:
        return int(np.count_nonzero(self.holes))


def hole_centers(family: PerforationFamily, s: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Cell-centred lattice points of period d_s inside the box [lo, hi]."""
    d = family.d(s)
    anchor = np.asarray(family.anchor or (0.0,) * len(lo), dtype=float)
    axes = []
    for i in range(len(lo)):
        k0 = math.floor((lo[i] - anchor[i]) / d - 0.5) - 1
        k1 = math.ceil((hi[i] - anchor[i]) / d - 0.5) + 1
        c = anchor[i] + d * (np.arange(k0, k1 + 1) + 0.5)
        axes.append(c[(c >= lo[i] - 1e-12) & (c <= hi[i] + 1e-12)])
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def build_perforation(family: PerforationFamily, s: int, grid: GridSpec,
                      region: Optional[tuple] = None) -> DomainMask:
    """Classify grid nodes as perforated-domain interior, hole, or outside the inner cube.

    Hole lattice cells are anchored at the inner cube's lower corner plus the
    family anchor.  ``region=(lo, hi)`` restricts holes to centres inside a
    sub-box (used when a grid is a local window on a larger domain).
    """
    labels = np.where(grid.inside_omega(), INTERIOR, OUTSIDE).astype(np.int8)
    lo = np.asarray(grid.center) - grid.omega_halfwidth
    hi = np.asarray(grid.center) + grid.omega_halfwidth
    if family.c0 == 0:
        return DomainMask(grid, labels, 0.0, family.d(s), np.zeros((0, grid.n)))
    a = family.a(s)
    if a < 2 * grid.h - 1e-12:
        raise ResolutionError(
            f"hole radius {a:g} is under-resolved: need h <= {a / 2:g} (have {grid.h:g})",
            required_h=a / 2)
    d = family.d(s)
    base = family.lattice_base(s, lo, grid.center)
    if region is None:
        region = (lo, hi)
    fam = _shifted(family, base)
    centers = hole_centers(fam, s, np.asarray(region[0]), np.asarray(region[1]))

    # nearest cell centre per axis; a < d/2 keeps every hole inside its cell
    offs = []
    valid = np.ones(grid.shape, dtype=bool)
    for i, ax in enumerate(grid.mesh()):
        k = np.floor((ax - base[i]) / d)
        c = base[i] + d * (k + 0.5)
        okc = (c >= region[0][i] - 1e-12) & (c <= region[1][i] + 1e-12)
        valid = valid & okc
        offs.append(ax - c)
    if family.shape == "ball":
        r2 = sum(o * o for o in offs)
        hole = r2 <= a * a * (1 + 1e-12)
    else:
        hole = np.ones(grid.shape, dtype=bool)
        for o in offs:
            hole = hole & (np.abs(o) <= a * (1 + 1e-12))
    hole &= valid & (labels == INTERIOR)
    labels[hole] = HOLE
    return DomainMask(grid, labels, a, d, centers)


def _shifted(family: PerforationFamily, base: np.ndarray) -> PerforationFamily:
    from dataclasses import replace
    return replace(family, anchor=tuple(base))


# ---------------------------------------------------------------- mollifier

@dataclass(frozen=True)
class MollifierSpec:
    """Radial bump K(t) = C_n (1 - t^2)^3 on |t| < 1."""
    n: int = 3

    @property
    def normalization(self) -> float:
        # int_{|x|<1} (1-|x|^2)^3 dx = omega_{n-1} * B(n/2, 4) / 2
        sphere = 2 * math.pi ** (self.n / 2) / math.gamma(self.n / 2)
        radial = 0.5 * math.gamma(self.n / 2) * math.gamma(4) / math.gamma(self.n / 2 + 4)
        return 1.0 / (sphere * radial)

    @property
    def bound(self) -> float:
        """The constant c(n) with 0 <= K <= c(n)."""
        return self.normalization

    def profile(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < 1, self.normalization * np.clip(1 - t * t, 0, None) ** 3, 0.0)

    def stencil(self, grid_h: float, h: float) -> np.ndarray:
        """Discrete weights h_grid^n h^-n K(|z|/h), renormalized to sum to one."""
        k = int(math.floor(h / grid_h + 1e-9))
        ax = np.arange(-k, k + 1) * grid_h
        r2 = sum(np.meshgrid(*([ax * ax] * self.n), indexing="ij"))
        w = self.profile(np.sqrt(r2) / h) * (grid_h / h) ** self.n
        return w / w.sum()

    def quadrature_mass(self, grid_h: float, h: float) -> float:
        """Un-renormalized discrete integral of the kernel, for diagnostics."""
        k = int(math.floor(h / grid_h + 1e-9))
        ax = np.arange(-k, k + 1) * grid_h
        r2 = sum(np.meshgrid(*([ax * ax] * self.n), indexing="ij"))
        return float(np.sum(self.profile(np.sqrt(r2) / h)) * (grid_h / h) ** self.n)


def mollify(u: ScalarField, h: float, kernel: MollifierSpec = MollifierSpec()) -> ScalarField:
    """Kernel average u_h at scale h; the field is extended by zero off the grid."""
    if h < u.grid.h * (1 - 1e-12):
        raise InvalidInputError(f"mollifier scale {h:g} below grid spacing {u.grid.h:g}")
    w = kernel.stencil(u.grid.h, h)
    out = signal.fftconvolve(u.values, w, mode="same")
    return ScalarField(u.grid, out)


def cube_nodes(grid: GridSpec, center, halfwidth: float) -> np.ndarray:
    """Boolean mask of nodes in the closed cube."""
    tol = 1e-9 * grid.h
    sel = np.ones(grid.shape, dtype=bool)
    for c, a in zip(center, grid.mesh()):
        sel = sel & (np.abs(a - c) <= halfwidth + tol)
    return sel


def _cube_slices(grid: GridSpec, center, halfwidth: float) -> tuple:
    tol = 1e-9
    sl = []
    for i, c in enumerate(center):
        lo = math.ceil((c - halfwidth - grid.origin[i]) / grid.h - tol)
        hi = math.floor((c + halfwidth - grid.origin[i]) / grid.h + tol)
        lo, hi = max(lo, 0), min(hi, grid.nodes_per_axis - 1)
        sl.append(slice(lo, hi + 1) if hi >= lo else slice(0, 0))
    return tuple(sl)


def cell_mean(u: ScalarField, center, halfwidth: float) -> float:
    """Arithmetic mean of nodal values in the closed cube K(center, halfwidth)."""
    block = u.values[_cube_slices(u.grid, center, halfwidth)]
    if block.size == 0:
        raise EmptyCellError(f"cube at {tuple(center)} with halfwidth {halfwidth:g} holds no nodes")
    return float(block.mean())


def cell_mean_mollified(u: ScalarField, h: float, center, halfwidth: float,
                        kernel: MollifierSpec = MollifierSpec()) -> float:
    """Mean of u_h over a cube evaluated as one quadrature with fused weights."""
    sl = _cube_slices(u.grid, center, halfwidth)
    box = np.zeros(u.grid.shape)
    box[sl] = 1.0
    count = box.sum()
    if count == 0:
        raise EmptyCellError("empty cube")
    w = kernel.stencil(u.grid.h, h)
    # the kernel is symmetric, so correlation equals convolution
    fused = signal.fftconvolve(box, w, mode="same")
    return float(np.sum(fused * u.values) / count)


# ---------------------------------------------------------------- norms

def norms(u: ScalarField, p: float, region: Optional[np.ndarray] = None) -> tuple:
    """(L_p norm, W^1_p seminorm) by node-centred midpoint quadrature.

    Gradients use central differences inside and one-sided differences at
    the outer boundary.  ``region`` restricts both integrals to a node set.
    """
    if p < 1:
        raise InvalidInputError("p must be >= 1")
    w = u.grid.quadrature_weights()
    if region is not None:
        w = w * region
    grads = np.gradient(u.values, u.grid.h, edge_order=1) if u.grid.n > 1 else [
        np.gradient(u.values, u.grid.h, edge_order=1)]
    gnorm = np.sqrt(sum(g * g for g in grads))
    lp = float(np.sum(w * np.abs(u.values) ** p) ** (1.0 / p))
    wp = float(np.sum(w * gnorm ** p) ** (1.0 / p))
    return lp, wp


# ---------------------------------------------------------------- field I/O

def _sidecar(grid: GridSpec, kind: str) -> dict:
    return {"kind": kind, "dims": list(grid.shape), "spacing": grid.h,
            "origin": list(map(float, grid.origin)), "grid": grid.to_json(),
            "dtype": "<f8" if kind == "field" else "u1"}


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_field(u: ScalarField, path) -> Path:
    """Raw little-endian float64 values plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    _atomic_write(path, u.values.astype("<f8").tobytes(order="C"))
    meta = _sidecar(u.grid, "field")
    _atomic_write(path.with_name(path.name + ".json"), json.dumps(meta, indent=1).encode())
    return path


def load_field(path) -> ScalarField:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    grid = GridSpec(**meta["grid"])
    vals = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["dims"])
    return ScalarField(grid, vals.copy())


def save_mask(mask: DomainMask, path) -> Path:
    path = Path(path)
    _atomic_write(path, mask.labels.astype("u1").tobytes(order="C"))
    meta = _sidecar(mask.grid, "mask")
    meta["hole_radius"] = mask.hole_radius
    meta["period"] = mask.period
    _atomic_write(path.with_name(path.name + ".json"), json.dumps(meta, indent=1).encode())
    return path


def load_mask(path) -> DomainMask:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    grid = GridSpec(**meta["grid"])
    labels = np.frombuffer(path.read_bytes(), dtype="u1").reshape(meta["dims"]).astype(np.int8)
    return DomainMask(grid, labels, meta.get("hole_radius", 0.0), meta.get("period", 0.0))


def field_interpolator(u: ScalarField):
    """Multilinear interpolant x -> u(x) for points of shape (k, n)."""
    from scipy.interpolate import RegularGridInterpolator
    axes = [u.grid.axis(i) for i in range(u.grid.n)]
    rgi = RegularGridInterpolator(axes, u.values, bounds_error=False, fill_value=None)
    return lambda x: rgi(np.atleast_2d(x))
