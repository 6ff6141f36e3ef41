"""Monotone flux families a(x, p) and their scalar potentials.

Three variational kinds are provided::

    pure          a(p) = |p|^(m-2) p                Phi(p) = |p|^m / m
    regularized   a(p) = (1 + |p|)^(m-2) p          Phi(p) = int_0^|p| (1+t)^(m-2) t dt
    weighted      a(x, p) = w(x) |p|^(m-2) p        Phi(x, p) = w(x) |p|^m / m

All three are isotropic, so the solver only needs the radial profile of the
potential and its first two derivatives (see :func:`radial_profile`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError, UnsupportedKindError

KINDS = ("pure", "regularized", "weighted")


def default_nu(kind: str, m: float, n: int) -> tuple[float, float]:
    """Default (nu1, nu2) for the unit-weight kinds.

    nu1 = 1 because a(p).p equals the coercivity bound identically. The nu2
    bound dominates a brute-force sampling of the l1 continuity ratio over
    |p|, |q| <= 10 including near-coincident and antipodal pairs.
    """
    nu2 = np.sqrt(n) * max(1.0, m - 1.0) * max(1.0, 2.0 ** (2.0 - m))
    return 1.0, float(nu2)


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    m: float
    n: int = 3
    nu1: Optional[float] = None
    nu2: Optional[float] = None
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    strict: bool = False
    # test hook: replaces the flux, disables the potential
    flux_override: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(
        default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKindError(f"unknown operator kind {self.kind!r}")
        if self.strict and not (2.0 <= self.m < self.n):
            raise InvalidInputError(f"strict mode needs 2 <= m < n, got m={self.m}, n={self.n}")
        if self.m <= 1.0:
            raise InvalidInputError(f"growth exponent m={self.m} must exceed 1")
        nu1, nu2 = default_nu(self.kind, self.m, self.n)
        if self.kind == "weighted":
            if self.weight is None:
                raise InvalidInputError("weighted kind requires a weight field")
        if self.nu1 is None:
            object.__setattr__(self, "nu1", nu1)
        if self.nu2 is None:
            object.__setattr__(self, "nu2", nu2)
        if not (self.nu1 > 0 and self.nu2 > 0):
            raise InvalidInputError("nu1 and nu2 must be positive")

    @property
    def subcritical(self) -> bool:
        """m < n, the range where whole-space capacities are nontrivial."""
        return self.m < self.n

    @property
    def homogeneous(self) -> bool:
        return self.kind in ("pure", "weighted")

    @property
    def variational(self) -> bool:
        return self.flux_override is None

    def weight_at(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind != "weighted":
            return np.ones(x.shape[0])
        return np.asarray(self.weight(x), dtype=float).reshape(x.shape[0])

    def check_weight(self, points: np.ndarray) -> None:
        """Verify nu1 <= w <= nu2 on a cloud of points (weighted kind only)."""
        if self.kind != "weighted":
            return
        w = self.weight_at(points)
        if not np.all(np.isfinite(w)) or w.min() < self.nu1 or w.max() > self.nu2:
            raise InvalidInputError(
                f"weight range [{w.min():.4g}, {w.max():.4g}] not inside [nu1, nu2] = "
                f"[{self.nu1:.4g}, {self.nu2:.4g}]")


def _as_points(x, p):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
        raise InvalidInputError("non-finite point or gradient component")
    return x, p


def radial_profile(op: OperatorSpec, t: np.ndarray, eps: float = 0.0):
    """Return (phi, phi'(t)/t, phi''(t)) for the unit-weight radial potential.

    ``eps`` replaces |p| by sqrt(|p|^2 + eps^2) in the homogeneous kinds; the
    regularized kind is never degenerate and ignores it.
    """
    m = op.m
    t = np.asarray(t, dtype=float)
    if op.kind == "regularized":
        s = 1.0 + t
        phi = s ** m / m - s ** (m - 1) / (m - 1) - 1.0 / m + 1.0 / (m - 1)
        d1_over_t = s ** (m - 2)
        d2 = s ** (m - 3) * (1.0 + (m - 1.0) * t)
        return phi, d1_over_t, d2
    if m == 2.0:
        return 0.5 * t * t, np.ones_like(t), np.ones_like(t)
    r2 = t * t + eps * eps
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        phi = (r2 ** (m / 2) - eps ** m) / m
        d1_over_t = r2 ** (m / 2 - 1)
        d2 = r2 ** (m / 2 - 2) * (eps * eps + (m - 1.0) * t * t)
    if eps == 0.0:
        # degenerate limits at t = 0
        zero = t == 0
        if np.any(zero):
            fill = 0.0 if m > 2 else np.inf
            d1_over_t = np.where(zero, fill, d1_over_t)
            d2 = np.where(zero, fill, d2)
    return phi, d1_over_t, d2


def flux_array(op: OperatorSpec, p: np.ndarray, weight: np.ndarray | float = 1.0,
               eps: float = 0.0) -> np.ndarray:
    """Vectorized flux for gradients stacked along the last axis."""
    t = np.sqrt(np.sum(p * p, axis=-1))
    _, d1t, _ = radial_profile(op, t, eps)
    if op.kind != "regularized" and op.m < 2 and eps == 0.0:
        d1t = np.where(t == 0, 0.0, d1t)
    return (np.asarray(weight) * d1t)[..., None] * p


def eval_flux(op: OperatorSpec, x, p) -> np.ndarray:
    """Flux a(x, p) at a single point (or a batch of points)."""
    x, p = _as_points(x, p)
    if op.flux_override is not None:
        return np.asarray(op.flux_override(x, p), dtype=float)
    w = op.weight_at(x.reshape(-1, op.n)) if op.kind == "weighted" else 1.0
    if p.ndim == 1:
        w = np.asarray(w).reshape(()) if np.ndim(w) else w
    return flux_array(op, p, w)


def eval_potential(op: OperatorSpec, x, p) -> np.ndarray | float:
    """Energy density Phi(x, p) with Phi(x, 0) = 0 and grad_p Phi = a."""
    if not op.variational:
        raise UnsupportedKindError("flux override has no scalar potential")
    x, p = _as_points(x, p)
    t = np.sqrt(np.sum(p * p, axis=-1))
    phi = radial_profile(op, t)[0]
    if op.kind == "weighted":
        phi = op.weight_at(x.reshape(-1, op.n)).reshape(t.shape) * phi
    return phi if np.ndim(phi) else float(phi)


@dataclass
class ConditionReport:
    n_samples: int
    coercivity_min_ratio: float
    monotonicity_min_gap: float
    monotonicity_min_ratio: float
    continuity_max_ratio: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_condition_A(op: OperatorSpec, samples, slack: float = 1e-12) -> ConditionReport:
    """Sample coercivity, monotonicity and continuity on (x, p, q) triples.

    The regularized kind is checked against the (1+|p|)-type growth bounds;
    the homogeneous kinds against the pure power bounds they are built for.
    Violations are collected as ``(condition, index, x, p, q, ratio)``.
    """
    xs, ps, qs = (np.asarray(a, dtype=float) for a in zip(*samples))
    if xs.size == 0:
        raise InvalidInputError("empty sample list")
    ap = eval_flux(op, xs, ps)
    aq = eval_flux(op, xs, qs)
    P = np.linalg.norm(ps, axis=1)
    Q = np.linalg.norm(qs, axis=1)
    D = np.linalg.norm(ps - qs, axis=1)
    m = op.m
    if op.kind == "regularized":
        coerc_rhs = op.nu1 * (1 + P) ** (m - 2) * P ** 2
        cont_rhs = op.nu2 * (1 + P + Q) ** (m - 2) * D
    else:
        # weighted kind: nu1, nu2 bound the weight, so continuity carries the
        # unit-weight constant on top of nu2
        nu2 = op.nu2 * (default_nu("pure", m, op.n)[1] if op.kind == "weighted" else 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            coerc_rhs = op.nu1 * P ** m
            cont_rhs = nu2 * np.where(P + Q > 0, (P + Q), 1.0) ** (m - 2) * D

    violations = []
    lhs = np.sum(ap * ps, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        coerc = np.where(coerc_rhs > 0, lhs / coerc_rhs, np.inf)
    bad = np.flatnonzero(lhs < coerc_rhs * (1 - slack) - slack)
    violations += [("coercivity", int(i), xs[i], ps[i], qs[i], float(coerc[i])) for i in bad]

    gap = np.sum((ap - aq) * (ps - qs), axis=1)
    bad = np.flatnonzero(gap < -slack)
    violations += [("monotonicity", int(i), xs[i], ps[i], qs[i], float(gap[i])) for i in bad]

    cont_lhs = np.sum(np.abs(ap - aq), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cont = np.where(cont_rhs > 0, cont_lhs / cont_rhs, 0.0)
    bad = np.flatnonzero(cont_lhs > cont_rhs * (1 + slack) + slack)
    violations += [("continuity", int(i), xs[i], ps[i], qs[i], float(cont[i])) for i in bad]
    violations.sort(key=lambda v: v[1])

    with np.errstate(divide="ignore", invalid="ignore"):
        mono_ratio = np.where(D > 0, gap / np.where(D > 0, D, 1) ** 2, np.inf)
    return ConditionReport(
        n_samples=len(xs),
        coercivity_min_ratio=float(np.min(coerc)),
        monotonicity_min_gap=float(np.min(gap)),
        monotonicity_min_ratio=float(np.min(mono_ratio)),
        continuity_max_ratio=float(np.max(cont)),
        violations=violations,
    )


def random_triples(n: int, count: int, radius: float = 10.0, box: float = 1.0, seed: int = 0):
    """Random (x, p, q) triples with |p|, |q| <= radius."""
    rng = np.random.default_rng(seed)

    def ball(k):
        v = rng.normal(size=(k, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * radius * rng.uniform(0, 1, (k, 1)) ** (1.0 / n)

    x = rng.uniform(-box, box, (count, n))
    return list(zip(x, ball(count), ball(count)))
