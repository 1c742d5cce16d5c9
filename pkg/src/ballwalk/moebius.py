"""Moebius isometries of the hyperbolic unit ball B^d, d = 2 or 3.

Every isometry is stored as its matrix in the identity component of
O(d, 1) acting on the hyperboloid model (time coordinate first); the
ball action is conjugation by the stereographic lift.  This keeps
composition associative to machine precision, makes inverses exact up
to transposition, and behaves stably for elements that push the origin
very close to the boundary.

An isometry gamma factors as tau_b . Omega where b = gamma(0), tau_b is
the hyperbolic translation with tau_b(0) = b, and Omega is a rotation
fixing 0.  Translations use the closed form

    tau_b(x) = ((1 - |b|^2) x + (|x|^2 + 2 x.b + 1) b)
               / (|b|^2 |x|^2 + 2 x.b + 1),

realized here as the Lorentz boost with rapidity d(0, b) along b.

Conventions used throughout the package:

* interior points and boundary points are plain numpy arrays,
  validated at entry points;
* the visual distance at the origin is half the Euclidean chord,
  d_o(xi, eta) = |xi - eta| / 2;
* ``gap(p, q) = 1 - p.q`` (half squared chord) is the quantity in which
  the contraction estimates of ``contraction_profile`` are stated; the
  chord versions of those estimates degenerate for boosts, the gap
  versions hold with stable constants.

All maps here are immutable value objects; functions on them are pure,
so element lists can be processed with any parallel map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hyperboloid as hb
from .errors import DomainError, NumericError, TruncationError

__all__ = [
    "MoebiusMap",
    "ContractionProfile",
    "identity",
    "hyperbolic_translation",
    "rotation_map",
    "from_lorentz",
    "minkowski_form",
    "hyperbolic_distance",
    "visual_distance_origin",
    "visual_distance",
    "busemann_origin",
    "gap",
    "chord",
    "boundary_grid",
    "contraction_profile",
]


def minkowski_form(d):
    """The matrix J = diag(-1, 1, ..., 1) of the quadratic form."""
    J = np.eye(d + 1)
    J[0, 0] = -1.0
    return J


@dataclass(frozen=True)
class MoebiusMap:
    """Isometry of B^d stored as a Lorentz matrix (time row/column first)."""

    matrix: np.ndarray

    @property
    def dimension(self):
        return self.matrix.shape[0] - 1

    # -- group structure -------------------------------------------------

    def compose(self, other):
        """self . other (apply ``other`` first)."""
        if self.dimension != other.dimension:
            raise DomainError("cannot compose maps of different dimensions")
        return MoebiusMap(self.matrix @ other.matrix)

    def inverse(self):
        """Inverse map, computed as J L^T J (exact for Lorentz matrices)."""
        d = self.dimension
        J = minkowski_form(d)
        return MoebiusMap(J @ self.matrix.T @ J)

    # -- actions ----------------------------------------------------------

    def apply(self, x):
        """Image of interior point(s) x, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dimension:
            raise DomainError("point dimension does not match the map")
        if np.any(np.sum(x * x, axis=-1) >= 1.0):
            raise DomainError("apply expects points inside the open unit ball")
        p = hb.lift(x)
        return hb.unlift(p @ self.matrix.T)

    def apply_boundary(self, xi):
        """Image of boundary point(s) xi, shape (..., d); renormalized."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.dimension:
            raise DomainError("point dimension does not match the map")
        n = hb.null_lift(xi)
        return hb.project_null(n @ self.matrix.T)

    def apply_tangent(self, x, u):
        """Image of a unit tangent (x, u); u is a Euclidean unit direction.

        Returns (x_image, u_image) with u_image again a Euclidean unit
        vector; both broadcast over leading axes.
        """
        X = hb.lift(np.asarray(x, dtype=float))
        V = hb.tangent_lift(x, u)
        Xi = X @ self.matrix.T
        Vi = V @ self.matrix.T
        return hb.unlift(Xi), hb.tangent_unlift(Xi, Vi)

    # -- diagnostics -------------------------------------------------------

    def q_defect(self):
        """max |L^T J L - J|; zero for exact Lorentz matrices."""
        J = minkowski_form(self.dimension)
        return float(np.max(np.abs(self.matrix.T @ J @ self.matrix - J)))

    def q_defect_relative(self):
        """q_defect scaled by |L|_F^2.

        The absolute defect of a float matrix with norm N cannot be
        evaluated below ~eps N^2, so form preservation for deep words
        is only meaningful in this relative sense.
        """
        n2 = float(np.sum(self.matrix * self.matrix))
        return self.q_defect() / n2

    def renormalized(self):
        """Project back onto the Lorentz group by Minkowski Gram-Schmidt.

        Use after very long composition chains to stop q-defect drift.
        """
        d = self.dimension
        M = self.matrix.copy()
        signs = np.array([-1.0] + [1.0] * d)

        def ip(u, v):
            return np.sum(signs * u * v)

        cols = [M[:, j].copy() for j in range(d + 1)]
        for j in range(d + 1):
            for k in range(j):
                cols[j] -= signs[k] * ip(cols[k], cols[j]) * cols[k]
            nrm = ip(cols[j], cols[j])
            if signs[j] * nrm <= 0:
                raise NumericError("renormalization failed: degenerate column")
            cols[j] /= np.sqrt(abs(nrm))
        return MoebiusMap(np.stack(cols, axis=1))

    # -- displacement data --------------------------------------------------

    def displacement(self):
        """kappa(gamma) = d(0, gamma(0)) read off the matrix corner."""
        return float(np.arccosh(max(self.matrix[0, 0], 1.0)))

    def r_value(self):
        """r_gamma = e^{-kappa(gamma)} = (1 - |gamma(0)|) / (1 + |gamma(0)|).

        Computed as t0 - sqrt(t0^2 - 1) via the stable reciprocal form.
        """
        t0 = max(self.matrix[0, 0], 1.0)
        return float(1.0 / (t0 + np.sqrt(t0 * t0 - 1.0)))

    def epsilon(self):
        """epsilon_gamma = 1 - |gamma(0)|, stable for deep elements."""
        t0 = max(self.matrix[0, 0], 1.0)
        return float((1.0 + self.r_value()) / (1.0 + t0))

    def attractor(self):
        """x_gamma^m = gamma(0)/|gamma(0)| (unit vector); needs gamma(0) != 0."""
        w = self.matrix[1:, 0]
        n = np.linalg.norm(w)
        if n == 0.0:
            raise DomainError("attractor undefined: gamma fixes the origin")
        return w / n

    def operator_norm(self):
        """Frobenius norm of the Lorentz matrix."""
        return float(np.linalg.norm(self.matrix))

    def translation_part(self):
        """b = gamma(0) as a ball point."""
        return hb.unlift(self.matrix[:, 0])

    def rotation_part(self):
        """The SO(d) factor Omega in gamma = tau_{gamma(0)} . Omega."""
        b = self.translation_part()
        back = hyperbolic_translation(-b)
        M = back.compose(self).matrix
        R = M[1:, 1:].copy()
        return R


def identity(d):
    return MoebiusMap(np.eye(d + 1))


def hyperbolic_translation(b):
    """The hyperbolic translation tau_b with tau_b(0) = b, as a boost."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise DomainError("translation parameter must be a single ball point")
    beta = np.linalg.norm(b)
    if beta >= 1.0:
        raise DomainError("translation parameter must lie inside the unit ball")
    d = b.shape[0]
    if beta == 0.0:
        return identity(d)
    u = b / beta
    alpha = 2.0 * np.arctanh(beta)
    ch, sh = np.cosh(alpha), np.sinh(alpha)
    M = np.eye(d + 1)
    M[0, 0] = ch
    M[0, 1:] = sh * u
    M[1:, 0] = sh * u
    M[1:, 1:] = np.eye(d) + (ch - 1.0) * np.outer(u, u)
    return MoebiusMap(M)


def rotation_map(R):
    """Isometry fixing 0 induced by a rotation matrix R in SO(d)."""
    R = np.asarray(R, dtype=float)
    d = R.shape[0]
    if R.shape != (d, d):
        raise DomainError("rotation matrix must be square")
    if np.max(np.abs(R.T @ R - np.eye(d))) > 1e-9:
        raise DomainError("rotation matrix is not orthogonal")
    if np.linalg.det(R) < 0:
        raise DomainError("rotation matrix must preserve orientation")
    M = np.eye(d + 1)
    M[1:, 1:] = R
    return MoebiusMap(M)


def from_lorentz(matrix, tol=1e-8):
    """Wrap a raw matrix after checking it lies in the identity component."""
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("Lorentz matrix must be square")
    d = M.shape[0] - 1
    if d not in (2, 3):
        raise DomainError("supported dimensions are 2 and 3")
    J = minkowski_form(d)
    defect = np.max(np.abs(M.T @ J @ M - J))
    if defect > tol:
        raise DomainError(f"matrix does not preserve the form, defect {defect:.3e}")
    if M[0, 0] < 1.0 - tol:
        raise DomainError("matrix must preserve the upper sheet (top-left entry >= 1)")
    if np.linalg.det(M) < 0.0:
        raise DomainError("matrix must be orientation preserving")
    return MoebiusMap(M)


# -- metric utilities -------------------------------------------------------


def hyperbolic_distance(x, y):
    """d(x, y) for interior points; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(np.sum(x * x, axis=-1) >= 1.0) or np.any(np.sum(y * y, axis=-1) >= 1.0):
        raise DomainError("hyperbolic_distance expects interior points")
    return hb.dist_ball(x, y)


def chord(p, q):
    """Euclidean chord |p - q| between boundary points (broadcasts)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.linalg.norm(p - q, axis=-1)


def gap(p, q):
    """1 - p.q, the half squared chord between unit vectors (broadcasts)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 1.0 - np.sum(p * q, axis=-1)


def visual_distance_origin(xi, eta):
    """d_o(xi, eta) = |xi - eta| / 2, the visual distance seen from 0."""
    return 0.5 * chord(xi, eta)


def visual_distance(x, xi, eta, horizon=64.0, tol=1e-9):
    """Visual distance d_x(xi, eta) via the truncated Gromov limit.

    Rays toward xi and eta are walked outward from the origin with
    doubling horizons t; the limit of

        exp(-(d(x, xi_t) + d(x, eta_t) - d(xi_t, eta_t)) / 2)

    stabilizes exponentially fast.  Raises TruncationError when the
    increments fail to shrink before the horizon is reached.
    """
    x = np.asarray(x, dtype=float)
    xi = hb.as_boundary_point(xi)
    eta = hb.as_boundary_point(eta)
    if np.allclose(xi, eta):
        return 0.0
    X = hb.lift(x)
    O = hb.lift(np.zeros_like(x))
    Vxi = hb.ray_to_boundary(O, xi)
    Veta = hb.ray_to_boundary(O, eta)

    t = 4.0
    prev = None
    history = []
    while t <= horizon + 1e-9:
        P = hb.geodesic_points(O, Vxi, np.array(t))
        Q = hb.geodesic_points(O, Veta, np.array(t))
        g = 0.5 * (hb.dist(X, P) + hb.dist(X, Q) - hb.dist(P, Q))
        val = float(np.exp(-g))
        history.append(val)
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        t *= 2.0
    increments = np.abs(np.diff(history))
    if len(increments) >= 2 and increments[-1] > increments[-2]:
        raise TruncationError(
            "visual distance increments stopped decreasing", history=history
        )
    return history[-1]


def busemann_origin(xi, x):
    """Busemann function b_xi(x) = log(|xi - x|^2 / (1 - |x|^2)).

    Normalized so b_xi(0) = 0; equals lim_t d(x, xi_t) - d(0, xi_t).
    Broadcasts over leading axes of xi and x.
    """
    xi = np.asarray(xi, dtype=float)
    x = np.asarray(x, dtype=float)
    num = np.sum((xi - x) ** 2, axis=-1)
    den = 1.0 - np.sum(x * x, axis=-1)
    return np.log(num / den)


def boundary_grid(d, n):
    """n quasi-uniform points on S^{d-1}: equal angles (d=2), Fibonacci (d=3)."""
    if d == 2:
        th = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if d == 3:
        k = np.arange(n) + 0.5
        phi = np.pi * (1.0 + np.sqrt(5.0)) * k
        z = 1.0 - 2.0 * k / n
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise DomainError("boundary_grid supports d = 2 and 3")


@dataclass(frozen=True)
class ContractionProfile:
    """Measured contraction data of a single isometry.

    The exceptional cap is stored as (center, Euclidean chord radius);
    the contraction statement is in gap units (gap = half squared
    chord): every sampled boundary point whose gap to the cap center
    exceeds ``cap_gap_radius`` maps within ``contraction_bound`` of the
    attractor, and cap_gap_radius <= measured_C * epsilon.
    """

    attractor: np.ndarray
    epsilon: float
    cap_center: np.ndarray
    cap_chord_radius: float
    cap_gap_radius: float
    contraction_bound: float
    measured_C: float
    worst_outside_gap: float
    n_samples: int = field(default=0)


# generous package-wide ceiling for cap_gap_radius / epsilon; the
# measured constant for boosts is 1/(c * |gamma(0)|), well below this
PROFILE_C_CEILING = 16.0


def contraction_profile(gamma_map, c=0.5, n_samples=2048):
    """Exceptional cap and contraction bound of ``gamma_map``.

    Outside a cap around the attractor of the inverse map, the sphere
    action concentrates near the attractor: images of sampled points
    land within c * epsilon of it in gap units.  The cap radius is the
    smallest sampled gap radius achieving this, reported together with
    the measured ratio radius/epsilon.

    Requires |gamma(0)| >= 0.5; closer to the identity the profile is
    meaningless and a DomainError is raised.
    """
    if not 0.0 < c < 1.0:
        raise DomainError("contraction parameter c must lie in (0, 1)")
    eps = gamma_map.epsilon()
    if eps > 0.5:
        raise DomainError(
            f"contraction profile needs |gamma(0)| >= 0.5, got {1.0 - eps:.4f}"
        )
    d = gamma_map.dimension
    m = gamma_map.attractor()
    a_center = gamma_map.inverse().attractor()

    pts = boundary_grid(d, n_samples)
    images = gamma_map.apply_boundary(pts)
    g_in = gap(pts, a_center)
    g_out = gap(images, m)
    target = c * eps

    bad = g_out > target
    if np.any(bad):
        rho = float(np.max(g_in[bad]))
        # the cap must contain every bad sample; step up to the next
        # sampled gap so membership is strict for all of them
        above = g_in[g_in > rho + 1e-15]
        rho = float(np.min(above)) if above.size else rho * (1.0 + 1e-9)
    else:
        rho = 0.0
    outside = g_in > rho
    worst = float(np.max(g_out[outside])) if np.any(outside) else 0.0
    measured_C = rho / eps
    if measured_C > PROFILE_C_CEILING:
        raise NumericError(
            f"exceptional cap radius {rho:.3e} exceeds {PROFILE_C_CEILING} * epsilon; "
            "element is too close to a rotation for a useful profile"
        )
    return ContractionProfile(
        attractor=m,
        epsilon=eps,
        cap_center=a_center,
        cap_chord_radius=float(np.sqrt(2.0 * rho)),
        cap_gap_radius=rho,
        contraction_bound=target,
        measured_C=measured_C,
        worst_outside_gap=worst,
        n_samples=n_samples,
    )
