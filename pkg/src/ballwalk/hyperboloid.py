"""Hyperboloid-model backbone for the ball-model routines.

Interior points of the unit ball B^d lift to the upper sheet of
{q(v) = -1} in R^{d+1} where q(t, w) = -t^2 + |w|^2, via the
stereographic lift

    lift(x) = ((1 + |x|^2) / (1 - |x|^2), 2x / (1 - |x|^2)),

with inverse unlift(t, w) = w / (1 + t).  Boundary points xi of the
sphere S^{d-1} lift to null rays through (1, xi).  All long-range
computations (rays toward boundary points, geodesic segments, distances
between far points) happen in these coordinates: Minkowski products of
moderate floats replace catastrophically cancelling expressions like
1 - |x|^2 near the boundary.

Geodesics are parametrized unit-speed as c(s) = cosh(s) X + sinh(s) V
with q(X) = -1, q(V) = 1, <X, V> = 0.  The time coordinate is index 0.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

BALL_NORM_TOL = 1e-12


def minkowski_dot(u, v):
    """Minkowski product <u, v> = -u_0 v_0 + sum u_i v_i (broadcasts)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.sum(u[..., 1:] * v[..., 1:], axis=-1) - u[..., 0] * v[..., 0]


def q_form(v):
    """Quadratic form q(v) = <v, v>."""
    return minkowski_dot(v, v)


def as_ball_point(x, d=None):
    """Validate and return an interior ball point as a float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("ball point must be a 1-d coordinate array")
    if d is not None and x.shape[0] != d:
        raise DomainError(f"expected dimension {d}, got {x.shape[0]}")
    if np.dot(x, x) >= 1.0:
        raise DomainError(f"point with |x| = {np.linalg.norm(x):.17g} is not inside the unit ball")
    return x


def as_boundary_point(xi, d=None, tol=1e-9):
    """Validate a unit vector on the ideal boundary; renormalize within tol."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DomainError("boundary point must be a 1-d coordinate array")
    if d is not None and xi.shape[0] != d:
        raise DomainError(f"expected dimension {d}, got {xi.shape[0]}")
    n = np.linalg.norm(xi)
    if abs(n - 1.0) > tol:
        raise DomainError(f"boundary point must be unit length, |xi| = {n:.17g}")
    return xi / n


def lift(x):
    """Lift interior points (..., d) to hyperboloid points (..., d+1)."""
    x = np.asarray(x, dtype=float)
    nx2 = np.sum(x * x, axis=-1)
    f = 1.0 / (1.0 - nx2)
    out = np.empty(x.shape[:-1] + (x.shape[-1] + 1,))
    out[..., 0] = (1.0 + nx2) * f
    out[..., 1:] = 2.0 * x * f[..., None]
    return out


def unlift(p):
    """Project hyperboloid points (..., d+1) back to ball coordinates."""
    p = np.asarray(p, dtype=float)
    return p[..., 1:] / (1.0 + p[..., 0])[..., None]


def null_lift(xi):
    """Lift boundary points (..., d) to null vectors (1, xi)."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty(xi.shape[:-1] + (xi.shape[-1] + 1,))
    out[..., 0] = 1.0
    out[..., 1:] = xi
    return out


def project_null(p):
    """Map vectors on the forward light cone to boundary unit vectors."""
    p = np.asarray(p, dtype=float)
    w = p[..., 1:] / p[..., 0][..., None]
    n = np.linalg.norm(w, axis=-1)
    return w / n[..., None]


def tangent_lift(x, u):
    """Hyperboloid unit tangent above ball point x with direction u.

    u is the Euclidean direction of motion (|u| = 1); the returned V
    satisfies q(V) = 1, <lift(x), V> = 0 and corresponds to unit speed
    for the hyperbolic metric.  Broadcasts over leading axes.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nx2 = np.sum(x * x, axis=-1)
    f = 1.0 / (1.0 - nx2)
    xu = np.sum(x * u, axis=-1)
    out = np.empty(np.broadcast(x, u).shape[:-1] + (x.shape[-1] + 1,))
    out[..., 0] = 2.0 * xu * f
    out[..., 1:] = u + 2.0 * (f * xu)[..., None] * x
    return out


def tangent_unlift(p, V):
    """Euclidean unit direction in the ball for hyperboloid tangent V at p."""
    p = np.asarray(p, dtype=float)
    V = np.asarray(V, dtype=float)
    t = p[..., 0][..., None]
    w = p[..., 1:]
    dt = V[..., 0][..., None]
    dw = V[..., 1:]
    # differentiate w / (1 + t)
    dx = dw / (1.0 + t) - w * dt / (1.0 + t) ** 2
    n = np.linalg.norm(dx, axis=-1)
    return dx / n[..., None]


def dist(X, Y):
    """Hyperbolic distance between hyperboloid points (broadcasts)."""
    c = -minkowski_dot(X, Y)
    return np.arccosh(np.maximum(c, 1.0))


def dist_ball(x, y):
    """Hyperbolic distance between interior ball points (broadcasts)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dxy = np.sum((x - y) ** 2, axis=-1)
    a = (1.0 - np.sum(x * x, axis=-1)) * (1.0 - np.sum(y * y, axis=-1))
    return np.arccosh(1.0 + np.maximum(2.0 * dxy / a, 0.0))


def ray_to_boundary(X, xi):
    """Tangent data of the unit-speed ray from hyperboloid point X to xi.

    Returns V with c(s) = cosh(s) X + sinh(s) V the ray and c(s) -> xi.
    Broadcasts over leading axes of X and xi.
    """
    N = null_lift(xi)
    ip = minkowski_dot(X, N)  # < 0 for X on the upper sheet
    lam = -1.0 / ip
    return lam[..., None] * N - X


def segment(X, Y):
    """Tangent data and length of the geodesic segment X -> Y.

    Returns (V, length) with c(s) = cosh(s) X + sinh(s) V, c(length) = Y.
    """
    a = minkowski_dot(X, Y)  # = -cosh(dist)
    length = np.arccosh(np.maximum(-a, 1.0))
    sh = np.sinh(length)
    V = (Y + a[..., None] * X) / np.where(sh == 0.0, 1.0, sh)[..., None]
    return V, length


def geodesic_points(X, V, s):
    """Points cosh(s) X + sinh(s) V for an array of arclengths s."""
    s = np.asarray(s, dtype=float)
    return np.cosh(s)[..., None] * X + np.sinh(s)[..., None] * V


def geodesic_tangents(X, V, s):
    """Unit tangents sinh(s) X + cosh(s) V along the same geodesic."""
    s = np.asarray(s, dtype=float)
    return np.sinh(s)[..., None] * X + np.cosh(s)[..., None] * V


def ray_point_distance(X, V, Y):
    """Distance from hyperboloid point Y to the ray c(s), s >= 0.

    Closed form: with A = -<Y, X> and B = -<Y, V>, the distance to the
    full geodesic is arccosh(sqrt(A^2 - B^2)); the minimum over the ray
    sits at s = artanh(-B/A), which is >= 0 only when B < 0.
    """
    A = -minkowski_dot(Y, X)
    B = -minkowski_dot(Y, V)
    on_ray = B < 0.0
    inner = np.sqrt(np.maximum(A * A - B * B, 1.0))
    d_line = np.arccosh(inner)
    d_start = np.arccosh(np.maximum(A, 1.0))
    return np.where(on_ray, d_line, d_start)


def busemann_lifted(xi, P):
    """Busemann function of xi at the hyperboloid point P, based at o.

    b_xi(P) = log(-<P, (1, xi)>) = log(t - w . xi), the horospherical
    signed distance normalized so that b_xi(o) = 0.  Broadcasts, and
    stays accurate for points far from the origin where the ball-model
    expression log(|xi - x|^2 / (1 - |x|^2)) cancels catastrophically.
    """
    N = null_lift(xi)
    return np.log(-minkowski_dot(P, N))


def geodesic_between_boundary(xi, eta):
    """Parametrization of the geodesic with ideal endpoints eta -> xi.

    Returns (C0, Cdot) so that c(s) = cosh(s) C0 + sinh(s) Cdot runs from
    eta (s -> -inf) to xi (s -> +inf) with c(0) the closest point to the
    lift of the origin.  Requires xi != eta.
    """
    Np = null_lift(xi)
    Nm = null_lift(eta)
    ip = minkowski_dot(Nm, Np)  # = -(chord^2)/2
    chord2 = -2.0 * ip
    if np.any(chord2 <= 0.0):
        raise DomainError("geodesic endpoints must be distinct boundary points")
    c = np.sqrt(chord2)[..., None]
    C0 = (Nm + Np) / c
    Cdot = (Np - Nm) / c
    return C0, Cdot
