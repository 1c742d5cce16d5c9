"""Potentials on the ball, line integrals and Gibbs cocycles.

A potential here is a function on the unit ball (equivalently, a
direction-independent function on the unit tangent bundle).  Supported
families are constants and group-invariant sums of Gaussian bumps in the
hyperbolic distance.  The module evaluates line integrals along geodesic
segments, the Gibbs cocycle

    C_xi(x, y) = lim_t [ int_y^{xi_t} F  -  int_x^{xi_t} F ],

and the multiplicative gap map used as a potential-adapted distance on
the boundary.  All quadrature runs in hyperboloid coordinates so that
deep orbit points keep full precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import hyperboloid as hb
from .errors import ConfigurationError, DomainError, NumericError, TruncationError
from .moebius import visual_distance_origin

SIMPSON_STEP = 0.01
COCYCLE_STEP = 0.02


# -- potential families ------------------------------------------------------


class ConstantPotential:
    """The constant potential F = value."""

    is_constant = True
    holder_alpha = 1.0
    max_eval_depth = np.inf

    def __init__(self, value):
        self.value = float(value)

    def evaluate(self, points):
        points = np.asarray(points, dtype=float)
        return np.full(points.shape[:-1], self.value)

    def evaluate_lifted(self, P):
        P = np.asarray(P, dtype=float)
        return np.full(P.shape[:-1], self.value)

    def shifted(self, c):
        return ConstantPotential(self.value + float(c))

    def to_config(self):
        return {"family": "constant", "params": {"value": self.value}}

    def __repr__(self):
        return f"ConstantPotential({self.value})"


class OrbitBumpPotential:
    """Group-invariant potential built from one Gaussian bump.

    F(x) = height * sum_gamma exp(-d(x, gamma c)^2 / (2 width^2)), summed
    over the full group orbit of the bump center c.  Evaluation reduces a
    point into the Dirichlet domain of the origin by greedy letter
    descent, after which only a finite precomputed set of orbit centers
    contributes more than the tail tolerance.

    max_eval_depth marks how deep a raw point the greedy reduction can
    handle before its eps * e^{2 depth} rounding swamps the bump scale;
    truncated-limit routines cap their horizons there, and deep orbit
    segments should be integrated with orbit_integral.
    """

    is_constant = False
    holder_alpha = 1.0
    max_eval_depth = 13.0

    def __init__(self, system, center, height=1.0, width=0.5, tail=1e-12):
        if width <= 0:
            raise ConfigurationError("bump width must be positive")
        if height == 0:
            raise ConfigurationError("bump height must be nonzero")
        self.system = system
        self.center = np.asarray(center, dtype=float)
        self.height = float(height)
        self.width = float(width)
        self.tail = float(tail)
        hb.as_ball_point(self.center, system.dimension)

        C0 = hb.lift(self.center)
        d_oc = float(np.arccosh(C0[0]))
        cutoff = width * np.sqrt(2.0 * np.log(max(abs(height), 1.0) / tail))
        # Any orbit point within the cutoff of a Dirichlet-reduced point
        # satisfies d(o, gamma c) <= d(o, c) + 2 cutoff.
        from .group import enumerate_elements

        enum = enumerate_elements(system, 2.0 * d_oc + 2.0 * cutoff + 0.5,
                                  include_identity=True)
        centers = np.array([e.map.matrix @ C0 for e in enum.elements])
        keep = np.arccosh(np.maximum(centers[:, 0], 1.0)) \
            <= d_oc + 2.0 * cutoff + 0.25
        self.centers = centers[keep]
        if len(self.centers) > 20000:
            raise ConfigurationError(
                "bump width covers too many orbit points; narrow the bump "
                "or move its center closer to the origin"
            )
        self._centers_J = self.centers.copy()
        self._centers_J[:, 0] *= -1.0
        self._letter_rows = np.array(
            [system.letter_map(l).matrix[0] for l in system.letters])
        self._letter_mats = np.array(
            [system.letter_map(l).matrix for l in system.letters])
        self.cutoff_distance = float(cutoff)

    def reduce_lifted(self, P, max_iter=1000):
        """Move points to the minimal-displacement orbit representative.

        Greedy descent over the generator letters in hyperboloid
        coordinates; for a ping-pong system this reaches the global
        minimum of t over the orbit.

        Each letter strip cancels coordinates of size e^{depth} down to
        e^{depth - kappa_1}, and the rounding left behind is amplified
        by every later strip: the reduced point carries an absolute
        error of order eps * e^{2 depth}.  Points beyond max_eval_depth
        cannot be reduced meaningfully from raw coordinates (the
        descent can even leave the hyperboloid and run away, which is
        caught below); callers that need the potential along deep
        geodesics should build nodes in explicit orbit charts
        (orbit_integral) instead.
        """
        P = np.array(np.atleast_2d(P), dtype=float)
        for _ in range(max_iter):
            cand_t = P @ self._letter_rows.T  # (n, letters)
            best = np.argmin(cand_t, axis=1)
            improve = cand_t[np.arange(len(P)), best] < P[:, 0] * (1 - 1e-14)
            if not np.any(improve):
                return P
            idx = np.flatnonzero(improve)
            moved = np.einsum(
                "nij,nj->ni", self._letter_mats[best[idx]], P[idx])
            if np.any(moved[:, 0] <= 0.0):
                raise NumericError(
                    "orbit reduction lost precision (point left the "
                    "hyperboloid); input deeper than max_eval_depth")
            P[idx] = moved
        raise NumericError("orbit reduction did not converge")

    def evaluate_lifted(self, P):
        P = np.asarray(P, dtype=float)
        shape = P.shape[:-1]
        flat = P.reshape(-1, P.shape[-1])
        out = np.empty(len(flat))
        chunk = max(16, 4_000_000 // max(len(self.centers), 1))
        for i in range(0, len(flat), chunk):
            red = self.reduce_lifted(flat[i:i + chunk])
            coshd = np.maximum(-(red @ self._centers_J.T), 1.0)
            dist = np.arccosh(coshd)
            out[i:i + chunk] = self.height * np.sum(
                np.exp(-0.5 * (dist / self.width) ** 2), axis=1)
        return out.reshape(shape)

    def evaluate(self, points):
        return self.evaluate_lifted(hb.lift(points))

    def shifted(self, c):
        return ShiftedPotential(self, float(c))

    def to_config(self):
        return {
            "family": "bump",
            "params": {
                "center": self.center.tolist(),
                "height": self.height,
                "width": self.width,
            },
        }

    def __repr__(self):
        return (f"OrbitBumpPotential(center={self.center.tolist()}, "
                f"height={self.height}, width={self.width}, "
                f"orbit={len(self.centers)})")


class ShiftedPotential:
    """A potential plus a constant."""

    holder_alpha = 1.0

    def __init__(self, base, shift):
        self.base = base
        self.shift = float(shift)

    @property
    def is_constant(self):
        return self.base.is_constant

    @property
    def max_eval_depth(self):
        return getattr(self.base, "max_eval_depth", np.inf)

    def evaluate(self, points):
        return self.base.evaluate(points) + self.shift

    def evaluate_lifted(self, P):
        return self.base.evaluate_lifted(P) + self.shift

    def shifted(self, c):
        return ShiftedPotential(self.base, self.shift + float(c))

    def to_config(self):
        cfg = self.base.to_config()
        cfg["shift"] = self.shift
        return cfg

    def __repr__(self):
        return f"{self.base!r} + {self.shift}"


def constant_value(potential):
    """The value of a constant potential, unwrapping shifts."""
    if isinstance(potential, ConstantPotential):
        return potential.value
    if isinstance(potential, ShiftedPotential) and potential.is_constant:
        return constant_value(potential.base) + potential.shift
    raise DomainError("potential is not constant")


def potential_from_config(cfg, system=None):
    """Build a potential from a JSON-style mapping.

    Expected shape: {"family": ..., "params": {...}, "normalization":
    "auto" | number | absent}.  The normalization request is attached as
    the attribute requested_normalization and resolved by the caller,
    since it needs a group enumeration.
    """
    if isinstance(cfg, str):
        with open(cfg) as fh:
            cfg = json.load(fh)
    family = cfg.get("family")
    params = cfg.get("params", {})
    if family == "constant":
        pot = ConstantPotential(params.get("value", 0.0))
    elif family == "bump":
        if system is None:
            raise ConfigurationError("bump potentials need a group system")
        pot = OrbitBumpPotential(
            system,
            np.asarray(params["center"], dtype=float),
            height=params.get("height", 1.0),
            width=params.get("width", 0.5),
        )
    else:
        raise ConfigurationError(f"unknown potential family {family!r}")
    if "shift" in cfg:
        pot = pot.shifted(cfg["shift"])
    pot.requested_normalization = cfg.get("normalization")
    return pot


# -- quadrature along geodesic segments ---------------------------------------


def _simpson_relative(n_intervals):
    """Simpson nodes and weights on [0, 1] with an even interval count."""
    n = int(n_intervals)
    u = np.linspace(0.0, 1.0, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w /= 3.0 * n
    return u, w


def _retime(pts):
    """Recompute the time coordinate from the spatial part, in place.

    Interpolated nodes built from deep chart data can drift off the
    hyperboloid by O(eps * e^(s + depth)) in the quadratic form even
    though their projective (ball) position is still accurate; resetting
    t = sqrt(1 + |w|^2) restores the form exactly at the same position.
    """
    pts[..., 0] = np.sqrt(1.0 + np.sum(pts[..., 1:] ** 2, axis=-1))
    return pts


def line_integral_lifted(potential, X, Y, step=SIMPSON_STEP, chunk=512):
    """Integrals of the potential along segments X_i -> Y_i (vectorized).

    Composite Simpson rule with the node spacing adapted per chunk so
    that no segment is sampled coarser than the requested step.

    Accuracy caveat: the segment tangent is differenced out of the
    endpoint coordinates, which costs a relative error of order
    eps * exp(2 * min(depth(X), depth(Y))) when the endpoints lie in
    nearly the same direction from the origin.  Keep one endpoint
    within distance ~12 of the origin (orbit sums and horocyclic
    truncations anchored at o all satisfy this); integrals between two
    deep points should instead be set up in an explicit chart.  Rows
    are marched from their shallower endpoint: outward nodes add two
    positive terms, while marching inward from a deep start would
    cancel catastrophically near the far endpoint.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X, Y = np.broadcast_arrays(X, Y)
    if getattr(potential, "is_constant", False):
        return constant_value(potential) * hb.dist(X, Y)
    flip = X[:, 0] > Y[:, 0]
    if np.any(flip):
        X, Y = X.copy(), Y.copy()
        X[flip], Y[flip] = Y[flip], X[flip]
    out = np.empty(len(X))
    for i in range(0, len(X), chunk):
        xs, ys = X[i:i + chunk], Y[i:i + chunk]
        V, length = hb.segment(xs, ys)
        lmax = float(np.max(length))
        if lmax == 0.0:
            out[i:i + chunk] = 0.0
            continue
        n = max(2, 2 * int(np.ceil(lmax / (2.0 * step))))
        u, w = _simpson_relative(n)
        s = length[:, None] * u[None, :]
        pts = np.cosh(s)[..., None] * xs[:, None, :] \
            + np.sinh(s)[..., None] * V[:, None, :]
        vals = potential.evaluate_lifted(_retime(pts))
        out[i:i + chunk] = length * np.sum(vals * w[None, :], axis=1)
    return out


def chart_integral(potential, C0, Cdot, s_lo, s_hi, step=SIMPSON_STEP):
    """Integrals of the potential along explicit geodesic charts.

    Each row i contributes int_{s_lo}^{s_hi} F(cosh(s) C0_i + sinh(s)
    Cdot_i) ds; s_lo and s_hi may be scalars or per-row arrays.  Taking
    the chart data directly (rather than a pair of endpoint points)
    keeps deep truncation points exact: no tangent is ever differenced
    out of nearly parallel large coordinates.
    """
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    Cdot = np.atleast_2d(np.asarray(Cdot, dtype=float))
    C0, Cdot = np.broadcast_arrays(C0, Cdot)
    m = len(C0)
    lo = np.broadcast_to(np.asarray(s_lo, dtype=float), (m,))
    hi = np.broadcast_to(np.asarray(s_hi, dtype=float), (m,))
    length = np.maximum(hi - lo, 0.0)
    lmax = float(np.max(length, initial=0.0))
    if lmax <= 0.0:
        return np.zeros(m)
    if getattr(potential, "is_constant", False):
        return constant_value(potential) * length
    n = max(2, 2 * int(np.ceil(lmax / (2.0 * step))))
    u, w = _simpson_relative(n)
    s = lo[:, None] + length[:, None] * u[None, :]
    pts = np.cosh(s)[..., None] * C0[:, None, :] \
        + np.sinh(s)[..., None] * Cdot[:, None, :]
    vals = potential.evaluate_lifted(_retime(pts).reshape(-1, C0.shape[-1]))
    vals = vals.reshape(m, n + 1)
    return length * np.sum(vals * w[None, :], axis=1)


def orbit_integral(potential, system, words, step=SIMPSON_STEP, chunk=1024):
    """int_o^{gamma o} F for reduced words, stable at any depth.

    The quadrature node at arclength s on [o, gamma o] is reduced by the
    inverse of the length-j prefix w_j before evaluation:

        w_j^{-1} z_s = [sinh(d-s) (w_j^{-1} o) + sinh(s) (w_j^{-1} gamma o)]
                       / sinh(d),    d = d(o, gamma o).

    Both columns are exact isometry data (prefix-inverse and suffix
    orbit points, each a cancellation-free matvec chain) and the sinh
    ratios cancel their e^{kappa} growth analytically.  Splitting [0, d]
    at the prefix displacements keeps every reduced node within about a
    letter of the origin, where a group-invariant potential evaluates
    exactly.  Raw segment quadrature (line_integral_lifted) loses such
    an integrand beyond depth ~max_eval_depth; this form has no depth
    limit.
    """
    words = [tuple(w) for w in words]
    if getattr(potential, "is_constant", False):
        c = constant_value(potential)
        return np.array([c * system.element(w).kappa for w in words])
    dim1 = system.dimension + 1
    O = np.zeros(dim1)
    O[0] = 1.0
    fwd = {l: system.letter_map(l).matrix for l in system.letters}
    inv = {l: system.letter_map(l).inverse().matrix for l in system.letters}
    A_rows, B_rows, lo, hi, dd, idx = [], [], [], [], [], []
    for widx, word in enumerate(words):
        k = len(word)
        if k == 0:
            continue
        suffix = [O] * (k + 1)
        for j in range(k - 1, -1, -1):
            suffix[j] = fwd[word[j]] @ suffix[j + 1]
        d = float(np.arccosh(max(suffix[0][0], 1.0)))
        if d <= 0.0:
            continue
        A = O
        kappa = 0.0
        for j in range(k):
            nxt = inv[word[j]] @ A
            kap_next = d if j == k - 1 \
                else min(float(np.arccosh(max(nxt[0], 1.0))), d)
            if kap_next > kappa:
                A_rows.append(A)
                B_rows.append(suffix[j])
                lo.append(kappa)
                hi.append(kap_next)
                dd.append(d)
                idx.append(widx)
            A, kappa = nxt, kap_next
    out = np.zeros(len(words))
    if not A_rows:
        return out
    A_arr, B_arr = np.array(A_rows), np.array(B_rows)
    lo, hi, dd = np.array(lo), np.array(hi), np.array(dd)
    idx = np.array(idx, dtype=int)
    sh_d = np.sinh(dd)
    for i in range(0, len(A_arr), chunk):
        sl = slice(i, i + chunk)
        L = hi[sl] - lo[sl]
        lmax = float(np.max(L))
        if lmax <= 0.0:
            continue
        n = max(2, 2 * int(np.ceil(lmax / (2.0 * step))))
        u, wts = _simpson_relative(n)
        s = lo[sl][:, None] + L[:, None] * u[None, :]
        ca = np.sinh(dd[sl][:, None] - s) / sh_d[sl][:, None]
        cb = np.sinh(s) / sh_d[sl][:, None]
        pts = ca[..., None] * A_arr[sl][:, None, :] \
            + cb[..., None] * B_arr[sl][:, None, :]
        vals = potential.evaluate_lifted(pts.reshape(-1, dim1))
        vals = vals.reshape(-1, n + 1)
        np.add.at(out, idx[sl], L * np.sum(vals * wts[None, :], axis=1))
    return out


def element_log_weights(system, elements, potential, step=SIMPSON_STEP):
    """log of exp(int_o^{gamma o} F) for group elements, routed by depth.

    Shallow elements integrate on the raw segment (vectorized); deep
    ones go through the prefix-chart quadrature, which a group-invariant
    integrand needs beyond the potential's max_eval_depth.
    """
    if getattr(potential, "is_constant", False):
        c = constant_value(potential)
        return c * np.array([e.kappa for e in elements])
    logs = np.empty(len(elements))
    if len(elements) == 0:
        return logs
    kappas = np.array([e.kappa for e in elements])
    safe = getattr(potential, "max_eval_depth", np.inf) - 2.0
    shallow = kappas <= safe
    if np.any(shallow):
        o = np.zeros(system.dimension + 1)
        o[0] = 1.0
        ends = np.array([elements[i].map.matrix[:, 0]
                         for i in np.flatnonzero(shallow)])
        logs[shallow] = line_integral_lifted(potential, o[None, :], ends,
                                             step=step)
    if not np.all(shallow):
        words = [elements[i].word for i in np.flatnonzero(~shallow)]
        logs[~shallow] = orbit_integral(potential, system, words, step=step)
    return logs


def line_integral(potential, x, y, step=SIMPSON_STEP, richardson=True):
    """Integral of the potential along the geodesic from x to y.

    Ball-coordinate endpoints; Simpson quadrature at the given step with
    one Richardson extrapolation against the half step by default.
    Constant potentials integrate exactly.
    """
    X = hb.lift(hb.as_ball_point(np.asarray(x, dtype=float)))
    Y = hb.lift(hb.as_ball_point(np.asarray(y, dtype=float)))
    if getattr(potential, "is_constant", False):
        return float(constant_value(potential) * hb.dist(X, Y))
    coarse = float(line_integral_lifted(potential, X, Y, step=step)[0])
    if not richardson:
        return coarse
    fine = float(line_integral_lifted(potential, X, Y, step=0.5 * step)[0])
    return (16.0 * fine - coarse) / 15.0


# -- the Gibbs cocycle ---------------------------------------------------------


@dataclass
class CocycleValue:
    """A truncated cocycle limit with its convergence diagnostics."""

    value: np.ndarray
    truncation_time: float
    defect: float

    def __float__(self):
        return float(np.asarray(self.value).reshape(-1)[0])


def _as_lifted_point(p, d):
    p = np.asarray(p, dtype=float)
    if p.shape == (d + 1,):
        return p
    if p.shape == (d,):
        return hb.lift(hb.as_ball_point(p))
    raise DomainError(f"expected a ball point of dimension {d} "
                      f"or a lifted point, got shape {p.shape}")


def gibbs_cocycle(potential, xi, x, y, t0=8.0, horizon=64.0, tol=1e-9,
                  step=COCYCLE_STEP, force_quadrature=False):
    """C_xi(x, y) = lim_t [ int_y^{xi_t} F - int_x^{xi_t} F ].

    xi may be a single boundary point or an array of them; x and y are
    ball points (or lifted hyperboloid points, useful for deep orbit
    points).  The limit is truncated along the ray o -> xi: the endpoint
    advances geometrically from t0 until successive values differ by
    less than tol or the horizon is reached.  Constant potentials use
    the exact horospherical form unless force_quadrature is set.

    Returns a CocycleValue whose value matches the shape of xi.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xis = np.atleast_2d(xi)
    d = xis.shape[-1]
    X = _as_lifted_point(x, d)
    Y = _as_lifted_point(y, d)

    if getattr(potential, "is_constant", False) and not force_quadrature:
        c = constant_value(potential)
        vals = c * (hb.busemann_lifted(xis, Y) - hb.busemann_lifted(xis, X))
        return CocycleValue(value=vals[0] if single else vals,
                            truncation_time=0.0, defect=0.0)

    # Truncate along the ray from the deeper endpoint: its own integral
    # then lives in an exact ray chart, and the shallow endpoint's
    # segment to the truncation point differences nothing deep.  (A
    # truncation ray anchored elsewhere would make the deep endpoint's
    # segment a difference of two aligned deep points, which scrambles
    # the quadrature nodes off the hyperboloid.)  The limit does not
    # depend on which escape path the common endpoint takes.
    deep_is_y = Y[0] >= X[0]
    D, S = (Y, X) if deep_is_y else (X, Y)
    depth0 = float(np.arccosh(max(D[0], 1.0)))
    V = hb.ray_to_boundary(np.broadcast_to(D, (len(xis), len(D))), xis)
    # Quadrature nodes go through the potential's orbit reduction, so
    # each row's truncation stops where its escape ray reaches the
    # stable evaluation depth: the node time coordinate is
    # A e^s + B e^{-s} with A, B below, solved for cosh(depth_cap).
    depth_cap = float(getattr(potential, "max_eval_depth", np.inf))
    if np.isfinite(depth_cap):
        if depth_cap <= depth0 + 1.0:
            raise NumericError(
                "basepoint deeper than the potential's stable "
                "evaluation range; chain the cocycle by letters instead")
        A = 0.5 * (D[0] + V[:, 0])
        B = 0.5 * (D[0] - V[:, 0])
        ch = np.cosh(depth_cap)
        s_cap = np.log((ch + np.sqrt(np.maximum(ch * ch - 4.0 * A * B,
                                                0.0))) / (2.0 * A))
        s_cap = np.maximum(s_cap, 1.0)
    else:
        s_cap = np.full(len(xis), np.inf)
    prev = None
    prev_per_row = None
    prev_active = None
    frozen_inc = np.zeros(len(xis))
    increments = []
    t_end = min(float(horizon), float(np.max(s_cap)))
    t = min(float(t0), t_end)
    while True:
        tt = np.minimum(t, s_cap)
        active = s_cap >= t
        Z = np.cosh(tt)[:, None] * D[None, :] + np.sinh(tt)[:, None] * V
        deep_side = chart_integral(potential, D[None, :], V, 0.0, tt,
                                   step=step)
        shallow_side = line_integral_lifted(potential, S[None, :], Z,
                                            step=step)
        cur = (deep_side - shallow_side) if deep_is_y \
            else (shallow_side - deep_side)
        if prev is not None:
            per_row = np.abs(cur - prev)
            frozen_inc = np.where(per_row > 0.0, per_row, frozen_inc)
            inc = float(np.max(per_row))
            increments.append(inc)
            defect = max(inc, float(np.max(frozen_inc)))
            if inc < tol:
                return CocycleValue(value=cur[0] if single else cur,
                                    truncation_time=depth0 + t,
                                    defect=defect)
            # diverging only if a row that took full steps both times
            # keeps growing; skipped for depth-capped potentials, where
            # evaluation noise near the cap scales like eps * e^(2 depth)
            # and can dominate the late increments without meaning the
            # tail diverges (the cap bounds the loop anyway)
            if prev_per_row is not None and not np.isfinite(depth_cap):
                grow = (active & prev_active
                        & (per_row > 10.0 * prev_per_row)
                        & (per_row > 100.0 * tol)
                        & (prev_per_row > 0.0))
                if np.any(grow):
                    raise TruncationError(
                        "cocycle increments are growing; the potential "
                        "may not decay along the chosen ray",
                        history=increments,
                    )
            prev_per_row = per_row
        prev = cur
        prev_active = active
        if t >= t_end:
            defect = increments[-1] if increments else np.inf
            if increments and np.isfinite(defect):
                defect = max(defect, float(np.max(frozen_inc)))
            return CocycleValue(value=cur[0] if single else cur,
                                truncation_time=depth0 + t,
                                defect=defect)
        t = min(1.5 * t, t_end)


def potential_gap(potential, xi, eta, t0=8.0, horizon=64.0, tol=1e-9,
                  step=COCYCLE_STEP, force_quadrature=False):
    """Gap map D(eta, xi) = exp .5 lim [ int_o^{xi_t} + int_{eta_t}^o
    - int_{eta_t}^{xi_t} ], a potential-adapted boundary distance.

    For a constant potential c this equals d_o(xi, eta)^(-c) exactly.
    Arrays broadcast: xi and eta of shape (d,) or (m, d).
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    single = xi.ndim == 1 and eta.ndim == 1
    xis, etas = np.atleast_2d(xi), np.atleast_2d(eta)
    xis, etas = np.broadcast_arrays(xis, etas)

    if getattr(potential, "is_constant", False) and not force_quadrature:
        c = constant_value(potential)
        vals = visual_distance_origin(xis, etas) ** (-c)
        return CocycleValue(value=vals[0] if single else vals,
                            truncation_time=0.0, defect=0.0)

    O = np.zeros(xis.shape[-1] + 1)
    O[0] = 1.0
    C0, Cdot = hb.geodesic_between_boundary(xis, etas)
    horizon = min(float(horizon),
                  getattr(potential, "max_eval_depth", np.inf))
    prev = None
    increments = []
    t = min(float(t0), horizon)
    while True:
        # truncate on the eta -> xi geodesic itself: its chart comes from
        # boundary data, so the middle integral never differences a
        # tangent out of two deep points, and the outer integrals stay
        # anchored at the origin.
        ct, st = np.cosh(t), np.sinh(t)
        Zx = ct * C0 + st * Cdot
        Ze = ct * C0 - st * Cdot
        cur = 0.5 * (
            line_integral_lifted(potential, O[None, :], Zx, step=step)
            + line_integral_lifted(potential, Ze, O[None, :], step=step)
            - chart_integral(potential, C0, Cdot, -t, t, step=step)
        )
        if prev is not None:
            inc = float(np.max(np.abs(cur - prev)))
            increments.append(inc)
            if inc < tol:
                vals = np.exp(cur)
                return CocycleValue(value=vals[0] if single else vals,
                                    truncation_time=t, defect=inc)
        prev = cur
        if t >= horizon:
            vals = np.exp(cur)
            return CocycleValue(value=vals[0] if single else vals,
                                truncation_time=t,
                                defect=increments[-1] if increments
                                else np.inf)
        t = min(1.5 * t, horizon)


def cocycle_chain(potential, maps, xi, **kwargs):
    """C_xi(o, gamma o) for gamma = maps[0] o ... o maps[-1], any depth.

    Splits through C_xi(o, (l w) o) = C_xi(o, l o) + C_{l^-1 xi}(o, w o)
    so every quadrature runs against a shallow orbit point.  Direct
    evaluation at gamma o costs a relative error ~ eps * exp(2 kappa)
    for xi near the attracting direction (the value log(t - w . xi) is
    differenced out of coordinates of size e^kappa); the chain stays
    accurate at any word length.  Extra keyword arguments pass through
    to the per-letter cocycle calls.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xis = np.atleast_2d(xi)
    total = np.zeros(len(xis))
    t_max, defect = 0.0, 0.0
    origin = np.zeros(xis.shape[-1])
    for m in maps:
        cv = gibbs_cocycle(potential, xis, origin, m.matrix[:, 0], **kwargs)
        total += np.atleast_1d(cv.value)
        t_max = max(t_max, cv.truncation_time)
        defect = max(defect, cv.defect)
        xis = m.inverse().apply_boundary(xis)
    return CocycleValue(value=total[0] if single else total,
                        truncation_time=t_max, defect=defect)


# -- orbit weights and normalization -------------------------------------------


def orbit_weights(enumeration, potential, step=SIMPSON_STEP, log=False):
    """exp(int_o^{gamma o} F) for every enumerated element.

    Deep elements route through the prefix-chart quadrature so the
    integrand is never evaluated from unreducible raw coordinates.
    """
    if getattr(potential, "is_constant", False):
        logs = constant_value(potential) * enumeration.kappas()
        return logs if log else np.exp(logs)
    if len(enumeration.elements) == 0:
        return np.zeros(0)
    logs = element_log_weights(enumeration.system, enumeration.elements,
                               potential, step=step)
    return logs if log else np.exp(logs)


def normalize_potential(potential, enumeration, step=SIMPSON_STEP):
    """Shift the potential so its weighted growth exponent vanishes.

    Returns (shifted potential, the exponent that was subtracted).
    """
    from .group import critical_exponent

    logw = orbit_weights(enumeration, potential, step=step, log=True)
    est = critical_exponent(enumeration, weights=np.exp(logw))
    return potential.shifted(-est.delta), est.delta
