"""Discrete stationary measures for conformal boundary measures.

The target identity is mu = sum_gamma nu(gamma) gamma_* mu, with mu a
conformal measure on the boundary sphere and nu a finitely supported
probability weight on the group.  The construction works scale by
scale: elements are grouped into displacement annuli, each annulus
carries an averaging operator built from transport densities f_gamma
and ray weights r_gamma^F, and a decreasing family of positive
functions R_n tracks the mass still to be distributed.  Annulus n
contributes nu(gamma) = (beta/A) R_{n-1}(eta_gamma) r_gamma^F.

Deep elements make naive boundary arithmetic useless: an attracting
direction sits within e^{-kappa} of the points of its shadow, far
below the absolute 1e-16 noise of inner products between stored unit
vectors.  Every pairwise separation here is therefore computed from
coordinate differences (relatively accurate at any scale doubles can
hold at all), and cap memberships compare half squared chords against
cancellation-free gap radii.
"""

import csv
import json

import numpy as np

from .errors import (
    BudgetError,
    ConfigurationError,
    ConstantsError,
    CoveringError,
    DomainError,
    InsufficientDepthError,
)
from .group import (
    GroupElement,
    enumerate_elements,
    invert_word,
    reduce_word,
    sample_limit_set,
    stratify_annuli,
)
from .potential import cocycle_chain, constant_value, orbit_integral
from .psdensity import DiscreteBoundaryMeasure, test_cap_family

__all__ = [
    "LimitGrid",
    "build_limit_grid",
    "pair_gap",
    "shadow_gap_radius",
    "ChainTables",
    "letter_tables",
    "log_f_matrix",
    "chain_log_weights",
    "f_gamma",
    "EtaFamily",
    "eta_points",
    "eta_point",
    "AnnulusData",
    "annulus_data",
    "covering_fraction",
    "covering_element",
    "choose_annulus_constant",
    "approx_operator",
    "measure_A",
    "default_beta",
    "ApproxState",
    "NuMeasure",
    "build_nu",
    "history_to_csv",
    "convolve",
    "StationarityReport",
    "stationarity_residual",
    "MomentReport",
    "exponential_moment",
    "GenerationReport",
    "support_generates",
]


# -- pairwise boundary geometry ----------------------------------------------


def pair_gap(points, centers, chunk=512):
    """Half squared chords 0.5 |xi - c|^2, shape (n_centers, n_points).

    Formed from coordinate differences, never from 1 - dot products: the
    difference form keeps relative accuracy for separations down to the
    coordinate noise floor, while the dot form drowns everything below
    an absolute 1e-16 in rounding.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    out = np.empty((len(centers), len(points)))
    for lo in range(0, len(points), chunk):
        D = points[lo:lo + chunk, None, :] - centers[None, :, :]
        out[:, lo:lo + chunk] = 0.5 * np.einsum("mnd,mnd->mn", D, D).T
    return out


def shadow_gap_radius(kappa, R):
    """Gap radius 1 - cos(theta) of the shadow of B(y, R), d(o, y) = kappa.

    Uses sin^2 / (1 + cos) so deep shadows keep full relative accuracy;
    the direct 1 - sqrt(1 - sin^2) would round to zero below sin ~ 1e-8.
    """
    kappa = np.asarray(kappa, dtype=float)
    sin_t = np.minimum(np.sinh(R) / np.sinh(np.maximum(kappa, R + 1e-12)), 1.0)
    return sin_t ** 2 / (1.0 + np.sqrt(np.maximum(1.0 - sin_t ** 2, 0.0)))


# -- evaluation grid ----------------------------------------------------------


class LimitGrid:
    """Boundary evaluation grid sampled from the limit set.

    points is an (m, d) array of pairwise-distinct unit vectors, each
    inside one of the generator caps; resolution is the measured
    one-sided gap from a deeper proxy sample to the grid (visual
    metric, so points of the limit set are never much farther than the
    resolution from the grid).
    """

    def __init__(self, points, resolution):
        self.points = np.asarray(points, dtype=float)
        self.resolution = float(resolution)
        self._diam = None

    def __len__(self):
        return len(self.points)

    @property
    def dimension(self):
        return self.points.shape[1]

    def diameter(self):
        """Largest visual distance d_o between grid points."""
        if self._diam is None:
            best = 0.0
            for lo in range(0, len(self.points), 512):
                g = pair_gap(self.points, self.points[lo:lo + 512])
                best = max(best, float(np.max(g)))
            self._diam = float(np.sqrt(best / 2.0))
        return self._diam


def build_limit_grid(system, word_length=12, count=2000, rng=None,
                     proxy_length=15, proxy_count=4000):
    """Sample an evaluation grid from the limit set and measure its gaps.

    Points are images of the base boundary point under random reduced
    words; the resolution is how far a deeper proxy sample can sit from
    the grid (one-sided, visual metric).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    pts = sample_limit_set(system, word_length, count=count, rng=rng)
    pts = np.unique(np.round(pts, 14), axis=0)
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    in_cap = np.zeros(len(pts), dtype=bool)
    for l in system.letters:
        in_cap |= system.caps[l].contains(pts)
    if not np.all(in_cap):
        raise ConfigurationError(
            "limit grid sample has points outside every generator cap")
    proxy = sample_limit_set(system, proxy_length, count=proxy_count, rng=rng)
    worst = 0.0
    for lo in range(0, len(proxy), 512):
        g = pair_gap(proxy[lo:lo + 512], pts)
        worst = max(worst, float(np.max(np.min(g, axis=0))))
    return LimitGrid(pts, np.sqrt(worst / 2.0))


# -- transport densities ------------------------------------------------------


def _split_potential(potential):
    """Constant part c and nonconstant remainder (None when pure constant)."""
    if getattr(potential, "is_constant", False):
        return constant_value(potential), None
    base = getattr(potential, "base", None)
    shift = getattr(potential, "shift", None)
    if base is not None and shift is not None:
        return float(shift), base
    return 0.0, potential


def _holder_alpha(potential):
    _, base = _split_potential(potential)
    if base is None:
        return 1.0
    return float(getattr(base, "holder_alpha", 1.0))


class ChainTables:
    """Letter cocycle splines for the nonconstant part of a potential.

    For each generator letter l the boundary cocycle xi -> C_xi(o, l o)
    of the nonconstant part is tabulated on a uniform circle grid and
    interpolated by a periodic cubic spline.  The tabulated function
    carries structure at every visual scale with amplitude shrinking
    proportionally, so the interpolation error is about the node
    spacing times a unit level; node counts buy accuracy only linearly.
    """

    def __init__(self, system, splines, n_nodes, defect):
        self.system = system
        self.splines = splines
        self.n_nodes = int(n_nodes)
        self.defect = float(defect)

    def __call__(self, letter, theta):
        return self.splines[letter](np.mod(theta, 2.0 * np.pi))


def letter_tables(system, potential, n_nodes=2048, t0=10.0, tol=1e-6,
                  step=0.04):
    """Tabulate per-letter boundary cocycles of the nonconstant part.

    Only the plane case has a circle to tabulate on; other dimensions
    fall back to direct chain evaluation (see log_f_matrix).
    """
    from scipy.interpolate import CubicSpline

    from .potential import gibbs_cocycle

    if system.dimension != 2:
        raise DomainError("letter tables need a one-dimensional boundary")
    _, base = _split_potential(potential)
    if base is None:
        raise ConfigurationError("constant potentials need no letter tables")
    th = np.linspace(0.0, 2.0 * np.pi, n_nodes + 1)
    xis = np.stack([np.cos(th[:-1]), np.sin(th[:-1])], axis=1)
    origin = np.zeros(2)
    splines = {}
    defect = 0.0
    for l in system.letters:
        y = system.letter_map(l).matrix[:, 0]
        cv = gibbs_cocycle(base, xis, origin, y, t0=t0, tol=tol, step=step)
        vals = np.concatenate([cv.value, cv.value[:1]])
        splines[l] = CubicSpline(th, vals, bc_type="periodic")
        defect = max(defect, cv.defect)
    return ChainTables(system, splines, n_nodes, defect)


class _ElementArrays:
    """Stacked per-element geometry read off the Lorentz matrices."""

    def __init__(self, elements):
        self.elements = list(elements)
        self.words = [e.word for e in self.elements]
        d1 = self.elements[0].map.matrix.shape[0] if self.elements else 1
        self.M = (np.stack([e.map.matrix for e in self.elements])
                  if self.elements else np.zeros((0, d1, d1)))
        self.kappa = np.array([e.kappa for e in self.elements])
        self.t = self.M[:, 0, 0]
        self.w = self.M[:, 1:, 0]
        self.wn = np.linalg.norm(self.w, axis=1)
        safe = np.maximum(self.wn, 1e-300)
        self.xm = self.w / safe[:, None]
        rep = -self.M[:, 0, 1:]
        rn = np.maximum(np.linalg.norm(rep, axis=1), 1e-300)
        self.rep = rep / rn[:, None]
        # epsilon_gamma = 1 - |gamma(o)| without cancellation
        self.eps = (1.0 + 1.0 / (self.t + safe)) / (1.0 + self.t)

    def __len__(self):
        return len(self.elements)

    def slice(self, lo, hi):
        sub = _ElementArrays.__new__(_ElementArrays)
        sub.elements = self.elements[lo:hi]
        sub.words = self.words[lo:hi]
        for name in ("M", "kappa", "t", "w", "wn", "xm", "rep", "eps"):
            setattr(sub, name, getattr(self, name)[lo:hi])
        return sub


def _log_f_constant(c, arrays, points, chunk=512):
    """c * log(t - xi . w) pairwise, in the cancellation-free split form.

    t - xi . w = 1/(t + |w|) + |w| * gap(xi, x_m); the first term is the
    exact reciprocal of an O(e^kappa) quantity and the second uses the
    coordinate-difference gap, so the value stays relatively accurate
    even when xi sits inside the e^{-kappa} sized shadow of gamma.
    """
    g = pair_gap(points, arrays.xm, chunk=chunk)
    tw = 1.0 / (arrays.t + arrays.wn)[:, None] + arrays.wn[:, None] * g
    return c * np.log(tw)


def _letter_inverses(system):
    return {l: system.letter_map(l).inverse().matrix for l in system.letters}


def _chain_matrix(system, tables, words, points, out):
    """Summed letter-cocycle chains for many words over a fixed point set.

    Words are walked in sorted order with a stack of shared prefixes, so
    each distinct prefix costs one pullback and one spline evaluation no
    matter how many words pass through it.
    """
    inv = _letter_inverses(system)
    order = sorted(range(len(words)), key=lambda i: words[i])
    base = np.concatenate([np.ones((len(points), 1)), points], axis=1)
    stack = []  # (letter, pulled null lifts, accumulated chain)
    for wi in order:
        word = words[wi]
        keep = 0
        while (keep < len(stack) and keep < len(word)
               and stack[keep][0] == word[keep]):
            keep += 1
        del stack[keep:]
        for j in range(keep, len(word)):
            l = word[j]
            cur, acc = (stack[-1][1], stack[-1][2]) if stack else (base, 0.0)
            theta = np.arctan2(cur[:, 2], cur[:, 1])
            acc = acc + tables(l, theta)
            nxt = cur @ inv[l].T
            nxt /= nxt[:, 0:1]
            stack.append((l, nxt, acc))
        if word:
            out[wi] += stack[-1][2]
    return out


def log_f_matrix(system, potential, elements, points, tables=None, chunk=512):
    """log f_gamma(xi) over all (element, point) pairs, shape (n_el, n_pts).

    f_gamma(xi) = exp C_xi(o, gamma o) is the density transporting the
    conformal measure along gamma.  The constant part of the potential
    uses the exact horospherical closed form; the nonconstant part is
    chained letter by letter through spline tables (accuracy set by the
    table resolution, about 1e-2 in the log over long words) or, when no
    tables are given, through exact per-element cocycle chains, which
    cost a quadrature per letter and only suit small element sets.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    arrays = elements if isinstance(elements, _ElementArrays) \
        else _ElementArrays(elements)
    c, base = _split_potential(potential)
    out = _log_f_constant(c, arrays, points, chunk=chunk)
    if base is None:
        return out
    if tables is not None:
        return _chain_matrix(system, tables, arrays.words, points, out)
    for i, e in enumerate(arrays.elements):
        if not e.word:
            continue
        maps = [system.letter_map(l) for l in e.word]
        out[i] += np.atleast_1d(cocycle_chain(base, maps, points).value)
    return out


def chain_log_weights(system, potential, elements, tables=None, step=0.01):
    """log r_gamma^F = int_o^{gamma o} F for a batch of elements.

    The integral equals -log f_gamma at the attracting direction, where
    the constant part collapses to c * kappa exactly (the gap term
    vanishes) and the nonconstant part is a letter chain along the
    pulled-back attractor.  Without tables it falls back to direct
    orbit-segment quadrature.
    """
    arrays = elements if isinstance(elements, _ElementArrays) \
        else _ElementArrays(elements)
    c, base = _split_potential(potential)
    if not len(arrays):
        return np.zeros(0)
    kap = np.log(arrays.t + arrays.wn)
    out = c * kap
    if base is None:
        return out
    if tables is None:
        return orbit_integral(potential, system, arrays.words, step=step)
    inv = _letter_inverses(system)
    maxlen = max((len(w) for w in arrays.words), default=0)
    wmat = np.zeros((len(arrays.words), maxlen), dtype=int)
    for i, w in enumerate(arrays.words):
        wmat[i, :len(w)] = w
    cur = np.concatenate([np.ones((len(arrays.xm), 1)), arrays.xm], axis=1)
    for j in range(maxlen):
        for l in system.letters:
            sel = wmat[:, j] == l
            if not np.any(sel):
                continue
            theta = np.arctan2(cur[sel, 2], cur[sel, 1])
            out[sel] -= tables(l, theta)
            nxt = cur[sel] @ inv[l].T
            nxt /= nxt[:, 0:1]
            cur[sel] = nxt
    return out


def f_gamma(system, potential, element, xi, tables=None, exact=False):
    """Transport density f_gamma(xi) for one element.

    The identity element returns 1 exactly.  With exact=True the value
    comes from a per-letter cocycle chain with fresh quadratures, the
    slow reference route; otherwise the closed form plus tables (when
    given) is used, matching log_f_matrix.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    pts = np.atleast_2d(xi)
    word = element.word if isinstance(element, GroupElement) \
        else tuple(element)
    if len(word) == 0:
        vals = np.ones(len(pts))
        return float(vals[0]) if single else vals
    el = element if isinstance(element, GroupElement) else system.element(word)
    if exact:
        maps = [system.letter_map(l) for l in el.word]
        vals = np.exp(np.atleast_1d(cocycle_chain(potential, maps,
                                                  pts).value))
    else:
        vals = np.exp(log_f_matrix(system, potential, [el], pts,
                                   tables=tables)[0])
    return float(vals[0]) if single else vals


# -- anchor points ------------------------------------------------------------


class EtaFamily:
    """Anchor boundary points eta_gamma for a batch of elements.

    eta_hat are the grid points farthest from each element's repelling
    direction (the center of the exceptional cap outside of which the
    sphere action contracts); eta = gamma(eta_hat); separation is the
    visual distance cleared beyond the cap radius proxy.
    """

    def __init__(self, eta_hat, eta, separation):
        self.eta_hat = eta_hat
        self.eta = eta
        self.separation = separation

    def __len__(self):
        return len(self.eta)


def eta_points(system, elements, grid, C=None, min_separation=None):
    """Choose anchor points for every element of a batch.

    Each element takes the grid point with the largest gap to its
    repelling direction, maps it forward, and must land inside its own
    shadow (checked with gap arithmetic; the image direction is
    accurate because the chosen point stays far outside the exceptional
    cap, where the map is a contraction).
    """
    if C is None:
        C = system.C_Gamma
    if C is None or C <= 0:
        raise ConfigurationError("need a positive annulus constant C")
    pts = grid.points if isinstance(grid, LimitGrid) else np.asarray(grid)
    grid_obj = grid if isinstance(grid, LimitGrid) else LimitGrid(pts, 0.0)
    arrays = elements if isinstance(elements, _ElementArrays) \
        else _ElementArrays(elements)
    if min_separation is None:
        min_separation = grid_obj.diameter() / 3.0
    gaps = pair_gap(pts, arrays.rep)
    idx = np.argmax(gaps, axis=1)
    top = gaps[np.arange(len(idx)), idx]
    # exceptional cap radius proxy: 4 epsilon in gap units is generous
    # for every contraction profile in this family
    cap_gap = np.minimum(4.0 * arrays.eps, 0.5)
    separation = np.sqrt(top / 2.0) - np.sqrt(cap_gap / 2.0)
    if np.any(separation <= min_separation):
        bad = int(np.argmin(separation))
        raise InsufficientDepthError(
            f"no grid point clears the exceptional cap of "
            f"{arrays.words[bad]} by the separation target "
            f"{min_separation:.3f}; the grid is too coarse")
    hat = pts[idx]
    lifted = np.concatenate([np.ones((len(hat), 1)), hat], axis=1)
    img = np.einsum("nij,nj->ni", arrays.M, lifted)
    eta = img[:, 1:] / img[:, 0:1]
    eta /= np.linalg.norm(eta, axis=1)[:, None]
    gap_eta = 0.5 * np.einsum("nd,nd->n", eta - arrays.xm, eta - arrays.xm)
    inside = gap_eta <= shadow_gap_radius(arrays.kappa, C)
    if not np.all(inside):
        bad = int(np.argmin(inside))
        raise ConstantsError(
            f"anchor point of {arrays.words[bad]} fell outside its shadow; "
            "the annulus constant is too small for this element")
    return EtaFamily(hat, eta, separation)


def eta_point(system, element, grid, C=None):
    """Anchor point of a single element: (eta_hat, eta_gamma)."""
    fam = eta_points(system, [element], grid, C=C)
    return fam.eta_hat[0], fam.eta[0]


# -- annuli and covering ------------------------------------------------------


class AnnulusData:
    """Everything one annulus needs for its averaging operator."""

    def __init__(self, n, elements, arrays, eta, log_w, C):
        self.n = int(n)
        self.elements = elements
        self.arrays = arrays
        self.eta = eta
        self.log_w = log_w
        self.C = float(C)

    def __len__(self):
        return len(self.elements)

    def gap_radii(self):
        return shadow_gap_radius(self.arrays.kappa, self.C)


def annulus_data(system, potential, annuli, n, grid, tables=None):
    """Assemble arrays, anchor points and ray weights for annulus n."""
    if n < 1 or n > annuli.n_max:
        raise ConfigurationError(f"annulus {n} is not stratified")
    elements = annuli.strata[n]
    if not elements:
        raise InsufficientDepthError(f"annulus {n} is empty")
    arrays = _ElementArrays(elements)
    eta = eta_points(system, arrays, grid, C=annuli.C)
    log_w = chain_log_weights(system, potential, arrays, tables=tables)
    return AnnulusData(n, elements, arrays, eta, log_w, annuli.C)


def covering_fraction(data, points):
    """Fraction of points inside at least one shadow of the annulus."""
    pts = points.points if isinstance(points, LimitGrid) \
        else np.atleast_2d(np.asarray(points))
    gr = data.gap_radii()
    covered = np.zeros(len(pts), dtype=bool)
    for lo in range(0, len(data.arrays.xm), 4000):
        g = pair_gap(pts, data.arrays.xm[lo:lo + 4000])
        covered |= np.any(g <= gr[lo:lo + 4000, None], axis=0)
    return float(np.mean(covered))


def covering_element(eta, data):
    """The annulus element whose shadow contains eta, anchor closest.

    Ties (identical anchor distances) resolve to the smallest word.
    Raises CoveringError when no shadow contains the point, the signal
    to enlarge the annulus constant.
    """
    eta = np.asarray(eta, dtype=float)
    g = pair_gap(eta[None, :], data.arrays.xm)[:, 0]
    inside = g <= data.gap_radii()
    if not np.any(inside):
        raise CoveringError(
            "no shadow of this annulus contains the point; "
            "increase the annulus constant")
    cand = np.flatnonzero(inside)
    diff = data.eta.eta[cand] - eta
    d = np.einsum("nd,nd->n", diff, diff)
    tied = cand[d <= d.min() + 1e-30]
    pick = min(tied, key=lambda i: data.arrays.words[i])
    return int(pick), data.elements[int(pick)]


def choose_annulus_constant(system, n_max=3, grid=None, start=None,
                            factor=1.15, max_tries=8, budget=2_000_000):
    """Smallest annulus constant whose shadows cover the grid up to n_max.

    Starts from the calibrated (or given) value and steps up by the
    growth factor until every annulus covers every grid point; records
    the first passing value on the system and returns it.
    """
    from .group import calibrate_annulus_constant

    if grid is None:
        grid = build_limit_grid(system)
    C = start if start is not None else system.C_Gamma
    if C is None:
        C = calibrate_annulus_constant(system)
    for _ in range(max_tries):
        enum = enumerate_elements(system, (4.0 * n_max + 2.0) * C,
                                  budget=budget)
        annuli = stratify_annuli(enum, C=C, n_max=n_max)
        ok = True
        for n in range(1, n_max + 1):
            if not annuli.strata[n]:
                ok = False
                break
            data_n = AnnulusData(n, annuli.strata[n],
                                 _ElementArrays(annuli.strata[n]),
                                 None, None, C)
            if covering_fraction(data_n, grid) < 1.0:
                ok = False
                break
        if ok:
            system.C_Gamma = float(C)
            return float(C)
        C *= factor
    raise CoveringError(
        f"no annulus constant below {C:.3f} covers the grid at all "
        f"levels up to {n_max}")


# -- averaging operator -------------------------------------------------------


def approx_operator(system, potential, data, R_at_eta, points, tables=None,
                    chunk=512, block=4000):
    """Annulus averaging operator: sum_gamma R(eta_gamma) r_gamma^F f_gamma.

    Linear and positivity-preserving in R by inspection of the sum; the
    output length matches points.
    """
    pts = points.points if isinstance(points, LimitGrid) \
        else np.atleast_2d(np.asarray(points, dtype=float))
    R_at_eta = np.asarray(R_at_eta, dtype=float)
    if len(R_at_eta) != len(data):
        raise ConfigurationError(
            "R must be sampled at the annulus anchor points")
    out = np.zeros(len(pts))
    coef = R_at_eta * np.exp(data.log_w)
    for lo in range(0, len(data.arrays), block):
        hi = min(lo + block, len(data.arrays))
        lf = log_f_matrix(system, potential, data.arrays.slice(lo, hi), pts,
                          tables=tables, chunk=chunk)
        out += coef[lo:hi] @ np.exp(lf)
    return out


def measure_A(system, potential, annuli, grid, n_range=None, tables=None,
              data_cache=None):
    """Empirical two-sided operator constant from the constant function.

    A = max over the annuli and the grid of max(P_n 1, 1 / P_n 1).
    """
    if n_range is None:
        n_range = range(1, annuli.n_max + 1)
    A = 1.0
    for n in n_range:
        data = None if data_cache is None else data_cache.get(n)
        if data is None:
            data = annulus_data(system, potential, annuli, n, grid,
                                tables=tables)
            if data_cache is not None:
                data_cache[n] = data
        P1 = approx_operator(system, potential, data, np.ones(len(data)),
                             grid, tables=tables)
        A = max(A, float(np.max(P1)), float(1.0 / np.min(P1)))
    return A


# -- the iteration ------------------------------------------------------------


def default_beta(C, alpha, delta_reg):
    """Step size and moment exponent from the annulus constant.

    beta is capped twice: the implied exponent
    eps0 = -log(1 - beta) / (4 C) must stay at half the measured
    boundary regularity, and 1 - beta must leave room for the
    regularity-propagation budget e^{-4 C alpha} + beta.
    """
    if delta_reg <= 0:
        raise ConfigurationError("need a positive regularity exponent")
    beta = min(1.0 - np.exp(-4.0 * C * 0.5 * delta_reg),
               (1.0 - np.exp(-4.0 * C * alpha)) / 2.0)
    eps0 = -np.log(1.0 - beta) / (4.0 * C)
    return float(beta), float(eps0)


class ApproxState:
    """Snapshot of one iteration step: R_n on the grid and its bounds."""

    def __init__(self, n, R_values, sup_norm, constants):
        self.n = int(n)
        self.R_values = np.asarray(R_values, dtype=float)
        self.sup_norm = float(sup_norm)
        self.constants = constants  # (beta, A, C)

    @property
    def min_value(self):
        return float(np.min(self.R_values))


class NuMeasure:
    """Finitely supported weights nu(gamma) with annulus bookkeeping."""

    def __init__(self, entries, annulus_index, constants, defect):
        self.entries = list(entries)
        self._annulus = dict(annulus_index)
        self.constants = dict(constants)
        self.defect = float(defect)

    def __len__(self):
        return len(self.entries)

    @property
    def weights(self):
        return np.array([w for _, w in self.entries])

    @property
    def elements(self):
        return [e for e, _ in self.entries]

    def total_mass(self):
        return float(sum(w for _, w in self.entries))

    def annulus_of(self, element):
        word = element.word if isinstance(element, GroupElement) \
            else tuple(element)
        return self._annulus[word]

    def normalized_weights(self):
        w = self.weights
        return w / w.sum()

    def reweighted(self, weights):
        """Same support with replaced weights (controls, experiments)."""
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(self.entries):
            raise ConfigurationError("weight count must match the support")
        entries = [(e, float(w)) for (e, _), w in zip(self.entries, weights)]
        return NuMeasure(entries, self._annulus, self.constants, self.defect)

    def to_json(self, path=None):
        order = sorted(range(len(self.entries)),
                       key=lambda i: (self._annulus[self.entries[i][0].word],
                                      self.entries[i][0].word))
        payload = {
            "constants": self.constants,
            "defect": self.defect,
            "entries": [
                {"word": list(self.entries[i][0].word),
                 "weight": self.entries[i][1],
                 "annulus": self._annulus[self.entries[i][0].word],
                 "kappa": self.entries[i][0].kappa}
                for i in order
            ],
        }
        if path is None:
            return payload
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
        return payload

    @classmethod
    def from_json(cls, source, system):
        if isinstance(source, (str, bytes)):
            with open(source) as fh:
                payload = json.load(fh)
        else:
            payload = source
        entries, annulus = [], {}
        for row in payload["entries"]:
            word = tuple(row["word"])
            el = system.element(word)
            entries.append((el, float(row["weight"])))
            annulus[word] = int(row["annulus"])
        return cls(entries, annulus, payload.get("constants", {}),
                   payload.get("defect", 0.0))


def build_nu(system, potential, n_max=3, grid=None, annuli=None, beta=None,
             alpha=None, delta_reg=None, A=None, tables=None,
             budget=2_000_000, max_retries=4, retry_growth=1.05):
    """Run the annulus iteration and emit the stationary weights.

    Starting from R_0 = 1, each step removes (beta/A) P_{n+1} R_n and
    assigns the removed mass to the elements of annulus n+1:
    nu(gamma) = (beta/A) R_n(eta_gamma) r_gamma^F.  The two-sided bound
    P R / R in [1/A, A] is checked at every evaluation point before the
    update is applied; a violation inflates A by the observed ratio
    (plus margin) and restarts, and a nonpositive iterate raises
    ConstantsError naming the step and point.  Returns the measure and
    the per-step history on the grid.

    The emitted defect is the grid average of the final iterate: the
    exact telescoping total_mass + integral of R_{n_max} d mu = 1 holds
    because every transport density integrates to one, so the average
    quantifies the mass the truncation left unassigned (the sup, kept
    in the history, bounds it).
    """
    C = system.C_Gamma
    if C is None or C <= 0:
        raise ConfigurationError(
            "the system needs a calibrated annulus constant first")
    if grid is None:
        grid = build_limit_grid(system)
    if annuli is None:
        enum = enumerate_elements(system, (4.0 * n_max + 2.0) * C,
                                  budget=budget)
        annuli = stratify_annuli(enum, C=C, n_max=n_max)
    if annuli.n_max < n_max:
        raise InsufficientDepthError(
            f"stratification stops at annulus {annuli.n_max} < {n_max}")
    if alpha is None:
        alpha = _holder_alpha(potential)
    if beta is None:
        if delta_reg is None:
            raise ConfigurationError(
                "either beta or a measured regularity exponent is required")
        beta, eps0 = default_beta(C, alpha, delta_reg)
    else:
        eps0 = -np.log(1.0 - beta) / (4.0 * C)
    _, base = _split_potential(potential)
    if tables is None and base is not None and system.dimension == 2:
        tables = letter_tables(system, potential)

    data = {n: annulus_data(system, potential, annuli, n, grid,
                            tables=tables)
            for n in range(1, n_max + 1)}
    for n in range(1, n_max + 1):
        frac = covering_fraction(data[n], grid)
        if frac < 1.0:
            raise CoveringError(
                f"annulus {n} covers only {frac * 100:.2f}% of the grid; "
                "increase the annulus constant")
    if A is None:
        A = 1.0
        for n in range(1, n_max + 1):
            P1 = approx_operator(system, potential, data[n],
                                 np.ones(len(data[n])), grid, tables=tables)
            A = max(A, float(np.max(P1)), float(1.0 / np.min(P1)))

    # evaluation sets: the grid plus every annulus's anchor points
    R = {}
    for attempt in range(max_retries + 1):
        sets = {"grid": grid.points}
        for n in range(1, n_max + 1):
            sets[n] = data[n].eta.eta
        R = {key: np.ones(len(pts)) for key, pts in sets.items()}
        history = [ApproxState(0, R["grid"], 1.0, (beta, A, C))]
        entries, annulus_index = [], {}
        violation = None
        for n in range(1, n_max + 1):
            R_eta = R[n]  # R_{n-1} at the anchors of annulus n
            coef = (beta / A) * R_eta * np.exp(data[n].log_w)
            for el, wgt in zip(data[n].elements, coef):
                entries.append((el, float(wgt)))
                annulus_index[el.word] = n
            updates, worst = {}, 1.0
            for key in sets:
                if isinstance(key, int) and key <= n:
                    continue
                P = approx_operator(system, potential, data[n], R_eta,
                                    sets[key], tables=tables)
                ratio = P / R[key]
                worst = max(worst, float(np.max(ratio)),
                            float(1.0 / np.min(ratio)))
                updates[key] = P
            if worst > A * (1.0 + 1e-9):
                violation = worst
                break
            for key, P in updates.items():
                R[key] = R[key] - (beta / A) * P
                if np.any(R[key] <= 0.0):
                    bad = int(np.argmin(R[key]))
                    raise ConstantsError(
                        f"iterate {n} lost positivity at point {bad} of "
                        f"set {key!r} despite the two-sided bound; the "
                        "operator values are numerically broken")
            history.append(ApproxState(n, R["grid"],
                                       float(np.max(R["grid"])),
                                       (beta, A, C)))
        if violation is None:
            break
        if attempt == max_retries:
            raise ConstantsError(
                f"two-sided bound kept failing up to A = {A:.4f}; "
                f"last observed ratio {violation:.4f}")
        A = violation * retry_growth
    total = sum(w for _, w in entries)
    defect = float(np.mean(R["grid"]))
    constants = {
        "beta": float(beta), "A": float(A), "C_Gamma": float(C),
        "eps0": float(eps0), "alpha": float(alpha), "n_max": int(n_max),
        "total_mass": float(total),
    }
    if delta_reg is not None:
        constants["delta_reg"] = float(delta_reg)
    nu = NuMeasure(entries, annulus_index, constants, defect)
    return nu, history


def history_to_csv(history, path):
    """Write the iteration history as rows of (n, sup R_n, min R_n)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "sup_R", "min_R"])
        for state in history:
            writer.writerow([state.n, f"{state.sup_norm:.12g}",
                             f"{state.min_value:.12g}"])


# -- convolution and the stationarity residual --------------------------------


def convolve(nu, measure, max_atoms=2_000_000):
    """The measure sum_gamma nu(gamma) gamma_* mu, with nu renormalized
    to unit mass so truncation does not deflate the result.

    Materializes every pushed atom, so the product of support sizes is
    capped; residual checks against large measures should go through
    stationarity_residual, which never builds the product cloud.
    """
    n_out = len(nu) * len(measure.weights)
    if n_out > max_atoms:
        raise BudgetError(
            f"convolution would create {n_out} atoms; raise max_atoms or "
            "use stationarity_residual")
    w_nu = nu.normalized_weights()
    pts, wts = [], []
    for (el, _), wn in zip(nu.entries, w_nu):
        img = el.map.apply_boundary(measure.points)
        pts.append(img)
        wts.append(wn * measure.weights)
    return DiscreteBoundaryMeasure(
        np.concatenate(pts), np.concatenate(wts),
        basepoint=measure.basepoint,
        provenance={"kind": "convolution", "support": len(nu),
                    "source_atoms": int(len(measure.weights))})


def _merge_measure(measure, tol):
    """Collapse atoms closer than tol (plane: by angle) into single atoms."""
    keep = measure.weights > 0.0
    pts, wts = measure.points[keep], measure.weights[keep]
    if measure.dimension == 2:
        ang = np.arctan2(pts[:, 1], pts[:, 0])
        order = np.argsort(ang)
        breaks = np.flatnonzero(np.diff(ang[order]) > tol) + 1
        groups = np.split(order, breaks)
    else:
        key = np.round(pts / tol).astype(np.int64)
        _, inv = np.unique(key, axis=0, return_inverse=True)
        order = np.argsort(inv)
        breaks = np.flatnonzero(np.diff(inv[order])) + 1
        groups = np.split(order, breaks)
    new_pts = np.empty((len(groups), pts.shape[1]))
    new_wts = np.empty(len(groups))
    for i, g in enumerate(groups):
        ww = wts[g]
        new_wts[i] = ww.sum()
        p = (pts[g] * ww[:, None]).sum(axis=0) / max(new_wts[i], 1e-300)
        new_pts[i] = p / np.linalg.norm(p)
    return new_pts, new_wts


def _lipschitz_family(dimension, n_functions, seed=20):
    """Fixed low-Lipschitz test functions cos(a . xi + b), |a| <= 3."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_functions, dimension))
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    a *= (0.5 + 2.5 * rng.random((n_functions, 1))) / norms
    b = rng.uniform(0.0, 2.0 * np.pi, size=n_functions)
    return a, b


class StationarityReport:
    """How far nu * mu sits from mu, with optional shuffled-weight controls."""

    def __init__(self, cap_residual, lipschitz_residual, control_residuals,
                 n_caps, merged_atoms):
        self.cap_residual = float(cap_residual)
        self.lipschitz_residual = float(lipschitz_residual)
        self.control_residuals = np.asarray(control_residuals, dtype=float)
        self.n_caps = int(n_caps)
        self.merged_atoms = int(merged_atoms)

    @property
    def residual(self):
        return max(self.cap_residual, self.lipschitz_residual)

    def controls_exceed(self):
        """How many shuffled-weight controls have a larger cap residual."""
        return int(np.sum(self.control_residuals > self.cap_residual))


def _interval_masses(ang_sorted, cum, lo, hi):
    """Mass of ccw angular intervals [lo, hi] against sorted prefix sums."""
    ia = np.searchsorted(ang_sorted, lo, side="left")
    ib = np.searchsorted(ang_sorted, hi, side="right")
    total = cum[-1]
    return np.where(hi >= lo, cum[ib] - cum[ia], total - (cum[ia] - cum[ib]))


def _pushed_cloud(elements, points):
    """Boundary images of one point set under a batch of elements.

    A point that sits numerically on an element's repelling direction
    has no recoverable image: the time coordinate of its null lift
    cancels to rounding noise.  Such points keep the repelling fixed
    point itself, exact for the aligned atoms that cause this and
    measure-negligible otherwise.
    """
    lifted = np.concatenate([np.ones((len(points), 1)), points], axis=1)
    M = np.stack([e.map.matrix for e in elements])
    img = np.einsum("nij,mj->nmi", M, lifted)
    t_img = img[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        pushed = img[..., 1:] / t_img[..., None]
        pushed /= np.linalg.norm(pushed, axis=-1, keepdims=True)
    bad = (t_img <= 0.0) | ~np.isfinite(pushed).all(axis=-1)
    if np.any(bad):
        rep = -M[:, 0, 1:]
        rep /= np.maximum(np.linalg.norm(rep, axis=1, keepdims=True), 1e-300)
        rows, cols = np.nonzero(bad)
        pushed[rows, cols] = rep[rows]
    return pushed


def stationarity_residual(nu, measure, family=None, n_lipschitz=20,
                          controls=0, rng=None, merge_tol=1e-7,
                          cap_chunk=128):
    """Residual of the stationarity identity against cap masses.

    Cap masses of nu * mu are computed without materializing the product
    cloud: on the circle each cap pulls back through each support
    element to another cap (boundary circles map to boundary circles),
    whose mass is an interval lookup in the sorted atom angles.  The
    Lipschitz part pushes a tolerance-merged copy of mu through the
    support; merging stays honest because the support maps expand only
    inside their exceptional caps, whose mass at the merge scale is
    negligible.  Controls are random weight shuffles evaluated on the
    same pullback masses, so they cost almost nothing extra.
    """
    if measure.dimension != 2:
        return _stationarity_residual_generic(nu, measure, family,
                                              n_lipschitz, controls, rng,
                                              merge_tol)
    if family is None:
        family = test_cap_family(2)
    centers, cos_t = family
    w_nu = nu.normalized_weights()
    n_el = len(nu)

    ang = np.arctan2(measure.points[:, 1], measure.points[:, 0])
    order = np.argsort(ang)
    ang_s = ang[order]
    w_s = measure.weights[order] / measure.total_mass
    cum = np.concatenate([[0.0], np.cumsum(w_s)])

    Minv = np.stack([e.map.matrix for e in nu.elements]).transpose(0, 2, 1)
    Minv = np.ascontiguousarray(Minv)
    Minv[:, 0, 1:] *= -1.0
    Minv[:, 1:, 0] *= -1.0

    cth = np.arctan2(centers[:, 1], centers[:, 0])
    half = np.arccos(np.clip(cos_t, -1.0, 1.0))

    def wrap(x):
        return np.mod(x + np.pi, 2.0 * np.pi) - np.pi

    mu_mass = _interval_masses(ang_s, cum, wrap(cth - half), wrap(cth + half))

    n_caps = len(cos_t)
    if controls:
        control_rng = rng if rng is not None else np.random.default_rng(0)
        perms = np.stack([control_rng.permutation(n_el)
                          for _ in range(controls)])
    nu_caps = np.empty(n_caps)
    ctrl_caps = np.empty((controls, n_caps)) if controls else None
    for lo in range(0, n_caps, cap_chunk):
        hi = min(lo + cap_chunk, n_caps)
        phis = np.stack([cth[lo:hi] - half[lo:hi],
                         cth[lo:hi] + half[lo:hi],
                         cth[lo:hi]], axis=1)
        P = np.stack([np.ones_like(phis), np.cos(phis), np.sin(phis)],
                     axis=-1)                                 # (c, 3, 3)
        img = np.einsum("nij,cpj->ncpi", Minv, P)
        bang = np.arctan2(img[..., 2], img[..., 1])           # (n_el, c, 3)
        a_, b_, c_ = bang[..., 0], bang[..., 1], bang[..., 2]
        two_pi = 2.0 * np.pi
        fwd = np.mod(c_ - a_, two_pi) <= np.mod(b_ - a_, two_pi)
        lo_ang = np.where(fwd, a_, b_)
        hi_ang = np.where(fwd, b_, a_)
        masses = _interval_masses(ang_s, cum, lo_ang, hi_ang)  # (n_el, c)
        nu_caps[lo:hi] = w_nu @ masses
        if controls:
            ctrl_caps[:, lo:hi] = w_nu[perms] @ masses
    cap_res = float(np.max(np.abs(nu_caps - mu_mass)))
    ctrl_res = (np.max(np.abs(ctrl_caps - mu_mass[None, :]), axis=1)
                if controls else np.zeros(0))

    pts_m, wts_m = _merge_measure(measure, merge_tol)
    wts_m = wts_m / wts_m.sum()
    a, b = _lipschitz_family(2, n_lipschitz)
    mu_int = np.cos(measure.points @ a.T + b).T @ \
        (measure.weights / measure.total_mass)
    push_int = np.zeros(n_lipschitz)
    for lo in range(0, n_el, 2000):
        hi = min(lo + 2000, n_el)
        pushed = _pushed_cloud(nu.elements[lo:hi], pts_m)
        vals = np.cos(np.tensordot(pushed, a.T, axes=1) + b)
        push_int += np.einsum("n,nmk,m->k", w_nu[lo:hi], vals, wts_m)
    lip_res = float(np.max(np.abs(push_int - mu_int)))
    return StationarityReport(cap_res, lip_res, ctrl_res, n_caps, len(wts_m))


def _stationarity_residual_generic(nu, measure, family, n_lipschitz,
                                   controls, rng, merge_tol):
    """Direct pushforward route for spheres without an interval order."""
    if family is None:
        family = test_cap_family(measure.dimension)
    centers, cos_t = family
    pts_m, wts_m = _merge_measure(measure, merge_tol)
    wts_m = wts_m / wts_m.sum()
    w_nu = nu.normalized_weights()
    if len(nu) * len(cos_t) > 50_000_000:
        raise BudgetError(
            "cap matrix too large; shrink the support or the cap family")
    w_full = measure.weights / measure.total_mass
    mu_mass = np.zeros(len(cos_t))
    for lo in range(0, len(cos_t), 256):
        dots = measure.points @ centers[lo:lo + 256].T
        mu_mass[lo:lo + 256] = w_full @ (dots >= cos_t[lo:lo + 256])
    per_el = np.empty((len(nu), len(cos_t)))
    a, b = _lipschitz_family(measure.dimension, n_lipschitz)
    mu_int = np.cos(measure.points @ a.T + b).T @ w_full
    push_int = np.zeros(n_lipschitz)
    for lo in range(0, len(nu), 1000):
        hi = min(lo + 1000, len(nu))
        pushed = _pushed_cloud(nu.elements[lo:hi], pts_m)
        for cl in range(0, len(cos_t), 64):
            dots = np.tensordot(pushed, centers[cl:cl + 64].T, axes=1)
            per_el[lo:hi, cl:cl + 64] = np.einsum(
                "nmc,m->nc", (dots >= cos_t[cl:cl + 64]).astype(float),
                wts_m)
        vals = np.cos(np.tensordot(pushed, a.T, axes=1) + b)
        push_int += np.einsum("n,nmk,m->k", w_nu[lo:hi], vals, wts_m)
    nu_caps = w_nu @ per_el
    cap_res = float(np.max(np.abs(nu_caps - mu_mass)))
    if controls:
        control_rng = rng if rng is not None else np.random.default_rng(0)
        ctrl = [float(np.max(np.abs(
            w_nu[control_rng.permutation(len(nu))] @ per_el - mu_mass)))
            for _ in range(controls)]
    else:
        ctrl = []
    lip_res = float(np.max(np.abs(push_int - mu_int)))
    return StationarityReport(cap_res, lip_res, np.asarray(ctrl),
                              len(cos_t), len(wts_m))


# -- exponential moment -------------------------------------------------------


class MomentReport:
    """Annulus partial sums of |gamma|^eps nu(gamma) and the ratio test."""

    def __init__(self, eps, total, partial_sums, ratio, eps_star):
        self.eps = float(eps)
        self.total = float(total)
        self.partial_sums = np.asarray(partial_sums, dtype=float)
        self.ratio = float(ratio)
        self.eps_star = float(eps_star)

    @property
    def converges(self):
        return self.ratio < 1.0


def exponential_moment(nu, eps):
    """Moment sum_gamma |gamma|^eps nu-hat(gamma), grouped by annulus.

    |gamma| is the operator-norm scale e^kappa of the Lorentz matrix
    and nu-hat the normalized weights, so eps = 0 returns exactly 1.
    The ratio test value (1 - beta/A^2) e^{4 C eps} < 1 guarantees the
    untruncated series converges; eps_star is where it crosses 1.
    """
    beta = nu.constants["beta"]
    A = nu.constants["A"]
    C = nu.constants["C_Gamma"]
    if not len(nu):
        raise ConfigurationError("empty support has no moment")
    n_top = max(nu.annulus_of(e) for e in nu.elements)
    w_hat = nu.normalized_weights()
    partial = np.zeros(n_top + 1)
    for (el, _), w in zip(nu.entries, w_hat):
        partial[nu.annulus_of(el)] += w * np.exp(eps * el.kappa)
    contraction = 1.0 - beta / A ** 2
    ratio = contraction * np.exp(4.0 * C * eps)
    eps_star = -np.log(contraction) / (4.0 * C)
    return MomentReport(eps, float(partial.sum()), partial[1:], ratio,
                        eps_star)


# -- support generation -------------------------------------------------------


class GenerationReport:
    """Witnesses that every letter lies in the group of the support."""

    def __init__(self, witnesses, generates):
        self.witnesses = dict(witnesses)
        self.generates = bool(generates)


def support_generates(nu, system):
    """Check each letter is reachable from at most two support elements.

    A letter l is witnessed either directly (its word is in the support)
    or as w^{-1} (w l) with both w and the reduced w l in the support.
    """
    support = {e.word for e in nu.elements}
    witnesses = {}
    ok = True
    for l in system.letters:
        if (l,) in support:
            witnesses[l] = ((l,),)
            continue
        found = None
        for w in sorted(support, key=lambda t: (len(t), t)):
            prod = reduce_word(w + (l,))
            if prod in support:
                found = (invert_word(w), prod)
                break
        witnesses[l] = found
        if found is None:
            ok = False
    return GenerationReport(witnesses, ok)
