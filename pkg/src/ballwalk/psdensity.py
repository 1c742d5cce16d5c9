"""Discrete boundary measures: orbital construction, transport, shadows.

The measures here are finite atomic approximations of the conformal
density family mu_x attached to a Schottky system and a normalized
potential: atoms sit at orbit directions, weights follow the weighted
orbital series, transport between basepoints multiplies in the cocycle
exponential, and shadow caps provide the mass comparisons the rest of
the package relies on.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import hyperboloid as hb
from .errors import (ConfigurationError, DomainError,
                     InsufficientDepthError, NumericError)
from .group import shadow_visual_radius
from .potential import (cocycle_chain, element_log_weights, gibbs_cocycle,
                        line_integral_lifted)

DEDUPE_TOL = 1e-10
S_OFFSET_DEFAULT = 0.02


# -- the measure type -----------------------------------------------------------


@dataclass
class DiscreteBoundaryMeasure:
    """Finite atomic measure on the boundary sphere.

    points are unit rows (m, d); weights are nonnegative; basepoint is
    the interior point the measure is viewed from; provenance is a
    free-form dict carried through every construction for reporting.
    """

    points: np.ndarray
    weights: np.ndarray
    basepoint: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.points) != len(self.weights):
            raise ConfigurationError(
                f"{len(self.points)} atoms but {len(self.weights)} weights")
        if np.any(self.weights < 0.0):
            raise ConfigurationError("weights must be nonnegative")
        norms = np.linalg.norm(self.points, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-8):
            raise ConfigurationError("atoms must be unit boundary vectors")
        if self.basepoint is None:
            self.basepoint = np.zeros(self.points.shape[1])
        self.basepoint = np.asarray(self.basepoint, dtype=float)

    def __len__(self):
        return len(self.weights)

    @property
    def dimension(self):
        return self.points.shape[1]

    @property
    def total_mass(self):
        return float(np.sum(self.weights))

    def normalized(self):
        mass = self.total_mass
        if mass <= 0.0:
            raise NumericError("cannot normalize a zero measure")
        return DiscreteBoundaryMeasure(self.points, self.weights / mass,
                                       self.basepoint, dict(self.provenance))

    def integrate(self, f):
        """Sum of f against the atoms; f is a callable or a value array."""
        vals = f(self.points) if callable(f) else np.asarray(f, dtype=float)
        return float(np.sum(vals * self.weights))

    def cap_mass(self, center, cos_threshold):
        """Mass of the cap(s) {xi : xi . center >= cos_threshold}.

        center may be a single direction or an array (k, d);
        cos_threshold broadcasts against the leading axis.
        """
        center = np.asarray(center, dtype=float)
        single = center.ndim == 1
        centers = np.atleast_2d(center)
        cos_t = np.broadcast_to(np.asarray(cos_threshold, dtype=float),
                                (len(centers),))
        out = np.empty(len(centers))
        chunk = max(1, 20_000_000 // max(len(self.points), 1))
        for i in range(0, len(centers), chunk):
            dots = self.points @ centers[i:i + chunk].T
            out[i:i + chunk] = self.weights @ (dots >= cos_t[None, i:i + chunk])
        return float(out[0]) if single else out

    def deduped(self, tol=DEDUPE_TOL):
        """Merge atoms closer than tol (sum their weights).

        Distinct long words can land at numerically identical boundary
        points; downstream mass comparisons want them fused.
        """
        if len(self) <= 1:
            return self
        order = np.lexsort(self.points.T[::-1])
        pts, wts = self.points[order], self.weights[order]
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        new_group = np.concatenate([[True], gaps > tol])
        idx = np.cumsum(new_group) - 1
        merged_w = np.zeros(idx[-1] + 1)
        np.add.at(merged_w, idx, wts)
        merged_p = pts[new_group]
        merged_p /= np.linalg.norm(merged_p, axis=1, keepdims=True)
        return DiscreteBoundaryMeasure(merged_p, merged_w, self.basepoint,
                                       dict(self.provenance))

    # -- serialization ----------------------------------------------------------

    def to_csv(self, path):
        names = ["x", "y", "z", "w"][:self.dimension]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names + ["weight"])
            for p, w in zip(self.points, self.weights):
                writer.writerow([repr(float(c)) for c in p]
                                + [repr(float(w))])

    @classmethod
    def from_csv(cls, path, basepoint=None, provenance=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][-1] != "weight":
            raise ConfigurationError(f"{path}: expected a trailing weight "
                                     "column")
        data = np.array([[float(c) for c in row] for row in rows[1:]])
        if data.ndim != 2 or data.shape[1] < 3:
            raise ConfigurationError(f"{path}: expected x, y[, z], weight")
        return cls(data[:, :-1], data[:, -1], basepoint,
                   provenance or {"kind": "csv", "path": str(path)})

    def to_json(self, path):
        payload = {
            "dimension": self.dimension,
            "basepoint": [float(c) for c in self.basepoint],
            "provenance": self.provenance,
            "points": [[float(c) for c in p] for p in self.points],
            "weights": [float(w) for w in self.weights],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(np.array(payload["points"], dtype=float),
                   np.array(payload["weights"], dtype=float),
                   np.array(payload["basepoint"], dtype=float),
                   payload.get("provenance", {}))


def pushforward(gamma, measure):
    """Atom transport: atoms move under the boundary action, weights stay.

    The basepoint moves along; mass is preserved exactly.
    """
    return DiscreteBoundaryMeasure(
        gamma.apply_boundary(measure.points), measure.weights.copy(),
        gamma.apply(measure.basepoint),
        {"kind": "pushforward", "base": measure.provenance})


# -- the orbital construction ---------------------------------------------------


def patterson_measure(enumeration, potential, s_offset=S_OFFSET_DEFAULT,
                      window=None, taper="hann", step=0.01,
                      log_weights=None):
    """Weighted orbital measure: atoms at orbit directions gamma(o)/|.|,
    weights proportional to exp(int_o^{gamma o} (F - s_offset)).

    The potential is expected normalized (growth exponent near zero);
    the small subcritical shift s_offset keeps the finite-depth series
    stable and is recorded in the provenance.  Atoms are deduplicated
    and the result is a probability measure ordered by word.
    log_weights, when given, replaces the per-element quadratures with
    precomputed values of int_o^{gamma o} F, one per nontrivial
    enumerated element in enumeration order; chained evaluations make
    these cheap for deep enumerations.

    window=None sums the whole enumerated ball.  window=Delta keeps only
    kappa in (depth - Delta, depth], smoothly tapered (taper="hann";
    "hard" for a sharp cut).  Ball sums stack spikes at the letter fixed
    points: the orbit directions of gamma^k approach them at rate
    e^{-2 kappa}, far inside the cylinder scale e^{-kappa}, so every
    scale's mass piles onto one point and cap masses there overshoot by
    a factor that grows with word length.  An annulus represents each
    boundary scale once and restores the expected cap-mass regularity.
    """
    if s_offset < 0.0:
        raise ConfigurationError("s_offset must be nonnegative")
    elements = [e for e in enumeration.elements if len(e.word) > 0]
    if not elements:
        raise InsufficientDepthError("no nontrivial elements enumerated")
    if log_weights is not None:
        log_weights = np.asarray(log_weights, dtype=float)
        if len(log_weights) != len(elements):
            raise ConfigurationError(
                "log_weights must match the nontrivial enumerated elements")
    kappas = np.array([e.kappa for e in elements])
    log_taper = np.zeros(len(elements))
    if window is not None:
        if window <= 0.0:
            raise ConfigurationError("window must be positive")
        u = (enumeration.kappa_max - kappas) / float(window)
        if taper == "hann":
            t = np.where((u >= 0.0) & (u < 1.0),
                         0.5 - 0.5 * np.cos(2.0 * np.pi * u), 0.0)
        elif taper == "hard":
            t = ((u >= 0.0) & (u < 1.0)).astype(float)
        else:
            raise ConfigurationError(f"unknown taper {taper!r}")
        with np.errstate(divide="ignore"):
            log_taper = np.log(t)
        inside = np.isfinite(log_taper)
        if not np.any(inside):
            raise InsufficientDepthError("window contains no elements")
        elements = [e for e, k in zip(elements, inside) if k]
        kappas = kappas[inside]
        log_taper = log_taper[inside]
        if log_weights is not None:
            log_weights = log_weights[inside]
    cols = np.array([e.map.matrix[:, 0] for e in elements])
    if log_weights is not None:
        logw = log_weights.copy()
    else:
        logw = element_log_weights(enumeration.system, elements, potential,
                                   step=step)
    logw += log_taper - s_offset * kappas
    top = float(np.max(logw))
    if not np.isfinite(top):
        raise NumericError("orbital weights underflow; increase s_offset "
                           "or reduce the depth")
    weights = np.exp(logw - top)
    points = cols[:, 1:] / cols[:, :1]
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    measure = DiscreteBoundaryMeasure(
        points, weights,
        provenance={"kind": "patterson",
                    "depth": float(enumeration.kappa_max),
                    "s_offset": float(s_offset),
                    "window": None if window is None else float(window),
                    "n_atoms": len(elements)})
    return measure.deduped().normalized()


def transport_density(measure, y, potential, **cocycle_kwargs):
    """Move the basepoint: weights multiply by exp(-C_xi(y, basepoint)).

    The potential is expected normalized.  Total mass is not rescaled;
    the conformal family is only projectively normalized.
    """
    y = np.asarray(y, dtype=float)
    cv = gibbs_cocycle(potential, measure.points, y, measure.basepoint,
                       **cocycle_kwargs)
    logs = -np.atleast_1d(cv.value)
    if not np.all(np.isfinite(logs)):
        bad = int(np.argmax(~np.isfinite(logs)))
        raise NumericError(
            f"cocycle diverged at atom {bad} = {measure.points[bad]}")
    return DiscreteBoundaryMeasure(
        measure.points.copy(), measure.weights * np.exp(logs), y,
        {"kind": "transported", "to": [float(c) for c in y],
         "defect": cv.defect, "base": measure.provenance})


def transport_to_orbit(measure, system, word, potential):
    """Transport to gamma(basepoint) along the letter chain of the word.

    Equivalent to transport_density at y = gamma(o) but evaluated
    through the per-letter cocycle split, which stays accurate for
    words far beyond the direct quadrature's depth range.  The letter
    split anchors at the origin, so the measure must be based there.
    """
    if float(np.linalg.norm(measure.basepoint)) > 1e-12:
        raise DomainError(
            "letter-chain transport needs an origin-based measure; "
            "use transport_density for other basepoints")
    maps = [system.letter_map(l) for l in word]
    cv = cocycle_chain(potential, maps, measure.points)
    logs = np.atleast_1d(cv.value)
    gamma = system.word_map(word)
    return DiscreteBoundaryMeasure(
        measure.points.copy(), measure.weights * np.exp(logs),
        gamma.apply(measure.basepoint),
        {"kind": "transported", "word": list(word), "defect": cv.defect,
         "base": measure.provenance})


# -- shadows --------------------------------------------------------------------


@dataclass
class ShadowCap:
    """Boundary shadow of a ball seen from an interior point.

    center is the boundary endpoint of the ray basepoint -> ball center;
    visual_radius is (1/2) sinh(R)/sinh(d) in the visual metric at the
    basepoint; cos_angle is the exact cosine of the half-angle of the
    shadow cone (law of sines: sin = sinh(R)/sinh(d)), which membership
    tests use.  whole_sphere is flagged when d <= R.
    """

    center: np.ndarray
    visual_radius: float
    cos_angle: float
    basepoint: np.ndarray
    whole_sphere: bool = False
    source: object = None

    def contains(self, points):
        points = np.asarray(points, dtype=float)
        if self.whole_sphere:
            return np.ones(points.shape[:-1], dtype=bool)
        if np.any(self.basepoint != 0.0):
            X = hb.lift(self.basepoint)
            vc = hb.ray_to_boundary(X, self.center)
            vp = hb.ray_to_boundary(X[None, :], points)
            return hb.minkowski_dot(vp, vc[None, :]) >= self.cos_angle
        return points @ self.center >= self.cos_angle


def shadow_cap(x, y, R):
    """Shadow of the ball B(y, R) seen from the interior point x.

    x and y are ball points with d(x, y) > R for a proper cap; d <= R
    returns a whole-sphere cap (flagged, not an error).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    X, Y = hb.lift(x), hb.lift(y)
    V, d = hb.segment(X, Y)
    d = float(d)
    if d <= R:
        center = np.zeros(len(x))
        center[0] = 1.0
        return ShadowCap(center=center, visual_radius=1.0, cos_angle=-1.0,
                         basepoint=x, whole_sphere=True, source=y)
    sin_angle = min(np.sinh(R) / np.sinh(d), 1.0)
    return ShadowCap(center=hb.project_null(X + V),
                     visual_radius=float(shadow_visual_radius(d, R)),
                     cos_angle=float(np.sqrt(1.0 - sin_angle ** 2)),
                     basepoint=x, source=y)


def element_shadow(element, R):
    """Shadow of B(gamma o, R) from the origin, via the Lorentz column.

    The deep endpoint never appears in ball coordinates: the center is
    the element's attracting direction and the angles come from kappa.
    """
    d = element.kappa
    dim = element.map.matrix.shape[0] - 1
    if d <= R:
        center = np.zeros(dim)
        center[0] = 1.0
        return ShadowCap(center=center, visual_radius=1.0, cos_angle=-1.0,
                         basepoint=np.zeros(dim), whole_sphere=True,
                         source=element)
    sin_angle = min(np.sinh(R) / np.sinh(d), 1.0)
    return ShadowCap(center=element.map.attractor(),
                     visual_radius=float(shadow_visual_radius(d, R)),
                     cos_angle=float(np.sqrt(1.0 - sin_angle ** 2)),
                     basepoint=np.zeros(dim), source=element)


# -- shadow-lemma and regularity reports ----------------------------------------


@dataclass
class ShadowLemmaReport:
    """Mass-to-weight ratios of element shadows, grouped by word length."""

    lengths: np.ndarray
    ratios: np.ndarray
    band_by_length: dict
    spread: float
    radius: float

    def passes(self, factor=100.0):
        return self.spread <= factor

    def non_widening(self, low=(2, 3, 4), high=(4, 5, 6), slack=1.1):
        """True when the deep-word ratio band is no wider than the
        shallow-word band, up to a multiplicative slack.

        The slack absorbs finite-depth estimator noise (healthy bands
        sit within a few percent of flat); the failure mode this guards
        against widens the band by an order of magnitude per word
        length, far outside any reasonable slack.
        """
        lo = [r for l, r in zip(self.lengths, self.ratios) if l in low]
        hi = [r for l, r in zip(self.lengths, self.ratios) if l in high]
        if not lo or not hi:
            raise InsufficientDepthError("length groups not represented")
        return (max(hi) / min(hi)) <= slack * (max(lo) / min(lo))


def _element_log_weights(elements, potential, step=0.01):
    cols = np.array([e.map.matrix[:, 0] for e in elements])
    o = np.zeros(cols.shape[1])
    o[0] = 1.0
    return line_integral_lifted(potential, o[None, :], cols, step=step)


def shadow_lemma_report(measure, elements, C, potential, system=None,
                        step=0.01):
    """Ratios measure(shadow of gamma) / exp(int_o^{gamma o} F).

    The potential is expected normalized; the measure should be built
    at depth exceeding the deepest element by a couple of annuli, or
    the caps resolve no atoms and the report aborts.  Pass the system
    when the potential has a finite stable evaluation depth and the
    elements go deeper: the weights then come from the prefix-chart
    quadrature instead of raw segments.
    """
    elements = list(elements)
    if not elements:
        raise ConfigurationError("no elements to report on")
    if system is not None:
        logw = element_log_weights(system, elements, potential, step=step)
    else:
        logw = _element_log_weights(elements, potential, step=step)
    lengths, ratios = [], []
    for e, lw in zip(elements, logw):
        cap = element_shadow(e, C)
        mass = measure.cap_mass(cap.center, cap.cos_angle) \
            if not cap.whole_sphere else measure.total_mass
        if mass <= 0.0:
            raise InsufficientDepthError(
                f"empty shadow for word {e.word}; deepen the measure")
        lengths.append(len(e.word))
        ratios.append(mass / np.exp(lw))
    lengths = np.array(lengths)
    ratios = np.array(ratios)
    band = {}
    for l in sorted(set(lengths.tolist())):
        rs = ratios[lengths == l]
        band[l] = float(np.max(rs) / np.min(rs))
    return ShadowLemmaReport(lengths=lengths, ratios=ratios,
                             band_by_length=band,
                             spread=float(np.max(ratios) / np.min(ratios)),
                             radius=float(C))


@dataclass
class RegularityEstimate:
    """Envelope fit of cap masses against radius."""

    exponent: float
    log_constant: float
    radii: np.ndarray
    sup_masses: np.ndarray


def regularity_exponent(measure, n_scales=12, n_centers=256, rng=None,
                        r_max=0.25):
    """Upper-regularity exponent: fit of log sup-cap-mass vs log radius.

    Caps are balls in the visual metric at the basepoint (radius r means
    cos threshold 1 - 2 r^2).  Centers are the heaviest atoms plus a
    weight-biased sample.  Scales where the sup mass has collapsed onto
    a single atom are excluded from the fit when enough scales survive,
    so atomic floors do not drag the slope down.  For self-similar limit
    sets the sup-mass curve is a staircase with period log(1/ratio) in
    log r; the default range spans a few periods so the fitted slope
    averages over the phase.
    """
    if len(measure) < 4:
        raise InsufficientDepthError("too few atoms for a regularity fit")
    rng = np.random.default_rng(rng)
    w = measure.weights / measure.total_mass
    heavy = np.argsort(w)[-min(64, len(w)):]
    picks = rng.choice(len(w), size=min(n_centers, len(w)), p=w)
    centers = measure.points[np.unique(np.concatenate([heavy, picks]))]
    radii = r_max * 2.0 ** (-np.arange(n_scales, dtype=float))
    sup_masses = np.empty(n_scales)
    for k, r in enumerate(radii):
        masses = measure.cap_mass(centers, 1.0 - 2.0 * r * r)
        sup_masses[k] = np.max(masses)
    w_max = float(np.max(w))
    keep = sup_masses > 1.5 * w_max
    if np.count_nonzero(keep) < 4:
        keep = np.ones(n_scales, dtype=bool)
    if np.count_nonzero(keep) < 4:
        raise InsufficientDepthError("fewer than 4 scales populated")
    coeff = np.polyfit(np.log(radii[keep]), np.log(sup_masses[keep]), 1)
    return RegularityEstimate(exponent=float(coeff[0]),
                              log_constant=float(coeff[1]),
                              radii=radii, sup_masses=sup_masses)


# -- cap-mass metric and consistency checks -------------------------------------


def test_cap_family(dimension, n_centers=512, n_radii=4, seed=11):
    """The fixed reproducible cap family used as a weak-* proxy metric.

    n_centers uniform directions from a pinned seed, each at n_radii
    dyadic visual radii 1/2, 1/4, ...; returns (centers, cos_thresholds)
    with shapes (n_centers*n_radii, d) and (n_centers*n_radii,).
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_centers, dimension))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    radii = 2.0 ** (-np.arange(1, n_radii + 1, dtype=float))
    cos_t = 1.0 - 2.0 * radii ** 2
    centers = np.repeat(centers, n_radii, axis=0)
    return centers, np.tile(cos_t, n_centers)


def cap_mass_distance(m1, m2, family=None):
    """Max difference of cap masses over the fixed test family."""
    if m1.dimension != m2.dimension:
        raise DomainError("measures live on different spheres")
    if family is None:
        family = test_cap_family(m1.dimension)
    centers, cos_t = family
    return float(np.max(np.abs(m1.cap_mass(centers, cos_t)
                               - m2.cap_mass(centers, cos_t))))


@dataclass
class ConsistencyReport:
    """Transport/pushforward commutation errors over sampled pairs."""

    commutation: np.ndarray
    roundtrip: np.ndarray
    words: list

    @property
    def max_commutation(self):
        return float(np.max(self.commutation))

    @property
    def max_roundtrip(self):
        return float(np.max(self.roundtrip))


def conformal_consistency_report(system, measure, potential, n_pairs=50,
                                 max_word_length=3, y_radius=0.5, rng=None):
    """Check the two defining properties of the conformal family.

    For random (gamma, y): transporting to y then pushing by gamma must
    equal pushing by gamma then transporting to gamma(y) (cap-mass
    distance over the fixed family), and transporting o -> y -> o must
    return every atom weight (max relative roundtrip error).
    """
    from .group import random_reduced_words

    rng = np.random.default_rng(rng)
    family = test_cap_family(measure.dimension)
    norm = measure.normalized()
    comm, rt, words = [], [], []
    for _ in range(n_pairs):
        k = int(rng.integers(1, max_word_length + 1))
        word = tuple(int(l) for l in
                     random_reduced_words(system, k, 1, rng)[0])
        gamma = system.word_map(word)
        y = _random_interior_point(measure.dimension, y_radius, rng)
        at_y = transport_density(norm, y, potential)
        path_a = pushforward(gamma, at_y)
        path_b = transport_density(pushforward(gamma, norm),
                                   gamma.apply(y), potential)
        comm.append(cap_mass_distance(path_a, path_b, family))
        back = transport_density(at_y, np.zeros(measure.dimension),
                                 potential)
        rt.append(float(np.max(np.abs(back.weights / norm.weights - 1.0))))
        words.append(word)
    return ConsistencyReport(commutation=np.array(comm),
                             roundtrip=np.array(rt), words=words)


def _random_interior_point(dimension, radius, rng):
    v = rng.normal(size=dimension)
    v /= np.linalg.norm(v)
    return v * radius * rng.uniform() ** (1.0 / dimension)


def support_fraction(measure, reference_points, radius):
    """Fraction of mass within the given Euclidean distance of the
    reference point set (a limit-set sample)."""
    from scipy.spatial import cKDTree

    tree = cKDTree(np.atleast_2d(reference_points))
    dists, _ = tree.query(measure.points)
    near = dists <= radius
    return float(np.sum(measure.weights[near])) / measure.total_mass
