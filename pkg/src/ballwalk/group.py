"""Schottky subgroups of the Moebius group of the unit ball.

A Schottky system is a finite family of hyperbolic generators together
with disjoint boundary caps realizing a ping-pong configuration: each
letter maps the complement of its inverse's cap strictly inside its own
cap.  This module builds such systems, validates the ping-pong geometry,
enumerates group elements by displacement, stratifies them into annuli,
samples the limit set and the convex hull, and estimates the critical
exponent of weighted Poincare series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BudgetError,
    ConfigurationError,
    CoveringError,
    DomainError,
    InsufficientDepthError,
    NumericError,
    PingPongError,
)
from .moebius import (
    MoebiusMap,
    boundary_grid,
    hyperbolic_translation,
    identity,
    rotation_map,
    visual_distance_origin,
)
from . import hyperboloid as hb


def _axis_boundary_shift(beta: float, s: float) -> float:
    """Image of the axis coordinate s = xi . u under the boost tau_{beta u}.

    Restricted to the coordinate along the translation axis, the boost acts
    on [-1, 1] as a Moebius map of the interval fixing the endpoints.
    """
    return ((1.0 + beta * beta) * s + 2.0 * beta) / (2.0 * beta * s + 1.0 + beta * beta)


@dataclass(frozen=True)
class BoundaryCap:
    """Closed spherical cap {xi : xi . center >= cos_threshold}."""

    center: np.ndarray
    cos_threshold: float

    @property
    def angular_radius(self) -> float:
        return float(np.arccos(np.clip(self.cos_threshold, -1.0, 1.0)))

    @property
    def chord_radius(self) -> float:
        """Euclidean radius of the cap boundary as seen from the center."""
        return float(np.sqrt(max(2.0 * (1.0 - self.cos_threshold), 0.0)))

    @property
    def gap_radius(self) -> float:
        return float(1.0 - self.cos_threshold)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.center >= self.cos_threshold - 1e-15


@dataclass(frozen=True)
class GroupElement:
    """A group element given by a reduced word in the generators.

    The word is a tuple of nonzero signed integers: letter +i is the i-th
    generator, -i its inverse, applied right to left.
    """

    word: tuple
    map: MoebiusMap
    kappa: float

    def __len__(self) -> int:
        return len(self.word)


def invert_word(word) -> tuple:
    return tuple(-l for l in reversed(word))


def reduce_word(word) -> tuple:
    """Cancel adjacent inverse letters until the word is reduced."""
    out = []
    for l in word:
        if l == 0:
            raise ConfigurationError("letters must be nonzero signed integers")
        if out and out[-1] == -l:
            out.pop()
        else:
            out.append(int(l))
    return tuple(out)


class SchottkySystem:
    """A ping-pong family of hyperbolic Moebius maps of the ball.

    Parameters
    ----------
    generators : list of MoebiusMap
        Hyperbolic elements; generator i is addressed by letter i + 1.
    cos_threshold : float
        Common cap parameter: the cap of a letter is the set of boundary
        points whose inner product with the letter's attractor is at
        least this value.
    validate : bool
        Run the ping-pong checks at construction time.
    """

    def __init__(self, generators, cos_threshold=None, validate=True,
                 n_validate_samples=4096, margin=0.02):
        if not generators:
            raise ConfigurationError("need at least one generator")
        self.generators = list(generators)
        self.dimension = self.generators[0].dimension
        for g in self.generators:
            if g.dimension != self.dimension:
                raise ConfigurationError("generators must share a dimension")
        self.k = len(self.generators)
        self.letters = tuple(range(1, self.k + 1)) + tuple(range(-1, -self.k - 1, -1))
        self._letter_maps = {}
        for i, g in enumerate(self.generators):
            self._letter_maps[i + 1] = g
            self._letter_maps[-(i + 1)] = g.inverse()
        if cos_threshold is None:
            cos_threshold = self._default_cos_threshold()
        self.cos_threshold = float(cos_threshold)
        self.caps = {
            l: BoundaryCap(self._letter_maps[l].attractor(), self.cos_threshold)
            for l in self.letters
        }
        self.C_Gamma = None
        if validate:
            self.validate_ping_pong(n_samples=n_validate_samples, margin=margin)

    # -- construction helpers -------------------------------------------

    def _default_cos_threshold(self) -> float:
        centers = np.array([self._letter_maps[l].attractor() for l in self.letters])
        cosines = centers @ centers.T
        np.fill_diagonal(cosines, -1.0)
        min_angle = float(np.arccos(np.clip(np.max(cosines), -1.0, 1.0)))
        # Caps of common angular radius t are pairwise disjoint when
        # 2 t is below the least angle between centers; keep 10% slack.
        threshold = float(np.cos(0.45 * min_angle))
        betas = [np.linalg.norm(g.translation_part()) for g in self.generators]
        if threshold >= min(betas):
            raise PingPongError(
                "no admissible cap size: attractors too close for the "
                "given translation lengths"
            )
        return threshold

    def letter_map(self, letter: int) -> MoebiusMap:
        try:
            return self._letter_maps[letter]
        except KeyError:
            raise ConfigurationError(f"unknown letter {letter!r}") from None

    def word_map(self, word) -> MoebiusMap:
        mat = np.eye(self.dimension + 1)
        for l in word:
            mat = mat @ self.letter_map(l).matrix
        return MoebiusMap(mat)

    def element(self, word) -> GroupElement:
        word = tuple(int(l) for l in word)
        if word != reduce_word(word):
            raise ConfigurationError(f"word {word} is not reduced")
        m = self.word_map(word)
        return GroupElement(word=word, map=m, kappa=m.displacement())

    # -- ping-pong validation -------------------------------------------

    def validate_ping_pong(self, n_samples=4096, margin=0.02):
        """Check disjointness of the caps and the mapping property.

        Uses the exact angular geometry for disjointness and a dense
        boundary sample for the mapping inclusion.  Raises PingPongError
        with a description of the first violated condition.
        """
        theta = float(np.arccos(np.clip(self.cos_threshold, -1.0, 1.0)))
        letters = self.letters
        centers = np.array([self.caps[l].center for l in letters])
        cosines = centers @ centers.T
        for a in range(len(letters)):
            for b in range(a + 1, len(letters)):
                sep = float(np.arccos(np.clip(cosines[a, b], -1.0, 1.0)))
                if sep <= 2.0 * theta + margin:
                    raise PingPongError(
                        f"caps of letters {letters[a]} and {letters[b]} are "
                        f"not disjoint: center separation {sep:.4f} <= "
                        f"2*{theta:.4f} + {margin}"
                    )
        grid = boundary_grid(self.dimension, n_samples)
        worst = -np.inf
        for l in letters:
            outside = ~self.caps[-l].contains(grid)
            if not np.any(outside):
                raise PingPongError(f"cap of letter {-l} swallows the sphere")
            images = self.letter_map(l).apply_boundary(grid[outside])
            cos_img = images @ self.caps[l].center
            deficit = float(np.min(cos_img)) - self.cos_threshold
            worst = max(worst, -deficit)
            if deficit <= margin * (1.0 - self.cos_threshold):
                raise PingPongError(
                    f"letter {l} does not map the complement of cap {-l} "
                    f"strictly into its own cap (deficit {deficit:.3e})"
                )
        self._pingpong_margin = -worst
        return True

    # -- serialization ---------------------------------------------------

    def to_config(self) -> dict:
        gens = []
        for g in self.generators:
            b = g.translation_part()
            norm = float(np.linalg.norm(b))
            entry = {
                "axis": (b / norm).tolist(),
                "norm": norm,
            }
            R = g.rotation_part()
            if not np.allclose(R, np.eye(self.dimension), atol=1e-12):
                entry["rotation"] = R.tolist()
            gens.append(entry)
        cfg = {
            "dimension": self.dimension,
            "generators": gens,
            "cos_threshold": self.cos_threshold,
        }
        if self.C_Gamma is not None:
            cfg["C_Gamma"] = float(self.C_Gamma)
        return cfg

    @classmethod
    def from_config(cls, cfg, validate=True):
        if isinstance(cfg, str):
            with open(cfg) as fh:
                cfg = json.load(fh)
        d = int(cfg.get("dimension", 2))
        gens = []
        for entry in cfg["generators"]:
            axis = np.asarray(entry["axis"], dtype=float)
            if axis.shape != (d,):
                raise ConfigurationError(
                    f"axis {entry['axis']} does not have dimension {d}"
                )
            nrm = np.linalg.norm(axis)
            if nrm == 0:
                raise ConfigurationError("axis must be a nonzero vector")
            axis = axis / nrm
            norm = float(entry["norm"])
            if not 0.0 < norm < 1.0:
                raise ConfigurationError(
                    f"generator norm must lie in (0, 1), got {norm}"
                )
            g = hyperbolic_translation(norm * axis)
            if "rotation" in entry:
                R = np.asarray(entry["rotation"], dtype=float)
                g = g.compose(rotation_map(R))
            gens.append(g)
        system = cls(gens, cos_threshold=cfg.get("cos_threshold"),
                     validate=validate)
        if "C_Gamma" in cfg:
            system.C_Gamma = float(cfg["C_Gamma"])
        return system


# -- enumeration ----------------------------------------------------------


@dataclass
class Enumeration:
    """All nontrivial reduced words with displacement at most kappa_max."""

    system: SchottkySystem
    kappa_max: float
    elements: list = field(default_factory=list)
    min_growth: float = np.inf

    def __len__(self) -> int:
        return len(self.elements)

    def kappas(self) -> np.ndarray:
        return np.array([e.kappa for e in self.elements])

    def words_of_length(self, n: int):
        return [e for e in self.elements if len(e.word) == n]


def enumerate_elements(system, kappa_max, budget=2_000_000,
                       include_identity=False) -> Enumeration:
    """Breadth-first enumeration of reduced words by displacement.

    Words grow by appending letters on the right; a child is kept when its
    displacement does not exceed kappa_max.  Displacement must grow along
    reduced words for the pruning to be exhaustive, which holds for
    validated ping-pong systems; the realized growth increments are checked
    and a NumericError is raised if one is negative.
    """
    if kappa_max < 0:
        raise DomainError("kappa_max must be nonnegative")
    d = system.dimension
    letters = system.letters
    letter_mats = np.array([system.letter_map(l).matrix for l in letters])
    inverse_index = {l: letters.index(-l) for l in letters}

    frontier_mats = np.eye(d + 1)[None, :, :]
    frontier_words = [()]
    frontier_kappa = np.zeros(1)
    frontier_last = np.array([-1])  # index into letters, -1 for the empty word

    elements = []
    min_growth = np.inf
    total = 0
    while len(frontier_words) > 0:
        new_mats = []
        new_words = []
        new_kappa = []
        new_last = []
        for j, l in enumerate(letters):
            ok = frontier_last != inverse_index[l]
            if not np.any(ok):
                continue
            mats = frontier_mats[ok] @ letter_mats[j]
            kappas = np.arccosh(np.maximum(mats[:, 0, 0], 1.0))
            growth = kappas - frontier_kappa[ok]
            if growth.size:
                min_growth = min(min_growth, float(np.min(growth)))
                if min_growth < -1e-9:
                    raise NumericError(
                        "displacement decreased along a reduced word; the "
                        "system is too close to violating ping-pong for "
                        "exhaustive enumeration"
                    )
            keep = kappas <= kappa_max
            if not np.any(keep):
                continue
            idx = np.flatnonzero(ok)[keep]
            kept_mats = mats[keep]
            kept_kappas = kappas[keep]
            for row, i in enumerate(idx):
                word = frontier_words[i] + (l,)
                new_words.append(word)
                elements.append(GroupElement(
                    word=word,
                    map=MoebiusMap(kept_mats[row]),
                    kappa=float(kept_kappas[row]),
                ))
            new_mats.append(kept_mats)
            new_kappa.append(kept_kappas)
            new_last.append(np.full(int(np.sum(keep)), j))
            total += int(np.sum(keep))
            if total > budget:
                raise BudgetError(
                    f"enumeration exceeded the budget of {budget} elements",
                    budget=budget,
                )
        if not new_words:
            break
        frontier_mats = np.concatenate(new_mats, axis=0)
        frontier_words = new_words
        frontier_kappa = np.concatenate(new_kappa)
        frontier_last = np.concatenate(new_last)

    elements.sort(key=lambda e: (len(e.word), e.word))
    if include_identity:
        elements.insert(0, GroupElement(word=(), map=identity(d), kappa=0.0))
    return Enumeration(system=system, kappa_max=float(kappa_max),
                       elements=elements, min_growth=min_growth)


# -- annuli ---------------------------------------------------------------


@dataclass
class Annuli:
    """Stratification of an enumeration into displacement annuli.

    Annulus n holds the elements with displacement in
    (4 C n, (4 n + 2) C]; its reference scale is r_n = exp(-4 C n).
    """

    C: float
    n_max: int
    strata: list
    skipped: int

    def scale(self, n: int) -> float:
        return float(np.exp(-4.0 * self.C * n))

    def counts(self) -> list:
        return [len(s) for s in self.strata]


def stratify_annuli(enumeration, C=None, n_max=None) -> Annuli:
    """Group enumerated elements into annuli of width 2 C.

    Requires the enumeration to reach displacement (4 n_max + 2) C so the
    last annulus is complete; raises InsufficientDepthError otherwise.
    """
    if C is None:
        C = enumeration.system.C_Gamma
    if C is None or C <= 0:
        raise ConfigurationError("need a positive annulus constant C")
    if n_max is None:
        n_max = int(np.floor((enumeration.kappa_max / C - 2.0) / 4.0))
    if n_max < 1:
        raise InsufficientDepthError(
            "enumeration too shallow for even one annulus"
        )
    needed = (4.0 * n_max + 2.0) * C
    if enumeration.kappa_max < needed - 1e-12:
        raise InsufficientDepthError(
            f"annulus {n_max} needs displacement {needed:.3f} but the "
            f"enumeration stops at {enumeration.kappa_max:.3f}"
        )
    strata = [[] for _ in range(n_max + 1)]
    skipped = 0
    for e in enumeration.elements:
        placed = False
        for n in range(n_max + 1):
            if 4.0 * C * n < e.kappa <= (4.0 * n + 2.0) * C:
                strata[n].append(e)
                placed = True
                break
        if not placed:
            skipped += 1
    return Annuli(C=float(C), n_max=n_max, strata=strata, skipped=skipped)


# -- limit set and hull sampling -------------------------------------------


def base_boundary_point(system) -> np.ndarray:
    """A boundary point far from every cap, used as the orbit base point."""
    grid = boundary_grid(system.dimension, 8192)
    centers = np.array([system.caps[l].center for l in system.letters])
    score = np.max(grid @ centers.T, axis=1)
    return grid[int(np.argmin(score))]


def random_reduced_words(system, length, count, rng):
    """Sample reduced words of a fixed length uniformly."""
    letters = np.array(system.letters)
    k2 = len(letters)
    idx = np.empty((count, length), dtype=int)
    idx[:, 0] = rng.integers(k2, size=count)
    inverse_of = np.array([list(letters).index(-l) for l in letters])
    for j in range(1, length):
        step = rng.integers(k2 - 1, size=count)
        prev = idx[:, j - 1]
        cand = step
        cand = cand + (cand >= inverse_of[prev])
        idx[:, j] = cand
    return letters[idx]


def sample_limit_set(system, word_length, count=None, rng=None,
                     base_point=None) -> np.ndarray:
    """Boundary points gamma(xi0) over reduced words of a fixed length.

    With count=None every reduced word of the given length is used (their
    number grows like (2k-1)^length); otherwise count words are drawn at
    random and deduplicated.
    """
    if word_length < 1:
        raise DomainError("word_length must be at least 1")
    if base_point is None:
        base_point = base_boundary_point(system)
    xi0 = np.asarray(base_point, dtype=float)
    d = system.dimension
    letters = system.letters
    letter_mats = np.array([system.letter_map(l).matrix for l in letters])

    if count is None:
        words = _all_reduced_words(len(letters), word_length)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        raw = random_reduced_words(system, word_length, count, rng)
        words = np.unique(raw, axis=0)
        index_of = {l: i for i, l in enumerate(letters)}
        words = np.vectorize(index_of.get)(words)

    null = np.concatenate([[1.0], xi0])
    mats = np.broadcast_to(np.eye(d + 1), (len(words), d + 1, d + 1)).copy()
    for j in range(words.shape[1]):
        for li in range(len(letters)):
            rows = words[:, j] == li
            if np.any(rows):
                mats[rows] = mats[rows] @ letter_mats[li]
    lifted = mats @ null
    return lifted[:, 1:] / lifted[:, :1]


def _all_reduced_words(n_letters, length):
    """Indices of every reduced word of the given length."""
    words = np.arange(n_letters, dtype=int)[:, None]
    inverse_of = np.array([
        n_letters // 2 + i if i < n_letters // 2 else i - n_letters // 2
        for i in range(n_letters)
    ])
    for _ in range(length - 1):
        blocks = []
        for li in range(n_letters):
            ok = words[:, -1] != inverse_of[li]
            blocks.append(np.concatenate(
                [words[ok], np.full((int(np.sum(ok)), 1), li)], axis=1))
        words = np.concatenate(blocks, axis=0)
    return words


def sample_hull(system, n_points, rng=None, word_length=6, spread=None):
    """Sample points of the convex hull of the limit set.

    Draws pairs of limit-set points, connects them by geodesics and picks
    a point at a Gaussian arc-length offset from the midpoint.  Returns
    ball coordinates, shape (n_points, d).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if spread is None:
        spread = max(g.displacement() for g in system.generators)
    pool = sample_limit_set(system, word_length,
                            count=max(4 * n_points, 256), rng=rng)
    if len(pool) < 2:
        raise NumericError("not enough distinct limit points to span geodesics")
    out = np.empty((n_points, system.dimension))
    i = 0
    while i < n_points:
        a, b = rng.integers(len(pool), size=2)
        if np.allclose(pool[a], pool[b]):
            continue
        C0, Cdot = hb.geodesic_between_boundary(pool[a], pool[b])
        s = rng.normal(scale=0.5 * spread)
        point = hb.geodesic_points(C0, Cdot, np.array([s]))[0]
        out[i] = hb.unlift(point)
        i += 1
    return out


# -- box-counting dimension -------------------------------------------------


@dataclass
class BoxCountEstimate:
    dimension: float
    stderr: float
    scales: np.ndarray
    counts: np.ndarray


def box_counting_dimension(points, n_scales=12, min_count=32,
                           max_fill=0.25) -> BoxCountEstimate:
    """Least-squares box-counting dimension of a point cloud.

    Counts occupied cubes of dyadic side lengths and fits log N against
    log(1/eps) over the scales where the count is neither small (coarse
    scales carry a transient) nor saturated against the sample size.
    Sparse sets need fine scales before the asymptotic slope emerges, so
    pass a generous n_scales when the points resolve them.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    scales = []
    counts = []
    for k in range(n_scales):
        eps = 2.0 ** (-k)
        keys = np.floor(pts / eps)
        counts.append(len(np.unique(keys, axis=0)))
        scales.append(eps)
    scales = np.array(scales)
    counts = np.array(counts, dtype=float)
    usable = (counts >= min_count) & (counts <= max_fill * n)
    if np.sum(usable) < 3:
        raise NumericError(
            "too few usable scales for a box-counting fit; need more points"
        )
    x = np.log(1.0 / scales[usable])
    y = np.log(counts[usable])
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    dof = max(len(x) - 2, 1)
    resid = y - A @ coef
    var = float(resid @ resid) / dof
    cov = var * np.linalg.inv(A.T @ A)
    return BoxCountEstimate(
        dimension=float(coef[0]),
        stderr=float(np.sqrt(cov[0, 0])),
        scales=scales,
        counts=counts,
    )


# -- critical exponent ------------------------------------------------------


@dataclass
class CriticalExponentEstimate:
    delta: float
    stderr: float
    window_centers: np.ndarray
    window_logsums: np.ndarray
    n_elements: int

    @property
    def confidence_interval(self) -> tuple:
        return (self.delta - 2.0 * self.stderr, self.delta + 2.0 * self.stderr)


def critical_exponent(enumeration, weights=None, window=2.0,
                      drop_first=1.0) -> CriticalExponentEstimate:
    """Growth rate of weighted orbital sums over displacement windows.

    Sums the weights over windows (t - window, t] at unit-spaced t and
    fits log of the sums linearly in t.  With unit weights this estimates
    the exponent of orbital growth; weights exp(int F) give the weighted
    exponent, and adding a constant c to F shifts the estimate by c.
    """
    kappas = enumeration.kappas()
    if kappas.size == 0:
        raise InsufficientDepthError("empty enumeration")
    if weights is None:
        weights = np.ones_like(kappas)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != kappas.shape:
        raise ConfigurationError("one weight per enumerated element required")
    t_lo = float(np.min(kappas)) + drop_first + window
    t_hi = enumeration.kappa_max
    ts = np.arange(np.ceil(t_lo), np.floor(t_hi) + 0.5, 1.0)
    if ts.size < 4:
        raise InsufficientDepthError(
            "need at least four displacement windows; enumerate deeper"
        )
    sums = np.empty_like(ts)
    for i, t in enumerate(ts):
        mask = (kappas > t - window) & (kappas <= t)
        sums[i] = np.sum(weights[mask])
    if np.any(sums <= 0):
        raise NumericError("empty displacement window; widen the window")
    y = np.log(sums)
    A = np.vstack([ts, np.ones_like(ts)]).T
    coef, _, _, _ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(len(ts) - 2, 1)
    var = float(resid @ resid) / dof
    cov = var * np.linalg.inv(A.T @ A)
    return CriticalExponentEstimate(
        delta=float(coef[0]),
        stderr=float(np.sqrt(cov[0, 0])),
        window_centers=ts,
        window_logsums=y,
        n_elements=int(kappas.size),
    )


@dataclass
class GrowthGapReport:
    sup_potential: float
    delta: float
    delta_stderr: float
    margin: float
    passed: bool


def growth_gap_check(enumeration, potential=None, hull_points=None,
                     weights=None, slack=0.0, rng=None) -> GrowthGapReport:
    """Check that the potential stays below the weighted growth exponent.

    The supremum of the potential is taken over hull samples (or the
    provided points); the exponent comes from critical_exponent with the
    matching weights.  The check passes when
    sup F + slack < delta - 2 stderr.
    """
    system = enumeration.system
    if hull_points is None:
        hull_points = sample_hull(system, 2000, rng=rng)
    if potential is None:
        sup_f = 0.0
    else:
        sup_f = float(np.max(potential.evaluate(hull_points)))
    est = critical_exponent(enumeration, weights=weights)
    margin = est.delta - 2.0 * est.stderr - sup_f - slack
    return GrowthGapReport(
        sup_potential=sup_f,
        delta=est.delta,
        delta_stderr=est.stderr,
        margin=float(margin),
        passed=bool(margin > 0.0),
    )


# -- shadow covering and the annulus constant --------------------------------


def shadow_visual_radius(kappa, R) -> float:
    """Visual radius at the origin of the shadow of a ball of radius R
    centered at distance kappa."""
    return 0.5 * np.sinh(R) / np.sinh(np.maximum(kappa, R + 1e-12))


def covering_report(enumeration, C, n_values, samples_per_level=4000,
                    rng=None) -> dict:
    """Check that annulus shadows cover the limit set at each level.

    For each requested level n the shadows are caps around the attractors
    of the annulus elements with visual radius sinh(C)/(2 sinh kappa).
    Limit-set samples of a word length adapted to the level must all fall
    inside at least one shadow; the multiplicity statistics are returned.
    """
    if rng is None:
        rng = np.random.default_rng(7)
    system = enumeration.system
    # Mixed reduced words gain less displacement per letter than a single
    # generator does, so size the sampling depth by the observed minimum
    # growth increment rather than the letter displacements.
    growth_floor = max(min(enumeration.min_growth,
                           min(g.displacement() for g in system.generators)),
                       0.2)
    annuli = stratify_annuli(enumeration, C=C, n_max=max(n_values))
    report = {"C": float(C), "levels": {}}
    for n in n_values:
        stratum = annuli.strata[n]
        if not stratum:
            raise CoveringError(f"annulus {n} is empty at C={C:.3f}")
        depth = int(np.ceil(((4 * n + 2) * C) / growth_floor)) + 2
        samples = sample_limit_set(system, depth,
                                   count=samples_per_level, rng=rng)
        centers = np.array([e.map.attractor() for e in stratum])
        radii = np.array([shadow_visual_radius(e.kappa, C) for e in stratum])
        dist = visual_distance_origin(samples[:, None, :], centers[None, :, :])
        inside = dist <= radii[None, :]
        multiplicity = np.sum(inside, axis=1)
        if np.any(multiplicity == 0):
            missed = int(np.sum(multiplicity == 0))
            raise CoveringError(
                f"{missed} of {len(samples)} limit samples escape every "
                f"shadow at level {n} with C={C:.3f}"
            )
        report["levels"][n] = {
            "n_elements": len(stratum),
            "n_samples": int(len(samples)),
            "multiplicity_max": int(np.max(multiplicity)),
            "multiplicity_mean": float(np.mean(multiplicity)),
        }
    return report


def calibrate_annulus_constant(system, n_check=2, samples_per_level=4000,
                               budget=2_000_000, max_tries=12,
                               growth=1.15, rng=None) -> float:
    """Smallest annulus constant whose shadows cover the limit set.

    Starts slightly above half the largest generator displacement (so
    consecutive annuli cannot straddle a single letter) and grows the
    candidate geometrically until the covering check passes for levels
    1..n_check.  Sets system.C_Gamma and returns the value.
    """
    kappa_big = max(g.displacement() for g in system.generators)
    C = 0.55 * kappa_big
    last_error = None
    for _ in range(max_tries):
        try:
            enum = enumerate_elements(
                system, (4.0 * n_check + 2.0) * C + 1e-9, budget=budget)
            covering_report(enum, C, list(range(1, n_check + 1)),
                            samples_per_level=samples_per_level, rng=rng)
            system.C_Gamma = float(C)
            return float(C)
        except (CoveringError, InsufficientDepthError) as err:
            last_error = err
            C *= growth
    raise CoveringError(
        f"no annulus constant up to {C:.3f} passes the covering check "
        f"(last failure: {last_error})"
    )
