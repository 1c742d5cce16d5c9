"""Tests for Schottky systems, enumeration, annuli and growth estimates."""

import json

import numpy as np
import pytest

from ballwalk import group as gp
from ballwalk import hyperboloid as hb
from ballwalk import moebius as mb
from ballwalk.errors import (
    BudgetError,
    ConfigurationError,
    CoveringError,
    InsufficientDepthError,
    PingPongError,
)


# -- oracles ---------------------------------------------------------------

def cantor_points(depth, rng=None):
    """Middle-thirds Cantor set points via ternary digits in {0, 2}."""
    digits = np.stack(np.meshgrid(*([np.array([0, 2])] * depth),
                                  indexing="ij"), axis=-1).reshape(-1, depth)
    weights = 3.0 ** -np.arange(1, depth + 1)
    return digits @ weights


def interval_shift(s, beta):
    """Action of the boost on the coordinate along its own axis."""
    return ((1 + beta * beta) * s + 2 * beta) / (2 * beta * s + 1 + beta * beta)


def two_gen_system(beta=0.9, d=2, **kwargs):
    axes = np.eye(d)[:2]
    gens = [mb.hyperbolic_translation(beta * a) for a in axes]
    return gp.SchottkySystem(gens, **kwargs)


@pytest.fixture(scope="module")
def system():
    return two_gen_system()


@pytest.fixture(scope="module")
def enum_deep(system):
    return gp.enumerate_elements(system, 18.0)


# -- construction and ping-pong --------------------------------------------

def test_default_caps_are_admissible(system):
    s = system.cos_threshold
    assert np.sqrt(0.5) < s < 0.9
    for l in system.letters:
        cap = system.caps[l]
        assert cap.cos_threshold == s
        assert np.isclose(np.linalg.norm(cap.center), 1.0)


def test_cap_centers_are_orbit_directions(system):
    for l in system.letters:
        g = system.letter_map(l)
        img = g.apply(np.zeros(2))
        assert np.allclose(system.caps[l].center,
                           img / np.linalg.norm(img), atol=1e-12)


def test_pingpong_rejects_close_axes():
    phi = np.deg2rad(10.0)
    gens = [
        mb.hyperbolic_translation(0.9 * np.array([1.0, 0.0])),
        mb.hyperbolic_translation(0.9 * np.array([np.cos(phi), np.sin(phi)])),
    ]
    with pytest.raises(PingPongError):
        gp.SchottkySystem(gens)


def test_pingpong_rejects_weak_translation():
    with pytest.raises(PingPongError):
        two_gen_system(beta=0.3)


def test_boundary_action_matches_interval_formula(system):
    # Restricted to the axis coordinate, a boost acts on [-1, 1] by a
    # Moebius map of the interval; frozen value at the origin direction.
    g = system.letter_map(1)
    angles = np.linspace(0.2, np.pi - 0.2, 17)
    pts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    images = g.apply_boundary(pts)
    assert np.allclose(images[:, 0], interval_shift(pts[:, 0], 0.9),
                       atol=1e-12)
    north = g.apply_boundary(np.array([0.0, 1.0]))
    assert abs(north[0] - 0.994475138121547) < 1e-12


def test_cap_mapping_margin(system):
    # every letter maps the complement of its inverse's cap strictly
    # inside its own cap, sampled densely
    grid = mb.boundary_grid(2, 20000)
    for l in system.letters:
        outside = ~system.caps[-l].contains(grid)
        img = system.letter_map(l).apply_boundary(grid[outside])
        cosines = img @ system.caps[l].center
        assert np.min(cosines) > system.cos_threshold + 1e-3


def test_rotated_generator_system_is_valid():
    rot = np.deg2rad(25.0)
    R = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    gens = [
        mb.hyperbolic_translation(np.array([0.9, 0.0])).compose(
            mb.rotation_map(R)),
        mb.hyperbolic_translation(np.array([0.0, 0.9])),
    ]
    system = gp.SchottkySystem(gens)
    # inverse letter's cap sits at the pulled-back direction
    g = gens[0]
    back = g.inverse().apply(np.zeros(2))
    assert np.allclose(system.caps[-1].center,
                       back / np.linalg.norm(back), atol=1e-12)
    enum = gp.enumerate_elements(system, 10.0)
    assert enum.min_growth > 0.0


def test_three_generator_3d_system():
    gens = [mb.hyperbolic_translation(0.9 * np.eye(3)[i]) for i in range(3)]
    system = gp.SchottkySystem(gens)
    assert len(system.letters) == 6
    enum = gp.enumerate_elements(system, 9.0)
    lengths = {len(e.word) for e in enum.elements}
    assert 1 in lengths and 2 in lengths


# -- words -------------------------------------------------------------------

def test_reduce_word():
    assert gp.reduce_word((1, -1)) == ()
    assert gp.reduce_word((1, 2, -2, -1)) == ()
    assert gp.reduce_word((1, 2, -2, 1)) == (1, 1)
    assert gp.reduce_word((2, -1, 1, 2)) == (2, 2)
    with pytest.raises(ConfigurationError):
        gp.reduce_word((1, 0, 2))


def test_invert_word_gives_inverse_map(system):
    rng = np.random.default_rng(3)
    for _ in range(20):
        length = int(rng.integers(1, 6))
        word = tuple(gp.random_reduced_words(system, length, 1, rng)[0])
        m = system.word_map(word)
        minv = system.word_map(gp.invert_word(word))
        prod = m.compose(minv).matrix
        assert np.allclose(prod, np.eye(3),
                           atol=max(1e-9, 1e-12 * m.operator_norm() ** 2))


def test_word_map_is_multiplicative(system):
    rng = np.random.default_rng(4)
    for _ in range(30):
        w1 = tuple(gp.random_reduced_words(system, 3, 1, rng)[0])
        w2 = tuple(gp.random_reduced_words(system, 3, 1, rng)[0])
        joined = w1 + w2
        if gp.reduce_word(joined) != joined:
            continue
        lhs = system.word_map(joined).matrix
        rhs = (system.word_map(w1).compose(system.word_map(w2))).matrix
        assert np.allclose(lhs, rhs, atol=1e-8)


def test_element_rejects_unreduced_word(system):
    with pytest.raises(ConfigurationError):
        system.element((1, -1, 2))


def test_element_displacement_is_orbit_distance(system):
    e = system.element((1, 2, -1))
    img = e.map.apply(np.zeros(2))
    assert np.isclose(e.kappa, mb.hyperbolic_distance(np.zeros(2), img),
                      atol=1e-9)


def test_two_letter_displacement_frozen(system):
    # cosh kappa of a two-letter word along orthogonal axes is the square
    # of the single-letter cosh
    e = system.element((1, 2))
    assert abs(e.kappa - 5.201232927686145) < 1e-10


# -- enumeration --------------------------------------------------------------

def test_enumeration_counts_free_group(system):
    kappa1 = system.generators[0].displacement()
    L = 5
    enum = gp.enumerate_elements(system, L * kappa1 + 1e-6)
    for n in range(1, L + 1):
        assert len(enum.words_of_length(n)) == 4 * 3 ** (n - 1)


def test_enumeration_empty_below_first_displacement(system):
    kappa1 = system.generators[0].displacement()
    enum = gp.enumerate_elements(system, kappa1 - 0.1)
    assert len(enum) == 0


def test_enumeration_budget(system):
    with pytest.raises(BudgetError):
        gp.enumerate_elements(system, 15.0, budget=10)


def test_enumeration_displacement_grows(enum_deep):
    assert enum_deep.min_growth > 0.5


def test_enumeration_is_sorted_and_reduced(enum_deep):
    words = [e.word for e in enum_deep.elements]
    assert words == sorted(words, key=lambda w: (len(w), w))
    assert all(gp.reduce_word(w) == w for w in words)
    assert len(set(words)) == len(words)


def test_enumeration_kappa_cut_is_respected(enum_deep):
    kappas = enum_deep.kappas()
    assert np.all(kappas <= enum_deep.kappa_max + 1e-12)
    assert np.all(kappas > 0)


def test_identity_inclusion(system):
    enum = gp.enumerate_elements(system, 4.0, include_identity=True)
    assert enum.elements[0].word == ()
    assert enum.elements[0].kappa == 0.0


# -- annuli -------------------------------------------------------------------

def test_annuli_membership(enum_deep):
    C = 1.7
    ann = gp.stratify_annuli(enum_deep, C=C, n_max=2)
    for n, stratum in enumerate(ann.strata):
        for e in stratum:
            assert 4 * C * n < e.kappa <= (4 * n + 2) * C
    placed = sum(len(s) for s in ann.strata)
    assert placed + ann.skipped == len(enum_deep)
    assert ann.scale(1) == pytest.approx(np.exp(-4 * C))


def test_annuli_depth_requirement(enum_deep):
    with pytest.raises(InsufficientDepthError):
        gp.stratify_annuli(enum_deep, C=2.0, n_max=3)  # needs kappa 28


def test_annuli_infers_n_max(enum_deep):
    ann = gp.stratify_annuli(enum_deep, C=1.7)
    # (4 n + 2) * 1.7 <= 18  =>  n <= 2.14
    assert ann.n_max == 2


# -- limit set and hull -------------------------------------------------------

def test_base_point_avoids_caps(system):
    xi0 = gp.base_boundary_point(system)
    assert np.isclose(np.linalg.norm(xi0), 1.0)
    for l in system.letters:
        assert xi0 @ system.caps[l].center < system.cos_threshold - 0.05


def test_limit_samples_lie_in_caps(system):
    pts = gp.sample_limit_set(system, 6, count=500,
                              rng=np.random.default_rng(5))
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)
    centers = np.array([system.caps[l].center for l in system.letters])
    best = np.max(pts @ centers.T, axis=1)
    assert np.all(best >= system.cos_threshold)


def test_limit_samples_full_enumeration_count(system):
    pts = gp.sample_limit_set(system, 3)
    assert len(pts) == 4 * 3 ** 2
    # distinct words give distinct points
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, 1.0)
    assert np.min(d) > 1e-8


def test_hull_samples_inside_ball(system):
    pts = gp.sample_hull(system, 400, rng=np.random.default_rng(6))
    norms = np.linalg.norm(pts, axis=1)
    assert np.all(norms < 1.0)
    assert np.median(norms) > 0.5  # hull points concentrate away from 0


# -- box counting -------------------------------------------------------------

def test_box_counting_circle():
    rng = np.random.default_rng(11)
    angles = rng.uniform(0.0, 2 * np.pi, 40000)
    pts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    est = gp.box_counting_dimension(pts)
    assert abs(est.dimension - 1.0) < 0.05


def test_box_counting_cantor():
    pts = cantor_points(13)[:, None]
    est = gp.box_counting_dimension(pts)
    assert abs(est.dimension - np.log(2) / np.log(3)) < 0.05


def test_box_counting_square():
    rng = np.random.default_rng(12)
    pts = rng.uniform(size=(60000, 2))
    est = gp.box_counting_dimension(pts)
    assert abs(est.dimension - 2.0) < 0.08


# -- critical exponent --------------------------------------------------------

def test_critical_exponent_positive_and_stable(enum_deep):
    est = gp.critical_exponent(enum_deep)
    assert 0.05 < est.delta < 1.0
    assert est.stderr < 0.05
    est_wide = gp.critical_exponent(enum_deep, window=3.0)
    assert abs(est.delta - est_wide.delta) < 0.05


def test_critical_exponent_shift_property(enum_deep):
    # weights exp(c kappa) shift the exponent by c
    for c in (0.1, -0.2):
        w = np.exp(c * enum_deep.kappas())
        est0 = gp.critical_exponent(enum_deep)
        estc = gp.critical_exponent(enum_deep, weights=w)
        tol = 2 * (est0.stderr + estc.stderr) + 1e-6
        assert abs(estc.delta - est0.delta - c) < tol


def test_critical_exponent_matches_box_counting(system, enum_deep):
    # full enumeration at length 12 resolves every box down to 2^-21
    # (cylinder diameters are below e^-25), so the counts are exact
    est = gp.critical_exponent(enum_deep)
    pts = gp.sample_limit_set(system, 12)
    box = gp.box_counting_dimension(pts, n_scales=22)
    assert abs(est.delta - box.dimension) < 0.05


def test_growth_gap_with_zero_potential(enum_deep):
    report = gp.growth_gap_check(enum_deep, potential=None,
                                 rng=np.random.default_rng(14))
    assert report.passed
    assert report.sup_potential == 0.0
    assert report.margin > 0.0


# -- covering and annulus constant --------------------------------------------

def test_calibrated_constant_covers(system):
    C = gp.calibrate_annulus_constant(system, n_check=2,
                                      samples_per_level=2000,
                                      rng=np.random.default_rng(15))
    assert C > 0
    assert system.C_Gamma == C
    enum = gp.enumerate_elements(system, 10.0 * C + 1e-9)
    report = gp.covering_report(enum, C, [1, 2], samples_per_level=2000,
                                rng=np.random.default_rng(16))
    assert report["levels"][1]["multiplicity_max"] >= 1
    assert report["levels"][2]["n_elements"] > 0


def test_tiny_constant_fails_covering(system):
    # annulus windows narrower than a letter displacement cannot cover
    C = 0.3
    enum = gp.enumerate_elements(system, 10.0 * C + 1e-9)
    with pytest.raises((CoveringError, InsufficientDepthError)):
        gp.covering_report(enum, C, [1, 2], samples_per_level=500,
                           rng=np.random.default_rng(17))


# -- serialization ------------------------------------------------------------

def test_config_roundtrip(system):
    cfg = system.to_config()
    text = json.dumps(cfg)
    rebuilt = gp.SchottkySystem.from_config(json.loads(text))
    for g1, g2 in zip(system.generators, rebuilt.generators):
        assert np.allclose(g1.matrix, g2.matrix, atol=1e-12)
    assert rebuilt.cos_threshold == system.cos_threshold


def test_config_rejects_bad_entries():
    with pytest.raises(ConfigurationError):
        gp.SchottkySystem.from_config({
            "dimension": 2,
            "generators": [{"axis": [1.0, 0.0, 0.0], "norm": 0.9}],
        })
    with pytest.raises(ConfigurationError):
        gp.SchottkySystem.from_config({
            "dimension": 2,
            "generators": [{"axis": [1.0, 0.0], "norm": 1.2}],
        })
