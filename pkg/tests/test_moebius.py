import numpy as np
import pytest

from ballwalk import hyperboloid as hb
from ballwalk import moebius as mb
from ballwalk.errors import DomainError


# ---------------------------------------------------------------------------
# oracles, independent of the Lorentz implementation


def translation_oracle(b, x):
    """Closed rational form of the hyperbolic translation on the ball."""
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    nb2 = np.dot(b, b)
    nx2 = np.dot(x, x)
    den = nb2 * nx2 + 2.0 * np.dot(x, b) + 1.0
    return ((1.0 - nb2) * x + (nx2 + 2.0 * np.dot(x, b) + 1.0) * b) / den


def busemann_limit_oracle(xi, x, t=40.0):
    """b_xi(x) as the distance limit d(x, xi_t) - d(0, xi_t)."""
    O = hb.lift(np.zeros_like(x))
    V = hb.ray_to_boundary(O, xi)
    P = hb.geodesic_points(O, V, np.array(t))
    return float(hb.dist(hb.lift(x), P) - t)


def random_ball(rng, d, rmax=0.95):
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    return v * rmax * rng.uniform() ** (1.0 / d)


def random_unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# translations


def test_translation_moves_origin_to_b():
    for b in [np.array([0.3, -0.2]), np.array([0.0, 0.9]), np.array([0.1, 0.2, -0.6])]:
        tau = mb.hyperbolic_translation(b)
        np.testing.assert_allclose(tau.apply(np.zeros_like(b)), b, atol=1e-12)


def test_translation_zero_is_identity():
    tau = mb.hyperbolic_translation(np.zeros(2))
    np.testing.assert_allclose(tau.matrix, np.eye(3), atol=0)


def test_translation_matches_rational_formula():
    rng = np.random.default_rng(7)
    for d in (2, 3):
        for _ in range(50):
            b = random_ball(rng, d, 0.97)
            x = random_ball(rng, d, 0.97)
            tau = mb.hyperbolic_translation(b)
            np.testing.assert_allclose(
                tau.apply(x), translation_oracle(b, x), atol=1e-11
            )


def test_translation_inverse_is_opposite_parameter():
    rng = np.random.default_rng(8)
    for _ in range(20):
        b = random_ball(rng, 2, 0.95)
        prod = mb.hyperbolic_translation(-b).compose(mb.hyperbolic_translation(b))
        np.testing.assert_allclose(prod.matrix, np.eye(3), atol=1e-9)


def test_translation_fixes_axis_endpoints():
    tau = mb.hyperbolic_translation(np.array([0.9, 0.0]))
    for xi in (np.array([1.0, 0.0]), np.array([-1.0, 0.0])):
        np.testing.assert_allclose(tau.apply_boundary(xi), xi, atol=1e-12)


def test_boundary_equator_image_value():
    # the image of a point orthogonal to the axis has axis coordinate
    # 2 beta / (1 + beta^2) >= 1 - epsilon^2
    beta = 0.9
    tau = mb.hyperbolic_translation(np.array([beta, 0.0]))
    img = tau.apply_boundary(np.array([0.0, 1.0]))
    expected = 2.0 * beta / (1.0 + beta * beta)
    np.testing.assert_allclose(img[0], expected, atol=1e-12)
    assert img[0] >= 1.0 - (1.0 - beta) ** 2


# ---------------------------------------------------------------------------
# group structure


def test_compose_apply_consistency():
    rng = np.random.default_rng(9)
    for _ in range(100):
        d = int(rng.integers(2, 4))
        g = mb.hyperbolic_translation(random_ball(rng, d, 0.9))
        h = mb.hyperbolic_translation(random_ball(rng, d, 0.9))
        x = random_ball(rng, d, 0.9)
        np.testing.assert_allclose(
            g.compose(h).apply(x), g.apply(h.apply(x)), atol=1e-9
        )


def test_inverse_roundtrip_word_length_five():
    rng = np.random.default_rng(10)
    x = random_ball(rng, 2, 0.8)
    for beta, tol in ((0.5, 1e-9), (0.9, 1e-5)):
        gens = [
            mb.hyperbolic_translation(np.array([beta, 0.0])),
            mb.hyperbolic_translation(np.array([0.0, beta])),
        ]
        word = mb.identity(2)
        for _ in range(5):
            word = word.compose(gens[int(rng.integers(2))])
        # point roundtrip passes through a deep excursion toward the
        # boundary; tolerances scale with the excursion depth through
        # the matrix norm (conditioning ~ |L|^2 eps)
        np.testing.assert_allclose(word.inverse().apply(word.apply(x)), x, atol=tol)
        mat_tol = max(1e-9, 100 * np.finfo(float).eps * word.operator_norm() ** 2)
        np.testing.assert_allclose(
            word.inverse().compose(word).matrix, np.eye(3), atol=mat_tol
        )


def test_rotation_map_validates():
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    rot = mb.rotation_map(R)
    assert rot.q_defect() < 1e-14
    with pytest.raises(DomainError):
        mb.rotation_map(np.array([[1.0, 0.0], [0.0, -1.0]]))  # det = -1
    with pytest.raises(DomainError):
        mb.rotation_map(np.array([[2.0, 0.0], [0.0, 0.5]]))


def test_from_lorentz_rejects_bad_matrices():
    with pytest.raises(DomainError):
        mb.from_lorentz(np.eye(3) * 1.5)
    M = np.eye(3)
    M[0, 0] = -1.0
    with pytest.raises(DomainError):
        mb.from_lorentz(M)
    good = mb.hyperbolic_translation(np.array([0.4, 0.1])).matrix
    assert mb.from_lorentz(good).q_defect() < 1e-12


def test_q_preservation_along_long_words():
    rng = np.random.default_rng(11)
    gens2 = [
        mb.hyperbolic_translation(np.array([0.9, 0.0])),
        mb.hyperbolic_translation(np.array([0.0, 0.9])),
    ]
    # reduced words only: with cancelling letters the roundoff keeps the
    # scale of the largest intermediate product and no bound in terms of
    # the final matrix can hold
    letters = [gens2[0], gens2[0].inverse(), gens2[1], gens2[1].inverse()]
    worst = 0.0
    for _ in range(200):
        g = mb.identity(2)
        prev = -1
        for _ in range(12):
            while True:
                k = int(rng.integers(4))
                if prev < 0 or k != prev ^ 1:
                    break
            g = g.compose(letters[k])
            prev = k
        worst = max(worst, g.q_defect_relative())
    assert worst <= 1e-12


def test_renormalized_reduces_defect():
    rng = np.random.default_rng(12)
    g = mb.identity(2)
    for _ in range(300):
        g = g.compose(mb.hyperbolic_translation(random_ball(rng, 2, 0.3)))
    g2 = g.renormalized()
    assert g2.q_defect_relative() <= g.q_defect_relative() * (1.0 + 1e-12)
    # renormalized columns are Minkowski-orthonormal to relative machine precision
    assert g2.q_defect_relative() < 1e-13


# ---------------------------------------------------------------------------
# distances


def test_distance_frozen_value():
    # d(0, 0.5 e1) = log 3 since e^{-d} = (1 - 1/2)/(1 + 1/2)
    d = mb.hyperbolic_distance(np.zeros(2), np.array([0.5, 0.0]))
    np.testing.assert_allclose(d, np.log(3.0), atol=1e-12)


def test_distance_symmetry_and_triangle():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        x = random_ball(rng, 2)
        y = random_ball(rng, 2)
        z = random_ball(rng, 2)
        dxy = mb.hyperbolic_distance(x, y)
        assert dxy == pytest.approx(mb.hyperbolic_distance(y, x), abs=1e-12)
        assert dxy <= mb.hyperbolic_distance(x, z) + mb.hyperbolic_distance(z, y) + 1e-12
    assert mb.hyperbolic_distance(np.zeros(2), np.zeros(2)) == 0.0


def test_distance_isometry_invariance():
    rng = np.random.default_rng(14)
    for _ in range(50):
        x, y = random_ball(rng, 2), random_ball(rng, 2)
        g = mb.hyperbolic_translation(random_ball(rng, 2, 0.95))
        np.testing.assert_allclose(
            mb.hyperbolic_distance(g.apply(x), g.apply(y)),
            mb.hyperbolic_distance(x, y),
            atol=1e-9,
        )


def test_displacement_and_r_value():
    b = np.array([0.9, 0.0])
    g = mb.hyperbolic_translation(b)
    assert g.displacement() == pytest.approx(np.log(19.0), abs=1e-12)
    assert g.r_value() == pytest.approx(0.1 / 1.9, abs=1e-14)
    assert g.epsilon() == pytest.approx(0.1, abs=1e-13)


def test_r_value_identity_on_enumerated_words():
    rng = np.random.default_rng(15)
    gens = [
        mb.hyperbolic_translation(np.array([0.9, 0.0])),
        mb.hyperbolic_translation(np.array([0.0, 0.9])),
    ]
    for _ in range(50):
        g = mb.identity(2)
        for _ in range(int(rng.integers(1, 7))):
            nxt = gens[int(rng.integers(2))]
            if rng.uniform() < 0.5:
                nxt = nxt.inverse()
            g = g.compose(nxt)
        go = g.apply(np.zeros(2))
        n = np.linalg.norm(go)
        if n == 0.0:
            continue
        np.testing.assert_allclose(
            g.r_value(), (1.0 - n) / (1.0 + n), rtol=1e-9
        )


# ---------------------------------------------------------------------------
# visual distance


def test_visual_distance_origin_basics():
    xi = np.array([1.0, 0.0])
    eta = np.array([-1.0, 0.0])
    assert mb.visual_distance_origin(xi, xi) == 0.0
    assert mb.visual_distance_origin(xi, eta) == pytest.approx(1.0, abs=1e-15)


def test_visual_distance_limit_matches_closed_form_at_origin():
    rng = np.random.default_rng(16)
    for _ in range(25):
        xi, eta = random_unit(rng, 2), random_unit(rng, 2)
        if np.allclose(xi, eta):
            continue
        lim = mb.visual_distance(np.zeros(2), xi, eta)
        assert lim == pytest.approx(mb.visual_distance_origin(xi, eta), abs=1e-6)


def test_visual_distance_conformality_band():
    rng = np.random.default_rng(17)
    for _ in range(50):
        xi, eta = random_unit(rng, 2), random_unit(rng, 2)
        if mb.visual_distance_origin(xi, eta) < 1e-3:
            continue
        x = random_ball(rng, 2, 0.8)
        dx = mb.visual_distance(x, xi, eta)
        do = mb.visual_distance_origin(xi, eta)
        dist = mb.hyperbolic_distance(x, np.zeros(2))
        ratio = dx / do
        assert np.exp(-dist) - 1e-8 <= ratio <= np.exp(dist) + 1e-8


def test_visual_distance_closed_form_via_busemann():
    # d_x(xi, eta) = d_o(xi, eta) * exp(-(b_xi(x) + b_eta(x)) / 2)
    rng = np.random.default_rng(18)
    for _ in range(25):
        xi, eta = random_unit(rng, 2), random_unit(rng, 2)
        if mb.visual_distance_origin(xi, eta) < 1e-3:
            continue
        x = random_ball(rng, 2, 0.85)
        closed = mb.visual_distance_origin(xi, eta) * np.exp(
            -0.5 * (mb.busemann_origin(xi, x) + mb.busemann_origin(eta, x))
        )
        assert mb.visual_distance(x, xi, eta) == pytest.approx(closed, abs=1e-6)


# ---------------------------------------------------------------------------
# busemann


def test_busemann_zero_at_origin():
    xi = np.array([0.6, 0.8])
    assert mb.busemann_origin(xi, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)


def test_busemann_matches_distance_limit():
    rng = np.random.default_rng(19)
    for _ in range(25):
        xi = random_unit(rng, 2)
        x = random_ball(rng, 2, 0.9)
        np.testing.assert_allclose(
            mb.busemann_origin(xi, x),
            busemann_limit_oracle(xi, x),
            atol=1e-8,
        )


def test_busemann_along_ray_is_minus_arclength():
    xi = np.array([1.0, 0.0])
    for t in (0.5, 1.0, 2.0):
        x = np.array([np.tanh(t / 2.0), 0.0])
        assert mb.busemann_origin(xi, x) == pytest.approx(-t, abs=1e-12)


# ---------------------------------------------------------------------------
# boundary action conformality


def test_boundary_visual_ratio_band():
    rng = np.random.default_rng(20)
    g = mb.hyperbolic_translation(np.array([0.9, 0.0]))
    kappa = g.displacement()
    for _ in range(100):
        xi, eta = random_unit(rng, 2), random_unit(rng, 2)
        do = mb.visual_distance_origin(xi, eta)
        if do < 1e-4:
            continue
        di = mb.visual_distance_origin(g.apply_boundary(xi), g.apply_boundary(eta))
        r = di / do
        assert np.exp(-2.0 * kappa) - 1e-12 <= r <= np.exp(2.0 * kappa) + 1e-12


# ---------------------------------------------------------------------------
# tangent transport


def test_apply_tangent_preserves_geodesics():
    rng = np.random.default_rng(21)
    for _ in range(20):
        x = random_ball(rng, 2, 0.7)
        u = random_unit(rng, 2)
        g = mb.hyperbolic_translation(random_ball(rng, 2, 0.9))
        xi_fwd = _ray_endpoint(x, u)
        gx, gu = g.apply_tangent(x, u)
        np.testing.assert_allclose(
            _ray_endpoint(gx, gu), g.apply_boundary(xi_fwd), atol=1e-9
        )


def _ray_endpoint(x, u):
    X = hb.lift(x)
    V = hb.tangent_lift(x, u)
    return hb.project_null(X + V)


# ---------------------------------------------------------------------------
# contraction profile


def test_profile_attractor_and_epsilon():
    g = mb.hyperbolic_translation(np.array([0.9, 0.0]))
    prof = mb.contraction_profile(g)
    np.testing.assert_allclose(prof.attractor, np.array([1.0, 0.0]), atol=1e-12)
    assert prof.epsilon == pytest.approx(0.1, abs=1e-12)
    np.testing.assert_allclose(prof.cap_center, np.array([-1.0, 0.0]), atol=1e-12)


def test_profile_contraction_holds_on_fresh_samples():
    rng = np.random.default_rng(22)
    gens = [
        mb.hyperbolic_translation(np.array([0.9, 0.0])),
        mb.hyperbolic_translation(np.array([0.0, 0.9])),
    ]
    g = mb.identity(2)
    for k in range(6):
        g = g.compose(gens[k % 2])
    prof = mb.contraction_profile(g, c=0.5)
    pts = rng.normal(size=(4000, 2))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    outside = mb.gap(pts, prof.cap_center) > prof.cap_gap_radius * 1.02
    img = g.apply_boundary(pts[outside])
    assert np.max(mb.gap(img, prof.attractor)) <= prof.contraction_bound * 1.05


def test_profile_rejects_near_identity():
    with pytest.raises(DomainError):
        mb.contraction_profile(mb.hyperbolic_translation(np.array([0.3, 0.0])))


def test_profile_bound_below_one():
    g = mb.hyperbolic_translation(np.array([0.85, 0.0]))
    prof = mb.contraction_profile(g, c=0.5)
    assert prof.contraction_bound < 1.0
    assert prof.cap_gap_radius <= mb.PROFILE_C_CEILING * prof.epsilon


# ---------------------------------------------------------------------------
# operator norm


def test_operator_norm_identity():
    assert mb.identity(2).operator_norm() == pytest.approx(np.sqrt(3.0))
    assert mb.identity(3).operator_norm() == pytest.approx(2.0)


def test_operator_norm_tracks_inverse_epsilon():
    # Frobenius norm grows like e^kappa ~ 2/epsilon; the product with
    # epsilon stays within a stable band
    vals = []
    for beta in (0.9, 0.95, 0.99, 0.995):
        g = mb.hyperbolic_translation(np.array([beta, 0.0]))
        vals.append(g.operator_norm() * g.epsilon())
    vals = np.array(vals)
    assert np.max(vals) / np.min(vals) < 1.5
    assert np.all(vals < 4.0)


# ---------------------------------------------------------------------------
# stereographic lift


def test_lift_roundtrip():
    rng = np.random.default_rng(23)
    pts = np.array([random_ball(rng, 2, 0.999) for _ in range(1000)])
    np.testing.assert_allclose(hb.unlift(hb.lift(pts)), pts, atol=1e-10)
    assert np.max(np.abs(hb.q_form(hb.lift(pts)) + 1.0)) < 1e-9


def test_rotation_and_translation_factorization():
    rng = np.random.default_rng(24)
    th = 0.6
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    g = mb.hyperbolic_translation(np.array([0.7, 0.2])).compose(mb.rotation_map(R))
    b = g.translation_part()
    Omega = g.rotation_part()
    np.testing.assert_allclose(b, np.array([0.7, 0.2]), atol=1e-12)
    np.testing.assert_allclose(Omega, R, atol=1e-10)
    # reassemble
    g2 = mb.hyperbolic_translation(b).compose(mb.rotation_map(Omega))
    np.testing.assert_allclose(g2.matrix, g.matrix, atol=1e-10)
