import json
import math

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from splineformer import bspline as bs
from splineformer.bspline import SplineCurve
from splineformer.errors import DomainError, FitError

from oracles import bernstein, de_boor, de_casteljau, random_clamped_curve


def wavy_polyline(rng, n_pts=300):
    s = np.linspace(0.0, 1.0, n_pts)
    amp, freq, phase = rng.uniform(0.05, 0.2), rng.uniform(2, 8), rng.uniform(0, 6)
    pts = np.column_stack([0.1 + 0.8 * s, 0.5 + amp * np.sin(freq * s + phase)])
    return bs.resample_polyline(pts, n=n_pts)


def known_spline(rng, n_ctrl):
    """A cubic with uniform clamped knots whose parameterisation follows its chord length."""
    fitted = bs.fit_spline(wavy_polyline(rng), 3, n_ctrl, iterations=0)
    return SplineCurve(3, fitted.control_points, bs.clamped_knots(n_ctrl, 3))


class TestBasis:
    def test_degree_zero_indicator(self):
        assert bs.basis(0, 0, 0.5, [0, 1]) == 1.0

    def test_cubic_bezier_matches_bernstein(self):
        knots = [0, 0, 0, 0, 1, 1, 1, 1]
        got = [bs.basis(i, 3, 0.5, knots) for i in range(4)]
        want = [bernstein(i, 3, 0.5) for i in range(4)]
        np.testing.assert_allclose(got, want, atol=1e-15)
        np.testing.assert_allclose(got, [0.125, 0.375, 0.375, 0.125], atol=1e-15)

    def test_linear_hat(self):
        assert bs.basis(0, 1, 0.25, [0, 0.5, 1]) == pytest.approx(0.5, abs=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(DomainError):
            bs.basis(4, 3, 0.5, [0, 0, 0, 0, 1, 1, 1, 1])

    def test_right_end_is_left_limit(self):
        knots = [0, 0, 0, 0, 0.5, 1, 1, 1, 1]
        vals = [bs.basis(i, 3, 1.0, knots) for i in range(5)]
        assert vals == pytest.approx([0, 0, 0, 0, 1])

    def test_recursive_matches_vectorised(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p, _, knots = random_clamped_curve(rng)
            t = rng.uniform(0, 1, 5)
            A = bs.basis_matrix(p, t, knots)
            for j, tj in enumerate(t):
                rec = [bs.basis(i, p, tj, knots) for i in range(A.shape[1])]
                np.testing.assert_allclose(A[j], rec, atol=1e-13)

    def test_repeated_interior_knots(self):
        knots = [0, 0, 0, 0.5, 0.5, 1, 1, 1]
        A = bs.basis_matrix(2, np.linspace(0, 1, 11), knots)
        assert np.all(A >= 0)
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-14)


class TestPartitionAndSupport:
    def test_partition_of_unity_and_nonnegativity(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            p, _, knots = random_clamped_curve(rng)
            t = rng.uniform(knots[p], knots[-p - 1], 1000)
            t = t[t < knots[-p - 1]]
            A = bs.basis_matrix(p, t, knots)
            assert np.all(A >= 0.0)
            worst = max(worst, np.max(np.abs(A.sum(axis=1) - 1.0)))
        assert worst < 1e-12

    def test_local_support(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p, P, knots = random_clamped_curve(rng)
            curve = SplineCurve(p, P, knots)
            i = int(rng.integers(0, len(P)))
            moved = curve.copy()
            moved.control_points[i] += rng.normal(size=2)
            t = np.linspace(0, 1, 501)
            outside = (t < knots[i]) | (t >= knots[i + p + 1])
            # t = 1 evaluates as a left limit, i.e. inside the last span
            outside &= t < 1.0
            diff = np.abs(bs.eval_curve(moved, t) - bs.eval_curve(curve, t))
            assert np.all(diff[outside] < 1e-12)


class TestEvalCurve:
    def test_constant_curve(self):
        curve = SplineCurve(3, np.tile([0.3, 0.7], (6, 1)), bs.clamped_knots(6))
        np.testing.assert_allclose(bs.eval_curve(curve, np.linspace(0, 1, 17)), [[0.3, 0.7]] * 17,
                                   atol=1e-15)

    def test_cubic_bezier_against_de_casteljau(self):
        P = [(0, 0), (0, 1), (1, 1), (1, 0)]
        curve = SplineCurve(3, P, [0, 0, 0, 0, 1, 1, 1, 1])
        np.testing.assert_allclose(bs.eval_curve(curve, 0.5), de_casteljau(P, 0.5), atol=1e-15)
        np.testing.assert_allclose(bs.eval_curve(curve, 0.5), [0.5, 0.75], atol=1e-15)

    def test_clamped_endpoints(self):
        rng = np.random.default_rng(2)
        p, P, knots = random_clamped_curve(rng, p=3, n=9)
        curve = SplineCurve(p, P, knots)
        np.testing.assert_allclose(bs.eval_curve(curve, 0.0), P[0], atol=1e-15)
        np.testing.assert_allclose(bs.eval_curve(curve, 1.0), P[-1], atol=1e-15)

    def test_de_boor_oracle(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            p, P, knots = random_clamped_curve(rng)
            curve = SplineCurve(p, P, knots)
            t = np.append(rng.uniform(0, 1, 4), [0.0, 1.0])
            got = bs.eval_curve(curve, t)
            want = np.array([de_boor(tj, knots, P, p) for tj in t])
            worst = max(worst, np.max(np.abs(got - want)))
        assert worst < 1e-10

    def test_outside_domain(self):
        curve = SplineCurve(3, np.zeros((4, 2)), bs.clamped_knots(4))
        with pytest.raises(DomainError):
            bs.eval_curve(curve, 1.0001)

    def test_convex_hull(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p, P, knots = random_clamped_curve(rng, n=int(rng.integers(5, 13)))
            hull = ConvexHull(P)
            pts = bs.sample_uniform(SplineCurve(p, P, knots), 200)
            inside = pts @ hull.equations[:, :2].T + hull.equations[:, 2]
            assert np.max(inside) < 1e-9


class TestSampleUniform:
    def test_two_samples_are_endpoints(self):
        rng = np.random.default_rng(6)
        p, P, knots = random_clamped_curve(rng, p=3, n=7)
        pts = bs.sample_uniform(SplineCurve(p, P, knots), 2)
        np.testing.assert_allclose(pts, [P[0], P[-1]], atol=1e-15)

    def test_three_parameters(self):
        curve = SplineCurve(3, np.zeros((5, 2)), bs.clamped_knots(5))
        np.testing.assert_array_equal(bs.uniform_parameters(curve, 3), [0.0, 0.5, 1.0])

    def test_constant_curve(self):
        curve = SplineCurve(3, np.tile([0.2, 0.4], (5, 1)), bs.clamped_knots(5))
        np.testing.assert_allclose(bs.sample_uniform(curve, 9), [[0.2, 0.4]] * 9, atol=1e-15)

    def test_needs_two(self):
        with pytest.raises(DomainError):
            bs.sample_uniform(SplineCurve(3, np.zeros((4, 2)), bs.clamped_knots(4)), 1)


class TestFitSpline:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            n_ctrl = int(rng.integers(4, 20))
            source = known_spline(rng, n_ctrl)
            poly = bs.sample_equal_chord(source, 200)
            refit = bs.fit_spline(poly, 3, n_ctrl)
            t = np.linspace(0, 1, 2001)
            dev = np.max(np.linalg.norm(bs.eval_curve(refit, t) - bs.eval_curve(source, t), axis=1))
            assert dev < 1e-6

    def test_collinear(self):
        t = np.linspace(0, 1, 50) ** 1.3
        poly = np.column_stack([0.1 + 0.7 * t, 0.2 + 0.35 * t])
        curve = bs.fit_spline(poly, 3, 7)
        d = curve.control_points - poly[0]
        direction = (poly[-1] - poly[0]) / np.linalg.norm(poly[-1] - poly[0])
        off_line = np.abs(d[:, 0] * direction[1] - d[:, 1] * direction[0])
        assert np.max(off_line) < 1e-9

    def test_noise_residual(self):
        eps = 0.01
        s = np.linspace(0, 1, 200)
        smooth = np.column_stack([0.1 + 0.8 * s, 0.5 + 0.2 * np.sin(3 * s)])
        for seed in range(100):
            rng = np.random.default_rng(seed)
            noisy = smooth + rng.uniform(-eps, eps, smooth.shape)
            _, rms = bs.fit_spline(noisy, 3, 10, full=True)
            assert rms <= 2 * eps

    def test_default_control_count(self):
        poly = np.column_stack([np.linspace(0.1, 0.9, 100), np.full(100, 0.5)])
        curve = bs.fit_spline(poly)
        assert curve.n_ctrl == round(0.8 / 0.05)

    def test_rank_deficient(self):
        # three interior points 1e-8 apart collapse three parameters onto one
        poly = np.array([[0, 0], [1, 0], [1 + 1e-8, 0], [1 + 2e-8, 0], [1 + 3e-8, 0], [2, 0]])
        with pytest.raises(FitError) as err:
            bs.fit_spline(poly, 3, 6)
        assert err.value.condition > bs.MAX_CONDITION
        assert "condition number" in str(err.value)

    def test_preconditions(self):
        poly = np.column_stack([np.linspace(0, 1, 5), np.zeros(5)])
        with pytest.raises(DomainError):
            bs.fit_spline(poly, 3, 6)
        with pytest.raises(DomainError):
            bs.fit_spline(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]), 1, 2)


class TestArcLength:
    def test_straight_segment(self):
        curve = SplineCurve(3, np.column_stack([np.linspace(0, 1, 6), np.zeros(6)]),
                            bs.clamped_knots(6))
        assert bs.arc_length(curve, 1e-8) == pytest.approx(1.0, abs=1e-8)

    def test_constant(self):
        curve = SplineCurve(3, np.full((5, 2), 0.5), bs.clamped_knots(5))
        assert bs.arc_length(curve, 1e-8) == 0.0

    def test_half_circle(self):
        theta = np.linspace(0, math.pi, 400)
        poly = np.column_stack([0.5 + 0.5 * np.cos(theta), 0.5 * np.sin(theta)])
        curve = bs.fit_spline(poly, 3, 10)
        dense = bs.eval_curve(curve, np.linspace(0, 1, 200001))
        oracle = bs.polyline_length(dense)
        got = bs.arc_length(curve, 1e-7)
        assert got == pytest.approx(oracle, abs=1e-6)
        assert got == pytest.approx(math.pi / 2, abs=0.01)


class TestValidate:
    def test_ok(self):
        curve = SplineCurve(3, np.full((6, 2), 0.5), bs.clamped_knots(6))
        assert bs.validate(curve) is None

    def test_non_monotone(self):
        curve = SplineCurve(3, np.full((6, 2), 0.5), [0, 0, 0, 0, 0.7, 0.3, 1, 1, 1, 1])
        assert bs.validate(curve) == "non-monotone knots"

    def test_knot_count(self):
        curve = SplineCurve(3, np.full((6, 2), 0.5), bs.clamped_knots(7))
        assert bs.validate(curve) == "knot count"

    def test_unclamped(self):
        curve = SplineCurve(3, np.full((4, 2), 0.5), [0, 0, 0, 0.1, 0.9, 1, 1, 1])
        assert bs.validate(curve) == "knots not clamped"

    def test_bounds(self):
        curve = SplineCurve(3, np.full((4, 2), 1.5), bs.clamped_knots(4))
        assert bs.validate(curve) == "control points out of bounds"


def test_json_round_trip():
    rng = np.random.default_rng(8)
    p, P, knots = random_clamped_curve(rng)
    curve = SplineCurve(p, P, knots)
    text = curve.to_json()
    assert set(json.loads(text)) == {"degree", "control_points", "knots"}
    back = SplineCurve.from_json(text)
    np.testing.assert_array_equal(back.control_points, curve.control_points)
    np.testing.assert_array_equal(back.knots, curve.knots)
    assert back.degree == p


def test_equal_chord_sample():
    rng = np.random.default_rng(9)
    curve = known_spline(rng, 9)
    pts = bs.sample_equal_chord(curve, 120)
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.ptp(chords) < 1e-13
