"""B-spline geometry kernel.

Curves are planar, non-rational and (by default) cubic with clamped knot
vectors normalised to ``[0, 1]``. The valid parameter domain of a curve of
degree ``p`` with knots ``t_0..t_m`` is ``[t_p, t_{m-p}]``; the right end is
evaluated as a left limit so the domain is closed.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FitError

DEFAULT_DEGREE = 3
CONTROL_SPACING = 0.05  # arc length per control point when n_ctrl is not given
MAX_CONDITION = 1e12


@dataclass(eq=False)
class SplineCurve:
    degree: int
    control_points: np.ndarray
    knots: np.ndarray

    def __post_init__(self):
        self.degree = int(self.degree)
        self.control_points = np.asarray(self.control_points, dtype=np.float64).reshape(-1, 2)
        self.knots = np.asarray(self.knots, dtype=np.float64).ravel()

    @property
    def n_ctrl(self):
        return len(self.control_points)

    @property
    def domain(self):
        p, m = self.degree, len(self.knots) - 1
        return float(self.knots[p]), float(self.knots[m - p])

    def __call__(self, t):
        return eval_curve(self, t)

    def to_dict(self):
        return {
            "degree": self.degree,
            "control_points": self.control_points.tolist(),
            "knots": self.knots.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["degree"], d["control_points"], d["knots"])

    def to_json(self, **kw):
        # json writes floats with repr(), i.e. up to 17 significant digits.
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def copy(self):
        return SplineCurve(self.degree, self.control_points.copy(), self.knots.copy())


def clamped_knots(n_ctrl, degree=DEFAULT_DEGREE, interior=None):
    """Clamped knot vector on [0, 1]; uniform interior knots unless given."""
    n_int = n_ctrl - degree - 1
    if n_int < 0:
        raise DomainError(f"need at least {degree + 1} control points, got {n_ctrl}")
    if interior is None:
        interior = np.arange(1, n_int + 1) / (n_int + 1)
    interior = np.asarray(interior, dtype=np.float64)
    if len(interior) != n_int:
        raise DomainError(f"expected {n_int} interior knots, got {len(interior)}")
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def basis(i, p, t, knots):
    """Cox-de Boor value of basis function ``B_{i,p}`` at ``t``.

    Uses the 0/0 := 0 convention for repeated knots. At ``t = t_{m-p}`` the
    degree-0 indicator of the last non-empty span is switched on, so the
    function is the left limit there.
    """
    knots = np.asarray(knots, dtype=np.float64)
    m = len(knots) - 1
    if p < 0 or not 0 <= i <= m - p - 1:
        raise DomainError(f"basis index {i} out of range for degree {p} and {m + 1} knots")
    if not knots[0] <= t <= knots[m]:
        raise DomainError(f"parameter {t} outside [{knots[0]}, {knots[m]}]")
    right_end = m - p if m - p > p else m
    closing_span = None
    if t == knots[right_end]:
        closing_span = int(np.searchsorted(knots, t, side="left")) - 1

    def rec(i, q):
        if q == 0:
            if closing_span is not None:
                return 1.0 if i == closing_span else 0.0
            return 1.0 if knots[i] <= t < knots[i + 1] else 0.0
        value = 0.0
        den = knots[i + q] - knots[i]
        if den > 0.0:
            value += (t - knots[i]) / den * rec(i, q - 1)
        den = knots[i + q + 1] - knots[i + 1]
        if den > 0.0:
            value += (knots[i + q + 1] - t) / den * rec(i + 1, q - 1)
        return value

    return rec(i, p)


def find_spans(p, t, knots):
    """Knot span index ``k`` with ``t_k <= t < t_{k+1}`` for each parameter."""
    t = np.asarray(t, dtype=np.float64)
    m = len(knots) - 1
    lo, hi = knots[p], knots[m - p]
    if np.any(t < lo) or np.any(t > hi) or not np.all(np.isfinite(t)):
        raise DomainError(f"parameter outside valid range [{lo}, {hi}]")
    k = np.searchsorted(knots, t, side="right") - 1
    last = int(np.searchsorted(knots, hi, side="left")) - 1
    return np.minimum(k, last)


def basis_functions(p, t, knots):
    """Non-zero basis values at ``t``: returns ``(spans, N)`` with ``N`` of shape (len(t), p+1).

    ``N[j, r]`` is ``B_{k_j - p + r, p}(t_j)``.
    """
    knots = np.asarray(knots, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = find_spans(p, t, knots)
    n = len(t)
    N = np.zeros((n, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - knots[k + 1 - j]
        right[:, j] = knots[k + j] - t
        saved = np.zeros(n)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return k, N


def basis_matrix(p, t, knots):
    """Dense collocation matrix ``A[j, i] = B_{i,p}(t_j)``."""
    knots = np.asarray(knots, dtype=np.float64)
    n_ctrl = len(knots) - p - 1
    k, N = basis_functions(p, t, knots)
    A = np.zeros((len(k), n_ctrl))
    rows = np.arange(len(k))
    for r in range(p + 1):
        A[rows, k - p + r] = N[:, r]
    return A


def eval_curve(curve, t):
    """Curve point(s) ``sum_i P_i B_{i,p}(t)``; scalar ``t`` gives shape (2,)."""
    scalar = np.ndim(t) == 0
    k, N = basis_functions(curve.degree, t, curve.knots)
    P = curve.control_points
    p = curve.degree
    out = np.zeros((len(k), P.shape[1]))
    for r in range(p + 1):
        out += N[:, r, None] * P[k - p + r]
    return out[0] if scalar else out


def uniform_parameters(curve, n):
    if n < 2:
        raise DomainError(f"need n >= 2 samples, got {n}")
    lo, hi = curve.domain
    return lo + np.arange(n) / (n - 1) * (hi - lo)


def sample_uniform(curve, n):
    """Evaluate at ``n`` uniformly spaced parameters over the domain, endpoints included."""
    return eval_curve(curve, uniform_parameters(curve, n))


def derivative(curve):
    """Hodograph of a curve, as a spline of degree ``p - 1``."""
    p = curve.degree
    if p < 1:
        raise DomainError("derivative of a degree-0 curve")
    U, P = curve.knots, curve.control_points
    n = len(P)
    den = U[p + 1:p + n] - U[1:n]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(den > 0, p / np.where(den > 0, den, 1.0), 0.0)
    Q = scale[:, None] * (P[1:] - P[:-1])
    return SplineCurve(p - 1, Q, U[1:-1])


def polyline_length(points):
    points = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def check_polyline(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
        raise DomainError("polyline needs at least 2 points of dimension 2")
    if not np.all(np.isfinite(points)):
        raise DomainError("polyline has non-finite coordinates")
    if np.any(np.all(np.diff(points, axis=0) == 0.0, axis=1)):
        raise DomainError("polyline has identical consecutive points")
    return points


def chord_parameters(points):
    """Normalised cumulative chord length, from 0 to 1."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)])
    return u / u[-1]


def knots_from_parameters(u, n_ctrl, degree=DEFAULT_DEGREE):
    """Clamped knots whose interior values are quantiles of the data parameters.

    Interior knot ``j`` sits at fractional data index ``j (N-1)/(n-p)``, so
    equally spaced data parameters give exactly uniform knots.
    """
    n_int = n_ctrl - degree - 1
    idx = np.arange(1, n_int + 1) * (len(u) - 1) / (n_ctrl - degree)
    interior = np.interp(idx, np.arange(len(u)), u)
    return clamped_knots(n_ctrl, degree, interior)


def default_n_ctrl(length, degree=DEFAULT_DEGREE, spacing=CONTROL_SPACING):
    return max(degree + 1, int(round(length / spacing)))


def _solve_points(A, Q):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise FitError(f"rank-deficient design matrix (condition number {cond:.3g})", cond)
    P, *_ = np.linalg.lstsq(A, Q, rcond=None)
    return P


def _refine(curve, Q, u, iterations, tol):
    """Levenberg-Marquardt over control points and interior data parameters."""
    p, knots = curve.degree, curve.knots
    n, N = curve.n_ctrl, len(Q)
    rows = np.arange(1, N - 1)
    P = curve.control_points

    def residual(P, u):
        return basis_matrix(p, u, knots) @ P - Q

    r = residual(P, u)
    cost = float(np.sum(r * r))
    damping = 1e-3
    for _ in range(iterations):
        if cost == 0.0:
            break
        A = basis_matrix(p, u, knots)
        d1 = eval_curve(derivative(SplineCurve(p, P, knots)), u)
        J = np.zeros((2 * N, 2 * n + N - 2))
        J[0::2, 0:2 * n:2] = A
        J[1::2, 1:2 * n:2] = A
        J[2 * rows, 2 * n + rows - 1] = d1[rows, 0]
        J[2 * rows + 1, 2 * n + rows - 1] = d1[rows, 1]
        JtJ = J.T @ J
        g = J.T @ r.ravel()
        diag = np.diag(JtJ).copy()
        while True:
            delta = np.linalg.solve(JtJ + damping * np.diag(diag + 1e-12), -g)
            P_try = P + delta[:2 * n].reshape(n, 2)
            u_try = np.clip(u + np.concatenate([[0.0], delta[2 * n:], [0.0]]), 0.0, 1.0)
            r_try = residual(P_try, u_try)
            cost_try = float(np.sum(r_try * r_try))
            if cost_try < cost:
                damping = max(damping / 10.0, 1e-12)
                break
            damping *= 10.0
            if damping > 1e8:
                return SplineCurve(p, P, knots), u
        done = cost - cost_try <= tol * cost
        P, u, r, cost = P_try, u_try, r_try, cost_try
        if done:
            break
    return SplineCurve(p, P, knots), u


def fit_spline(poly, degree=DEFAULT_DEGREE, n_ctrl=None, *, iterations=20, tol=1e-10, full=False):
    """Least-squares fit of a clamped B-spline to a polyline.

    Data parameters start from chord length and the interior knots are the
    chord parameter quantiles. The linear fit at chord parameters is then
    refined by up to ``iterations`` joint Gauss-Newton steps over control
    points and interior data parameters (knots fixed, endpoints pinned to 0
    and 1); ``iterations=0`` gives the plain chord-length fit.

    With ``full=True`` returns ``(curve, rms_residual)``.
    """
    Q = check_polyline(poly)
    if n_ctrl is None:
        n_ctrl = default_n_ctrl(polyline_length(Q), degree)
    if not len(Q) >= n_ctrl >= degree + 1:
        raise DomainError(
            f"need len(poly) >= n_ctrl >= degree + 1, got {len(Q)}, {n_ctrl}, {degree}")
    u = chord_parameters(Q)
    knots = knots_from_parameters(u, n_ctrl, degree)
    curve = SplineCurve(degree, _solve_points(basis_matrix(degree, u, knots), Q), knots)
    if iterations > 0 and len(Q) > 2:
        curve, u = _refine(curve, Q, u, iterations, tol)
    if full:
        resid = eval_curve(curve, u) - Q
        return curve, float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
    return curve


def arc_length(curve, tol=1e-6, max_doublings=20):
    """Arc length by polyline refinement within each knot span.

    The chord-sum estimate is refined by doubling the sample count until two
    successive estimates agree within ``tol``; chord sums converge
    quadratically, so the returned estimate is within ``tol/3`` of the limit.
    """
    lo, hi = curve.domain
    if hi <= lo:
        return 0.0
    breaks = np.unique(curve.knots[(curve.knots >= lo) & (curve.knots <= hi)])
    n = 8
    prev = None
    for _ in range(max_doublings):
        s = np.linspace(0.0, 1.0, n + 1)
        ts = (breaks[:-1, None] + s[None, :] * np.diff(breaks)[:, None]).ravel()
        pts = eval_curve(curve, ts).reshape(len(breaks) - 1, n + 1, -1)
        length = float(np.sum(np.linalg.norm(np.diff(pts, axis=1), axis=2)))
        if prev is not None and abs(length - prev) <= tol:
            return length
        prev = length
        n *= 2
    return prev


def validate(curve, bounds=(0.0, 1.0)):
    """Return ``None`` for a well-formed clamped curve, else the first violation."""
    p = curve.degree
    P = np.asarray(curve.control_points)
    U = np.asarray(curve.knots)
    if p < 1:
        return "degree"
    if P.ndim != 2 or P.shape[1] != 2 or len(P) < p + 1:
        return "insufficient control points"
    if len(U) != len(P) + p + 1:
        return "knot count"
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(P))):
        return "non-finite values"
    if np.any(np.diff(U) < 0):
        return "non-monotone knots"
    if U[0] < 0.0 or U[-1] > 1.0:
        return "knots outside [0, 1]"
    if np.any(U[:p + 1] != U[0]) or np.any(U[-p - 1:] != U[-1]) or U[0] == U[-1]:
        return "knots not clamped"
    if bounds is not None and (np.any(P < bounds[0]) or np.any(P > bounds[1])):
        return "control points out of bounds"
    return None


def resample_polyline(points, n=None, spacing=None):
    """Points at equal arc-length spacing along a polyline, endpoints kept."""
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if n is None:
        n = max(2, int(math.ceil(s[-1] / spacing)) + 1)
    target = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(target, s, points[:, 0]), np.interp(target, s, points[:, 1])])


def sample_equal_chord(curve, n, dense=4096, iterations=8):
    """``n`` curve points whose consecutive chords all have the same length.

    Such a sample has exactly uniform chord-length parameters, so refitting
    it with :func:`fit_spline` reproduces uniform interior knots.
    """
    if n < 2:
        raise DomainError(f"need n >= 2 samples, got {n}")
    lo, hi = curve.domain
    ts = np.linspace(lo, hi, dense + 1)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(eval_curve(curve, ts), axis=0), axis=1))])
    target = np.linspace(0.0, s[-1], n)
    u = np.interp(target, s, ts)
    for _ in range(iterations):
        pts = eval_curve(curve, u)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        err = np.linspace(0.0, cum[-1], n) - cum
        if np.max(np.abs(err)) < 1e-15:
            break
        target[1:-1] = np.clip(target[1:-1] + err[1:-1], 0.0, s[-1])
        u = np.interp(target, s, ts)
    return eval_curve(curve, u)
