"""Composite training objective: token MSE, end-of-sequence BCE and curve consistency.

The numpy functions score finished :class:`TokenSequence` objects; :func:`batch_loss`
computes the same quantities on differentiable teacher-forced predictions.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bspline import DEFAULT_DEGREE, basis_matrix, sample_uniform, validate
from .errors import DomainError
from .model import assemble_knots, to_spline

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 1.0
    lambda_b: float = 0.1
    lambda_c: float = 1.0
    n_curve_samples: int = 64

    def __post_init__(self):
        lams = (self.lambda_a, self.lambda_b, self.lambda_c)
        if min(lams) < 0 or max(lams) <= 0:
            raise DomainError("loss weights must be non-negative with at least one positive")
        if self.n_curve_samples < 2:
            raise DomainError("n_curve_samples must be at least 2")


@dataclass
class LossReport:
    total: float
    mse_term: float
    bce_term: float
    curvature_term: float
    curvature_skipped: bool = False

    def as_row(self):
        return [self.total, self.mse_term, self.bce_term, self.curvature_term]


def eos_targets(length):
    s = np.zeros(length)
    s[-1] = 1.0
    return s


def mse_params(pred, target):
    """Mean over tokens of squared knot error plus squared point distance."""
    if len(pred) != len(target):
        raise DomainError(f"length mismatch: {len(pred)} predicted vs {len(target)} target tokens")
    d = np.sum((pred.points - target.points) ** 2, axis=1) + (pred.knots - target.knots) ** 2
    return float(d.mean())


def bce_eos(pred_probs, target_flags, eps=BCE_EPS):
    p = np.clip(np.asarray(pred_probs, dtype=np.float64), eps, 1.0 - eps)
    s = np.asarray(target_flags, dtype=np.float64)
    return float(np.mean(-s * np.log(p) - (1.0 - s) * np.log(1.0 - p)))


def curvature_consistency(pred, target, n=64):
    """Mean squared distance between the curves at ``n`` uniform parameters of their domains."""
    for name, curve in (("predicted", pred), ("target", target)):
        problem = validate(curve, bounds=None)
        if problem:
            raise DomainError(f"{name} curve invalid: {problem}")
    d = sample_uniform(pred, n) - sample_uniform(target, n)
    return float(np.mean(np.sum(d * d, axis=1)))


def composite_loss(pred, target, weights=LossWeights(), degree=DEFAULT_DEGREE):
    """Weighted sum of the three terms, averaged over a batch of sequence pairs.

    ``pred`` and ``target`` are TokenSequences or equal-length lists of them.
    The curve term is averaged over the pairs long enough to form a spline and
    flagged as skipped when none is.
    """
    if not isinstance(pred, (list, tuple)):
        pred, target = [pred], [target]
    if len(pred) != len(target):
        raise DomainError("batch size mismatch")
    mse = np.mean([mse_params(p, t) for p, t in zip(pred, target)])
    bce = np.mean([bce_eos(p.eos_probs, eos_targets(len(t))) for p, t in zip(pred, target)])
    curves = [curvature_consistency(to_spline(p, degree), to_spline(t, degree), weights.n_curve_samples)
              for p, t in zip(pred, target) if len(t) >= degree + 1]
    curv = float(np.mean(curves)) if curves else 0.0
    total = weights.lambda_a * mse + weights.lambda_b * bce + weights.lambda_c * curv
    return LossReport(float(total), float(mse), float(bce), curv, not curves)


def curve_basis(pred_knots, targets, n, degree=DEFAULT_DEGREE):
    """Constant collocation matrices ``(B, n, S)`` of the predicted knots, and target curve samples.

    Rows of sequences too short for a spline stay zero; returns
    ``(basis, curves, valid indices)``.
    """
    B, S = pred_knots.shape
    t = np.linspace(0.0, 1.0, n)
    basis = np.zeros((B, n, S))
    curves = np.zeros((B, n, 2))
    valid = []
    for b, target in enumerate(targets):
        L = len(target)
        if L < degree + 1:
            continue
        basis[b, :, :L] = basis_matrix(degree, t, assemble_knots(pred_knots[b, :L], degree))
        curves[b] = sample_uniform(to_spline(target, degree), n)
        valid.append(b)
    return basis, curves, valid


def batch_loss(prediction, targets, weights=LossWeights(), degree=DEFAULT_DEGREE, basis=None):
    """Differentiable composite loss for a teacher-forced :class:`~splineformer.model.Prediction`.

    The curve term evaluates the predicted control points under the basis of
    the predicted (clamped) knots, with the basis held constant, so its
    gradient reaches the points but not the knots. ``basis`` may pass in a
    precomputed :func:`curve_basis` result to pin that constant.
    Returns ``(total Tensor, LossReport)``.
    """
    B, S = prediction.knots.shape
    dtype = prediction.knots.dtype
    lengths = np.array([len(t) for t in targets])
    if not np.array_equal(lengths, prediction.lengths):
        raise DomainError("prediction and target lengths differ")
    tp = np.zeros((B, S, 2))
    tk = np.zeros((B, S))
    ts = np.zeros((B, S))
    mask = np.zeros((B, S))
    for b, t in enumerate(targets):
        n = len(t)
        tp[b, :n], tk[b, :n], ts[b, :n] = t.points, t.knots, eos_targets(n)
        mask[b, :n] = 1.0 / n
    mask = mask.astype(dtype)

    dp = prediction.points - tp.astype(dtype)
    dk = prediction.knots - tk.astype(dtype)
    sq = (dp * dp).sum(axis=-1) + dk * dk
    mse = (sq * mask).sum() * (1.0 / B)

    p = ad.clip(prediction.eos, BCE_EPS, 1.0 - BCE_EPS)
    s = ts.astype(dtype)
    bce = ((s * ad.log(p) + (1.0 - s) * ad.log(1.0 - p)) * mask).sum() * (-1.0 / B)

    if basis is None:
        basis = curve_basis(prediction.knots.data, targets, weights.n_curve_samples, degree)
    A, curves, valid = basis
    if valid:
        diff = ad.matmul(A.astype(dtype), prediction.points) - curves.astype(dtype)
        per = (diff * diff).sum(axis=-1).mean(axis=-1)
        w = np.zeros(B, dtype=dtype)
        w[valid] = 1.0 / len(valid)
        curv = (per * w).sum()
    else:
        curv = ad.Tensor(np.zeros((), dtype=dtype))

    total = mse * weights.lambda_a + bce * weights.lambda_b + curv * weights.lambda_c
    report = LossReport(float(total.data), float(mse.data), float(bce.data), float(curv.data), not valid)
    return total, report
