"""Teacher-forced training loop, evaluation helpers and curve-distance metrics."""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bspline import fit_spline, sample_uniform
from .errors import DomainError, NumericError, ShapeError
from .loss import LossWeights, batch_loss, curve_basis
from .model import SplineFormer, TokenSequence, to_spline
from .transformer import PRESETS, ModelConfig

LOG_COLUMNS = ("step", "total", "mse", "bce", "curvature", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-5
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise DomainError("epochs must be >= 0, batch size and checkpoint interval >= 1")
        if not self.lr > 0:
            raise DomainError("learning rate must be positive")

    def to_dict(self):
        return asdict(self)


def targets_from_curves(curves, max_len):
    seqs = [TokenSequence.from_curve(c) for c in curves]
    longest = max(len(s) for s in seqs)
    if longest > max_len:
        raise ShapeError(f"a target has {longest} tokens but max_seq_len is {max_len}")
    return seqs


class Trainer:
    """Adam on the composite loss with per-step CSV logging and checkpointing.

    Dropout masks are keyed by ``(seed, step)``, batch order by ``(seed, epoch)``,
    so a run is a pure function of the data, the initial weights and the config.
    """

    def __init__(self, model, config=TrainConfig(), log_path=None, checkpoint_dir=None):
        self.model = model
        self.config = config
        for p in model.params.values():
            p.requires_grad = True
        self.opt = ad.Adam(model.params, lr=config.lr)
        self.step = 0
        self.history = []
        self.best_val = math.inf
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def train_step(self, images, targets):
        pred = self.model.teacher_forced_forward(images, targets, train=True,
                                                 seed=(self.config.seed << 20) + self.step)
        total, report = batch_loss(pred, targets, self.config.weights)
        if not np.isfinite(report.total):
            raise NumericError(f"non-finite loss at step {self.step}")
        grads = ad.backward(total)
        self.opt.step({k: grads[p] for k, p in self.model.params.items() if p in grads})
        self.step += 1
        self.history.append(report)
        if self.log_path:
            with open(self.log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([self.step, *(repr(float(v)) for v in report.as_row()), repr(self.config.lr)])
        return report

    def run_epoch(self, images, targets, epoch):
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(images))
        reports = []
        for start in range(0, len(order), self.config.batch_size):
            idx = order[start:start + self.config.batch_size]
            reports.append(self.train_step(images[idx], [targets[i] for i in idx]))
        return reports

    def fit(self, images, targets, epochs=None, val=None, on_epoch=None):
        """Train for ``epochs`` (default from the config); returns the per-step reports.

        ``val`` is an optional ``(images, targets)`` pair scored after every
        epoch; the best-scoring weights are saved as ``best.ckpt``. Periodic
        checkpoints go to ``last.ckpt``. A non-finite loss stops training with
        the previous checkpoint untouched and re-raises.
        """
        epochs = self.config.epochs if epochs is None else epochs
        for epoch in range(epochs):
            self.run_epoch(images, targets, epoch)
            val_loss = None
            if val is not None:
                val_loss = evaluate_loss(self.model, *val, self.config.weights)
                if val_loss < self.best_val:
                    self.best_val = val_loss
                    self.save("best.ckpt", epoch=epoch + 1, val_loss=val_loss)
            if (epoch + 1) % self.config.checkpoint_every == 0 or epoch + 1 == epochs:
                self.save("last.ckpt", epoch=epoch + 1)
            if on_epoch is not None:
                on_epoch(epoch, self.history[-1], val_loss)
        return self.history

    def save(self, name, **header):
        if self.checkpoint_dir:
            self.model.save(self.checkpoint_dir / name, step=self.step, train=self.config.to_dict(), **header)


def evaluate_loss(model, images, targets, weights=LossWeights(), batch_size=64):
    """Eval-mode teacher-forced composite loss, averaged over samples."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = targets[start:start + batch_size]
            pred = model.teacher_forced_forward(images[start:start + batch_size], chunk)
            _, report = batch_loss(pred, chunk, weights)
            total += report.total * len(chunk)
    return total / len(images)


def generate_batched(model, images, batch_size=64, **kwargs):
    out = []
    for start in range(0, len(images), batch_size):
        out += model.generate(images[start:start + batch_size], **kwargs)
    return out


def curve_distance(seq, truth, n=64):
    """Mean distance between ``n`` uniformly sampled points of the predicted and true curves.

    Sequences too short for a spline are scored as ``inf``.
    """
    if len(seq) < truth.degree + 1:
        return math.inf
    d = sample_uniform(to_spline(seq, truth.degree), n) - sample_uniform(truth, n)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def tip_error(seq, truth):
    return float(np.linalg.norm(seq.points[0] - truth.control_points[0]))


def _random_target(rng, n):
    t = np.linspace(0.0, 1.0, 40)
    a, b = rng.uniform(0.2, 0.4, 2)
    poly = np.column_stack([a + 0.5 * t, b + 0.2 * np.sin(3 * t + rng.uniform())])
    return TokenSequence.from_curve(fit_spline(poly, n_ctrl=n))


def model_grad_check(seed=0, tol=1e-4, max_entries=None, dropout_rate=0.1, lengths=(4, 6), step=1e-5):
    """Central-difference check of the composite loss gradient for every model weight.

    Uses the tiny preset (16x16 images, ``max_seq_len`` 6) in float64 with
    dropout active under a fixed mask. The curve term's collocation basis is
    computed once and pinned, since it is a constant of the backward pass.
    The default step sits near the float64 optimum for central differences
    (about eps ** (1/3)); at 1e-6 rounding in the loss dominates for the
    smallest tip-predictor gradients. Returns a :class:`~splineformer.autodiff.GradCheckReport`.
    """
    config = ModelConfig(**{**PRESETS["tiny"].to_dict(), "dropout_rate": dropout_rate})
    rng = np.random.default_rng([seed, 17])
    model = SplineFormer(config, seed=seed, dtype=np.float64)
    images = rng.random((len(lengths), config.image_size, config.image_size))
    targets = [_random_target(rng, n) for n in lengths]
    knots = model.teacher_forced_forward(images, targets, train=True, seed=seed).knots.data
    basis = curve_basis(knots, targets, LossWeights().n_curve_samples)

    def loss():
        pred = model.teacher_forced_forward(images, targets, train=True, seed=seed)
        return batch_loss(pred, targets, basis=basis)[0]
    return ad.grad_check(loss, model.params, step=step, tol=tol, max_entries=max_entries, seed=seed)


def overfit(model, images, curves, steps=2000, lr=1e-4, seed=0, log_path=None):
    """Full-batch training on a handful of samples; returns loss ratio and per-sample tip errors.

    The ratio is the first step's loss over the lowest loss seen in ``steps``.
    Tip errors are in image-width units, from eval-mode generation afterwards.
    """
    targets = targets_from_curves(curves, model.config.max_seq_len)
    trainer = Trainer(model, TrainConfig(epochs=steps, lr=lr, batch_size=len(images), seed=seed),
                      log_path=log_path)
    for step in range(steps):
        trainer.train_step(images, targets)
    losses = np.array([r.total for r in trainer.history])
    seqs = model.generate(images)
    return {
        "initial_loss": float(losses[0]),
        "min_loss": float(losses.min()),
        "final_loss": float(losses[-1]),
        "ratio": float(losses[0] / losses.min()),
        "tip_errors": [tip_error(s, c) for s, c in zip(seqs, curves)],
        "lengths": [len(s) for s in seqs],
        "target_lengths": [len(t) for t in targets],
    }
