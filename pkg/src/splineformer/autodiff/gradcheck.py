"""Central-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, no_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4
    nonfinite: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.nonfinite and all(e < self.tol for e in self.errors.values())

    @property
    def worst(self):
        """Name of the parameter with the largest relative error."""
        if self.nonfinite:
            return self.nonfinite[0]
        return max(self.errors, key=self.errors.get) if self.errors else None

    def failing(self):
        return sorted(set(self.nonfinite) | {k for k, e in self.errors.items() if not e < self.tol})

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for name, e in self.errors.items():
            lines.append(f"  {name}: {e:.3e}")
        for name in self.nonfinite:
            lines.append(f"  {name}: non-finite")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing rounding
    noise by rounding noise.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(f, params, step=1e-6, tol=1e-4, max_entries=None, seed=0, floor=1e-6):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf Tensors that ``f`` reads. With
    ``max_entries`` set, that many entries per parameter are sampled at random
    instead of checking all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.requires_grad = True
    loss = f()
    report = GradCheckReport(tol=tol)
    if not np.all(np.isfinite(loss.data)):
        report.nonfinite.extend(params)
        return report
    grads = backward(loss)
    rng = np.random.default_rng(seed)
    with no_grad():
        for name, p in params.items():
            g = grads.get(p)
            g = np.zeros_like(p.data) if g is None else g
            if not np.all(np.isfinite(g)):
                report.nonfinite.append(name)
                continue
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            worst = 0.0
            for i in idx:
                old = flat[i]
                flat[i] = old + step
                fp = float(f().data)
                flat[i] = old - step
                fm = float(f().data)
                flat[i] = old
                num = (fp - fm) / (2.0 * step)
                if not np.isfinite(num):
                    report.nonfinite.append(name)
                    break
                worst = max(worst, float(relative_error(g.reshape(-1)[i], num, floor)))
            else:
                report.errors[name] = worst
    return report
